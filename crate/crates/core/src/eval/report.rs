use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{ClassificationMetrics, RegressionMetrics};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metrics {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

impl Metrics {
    /// `(name, value)` pairs in display order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        match self {
            Metrics::Classification(m) => vec![
                ("macro_f1", m.macro_f1),
                ("accuracy", m.accuracy),
                ("macro_precision", m.macro_precision),
                ("macro_recall", m.macro_recall),
                ("auprc", m.auprc),
                ("auroc", m.auroc),
            ],
            Metrics::Regression(m) => vec![("mae", m.mae), ("mse", m.mse), ("mape", m.mape)],
        }
    }
}

/// A named set of metrics with free-form context (task, grid choice, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub metrics: Metrics,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, metrics: Metrics) -> Self {
        Self { name: name.into(), metrics, details: serde_json::Value::Null }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DataNotFound(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Renders reports side by side: one row per metric, one column per report.
/// Metrics missing from a report are shown as `-`.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut rows: Vec<&'static str> = Vec::new();
    for r in reports {
        for (k, _) in r.metrics.entries() {
            if !rows.contains(&k) {
                rows.push(k);
            }
        }
    }
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("metric".to_string()).chain(reports.iter().map(|r| r.name.clone())).collect()];
    for k in &rows {
        let mut line = vec![k.to_string()];
        for r in reports {
            let v = r.metrics.entries().into_iter().find(|(n, _)| n == k).map(|(_, v)| format!("{v:.4}"));
            line.push(v.unwrap_or_else(|| "-".into()));
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..=reports.len()).map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, line) in cells.iter().enumerate() {
        let parts: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            out.push('\n');
        }
    }
    out
}
