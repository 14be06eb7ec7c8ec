use std::path::{Path, PathBuf};

use ppg_relcon::eval::{FinetuneConfig, ProbeConfig};
use ppg_relcon::pipeline::PipelineConfig;
use ppg_relcon::synth::{SynthSpec, Task};
use ppg_relcon::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; `<out>/data` when unset.
    pub root: Option<PathBuf>,
    pub task: Task,
    pub synth: SynthSpec,
}

/// Everything a command needs. The top-level seed is the only source of
/// randomness: it overrides the seeds of every section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

/// Parses `value` as a TOML scalar/array, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), Error> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or defaults), applies dotted overrides and the seed
    /// flag, and validates. Unknown keys are rejected.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::DataNotFound(p.display().to_string()),
                    _ => Error::Io(e),
                })?;
                text.parse::<toml::Table>().map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.propagate_seed();
        cfg.pipeline.validate().map_err(config_err)?;
        cfg.data.synth.validate().map_err(config_err)?;
        Ok(cfg)
    }

    fn propagate_seed(&mut self) {
        self.data.synth.seed = self.seed;
        self.pipeline.seed = self.seed;
        self.probe.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::resolve(None, &["pipeline.stage2.epochs=3".into(), "data.task=\"hr_regression\"".into()], Some(7)).unwrap();
        assert_eq!(cfg.pipeline.stage2.epochs, 3);
        assert_eq!(cfg.data.task, Task::HrRegression);
        assert_eq!(cfg.pipeline.seed, 7);
        assert!(matches!(RunConfig::resolve(None, &["pipeline.nope=1".into()], None), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(None, &["pipeline.stage2.pool=bogus".into()], None), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_reparses_identically() {
        let cfg = RunConfig::resolve(None, &["pipeline.stage2.pool=mean".into()], Some(3)).unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
