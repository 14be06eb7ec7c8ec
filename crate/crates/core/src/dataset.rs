//! On-disk dataset layout.
//!
//! ```text
//! <root>/splits.txt                  train=<ids,...> / val=... / test=...
//! <root>/labels.csv                  optional: window_id,class,hr_bpm
//! <root>/<subject>/manifest.txt      key=value: subject_id, rate_hz, segments,
//!                                    segment.<i>.start_time_s, segment.<i>.file
//! <root>/<subject>/seg<i>.f32        little-endian f32 samples
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Segment, SubjectSeries};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// Fails if any subject appears in more than one split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!("subject `{id}` appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Label row attached to a window id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowLabel {
    pub window_id: String,
    pub class: usize,
    pub hr_bpm: f64,
}

pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DataNotFound(path.display().to_string()),
        _ => Error::Io(e),
    })
}

fn required<'a>(kv: &'a BTreeMap<String, String>, key: &str, file: &Path) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("{}: missing key `{key}`", file.display())))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("cannot parse {what} from `{s}`")))
}

pub fn write_f32_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DataNotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: length is not a multiple of 4", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

pub fn write_subject(root: &Path, series: &SubjectSeries) -> Result<()> {
    series.validate()?;
    let dir = root.join(&series.subject_id);
    fs::create_dir_all(&dir)?;
    let rate = series.segments.first().map_or(50.0, |s| s.rate_hz);
    let mut manifest = format!("subject_id={}\nrate_hz={}\nsegments={}\n", series.subject_id, rate, series.segments.len());
    for (i, seg) in series.segments.iter().enumerate() {
        if seg.rate_hz != rate {
            return Err(Error::InvalidArgument("all segments of a subject must share one rate".into()));
        }
        let file = format!("seg{i}.f32");
        write_f32_le(&dir.join(&file), &seg.values)?;
        manifest.push_str(&format!("segment.{i}.start_time_s={}\nsegment.{i}.file={file}\n", seg.start_time_s));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn read_subject(root: &Path, subject_id: &str) -> Result<SubjectSeries> {
    let dir = root.join(subject_id);
    let mpath = dir.join("manifest.txt");
    let kv = parse_key_values(&read_text(&mpath)?);
    let sid = required(&kv, "subject_id", &mpath)?.to_string();
    let rate: f64 = parse_num(required(&kv, "rate_hz", &mpath)?, "rate_hz")?;
    let n: usize = parse_num(required(&kv, "segments", &mpath)?, "segments")?;
    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let start: f64 = parse_num(required(&kv, &format!("segment.{i}.start_time_s"), &mpath)?, "start time")?;
        let file = required(&kv, &format!("segment.{i}.file"), &mpath)?;
        segments.push(Segment { start_time_s: start, rate_hz: rate, values: read_f32_le(&dir.join(file))? });
    }
    let series = SubjectSeries { subject_id: sid, segments };
    series.validate()?;
    Ok(series)
}

pub fn write_splits(root: &Path, splits: &Splits) -> Result<()> {
    splits.validate()?;
    fs::create_dir_all(root)?;
    let text = format!("train={}\nval={}\ntest={}\n", splits.train.join(","), splits.val.join(","), splits.test.join(","));
    fs::write(root.join("splits.txt"), text)?;
    Ok(())
}

pub fn read_splits(root: &Path) -> Result<Splits> {
    let path = root.join("splits.txt");
    let kv = parse_key_values(&read_text(&path)?);
    let list = |k: &str| -> Vec<String> {
        kv.get(k)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    };
    let splits = Splits { train: list("train"), val: list("val"), test: list("test") };
    splits.validate()?;
    Ok(splits)
}

pub fn write_labels(root: &Path, labels: &[WindowLabel]) -> Result<()> {
    let mut text = String::from("window_id,class,hr_bpm\n");
    for l in labels {
        text.push_str(&format!("{},{},{}\n", l.window_id, l.class, l.hr_bpm));
    }
    fs::write(root.join("labels.csv"), text)?;
    Ok(())
}

pub fn read_labels(root: &Path) -> Result<Vec<WindowLabel>> {
    let path = root.join("labels.csv");
    let text = read_text(&path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Format(format!("{}: bad row `{l}`", path.display())));
            }
            Ok(WindowLabel { window_id: cols[0].to_string(), class: parse_num(cols[1], "class")?, hr_bpm: parse_num(cols[2], "hr_bpm")? })
        })
        .collect()
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub splits: Splits,
    pub subjects: Vec<SubjectSeries>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::DataNotFound(root.display().to_string()));
        }
        let splits = read_splits(root)?;
        let subjects = splits.all().map(|id| read_subject(root, id)).collect::<Result<Vec<_>>>()?;
        Ok(Self { root: root.to_path_buf(), splits, subjects })
    }

    pub fn save(root: &Path, splits: &Splits, subjects: &[SubjectSeries]) -> Result<()> {
        write_splits(root, splits)?;
        for s in subjects {
            write_subject(root, s)?;
        }
        Ok(())
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectSeries> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let subj = |id: &str| SubjectSeries {
            subject_id: id.into(),
            segments: vec![
                Segment { start_time_s: 0.0, rate_hz: 50.0, values: vec![0.25, -1.5, 3.0] },
                Segment { start_time_s: 3600.0, rate_hz: 50.0, values: vec![1.0; 4] },
            ],
        };
        let splits = Splits { train: vec!["a".into()], val: vec!["b".into()], test: vec![] };
        Dataset::save(dir.path(), &splits, &[subj("a"), subj("b")]).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.splits, splits);
        assert_eq!(ds.subject("a").unwrap(), &subj("a"));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let s = Splits { train: vec!["a".into()], val: vec!["a".into()], test: vec![] };
        assert!(s.validate().is_err());
    }

    #[test]
    fn missing_dataset_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(&dir.path().join("nope")), Err(Error::DataNotFound(_))));
        assert!(matches!(read_subject(dir.path(), "ghost"), Err(Error::DataNotFound(_))));
    }
}
