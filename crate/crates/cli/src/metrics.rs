//! CSV outputs. Columns follow struct field order; `None` is an empty cell.
//!
//! - `metrics.csv` / `eval.csv`: [`MetricsRecord`]
//! - `impact.csv`: [`ImpactRecord`]
//! - `timing.csv`: [`TimingRecord`]

use std::path::Path;

use branchnet::impact::{ImpactRow, TimingRow};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One evaluation of one model. A row with no seed is the mean over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_name: String,
    pub seed: Option<u64>,
    pub epoch: usize,
    pub split: String,
    pub top1_err: f64,
    pub top5_err: f64,
    /// Left empty in deterministic mode so reruns compare byte for byte.
    pub ms_per_batch: Option<f64>,
    pub slowdown_vs_vanilla: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactRecord {
    /// Spot index, or `none` for the unmodified network.
    pub spot: String,
    pub label: String,
    pub transform: String,
    pub mode: String,
    pub top1_err: f64,
    pub top5_err: f64,
    pub runs: usize,
    pub stderr: f64,
}

impl ImpactRecord {
    pub fn new(row: &ImpactRow, label: String) -> Self {
        ImpactRecord {
            spot: row.spot.to_string(),
            label,
            transform: row.transform.clone(),
            mode: row.mode.to_string(),
            top1_err: row.top1_err,
            top5_err: row.top5_err,
            runs: row.runs,
            stderr: row.stderr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub config_name: String,
    pub batch_size: usize,
    pub median_ms: f64,
    pub slowdown_vs_vanilla: f64,
}

impl From<&TimingRow> for TimingRecord {
    fn from(t: &TimingRow) -> Self {
        TimingRecord {
            config_name: t.name.clone(),
            batch_size: t.batch_size,
            median_ms: t.median_ms,
            slowdown_vs_vanilla: t.slowdown,
        }
    }
}

/// Per-seed rows followed by one mean row per (epoch, split).
pub fn with_means(rows: Vec<MetricsRecord>) -> Vec<MetricsRecord> {
    let mut keys: Vec<(usize, String)> = Vec::new();
    for r in &rows {
        let k = (r.epoch, r.split.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut means = Vec::with_capacity(keys.len());
    for (epoch, split) in keys {
        let group: Vec<&MetricsRecord> = rows
            .iter()
            .filter(|r| r.seed.is_some() && r.epoch == epoch && r.split == split)
            .collect();
        if group.len() < 2 {
            continue;
        }
        let n = group.len() as f64;
        let mean = |f: fn(&MetricsRecord) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = group.iter().map(|r| f(r)).collect();
            v.map(|v| v.iter().sum::<f64>() / n)
        };
        means.push(MetricsRecord {
            config_name: group[0].config_name.clone(),
            seed: None,
            epoch,
            split,
            top1_err: mean(|r| Some(r.top1_err)).unwrap_or(f64::NAN),
            top5_err: mean(|r| Some(r.top5_err)).unwrap_or(f64::NAN),
            ms_per_batch: mean(|r| r.ms_per_batch),
            slowdown_vs_vanilla: mean(|r| r.slowdown_vs_vanilla),
        });
    }
    let mut out = rows;
    out.extend(means);
    out
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: Option<u64>, epoch: usize, split: &str, top1: f64) -> MetricsRecord {
        MetricsRecord {
            config_name: "flip-1-max".into(),
            seed,
            epoch,
            split: split.into(),
            top1_err: top1,
            top5_err: top1 / 2.0,
            ms_per_batch: None,
            slowdown_vs_vanilla: None,
        }
    }

    #[test]
    fn header_order_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = with_means(vec![rec(Some(0), 1, "test", 10.0), rec(Some(1), 1, "test", 20.0)]);
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "config_name,seed,epoch,split,top1_err,top5_err,ms_per_batch,slowdown_vs_vanilla"
        );
        assert_eq!(text.lines().nth(3).unwrap(), "flip-1-max,,1,test,15.0,7.5,,");
        let back: Vec<MetricsRecord> = read_csv(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn single_seed_has_no_mean_row() {
        let rows = with_means(vec![rec(Some(3), 1, "test", 10.0), rec(Some(3), 1, "train", 5.0)]);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn other_schemas_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = vec![TimingRecord {
            config_name: "vanilla".into(),
            batch_size: 128,
            median_ms: 1.5,
            slowdown_vs_vanilla: 1.0,
        }];
        write_csv(&p, &t).unwrap();
        assert_eq!(read_csv::<TimingRecord>(&p).unwrap(), t);
        let i = vec![ImpactRecord {
            spot: "none".into(),
            label: "no changes".into(),
            transform: "flip".into(),
            mode: "inference".into(),
            top1_err: 3.0,
            top5_err: 0.0,
            runs: 1,
            stderr: 0.0,
        }];
        write_csv(&p, &i).unwrap();
        assert_eq!(read_csv::<ImpactRecord>(&p).unwrap(), i);
    }
}
