use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Run metadata written next to every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: String,
    pub steps: usize,
    pub seed: u64,
    pub wall_clock_s: f64,
    /// SHA-256 of the resolved configuration snapshot.
    pub config_hash: String,
    /// Name and provenance of the feature extractor, when one was used.
    pub feature_space: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseValue {
    pub case: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single case.
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: RunMeta,
    pub rows: Vec<CaseValue>,
}

impl MetricReport {
    pub fn new(meta: RunMeta) -> Self {
        Self { meta, rows: Vec::new() }
    }

    pub fn push(&mut self, case: impl Into<String>, method: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.rows.push(CaseValue {
            case: case.into(),
            method: method.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    /// Per (method, metric) mean, spread and count, in sorted key order.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((&r.method, &r.metric)).or_default().push(r.value);
        }
        groups
            .into_iter()
            .map(|((method, metric), vals)| {
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                Aggregate {
                    method: method.to_owned(),
                    metric: metric.to_owned(),
                    mean,
                    std,
                    count: n,
                }
            })
            .collect()
    }

    pub fn mean_of(&self, method: &str, metric: &str) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|a| a.method == method && a.metric == metric)
            .map(|a| a.mean)
    }

    /// One row per case and metric, followed by `mean`, `std` and `count`
    /// footer rows whose `case` column names the statistic.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut write = || -> std::result::Result<(), csv::Error> {
            w.write_record(["case", "method", "metric", "value"])?;
            for r in &self.rows {
                w.write_record([&r.case, &r.method, &r.metric, &format!("{:.9}", r.value)])?;
            }
            for a in self.aggregate() {
                for (stat, v) in [("mean", a.mean), ("std", a.std), ("count", a.count as f64)] {
                    w.write_record([stat, &a.method, &a.metric, &format!("{v:.9}")])?;
                }
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| csv_err(path, e))
    }

    /// JSON manifest with run metadata and aggregates.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "meta": self.meta,
            "cases": self.rows.iter().map(|r| &r.case).collect::<std::collections::BTreeSet<_>>().len(),
            "aggregates": self.aggregate(),
        });
        crate::io::write_json(path, &doc)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_is_the_arithmetic_mean() {
        let mut r = MetricReport::default();
        for (i, v) in [1.0, 2.0, 4.0].into_iter().enumerate() {
            r.push(format!("c{i}"), "m", "psnr", v);
        }
        r.push("c0", "m", "ssim", 0.5);
        let agg = r.aggregate();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].mean, 7.0 / 3.0);
        assert_eq!(agg[0].count, 3);
        assert_eq!(agg[1].std, 0.0);
    }

    #[test]
    fn csv_has_footer() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricReport::default();
        r.push("a", "m", "psnr", 1.0);
        r.push("b", "m", "psnr", 3.0);
        let p = dir.path().join("m.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 + 3);
        assert!(text.contains("mean,m,psnr,2.000000000"));
    }
}
