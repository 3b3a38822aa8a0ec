use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorMetrics, Metric, RunMetrics};
use crate::error::{Error, Result};

pub const CAVEAT: &str = "Thresholds are calibrated on the evaluation set itself, so ZFN and ACC accuracies \
overestimate the performance of a deployed detector; they measure class separability.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    Population,
}

/// `mean ± std` over runs, in percent, plus the per-run values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

impl Cell {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = runs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Cell { mean, std: var.max(0.0).sqrt(), runs }
    }

    pub fn render(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCells {
    pub zfn_acc: Cell,
    pub max_acc: Cell,
    pub auc: Cell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub artifact_version: String,
    pub std_kind: StdKind,
    pub seeds: Vec<Option<u64>>,
    pub metrics: BTreeMap<Metric, MetricCells>,
    /// Raw per-run metrics in `[0, 1]`, including thresholds.
    pub runs: Vec<RunMetrics>,
    pub caveat: String,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<MetricsReport> {
    let first = runs.first().ok_or_else(|| Error::Aggregation("no runs to aggregate".into()))?;
    for r in runs {
        if r.dataset != first.dataset {
            return Err(Error::Aggregation(format!("runs mix datasets `{}` and `{}`", first.dataset, r.dataset)));
        }
        if !r.metrics.keys().eq(first.metrics.keys()) {
            return Err(Error::Aggregation(format!(
                "run with seed {:?} has metrics {:?}, expected {:?}",
                r.seed,
                r.metrics.keys().collect::<Vec<_>>(),
                first.metrics.keys().collect::<Vec<_>>()
            )));
        }
    }
    let pct = |m: Metric, f: fn(&DetectorMetrics) -> f64| {
        Cell::from_runs(runs.iter().map(|r| 100.0 * f(&r.metrics[&m])).collect())
    };
    let metrics = first
        .metrics
        .keys()
        .map(|&m| {
            (
                m,
                MetricCells {
                    zfn_acc: pct(m, |d| d.zfn_acc),
                    max_acc: pct(m, |d| d.max_acc),
                    auc: pct(m, |d| d.auc),
                },
            )
        })
        .collect();
    Ok(MetricsReport {
        dataset: first.dataset.clone(),
        artifact_version: crate::train::ARTIFACT_VERSION.to_owned(),
        std_kind: StdKind::Population,
        seeds: runs.iter().map(|r| r.seed).collect(),
        metrics,
        runs: runs.to_vec(),
        caveat: CAVEAT.to_owned(),
    })
}

/// Plain-text table with one row block per dataset (FID then SSE rows)
/// and ZFN | ACC | AUC columns. With several datasets a MEAN row averages,
/// per column, the better of the two metrics on each dataset.
pub fn render_table(reports: &[MetricsReport]) -> String {
    const W: usize = 16;
    let mut out = String::new();
    let n_runs = reports.iter().map(|r| r.runs.len()).max().unwrap_or(0);
    let _ = writeln!(out, "Anomaly detection: mean ± population std in percent over {n_runs} run(s)");
    let _ = writeln!(out, "Note: {CAVEAT}");
    let _ = writeln!(out);
    let name_w = reports.iter().map(|r| r.dataset.chars().count()).max().unwrap_or(0).max(7);
    let _ = writeln!(out, "{:<name_w$} | {:<6} | {:^W$} | {:^W$} | {:^W$}", "Dataset", "Score", "ZFN", "ACC", "AUC");
    let rule = format!("{}-+-{}-+-{}-+-{}-+-{}", "-".repeat(name_w), "-".repeat(6), "-".repeat(W), "-".repeat(W), "-".repeat(W));
    let _ = writeln!(out, "{rule}");
    for r in reports {
        for (i, m) in [Metric::Fid, Metric::Sse].into_iter().enumerate() {
            let label = if i == 0 { r.dataset.as_str() } else { "" };
            let cells: [String; 3] = match r.metrics.get(&m) {
                Some(c) => [c.zfn_acc.render(), c.max_acc.render(), c.auc.render()],
                None => ["/".into(), "/".into(), "/".into()],
            };
            let _ = writeln!(
                out,
                "{label:<name_w$} | {:<6} | {:^W$} | {:^W$} | {:^W$}",
                m.as_str().to_uppercase(),
                cells[0],
                cells[1],
                cells[2]
            );
        }
    }
    if reports.len() > 1 {
        let best = |f: fn(&MetricCells) -> f64| {
            let per: Vec<f64> =
                reports.iter().map(|r| r.metrics.values().map(f).fold(f64::NEG_INFINITY, f64::max)).collect();
            per.iter().sum::<f64>() / per.len() as f64
        };
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(
            out,
            "{:<name_w$} | {:<6} | {:^W$} | {:^W$} | {:^W$}",
            "MEAN",
            "best",
            format!("{:.2}", best(|c| c.zfn_acc.mean)),
            format!("{:.2}", best(|c| c.max_acc.mean)),
            format!("{:.2}", best(|c| c.auc.mean))
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: u64, zfn: f64) -> RunMetrics {
        let d = DetectorMetrics { zfn_threshold: 1.0, zfn_acc: zfn, acc_threshold: 2.0, max_acc: 0.9, auc: 0.95 };
        RunMetrics {
            dataset: "toy".into(),
            seed: Some(seed),
            n_normal: 10,
            n_abnormal: 10,
            metrics: [(Metric::Sse, d)].into_iter().collect(),
        }
    }

    #[test]
    fn two_point_population_std() {
        let rep = aggregate_runs(&[run(0, 0.7), run(1, 0.9)]).unwrap();
        let c = &rep.metrics[&Metric::Sse].zfn_acc;
        assert!((c.mean - 80.0).abs() < 1e-12 && (c.std - 10.0).abs() < 1e-12);
        assert_eq!(c.render(), "80.00 ± 10.00");
        let same = aggregate_runs(&vec![run(0, 0.8); 5]).unwrap();
        assert_eq!(same.metrics[&Metric::Sse].zfn_acc.render(), "80.00 ± 0.00");
    }

    #[test]
    fn inconsistent_metrics_are_rejected() {
        let mut b = run(1, 0.9);
        b.metrics.insert(Metric::Fid, b.metrics[&Metric::Sse]);
        assert!(matches!(aggregate_runs(&[run(0, 0.7), b]), Err(Error::Aggregation(_))));
        assert!(matches!(aggregate_runs(&[]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn json_round_trip_and_table_layout() {
        let rep = aggregate_runs(&[run(0, 0.7), run(1, 0.9)]).unwrap();
        assert_eq!(MetricsReport::from_json(&rep.to_json().unwrap()).unwrap(), rep);
        let table = render_table(&[rep]);
        assert!(table.contains("ZFN") && table.contains("ACC") && table.contains("AUC"));
        let sse = table.lines().find(|l| l.contains("| SSE")).unwrap();
        assert!(sse.contains("80.00 ± 10.00") && sse.contains("90.00 ± 0.00") && sse.contains("95.00 ± 0.00"));
        let fid = table.lines().find(|l| l.contains("| FID")).unwrap();
        assert!(fid.starts_with("toy") && fid.contains('/'));
    }
}
