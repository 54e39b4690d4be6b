//! Metrics output: a fixed-column CSV per run plus a JSON summary sidecar.
//!
//! Everything except the wall-clock column is a pure function of config and
//! seed, so two runs of the same experiment produce byte-identical files
//! once that column is stripped.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;

pub const CSV_COLUMNS: [&str; 7] =
    ["run_id", "seed", "epoch", "train_loss", "test_accuracy", "epsilon", "wall_clock_s"];

/// One evaluation point of one seeded run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Privacy spent up to this epoch; infinite for non-DP optimizers.
    pub epsilon: f64,
    pub wall_clock_s: f64,
}

/// Formats a float for the CSV; `Display` is shortest-round-trip, so equal
/// values always print identically.
fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// Final state of one seeded run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub final_accuracy: f64,
    pub epochs_run: usize,
    /// Privacy spent; absent for non-private optimizers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

/// Cross-seed summary written as the JSON sidecar.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub schema_version: u32,
    pub run_id: String,
    pub model: String,
    pub optimizer: String,
    /// Report key, e.g. `sigma` or `epsilon`, with its value.
    pub key: String,
    pub value: f64,
    pub seeds: Vec<SeedOutcome>,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
    /// `converged`, `non-convergence`, or `mixed`.
    pub outcome: String,
}

impl Summary {
    pub fn from_outcomes(
        run_id: &str,
        model: &str,
        optimizer: &str,
        key: (String, f64),
        seeds: Vec<SeedOutcome>,
    ) -> Summary {
        let accuracies: Vec<f64> = seeds.iter().map(|s| s.final_accuracy).collect();
        let (mean, stderr) = mean_stderr(&accuracies);
        let converged = seeds.iter().filter(|s| s.converged).count();
        let outcome = if converged == seeds.len() {
            "converged"
        } else if converged == 0 {
            "non-convergence"
        } else {
            "mixed"
        };
        Summary {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.into(),
            model: model.into(),
            optimizer: optimizer.into(),
            key: key.0,
            value: key.1,
            seeds,
            mean_accuracy: mean,
            stderr_accuracy: stderr,
            outcome: outcome.into(),
        }
    }

    /// Accuracy in percent, formatted `mean ± stderr`.
    pub fn accuracy_pm(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean_accuracy * 100.0, self.stderr_accuracy * 100.0)
    }
}

/// Sample mean and standard error (zero for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Renders the per-epoch rows plus one cross-seed summary row.
pub fn render_csv(records: &[MetricsRecord], summary: &Summary) -> String {
    let mut out = String::new();
    out.push_str(&CSV_COLUMNS.join(","));
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run_id,
            r.seed,
            r.epoch,
            fmt_float(r.train_loss),
            fmt_float(r.test_accuracy),
            fmt_float(r.epsilon),
            fmt_float(r.wall_clock_s),
        ));
    }
    let final_losses: Vec<f64> = summarize_final(records, |r| r.train_loss);
    let (mean_loss, _) = mean_stderr(&final_losses);
    let total_wall: f64 = records.iter().map(|r| r.wall_clock_s).fold(0.0, f64::max);
    let max_eps = summary
        .seeds
        .iter()
        .map(|s| s.epsilon.unwrap_or(f64::INFINITY))
        .fold(f64::NEG_INFINITY, f64::max);
    out.push_str(&format!(
        "{},all,summary,{},{},{},{}\n",
        summary.run_id,
        fmt_float(mean_loss),
        fmt_float(summary.mean_accuracy),
        fmt_float(max_eps),
        fmt_float(total_wall),
    ));
    out
}

/// The last record of each seed, mapped through `f` (empty for 0 epochs).
fn summarize_final(records: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let seed = records[i].seed;
        let mut last = i;
        while i < records.len() && records[i].seed == seed {
            last = i;
            i += 1;
        }
        out.push(f(&records[last]));
    }
    out
}

/// Writes bytes atomically: a temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord], summary: &Summary) -> Result<()> {
    write_atomic(path, render_csv(records, summary).as_bytes())
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).context("serializing summary")?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading summary from {}", path.display()))?;
    let summary: Summary =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if summary.schema_version != SCHEMA_VERSION {
        anyhow::bail!(
            "schema version mismatch in {}: file has {}, this build reads {SCHEMA_VERSION}",
            path.display(),
            summary.schema_version
        );
    }
    Ok(summary)
}

/// Drops the wall-clock column from CSV text, for reproducibility diffs.
pub fn strip_wall_clock(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                run_id: "demo".into(),
                seed: 1,
                epoch: 1,
                train_loss: 2.0,
                test_accuracy: 0.5,
                epsilon: 0.25,
                wall_clock_s: 0.9,
            },
            MetricsRecord {
                run_id: "demo".into(),
                seed: 1,
                epoch: 2,
                train_loss: 1.0,
                test_accuracy: 0.75,
                epsilon: 0.5,
                wall_clock_s: 1.8,
            },
            MetricsRecord {
                run_id: "demo".into(),
                seed: 2,
                epoch: 1,
                train_loss: 2.2,
                test_accuracy: 0.45,
                epsilon: 0.25,
                wall_clock_s: 0.8,
            },
            MetricsRecord {
                run_id: "demo".into(),
                seed: 2,
                epoch: 2,
                train_loss: 1.2,
                test_accuracy: 0.65,
                epsilon: 0.5,
                wall_clock_s: 1.7,
            },
        ]
    }

    fn sample_summary() -> Summary {
        Summary::from_outcomes(
            "demo",
            "mlp-32-ln",
            "sgd",
            ("sigma".into(), 0.0),
            vec![
                SeedOutcome {
                    seed: 1,
                    converged: true,
                    reason: None,
                    final_accuracy: 0.75,
                    epochs_run: 2,
                    epsilon: Some(0.5),
                },
                SeedOutcome {
                    seed: 2,
                    converged: true,
                    reason: None,
                    final_accuracy: 0.65,
                    epochs_run: 2,
                    epsilon: Some(0.5),
                },
            ],
        )
    }

    #[test]
    fn csv_has_fixed_columns_and_summary_row() {
        let text = render_csv(&sample_records(), &sample_summary());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_id,seed,epoch,train_loss,test_accuracy,epsilon,wall_clock_s");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "demo,1,1,2,0.5,0.25,0.9");
        assert!(lines[5].starts_with("demo,all,summary,1.1,0.7,0.5,"));
    }

    #[test]
    fn wall_clock_strip_is_the_only_difference() {
        let records = sample_records();
        let mut later = records.clone();
        for r in &mut later {
            r.wall_clock_s += 0.37;
        }
        let a = render_csv(&records, &sample_summary());
        let b = render_csv(&later, &sample_summary());
        assert_ne!(a, b);
        assert_eq!(strip_wall_clock(&a), strip_wall_clock(&b));
    }

    #[test]
    fn infinities_render_as_inf() {
        let mut records = sample_records();
        records.truncate(1);
        records[0].epsilon = f64::INFINITY;
        let text = render_csv(&records, &sample_summary());
        assert!(text.lines().nth(1).unwrap().contains(",inf,"), "{text}");
    }

    #[test]
    fn summary_outcome_and_stderr() {
        let s = sample_summary();
        assert_eq!(s.outcome, "converged");
        assert!((s.mean_accuracy - 0.7).abs() < 1e-12);
        // stderr of {0.75, 0.65}: sd = 0.0707..., / sqrt(2) = 0.05
        assert!((s.stderr_accuracy - 0.05).abs() < 1e-12);
        assert_eq!(s.accuracy_pm(), "70.00 ± 5.00");

        let mut seeds = s.seeds.clone();
        seeds[0].converged = false;
        let mixed = Summary::from_outcomes("demo", "m", "sgd", ("sigma".into(), 0.0), seeds);
        assert_eq!(mixed.outcome, "mixed");
    }

    #[test]
    fn summary_round_trips_and_checks_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let s = sample_summary();
        write_summary(&path, &s).unwrap();
        assert_eq!(read_summary(&path).unwrap(), s);

        let mut bad = s.clone();
        bad.schema_version = 99;
        let text = serde_json::to_string(&bad).unwrap();
        std::fs::write(&path, text).unwrap();
        let err = read_summary(&path).unwrap_err();
        assert!(err.to_string().contains("schema version mismatch"), "{err}");
    }

    #[test]
    fn non_private_summary_round_trips() {
        // Non-private seeds have no epsilon; the field must be omitted, not
        // written as a null that read_summary later chokes on.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let mut s = sample_summary();
        for seed in &mut s.seeds {
            seed.epsilon = None;
        }
        write_summary(&path, &s).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("epsilon"), "{text}");
        assert_eq!(read_summary(&path).unwrap(), s);
    }
}
