//! Run artifacts: per-round metrics CSV, a summary JSON, and a config echo.
//!
//! Everything that lands in `metrics.csv` is a pure function of the config
//! and seed, so two runs of the same experiment produce byte-identical
//! files; wall-clock timings live only in the summary. Floats are written
//! with the shortest round-trip representation, which is stable across
//! runs.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

/// Metrics captured after one federated round (or, for a zero-round run,
/// after initialization).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub recall: f64,
    pub ndcg: f64,
    /// Mean over the round's clients of their final local objective per
    /// training example; absent when no client trained.
    pub mean_client_loss: Option<f64>,
    /// Final-epoch auxiliary BCE per stored example; absent when the
    /// auxiliary model is disabled.
    pub aux_loss: Option<f64>,
    /// Not written to the CSV.
    pub wall_ms: u64,
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

/// Render the per-round table. Columns carry the cutoff in their names so
/// a reader never has to guess k.
pub fn render_metrics_csv(k: usize, rows: &[RoundRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "round,recall@{k},ndcg@{k},mean_client_loss,aux_loss"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.round,
            r.recall,
            r.ndcg,
            fmt_opt(r.mean_client_loss),
            fmt_opt(r.aux_loss)
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, k: usize, rows: &[RoundRecord]) -> Result<()> {
    std::fs::write(path, render_metrics_csv(k, rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary<'a> {
    pub label: String,
    pub seed: u64,
    pub rounds: usize,
    pub users_evaluated: usize,
    pub final_recall: f64,
    pub final_ndcg: f64,
    pub eval_k: usize,
    pub total_wall_ms: u64,
    pub round_wall_ms: Vec<u64>,
    pub config: &'a ExperimentConfig,
}

pub fn write_summary_json(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Invalid(format!("summary serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Echo the fully resolved config next to the outputs so a run directory
/// is self-describing and replayable.
pub fn write_config_echo(path: &Path, config: &ExperimentConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Invalid(format!("config serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_names_the_cutoff_and_leaves_missing_losses_empty() {
        let rows = vec![
            RoundRecord {
                round: 1,
                recall: 0.25,
                ndcg: 0.125,
                mean_client_loss: Some(0.5),
                aux_loss: None,
                wall_ms: 99,
            },
            RoundRecord {
                round: 2,
                recall: 0.5,
                ndcg: 0.25,
                mean_client_loss: None,
                aux_loss: Some(0.75),
                wall_ms: 100,
            },
        ];
        let text = render_metrics_csv(10, &rows);
        assert_eq!(
            text,
            "round,recall@10,ndcg@10,mean_client_loss,aux_loss\n\
             1,0.25,0.125,0.5,\n\
             2,0.5,0.25,,0.75\n"
        );
    }

    #[test]
    fn csv_floats_round_trip() {
        let rows = vec![RoundRecord {
            round: 1,
            recall: 0.1 + 0.2,
            ndcg: 1.0 / 3.0,
            mean_client_loss: Some(f64::MIN_POSITIVE),
            aux_loss: None,
            wall_ms: 0,
        }];
        let text = render_metrics_csv(20, &rows);
        let line = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(fields[3].parse::<f64>().unwrap(), f64::MIN_POSITIVE);
    }

    #[test]
    fn summary_and_echo_are_valid_json() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig::default();
        let summary = RunSummary {
            label: config.label(),
            seed: 3,
            rounds: 2,
            users_evaluated: 40,
            final_recall: 0.5,
            final_ndcg: 0.25,
            eval_k: 20,
            total_wall_ms: 1234,
            round_wall_ms: vec![600, 634],
            config: &config,
        };
        let summary_path = dir.path().join("summary.json");
        write_summary_json(&summary_path, &summary).unwrap();
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).unwrap();
        assert_eq!(value["label"], "PDC-FRS");
        assert_eq!(value["round_wall_ms"][1], 634);

        let echo_path = dir.path().join("config.json");
        write_config_echo(&echo_path, &config).unwrap();
        let back = ExperimentConfig::from_file(&echo_path).unwrap();
        assert_eq!(back, config);
    }
}
