//! Metrics CSV: one row per evaluated episode, plus an aggregate summary
//! footer file. UTF-8, LF endings. Wall-clock is the one column reruns are
//! allowed to differ in.

use std::path::Path;

use crate::error::{CliError, CliResult};

pub const METRICS_HEADER: &str =
    "seed,training_step,checkpoint_id,rule,episode,return,normalized_return,inference_calls,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub training_step: u64,
    pub checkpoint_id: usize,
    pub rule: String,
    pub episode: usize,
    pub ret: f64,
    pub normalized_return: f64,
    pub inference_calls: usize,
    pub wall_ms: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.training_step,
            self.checkpoint_id,
            self.rule,
            self.episode,
            self.ret,
            self.normalized_return,
            self.inference_calls,
            self.wall_ms
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> CliResult<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(CliError::Data(format!(
                "bad metrics header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(CliError::Data(format!(
                "metrics line {} has {} fields",
                i + 2,
                parts.len()
            )));
        }
        let field = |j: usize| -> CliResult<f64> {
            parts[j]
                .parse()
                .map_err(|_| CliError::Data(format!("bad number '{}' on line {}", parts[j], i + 2)))
        };
        rows.push(MetricsRow {
            seed: parts[0]
                .parse()
                .map_err(|_| CliError::Data("bad seed".to_string()))?,
            training_step: parts[1]
                .parse()
                .map_err(|_| CliError::Data("bad step".to_string()))?,
            checkpoint_id: parts[2]
                .parse()
                .map_err(|_| CliError::Data("bad checkpoint id".to_string()))?,
            rule: parts[3].to_string(),
            episode: parts[4]
                .parse()
                .map_err(|_| CliError::Data("bad episode".to_string()))?,
            ret: field(5)?,
            normalized_return: field(6)?,
            inference_calls: parts[7]
                .parse()
                .map_err(|_| CliError::Data("bad call count".to_string()))?,
            wall_ms: field(8)?,
        });
    }
    Ok(rows)
}

/// CSV content with the wall-clock column dropped; what determinism
/// comparisons look at.
pub fn strip_wall_clock(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|line| match line.rsplit_once(',') {
            Some((head, _)) => head.to_string(),
            None => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Per-rule mean and standard deviation, appended as a footer file.
pub fn write_summary(path: &Path, rows: &[MetricsRow]) -> CliResult<()> {
    let mut rules: Vec<String> = rows.iter().map(|r| r.rule.clone()).collect();
    rules.sort();
    rules.dedup();
    let mut text = String::from("rule,episodes,mean_return,std_return,mean_normalized,std_normalized\n");
    for rule in rules {
        let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.rule == rule).collect();
        let n = group.len() as f64;
        let mean = group.iter().map(|r| r.ret).sum::<f64>() / n;
        let var = group.iter().map(|r| (r.ret - mean).powi(2)).sum::<f64>() / n;
        let nmean = group.iter().map(|r| r.normalized_return).sum::<f64>() / n;
        let nvar = group
            .iter()
            .map(|r| (r.normalized_return - nmean).powi(2))
            .sum::<f64>()
            / n;
        text.push_str(&format!(
            "{rule},{},{mean},{},{nmean},{}\n",
            group.len(),
            var.sqrt(),
            nvar.sqrt()
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}
