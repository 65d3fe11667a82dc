//! Episode log (JSON lines) and metrics table (CSV).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rlv_core::task::{parse_tokens, render, reward};
use rlv_core::trainer::{IterationMetrics, LoggedEpisode};
use rlv_core::{Episode64, TaskInstance, Vocab};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub run_id: String,
    pub iteration: usize,
    pub group_id: usize,
    pub prompt: String,
    pub solution: String,
    pub reward: u8,
    pub old_logprobs: Vec<f64>,
    pub verifier_score: f64,
}

impl EpisodeRecord {
    pub fn new(run_id: &str, logged: &LoggedEpisode<f64>) -> Self {
        let ep = &logged.episode;
        EpisodeRecord {
            run_id: run_id.to_string(),
            iteration: logged.iteration,
            group_id: ep.group_id,
            prompt: render(&ep.task.prompt),
            solution: render(&ep.solution),
            reward: ep.reward,
            old_logprobs: ep.old_logprobs.clone(),
            verifier_score: logged.verifier_score,
        }
    }

    /// Rebuilds the episode, recomputing the task from its prompt.
    pub fn to_episode(&self, vocab: &Vocab) -> Result<Episode64> {
        let bad = |e: rlv_core::Error| HarnessError::Artifact(format!("episode record: {e}"));
        let task = TaskInstance::from_prompt(parse_tokens(&self.prompt).map_err(bad)?, vocab).map_err(bad)?;
        Ok(Episode64 {
            task,
            solution: parse_tokens(&self.solution).map_err(bad)?,
            old_logprobs: self.old_logprobs.clone(),
            reward: self.reward,
            group_id: self.group_id,
        })
    }

    /// Reward recomputed from the prompt and solution text alone.
    pub fn rescore(&self, vocab: &Vocab) -> Result<u8> {
        let ep = self.to_episode(vocab)?;
        Ok(reward(vocab, &ep.task, &ep.solution))
    }
}

pub fn write_episodes(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    let io = |e: std::io::Error| HarnessError::artifact(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| HarnessError::artifact(path, e))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::artifact(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| HarnessError::artifact(path, e))?;
            serde_json::from_str(&line).map_err(|e| HarnessError::artifact(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub pass_at_1: f64,
    pub verifier_accuracy: f64,
    pub mean_kl: f64,
    pub rl_objective: f64,
    pub verification_loss: f64,
    pub head_loss: f64,
    pub value_loss: f64,
    pub lambda: f64,
    pub lr: f64,
    pub verification_skipped: u8,
    pub skipped_total: usize,
    pub zero_variance_groups: usize,
    pub zero_variance_total: usize,
    pub clipped_tokens: usize,
}

impl From<&IterationMetrics> for MetricsRow {
    fn from(m: &IterationMetrics) -> Self {
        MetricsRow {
            iteration: m.iteration,
            pass_at_1: m.pass_at_1,
            verifier_accuracy: m.verifier_accuracy,
            mean_kl: m.step.mean_kl,
            rl_objective: m.step.rl_objective,
            verification_loss: m.step.verification_loss,
            head_loss: m.step.head_loss,
            value_loss: m.step.value_loss,
            lambda: m.step.lambda,
            lr: m.step.lr,
            verification_skipped: u8::from(m.step.verification_skipped),
            skipped_total: m.skipped_total,
            zero_variance_groups: m.step.zero_variance_groups,
            zero_variance_total: m.zero_variance_total,
            clipped_tokens: m.step.clipped_tokens,
        }
    }
}

/// Serializes rows as CSV with a header, even when there are no rows.
pub fn csv_string<R: Serialize>(header: &[&str], rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let fail = |e: csv::Error| HarnessError::Artifact(format!("csv: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Artifact(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const METRICS_HEADER: [&str; 15] = [
    "iteration",
    "pass_at_1",
    "verifier_accuracy",
    "mean_kl",
    "rl_objective",
    "verification_loss",
    "head_loss",
    "value_loss",
    "lambda",
    "lr",
    "verification_skipped",
    "skipped_total",
    "zero_variance_groups",
    "zero_variance_total",
    "clipped_tokens",
];

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::artifact(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| HarnessError::artifact(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rlv_core::task::generate_task;
    use rlv_core::Domain;

    #[test]
    fn record_round_trip_and_rescore() {
        let vocab = Vocab::default();
        let task = generate_task(&vocab, 2, Domain::Mixed, 11).unwrap();
        let solution = rlv_core::task::reference_solution(&vocab, &task);
        let logged = LoggedEpisode {
            iteration: 3,
            verifier_score: 0.25,
            episode: Episode64 {
                old_logprobs: (1..=solution.len()).map(|i| -(i as f64).sqrt() / 3.0).collect(),
                reward: reward(&vocab, &task, &solution),
                solution,
                task,
                group_id: 2,
            },
        };
        let rec = EpisodeRecord::new("abc", &logged);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        write_episodes(&path, &[rec.clone(), rec.clone()]).unwrap();
        let back = read_episodes(&path).unwrap();
        assert_eq!(back, vec![rec.clone(), rec.clone()]);
        assert_eq!(back[0].rescore(&vocab).unwrap(), 1);
        assert_eq!(back[0].to_episode(&vocab).unwrap(), logged.episode);
    }

    #[test]
    fn malformed_log_line_is_artifact_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"run_id\": 1}\n").unwrap();
        assert_eq!(read_episodes(&path).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn empty_metrics_keep_header() {
        let s = csv_string::<MetricsRow>(&METRICS_HEADER, &[]).unwrap();
        assert_eq!(s.trim_end(), METRICS_HEADER.join(","));
    }
}
