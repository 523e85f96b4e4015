//! Closed-set evaluation of a score matrix: accuracy, confusion counts, and
//! multiclass log-loss from softmax posteriors.

use crate::error::{Error, Result};
use crate::score::ScoreMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub languages: Vec<String>,
    pub num_segments: usize,
    pub accuracy: f64,
    /// Mean negative log softmax probability of the true language.
    pub log_loss: f64,
    /// `confusion[truth][prediction]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores a labeled matrix: argmax decisions (ties toward the lower index)
/// and log-loss under the softmax of each row. Every row must be labeled.
pub fn evaluate(matrix: &ScoreMatrix) -> Result<EvalReport> {
    let (s, l) = matrix.scores.shape();
    if matrix.labels.len() != s {
        return Err(Error::dims("label count", s, matrix.labels.len()));
    }
    if matrix.languages.len() != l {
        return Err(Error::dims("language count", l, matrix.languages.len()));
    }
    let mut confusion = vec![vec![0usize; l]; l];
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for row in 0..s {
        let truth = matrix.labels[row].ok_or(Error::MissingLabels)?;
        if truth >= l {
            return Err(Error::LabelOutOfRange {
                label: truth as i64,
                num_languages: l,
            });
        }
        let scores = matrix.scores.row(row);
        let mut pred = 0;
        for j in 1..l {
            if scores[j] > scores[pred] {
                pred = j;
            }
        }
        confusion[truth][pred] += 1;
        if pred == truth {
            correct += 1;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - scores[truth];
    }
    Ok(EvalReport {
        languages: matrix.languages.clone(),
        num_segments: s,
        accuracy: correct as f64 / s as f64,
        log_loss: loss / s as f64,
        confusion,
    })
}

impl EvalReport {
    /// Machine-readable `key = value` lines, deterministic byte for byte.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("S = {}\n", self.num_segments));
        out.push_str(&format!("L = {}\n", self.languages.len()));
        out.push_str(&format!("languages = {}\n", self.languages.join(",")));
        out.push_str(&format!("accuracy = {}\n", self.accuracy));
        out.push_str(&format!("log_loss = {}\n", self.log_loss));
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                out.push_str(&format!("confusion.{t}.{p} = {count}\n"));
            }
        }
        out
    }

    /// Human-readable summary with an aligned confusion table.
    pub fn render(&self) -> String {
        let width = self
            .languages
            .iter()
            .map(|n| n.len())
            .chain(
                self.confusion
                    .iter()
                    .flatten()
                    .map(|c| c.to_string().len()),
            )
            .max()
            .unwrap_or(1)
            .max(3);
        let mut out = String::new();
        out.push_str(&format!("segments: {}\n", self.num_segments));
        out.push_str(&format!("accuracy: {:.4}\n", self.accuracy));
        out.push_str(&format!("log loss: {:.4}\n", self.log_loss));
        out.push_str("confusion (rows = truth, columns = prediction):\n");
        out.push_str(&format!("{:width$}", ""));
        for name in &self.languages {
            out.push_str(&format!(" {name:>width$}"));
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{:>width$}", self.languages[t]));
            for &count in row {
                out.push_str(&format!(" {count:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}
