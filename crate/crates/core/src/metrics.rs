//! Classification metrics over a labeled evaluation set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class code {code} outside 0..{k}")]
    CodeOutOfRange { code: usize, k: usize },
}

/// Arg-max per row of a row-major `batch x k` probability matrix. Ties go to
/// the lowest class index.
pub fn predict_labels<T: Copy + PartialOrd>(probs: &[T], k: usize) -> Vec<usize> {
    probs
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
        })
        .collect()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfusionMatrix {
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn confusion(
    preds: &[usize],
    labels: &[usize],
    class_labels: &[String],
) -> Result<ConfusionMatrix, MetricsError> {
    let k = class_labels.len();
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(labels) {
        if let Some(&code) = [p, t].iter().find(|&&c| c >= k) {
            return Err(MetricsError::CodeOutOfRange { code, k });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        labels: class_labels.to_vec(),
        counts,
    })
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Divides each row by its sum; all-zero rows stay zero.
    pub fn normalize_rows(&self) -> NormalizedConfusionMatrix {
        let rows = self
            .counts
            .iter()
            .map(|row| {
                let sum: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if sum == 0 { 0.0 } else { c as f64 / sum as f64 })
                    .collect()
            })
            .collect();
        NormalizedConfusionMatrix {
            labels: self.labels.clone(),
            rows,
        }
    }

    /// Recall per class; `None` where the class has no samples.
    pub fn per_class_tpr(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let sum: u64 = row.iter().sum();
                (sum > 0).then(|| row[i] as f64 / sum as f64)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        render_csv(&self.labels, self.counts.iter().map(|r| r.iter().map(|c| c.to_string())))
    }
}

impl NormalizedConfusionMatrix {
    pub fn to_csv(&self) -> String {
        render_csv(&self.labels, self.rows.iter().map(|r| r.iter().map(|v| v.to_string())))
    }
}

fn render_csv<R, C>(labels: &[String], rows: R) -> String
where
    R: Iterator<Item = C>,
    C: Iterator<Item = String>,
{
    let mut out = String::from("true\\pred");
    for l in labels {
        write!(out, ",{l}").unwrap();
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(rows) {
        out.push_str(label);
        for cell in row {
            write!(out, ",{cell}").unwrap();
        }
        out.push('\n');
    }
    out
}
