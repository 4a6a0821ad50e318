use serde::{Deserialize, Serialize};

use crate::corpus::{Category, CategoryTaxonomy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True count.
    pub support: usize,
    pub predicted: usize,
    /// Neither true nor predicted anywhere; scores are 0 by convention.
    pub absent: bool,
}

/// Per-class and macro scores plus the confusion matrix (rows true, columns predicted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl MetricsReport {
    pub fn class(&self, label: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn f1_of(&self, label: &str) -> Option<f64> {
        self.class(label).map(|c| c.f1)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Metrics over class indices `0..names.len()`.
pub fn compute_index_metrics(truth: &[usize], pred: &[usize], names: &[&str]) -> Result<MetricsReport> {
    if truth.len() != pred.len() {
        return Err(Error::Input(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let k = names.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Input(format!("label index {} outside {k} classes", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    let classes: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                label: names[c].to_string(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
                predicted,
                absent: support == 0 && predicted == 0,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if k == 0 {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / k as f64
        }
    };
    let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: ratio(trace, truth.len()),
        classes,
        confusion,
        total: truth.len(),
    })
}

/// Metrics over every category of `taxonomy`, in taxonomy order.
pub fn compute_metrics(truth: &[Category], pred: &[Category], taxonomy: &CategoryTaxonomy) -> Result<MetricsReport> {
    let labels = taxonomy.labels();
    let index = |c: &Category| {
        labels
            .iter()
            .position(|l| l == c)
            .ok_or_else(|| Error::Input(format!("label {} is not in the taxonomy", c.name())))
    };
    let t: Vec<usize> = truth.iter().map(index).collect::<Result<_>>()?;
    let p: Vec<usize> = pred.iter().map(index).collect::<Result<_>>()?;
    let names: Vec<&str> = labels.iter().map(|c| c.name()).collect();
    compute_index_metrics(&t, &p, &names)
}
