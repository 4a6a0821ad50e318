use std::collections::BTreeSet;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Category, PageRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{rng_from, tag};
use crate::scalar::Scalar;
use crate::train::TrainConfig;

use super::case::{evaluate_case, train_case, Case, CaseData};

pub const SWEEP_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

pub const SWEEP_CATEGORIES: [Category; 5] = [
    Category::Abstract,
    Category::Dedication,
    Category::ListofFigures,
    Category::ListofTables,
    Category::TitlePage,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub category: Category,
    pub fraction: f64,
    /// Training pages of `category` kept at this fraction.
    pub train_pages: usize,
    /// `None` when the cell was skipped for lack of samples.
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub case: Case,
    pub categories: Vec<Category>,
    pub fractions: Vec<f64>,
    /// Fraction-major: all categories of the first fraction, then the next.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, category: Category, fraction: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.category == category && c.fraction == fraction)
    }
}

/// Pages kept per category at `fraction`: `floor(fraction * n)`.
pub fn kept(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Indices of `train` kept at `fraction`. Only `categories` are subsampled;
/// each uses one seeded order, so smaller fractions are prefixes of larger
/// ones. Original order is preserved.
pub fn sweep_subset(train: &[PageRecord], categories: &[Category], fraction: f64, seed: u64) -> Vec<usize> {
    let mut keep: BTreeSet<usize> = (0..train.len())
        .filter(|&i| !categories.contains(&train[i].label))
        .collect();
    for &cat in categories {
        let mut pool: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == cat).collect();
        pool.shuffle(&mut rng_from(seed, &[tag("sweep"), cat.index() as u64]));
        keep.extend(
            pool.into_iter()
                .take(kept(train.iter().filter(|r| r.label == cat).count(), fraction)),
        );
    }
    keep.into_iter().collect()
}

/// Retrain once per fraction with the listed categories subsampled and
/// record each listed category's test F1. Fractions run in parallel.
#[allow(clippy::too_many_arguments)]
pub fn data_efficiency_sweep<T: Scalar>(
    categories: &[Category],
    fractions: &[f64],
    case: Case,
    data: &CaseData<'_>,
    model: &ModelConfig,
    vocabulary: &Vocabulary,
    train: &TrainConfig,
    seed: u64,
) -> Result<SweepResult> {
    if categories.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::Config("sweep needs categories and fractions in (0, 1]".into()));
    }
    let rows = fractions
        .par_iter()
        .map(|&fraction| {
            let idx = sweep_subset(data.train, categories, fraction, seed);
            let subset: Vec<PageRecord> = idx.iter().map(|&i| data.train[i].clone()).collect();
            let counts: Vec<usize> = categories
                .iter()
                .map(|&c| subset.iter().filter(|r| r.label == c).count())
                .collect();
            for (&c, &n) in categories.iter().zip(&counts) {
                if n == 0 {
                    warn!("sweep cell {} at {fraction}: no training pages, skipped", c.name());
                }
            }
            let f1s = if counts.iter().all(|&n| n == 0) {
                vec![None; categories.len()]
            } else {
                let cell_data = CaseData {
                    train: &subset,
                    ..*data
                };
                let (clf, _) = train_case::<T>(case, &cell_data, model, vocabulary, train)?;
                let report = evaluate_case(case, &clf, data.test)?.metrics;
                categories
                    .iter()
                    .zip(&counts)
                    .map(|(c, &n)| if n == 0 { None } else { report.f1_of(c.name()) })
                    .collect()
            };
            Ok(categories
                .iter()
                .zip(counts)
                .zip(f1s)
                .map(|((&category, train_pages), f1)| SweepCell {
                    category,
                    fraction,
                    train_pages,
                    f1,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        case,
        categories: categories.to_vec(),
        fractions: fractions.to_vec(),
        cells: rows.into_iter().flatten().collect(),
    })
}
