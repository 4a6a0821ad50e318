use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Category, CategoryTaxonomy, Level1, PageRecord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::bundle::ModelBundle;
use super::config::Target;

pub const LEVEL1_FILE: &str = "level1.json";
pub const LEVEL2_FILE: &str = "level2.json";

/// Chapter / non-chapter routing followed by a 12-way non-chapter classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalClassifier<T: Scalar> {
    pub level1: ModelBundle<T>,
    pub level2: ModelBundle<T>,
    pub taxonomy: CategoryTaxonomy,
}

/// One output line of `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub etd_id: String,
    pub page_number: u32,
    pub label: Category,
    pub level1_probs: Vec<f64>,
    /// `None` when the page was routed to `Chapters`.
    pub level2_probs: Option<Vec<f64>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Label from level-1 probabilities and, for non-chapter pages, level-2 probabilities.
pub fn route(taxonomy: &CategoryTaxonomy, level1: &[f64], level2: Option<&[f64]>) -> Result<Category> {
    if level1.len() != 2 {
        return Err(Error::Config(format!(
            "level-1 output has {} classes, expected 2",
            level1.len()
        )));
    }
    if argmax(level1) == Level1::Chapter.index() {
        return Ok(Category::Chapters);
    }
    let labels = taxonomy.level2_labels();
    let p = level2.ok_or_else(|| Error::Config("non-chapter page needs level-2 probabilities".into()))?;
    if p.len() != labels.len() {
        return Err(Error::Config(format!(
            "level-2 output has {} classes, expected {}",
            p.len(),
            labels.len()
        )));
    }
    Ok(labels[argmax(p)])
}

impl<T: Scalar> HierarchicalClassifier<T> {
    pub fn new(level1: ModelBundle<T>, level2: ModelBundle<T>) -> Result<Self> {
        let clf = Self {
            level1,
            level2,
            taxonomy: CategoryTaxonomy::new(),
        };
        clf.check()?;
        Ok(clf)
    }

    pub fn check(&self) -> Result<()> {
        for (name, bundle, target) in [
            ("level-1", &self.level1, Target::Level1),
            ("level-2", &self.level2, Target::Level2),
        ] {
            if bundle.num_classes() != target.num_classes() {
                return Err(Error::Config(format!(
                    "{name} bundle has {} classes, expected {}",
                    bundle.num_classes(),
                    target.num_classes()
                )));
            }
            bundle.check()?;
        }
        Ok(())
    }

    /// Predictions for `records`; level 2 only runs on pages level 1 sends to it.
    pub fn predict(&self, records: &[PageRecord]) -> Result<Vec<PredictionRecord>> {
        let p1 = self.level1.predict_records(records)?;
        let to_level2: Vec<usize> = (0..records.len())
            .filter(|&i| argmax(&row_f64(p1.row(i))) != Level1::Chapter.index())
            .collect();
        let subset: Vec<PageRecord> = to_level2.iter().map(|&i| records[i].clone()).collect();
        let p2 = self.level2.predict_records(&subset)?;
        let mut level2 = vec![None; records.len()];
        for (row, &i) in to_level2.iter().enumerate() {
            level2[i] = Some(row_f64(p2.row(row)));
        }
        records
            .iter()
            .zip(level2)
            .enumerate()
            .map(|(i, (r, l2))| {
                let l1 = row_f64(p1.row(i));
                Ok(PredictionRecord {
                    etd_id: r.etd_id.clone(),
                    page_number: r.page_number,
                    label: route(&self.taxonomy, &l1, l2.as_deref())?,
                    level1_probs: l1,
                    level2_probs: l2,
                })
            })
            .collect()
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.level1.save(&dir.join(LEVEL1_FILE))?;
        self.level2.save(&dir.join(LEVEL2_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let l1 = ModelBundle::load(&dir.join(LEVEL1_FILE))?;
        let l2 = ModelBundle::load(&dir.join(LEVEL2_FILE))?;
        Self::new(l1, l2)
    }
}

pub fn hierarchical_predict<T: Scalar>(
    records: &[PageRecord],
    classifier: &HierarchicalClassifier<T>,
) -> Result<Vec<PredictionRecord>> {
    classifier.predict(records)
}

pub(crate) fn row_f64<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> Vec<f64> {
    row.iter().map(|v| v.as_f64()).collect()
}
