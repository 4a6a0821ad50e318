use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{records_hash, Category, CategoryTaxonomy, Level1, PageRecord, Provenance, Vocabulary};
use crate::error::{Error, Result};
use crate::model::hierarchy::row_f64;
use crate::model::{argmax, HierarchicalClassifier, ModelBundle, ModelConfig, PredictionRecord, Target};
use crate::neural::OptimizerState;
use crate::rng::{derive_seed, tag};
use crate::scalar::Scalar;
use crate::train::{check_originals, train_hierarchical, train_model, TrainConfig, TrainHistory};

use super::metrics::{compute_metrics, MetricsReport};

/// The three evaluated configurations: one-level, two-level, two-level with
/// augmented level-2 training pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    A,
    B,
    C,
}

impl Case {
    pub const ALL: [Case; 3] = [Case::A, Case::B, Case::C];

    pub fn letter(self) -> &'static str {
        match self {
            Case::A => "a",
            Case::B => "b",
            Case::C => "c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Case::A),
            "b" => Ok(Case::B),
            "c" => Ok(Case::C),
            _ => Err(Error::Config(format!("unknown case `{s}` (expected a, b or c)"))),
        }
    }

    pub fn is_hierarchical(self) -> bool {
        self != Case::A
    }
}

/// Split data for one experiment. `augmented` pages only ever join training pools.
#[derive(Debug, Clone, Copy)]
pub struct CaseData<'a> {
    pub train: &'a [PageRecord],
    pub val: &'a [PageRecord],
    pub test: &'a [PageRecord],
    pub augmented: &'a [PageRecord],
}

impl CaseData<'_> {
    pub fn check(&self) -> Result<()> {
        check_originals(self.train)?;
        check_originals(self.val)?;
        check_originals(self.test)?;
        if let Some(r) = self.augmented.iter().find(|r| r.provenance != Provenance::Augmented) {
            return Err(Error::Config(format!(
                "record {}/{} in the augmented pool is not marked augmented",
                r.etd_id, r.page_number
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Classifier<T: Scalar> {
    OneLevel(ModelBundle<T>),
    Hierarchical(HierarchicalClassifier<T>),
}

impl<T: Scalar> Classifier<T> {
    /// Predictions in the JSON-lines schema. One-level probabilities are
    /// reported as `level1_probs` over all 13 categories.
    pub fn predict(&self, records: &[PageRecord]) -> Result<Vec<PredictionRecord>> {
        match self {
            Classifier::Hierarchical(h) => h.predict(records),
            Classifier::OneLevel(b) => {
                let p = b.predict_records(records)?;
                records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let probs = row_f64(p.row(i));
                        let label = Category::from_index(argmax(&probs))
                            .ok_or_else(|| Error::Config("one-level bundle must have 13 classes".into()))?;
                        Ok(PredictionRecord {
                            etd_id: r.etd_id.clone(),
                            page_number: r.page_number,
                            label,
                            level1_probs: probs,
                            level2_probs: None,
                        })
                    })
                    .collect()
            }
        }
    }
}

/// History and final optimizer state of one trained bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun<T: Scalar> {
    /// `one_level`, `level1` or `level2`.
    pub role: String,
    pub history: TrainHistory,
    pub optimizer: OptimizerState<T>,
}

/// Level seeds are derived from the master training seed.
pub fn level_configs(base: &TrainConfig) -> (TrainConfig, TrainConfig) {
    let l1 = TrainConfig {
        target: Target::Level1,
        seed: derive_seed(base.seed, &[tag("level1")]),
        ..base.clone()
    };
    let l2 = TrainConfig {
        target: Target::Level2,
        seed: derive_seed(base.seed, &[tag("level2")]),
        ..base.clone()
    };
    (l1, l2)
}

/// Train the classifier a case calls for.
pub fn train_case<T: Scalar>(
    case: Case,
    data: &CaseData<'_>,
    model: &ModelConfig,
    vocabulary: &Vocabulary,
    base: &TrainConfig,
) -> Result<(Classifier<T>, Vec<TrainedRun<T>>)> {
    data.check()?;
    info!("training case {}", case.letter());
    match case {
        Case::A => {
            let config = TrainConfig {
                target: Target::OneLevel,
                ..base.clone()
            };
            let cfg = ModelConfig {
                num_classes: Target::OneLevel.num_classes(),
                ..model.clone()
            };
            let bundle = ModelBundle::new(cfg, vocabulary.clone(), config.seed)?;
            let out = train_model(bundle, data.train, data.val, &config)?;
            let run = TrainedRun {
                role: "one_level".into(),
                history: out.history,
                optimizer: out.optimizer,
            };
            Ok((Classifier::OneLevel(out.bundle), vec![run]))
        }
        Case::B | Case::C => {
            let (c1, c2) = level_configs(base);
            let aug: &[PageRecord] = if case == Case::C { data.augmented } else { &[] };
            let out = train_hierarchical(model, vocabulary, data.train, data.val, aug, &c1, &c2)?;
            let runs = [("level1", out.level1), ("level2", out.level2)]
                .into_iter()
                .map(|(role, o)| TrainedRun {
                    role: role.into(),
                    history: o.history,
                    optimizer: o.optimizer,
                })
                .collect();
            Ok((Classifier::Hierarchical(out.classifier), runs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case: Case,
    pub metrics: MetricsReport,
    /// Hash of the test-set record keys; equal across cases of one run.
    pub test_hash: String,
    /// Pages whose label disagrees with the level-1 decision (always 0 for case a).
    pub routing_violations: usize,
}

/// Count pages where `label == Chapters` disagrees with the level-1 argmax.
pub fn routing_violations(predictions: &[PredictionRecord]) -> usize {
    predictions
        .iter()
        .filter(|p| {
            let chapter = argmax(&p.level1_probs) == Level1::Chapter.index();
            (p.label == Category::Chapters) != chapter || p.level2_probs.is_some() == chapter
        })
        .count()
}

/// Score a case's classifier on the (augmentation-free) test set.
pub fn evaluate_case<T: Scalar>(case: Case, classifier: &Classifier<T>, test: &[PageRecord]) -> Result<CaseEvaluation> {
    check_originals(test)?;
    match (case.is_hierarchical(), classifier) {
        (false, Classifier::OneLevel(_)) | (true, Classifier::Hierarchical(_)) => {}
        _ => {
            return Err(Error::Config(format!(
                "case {} needs a {} classifier",
                case.letter(),
                if case.is_hierarchical() {
                    "hierarchical"
                } else {
                    "one-level"
                }
            )))
        }
    }
    let predictions = classifier.predict(test)?;
    let violations = if case.is_hierarchical() {
        routing_violations(&predictions)
    } else {
        0
    };
    let truth: Vec<Category> = test.iter().map(|r| r.label).collect();
    let pred: Vec<Category> = predictions.iter().map(|p| p.label).collect();
    Ok(CaseEvaluation {
        case,
        metrics: compute_metrics(&truth, &pred, &CategoryTaxonomy::new())?,
        test_hash: records_hash(test),
        routing_violations: violations,
    })
}
