use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{AttentionKind, Modality, ModelConfig};
use crate::scalar::Scalar;
use crate::train::TrainConfig;

use super::case::{evaluate_case, train_case, Case, CaseData};
use super::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Multi-head vs. talking-heads text encoder.
    Encoder,
    /// Image only, text only, both.
    Modality,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Experiment::Encoder),
            "modality" => Ok(Experiment::Modality),
            _ => Err(Error::Config(format!(
                "unknown experiment `{s}` (expected encoder or modality)"
            ))),
        }
    }

    /// Variant names and the model configs they train.
    pub fn variants(self, base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Experiment::Encoder => vec![
                ("multi_head", with(&|c| c.text.attention = AttentionKind::MultiHead)),
                (
                    "talking_heads",
                    with(&|c| c.text.attention = AttentionKind::TalkingHeads),
                ),
            ],
            Experiment::Modality => vec![
                ("image_only", with(&|c| c.modality = Modality::ImageOnly)),
                ("text_only", with(&|c| c.modality = Modality::TextOnly)),
                ("multimodal", with(&|c| c.modality = Modality::Both)),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub experiment: Experiment,
    pub case: Case,
    pub variants: Vec<VariantResult>,
}

impl AblationTable {
    pub fn variant(&self, name: &str) -> Option<&MetricsReport> {
        self.variants.iter().find(|v| v.name == name).map(|v| &v.metrics)
    }
}

/// Train and score every variant of `experiment` under `case`; variants run
/// in parallel and share the training seed.
pub fn run_ablation<T: Scalar>(
    experiment: Experiment,
    case: Case,
    data: &CaseData<'_>,
    model: &ModelConfig,
    vocabulary: &Vocabulary,
    train: &TrainConfig,
) -> Result<AblationTable> {
    let variants = experiment
        .variants(model)
        .into_par_iter()
        .map(|(name, cfg)| {
            let (clf, _) = train_case::<T>(case, data, &cfg, vocabulary, train)?;
            Ok(VariantResult {
                name: name.to_string(),
                metrics: evaluate_case(case, &clf, data.test)?.metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        experiment,
        case,
        variants,
    })
}
