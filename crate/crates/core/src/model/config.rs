use serde::{Deserialize, Serialize};

use crate::corpus::{Category, CategoryTaxonomy, Level1};
use crate::error::{Error, Result};

/// Which streams feed the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Both,
    ImageOnly,
    TextOnly,
}

impl Modality {
    pub fn uses_image(self) -> bool {
        self != Modality::TextOnly
    }

    pub fn uses_text(self) -> bool {
        self != Modality::ImageOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    TalkingHeads,
    MultiHead,
}

/// Label space of one classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// All 13 categories.
    OneLevel,
    /// Chapter vs. non-chapter.
    Level1,
    /// The 12 non-chapter categories.
    Level2,
}

impl Target {
    pub fn num_classes(self) -> usize {
        match self {
            Target::OneLevel => Category::COUNT,
            Target::Level1 => 2,
            Target::Level2 => Category::COUNT - 1,
        }
    }

    /// Class index of `label`, or `None` when the label is outside this target
    /// (`Chapters` for level 2).
    pub fn class_of(self, label: Category) -> Option<usize> {
        match self {
            Target::OneLevel => Some(label.index()),
            Target::Level1 => Some(label.level1().index()),
            Target::Level2 => CategoryTaxonomy::new().level2_labels().iter().position(|&c| c == label),
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            Target::OneLevel => Category::ALL.iter().map(|c| c.name()).collect(),
            Target::Level1 => Level1::ALL.iter().map(|l| l.name()).collect(),
            Target::Level2 => CategoryTaxonomy::new()
                .level2_labels()
                .iter()
                .map(|c| c.name())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    /// Height and width the page image is resized to.
    pub input_size: (usize, usize),
    pub stem_channels: usize,
    /// Kernel size and stride of the patchifying stem convolution.
    pub stem_patch: usize,
    pub stages: Vec<StageConfig>,
    /// Pooled grid (height, width); the visual sequence has `h * w` entries.
    pub pool_grid: (usize, usize),
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            stem_channels: 16,
            stem_patch: 4,
            stages: vec![
                StageConfig {
                    channels: 16,
                    blocks: 2,
                    stride: 1,
                },
                StageConfig {
                    channels: 32,
                    blocks: 2,
                    stride: 2,
                },
                StageConfig {
                    channels: 64,
                    blocks: 2,
                    stride: 2,
                },
            ],
            pool_grid: (2, 2),
        }
    }
}

impl VisionConfig {
    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.channels)
    }

    pub fn seq_len(&self) -> usize {
        self.pool_grid.0 * self.pool_grid.1
    }

    /// Spatial size after the stem and every strided stage.
    pub fn feature_size(&self) -> (usize, usize) {
        let mut h = self.input_size.0 / self.stem_patch.max(1);
        let mut w = self.input_size.1 / self.stem_patch.max(1);
        for s in &self.stages {
            h = (h + s.stride - 1) / s.stride.max(1);
            w = (w + s.stride - 1) / s.stride.max(1);
        }
        (h, w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub seq_len: usize,
    pub attention: AttentionKind,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            seq_len: 128,
            attention: AttentionKind::TalkingHeads,
        }
    }
}

/// Architecture of one two-stream classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub projection_dim: usize,
    pub cross_heads: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub modality: Modality,
    /// Add a second cross-attention with image queries over text keys.
    pub bidirectional_cross_attention: bool,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            text: TextConfig::default(),
            projection_dim: 256,
            cross_heads: 4,
            dropout: 0.8,
            num_classes: Category::COUNT,
            modality: Modality::Both,
            bidirectional_cross_attention: false,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn for_target(target: Target) -> Self {
        Self {
            num_classes: target.num_classes(),
            ..Self::default()
        }
    }

    /// 224×224 input with wider encoders.
    pub fn full_scale(num_classes: usize) -> Self {
        Self {
            vision: VisionConfig {
                input_size: (224, 224),
                stem_channels: 64,
                stem_patch: 4,
                stages: vec![
                    StageConfig {
                        channels: 64,
                        blocks: 3,
                        stride: 1,
                    },
                    StageConfig {
                        channels: 128,
                        blocks: 4,
                        stride: 2,
                    },
                    StageConfig {
                        channels: 256,
                        blocks: 6,
                        stride: 2,
                    },
                    StageConfig {
                        channels: 512,
                        blocks: 3,
                        stride: 2,
                    },
                ],
                pool_grid: (7, 7),
            },
            text: TextConfig {
                d_model: 768,
                layers: 12,
                heads: 12,
                ffn_dim: 3072,
                seq_len: 512,
                attention: AttentionKind::TalkingHeads,
            },
            num_classes,
            ..Self::default()
        }
    }

    /// Toy dimensions (16×16 input, one residual stage, one text layer) for
    /// smoke runs and tests.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            vision: VisionConfig {
                input_size: (16, 16),
                stem_channels: 4,
                stem_patch: 4,
                stages: vec![StageConfig {
                    channels: 4,
                    blocks: 1,
                    stride: 1,
                }],
                pool_grid: (2, 2),
            },
            text: TextConfig {
                d_model: 8,
                layers: 1,
                heads: 2,
                ffn_dim: 16,
                seq_len: 16,
                attention: AttentionKind::TalkingHeads,
            },
            projection_dim: 8,
            cross_heads: 2,
            num_classes,
            ..Self::default()
        }
    }

    /// Width of the vector fed to the head.
    pub fn head_input_dim(&self) -> usize {
        match self.modality {
            Modality::ImageOnly | Modality::TextOnly => self.projection_dim,
            Modality::Both => {
                let cross = if self.bidirectional_cross_attention { 2 } else { 1 };
                self.projection_dim * (2 + cross)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let v = &self.vision;
        if v.input_size.0 == 0 || v.input_size.1 == 0 || v.stem_patch == 0 || v.stem_channels == 0 {
            return bad(format!(
                "vision input {:?} / stem {} invalid",
                v.input_size, v.stem_patch
            ));
        }
        if v.stages
            .iter()
            .any(|s| s.channels == 0 || s.blocks == 0 || s.stride == 0)
        {
            return bad("every vision stage needs channels, blocks and stride >= 1".into());
        }
        let (fh, fw) = v.feature_size();
        if v.pool_grid.0 == 0 || v.pool_grid.1 == 0 || fh < v.pool_grid.0 || fw < v.pool_grid.1 {
            return bad(format!(
                "pool grid {:?} larger than the {fh}x{fw} feature map",
                v.pool_grid
            ));
        }
        let t = &self.text;
        if t.heads == 0 || !t.d_model.is_multiple_of(t.heads) || t.layers == 0 || t.ffn_dim == 0 {
            return bad(format!(
                "text d_model {} not divisible into {} heads",
                t.d_model, t.heads
            ));
        }
        if t.seq_len < 3 {
            return bad(format!("text sequence length {} < 3", t.seq_len));
        }
        if self.cross_heads == 0 || !self.projection_dim.is_multiple_of(self.cross_heads) {
            return bad(format!(
                "projection dim {} not divisible into {} cross-attention heads",
                self.projection_dim, self.cross_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("batch-norm momentum {} outside [0, 1]", self.bn_momentum));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }
}
