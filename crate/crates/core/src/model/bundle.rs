use std::path::Path;

use image::GrayImage;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PageRecord, TokenFeatures, Vocabulary};
use crate::error::{shape_err, Error, Result};
use crate::neural::graph::Graph;
use crate::neural::kernels::{softmax, BnMode};
use crate::neural::params::{check_header, write_json, ParamStore};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::network::{
    check_layout, cross_attention, encode_image, encode_page, init_params, predict_logits, text_forward,
    vision_forward, EncodedPage, ModelInput,
};

pub const BUNDLE_VERSION: u32 = 1;

/// Pages per forward pass during inference.
pub const PREDICT_BATCH: usize = 32;

/// Everything needed to run one classifier: architecture, vocabulary,
/// learnable parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelBundle<T: Scalar> {
    pub version: u32,
    pub scalar: String,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(config: ModelConfig, vocabulary: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, buffers) = init_params(&config, vocabulary.len(), seed);
        Ok(Self {
            version: BUNDLE_VERSION,
            scalar: T::NAME.to_string(),
            config,
            vocabulary,
            params,
            buffers,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Parameter names and shapes must be exactly those the config implies.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        check_layout(&self.config, self.vocabulary.len(), &self.params, &self.buffers)
    }

    pub fn encode(&self, record: &PageRecord) -> EncodedPage<T> {
        encode_page(record, &self.vocabulary, &self.config)
    }

    pub fn encode_all(&self, records: &[PageRecord]) -> Vec<EncodedPage<T>> {
        records.par_iter().map(|r| self.encode(r)).collect()
    }

    /// Inference-mode probabilities `[N, K]`.
    pub fn predict_encoded(&self, pages: &[EncodedPage<T>]) -> Result<Array2<T>> {
        let logits = self.logits_encoded(pages)?;
        Ok(softmax(&logits.into_dyn(), 1).into_dimensionality().expect("rank 2"))
    }

    /// Inference-mode logits `[N, K]`, computed in parallel batches.
    pub fn logits_encoded(&self, pages: &[EncodedPage<T>]) -> Result<Array2<T>> {
        let k = self.num_classes();
        if pages.is_empty() {
            return Ok(Array2::zeros((0, k)));
        }
        let chunks: Vec<Array2<T>> = pages
            .par_chunks(PREDICT_BATCH)
            .map(|chunk| {
                let refs: Vec<&EncodedPage<T>> = chunk.iter().collect();
                let input = ModelInput::stack(&refs)?;
                predict_logits(&self.params, &self.buffers, &self.config, &input)
            })
            .collect::<Result<_>>()?;
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }

    pub fn predict_records(&self, records: &[PageRecord]) -> Result<Array2<T>> {
        self.predict_encoded(&self.encode_all(records))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        check_header(&bytes, BUNDLE_VERSION, T::NAME)?;
        let bundle: Self =
            serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("corrupt file {}: {e}", path.display())))?;
        bundle
            .check()
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Ok(bundle)
    }
}

pub fn save_bundle<T: Scalar>(bundle: &ModelBundle<T>, path: &Path) -> Result<()> {
    bundle.save(path)
}

pub fn load_bundle<T: Scalar>(path: &Path) -> Result<ModelBundle<T>> {
    ModelBundle::load(path)
}

/// Visual sequence `[B, gh * gw, C]` in inference mode.
pub fn vision_encode<T: Scalar>(images: &Array4<T>, bundle: &ModelBundle<T>) -> Result<Array3<T>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone().into_dyn());
    let mut bn = BnMode::Infer(&bundle.buffers);
    let y = vision_forward(&mut g, &bundle.params, &bundle.config.vision, x, &mut bn)?;
    Ok(g.value(y).clone().into_dimensionality().expect("rank 3"))
}

/// Text sequence `[1, L, d_model]` for one page.
pub fn text_encode<T: Scalar>(features: &TokenFeatures, bundle: &ModelBundle<T>) -> Result<Array3<T>> {
    let l = features.len();
    let ids = Array2::from_shape_fn((1, l), |(_, j)| features.input_word_ids[j] as usize);
    let types = Array2::from_shape_fn((1, l), |(_, j)| features.input_type_ids[j] as usize);
    let mask = Array2::from_shape_fn((1, l), |(_, j)| features.input_mask[j] == 1);
    let mut g = Graph::new();
    let y = text_forward(&mut g, &bundle.params, &bundle.config.text, &ids, &types, &mask)?;
    Ok(g.value(y).clone().into_dimensionality().expect("rank 3"))
}

/// Pooled text-to-image cross-attention `[B, P]` under `prefix` in `params`.
pub fn cross_attend<T: Scalar>(
    text_seq: &Array3<T>,
    text_mask: Option<&Array2<bool>>,
    visual_seq: &Array3<T>,
    params: &ParamStore<T>,
    prefix: &str,
    heads: usize,
) -> Result<Array2<T>> {
    if text_seq.dim().0 != visual_seq.dim().0 {
        return Err(shape_err!(
            "text batch {} and visual batch {} differ",
            text_seq.dim().0,
            visual_seq.dim().0
        ));
    }
    let mut g = Graph::new();
    let t = g.constant(text_seq.clone().into_dyn());
    let v = g.constant(visual_seq.clone().into_dyn());
    let c = cross_attention(&mut g, params, prefix, heads, (t, text_mask), (v, None))?;
    Ok(g.value(c).clone().into_dimensionality().expect("rank 2"))
}

/// Probability vector for one page.
pub fn fuse_and_classify<T: Scalar>(
    image: &GrayImage,
    features: &TokenFeatures,
    bundle: &ModelBundle<T>,
) -> Result<Array1<T>> {
    let page = EncodedPage {
        image: encode_image(image, bundle.config.vision.input_size),
        tokens: features.clone(),
    };
    let probs = bundle.predict_encoded(std::slice::from_ref(&page))?;
    Ok(probs.row(0).to_owned())
}
