//! The two-stream network: parameter layout, input encoding and the forward pass.

use image::imageops::{self, FilterType};
use image::GrayImage;
use ndarray::{Array2, Array4, Axis};

use crate::corpus::{tokenize, PageRecord, TokenFeatures, Vocabulary};
use crate::error::{shape_err, Error, Result};
use crate::neural::graph::{BatchStats, Conv2dSpec, Graph, Var};
use crate::neural::kernels::{
    attention_layer, batch_norm_layer, dense_layer, dropout_layer, gated_gelu_layer, init_attention, init_batch_norm,
    init_dense, init_ffn, init_layer_norm, init_preact_block, layer_norm_layer, preact_block_layer, BnMode,
};
use crate::neural::params::{fan_in_normal, normal, ParamStore};
use crate::rng::{rng_from, tag, Rng};
use crate::scalar::Scalar;

use super::config::{AttentionKind, ModelConfig, TextConfig, VisionConfig};

const EMBEDDING_STD: f64 = 0.1;
const TYPE_VOCAB: usize = 2;

/// A page resized and tokenized for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPage<T> {
    /// `[H, W]` intensities scaled to `[0, 1]`.
    pub image: Array2<T>,
    pub tokens: TokenFeatures,
}

/// Resize (triangle filter) when needed and scale to `[0, 1]`.
pub fn encode_image<T: Scalar>(img: &GrayImage, size: (usize, usize)) -> Array2<T> {
    let (h, w) = size;
    let resized;
    let src = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        resized = imageops::resize(img, w as u32, h as u32, FilterType::Triangle);
        &resized
    };
    let scale = T::of(1.0 / 255.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        T::of(src.get_pixel(x as u32, y as u32).0[0] as f64) * scale
    })
}

pub fn encode_page<T: Scalar>(record: &PageRecord, vocab: &Vocabulary, config: &ModelConfig) -> EncodedPage<T> {
    EncodedPage {
        image: encode_image(&record.image, config.vision.input_size),
        tokens: tokenize(&record.full_text, vocab, config.text.seq_len),
    }
}

/// A stacked batch. Token arrays are trimmed to the longest unmasked prefix
/// in the batch; padded positions never influence the outputs, so trimming
/// does not change any result.
#[derive(Debug, Clone)]
pub struct ModelInput<T> {
    pub images: Array4<T>,
    pub word_ids: Array2<usize>,
    pub type_ids: Array2<usize>,
    pub mask: Array2<bool>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn stack(pages: &[&EncodedPage<T>]) -> Result<Self> {
        let first = pages.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (h, w) = first.image.dim();
        let full = first.tokens.len();
        let mut len = 1;
        for p in pages {
            if p.image.dim() != (h, w) || p.tokens.len() != full {
                return Err(shape_err!(
                    "pages in one batch must share image size and sequence length"
                ));
            }
            let valid = p.tokens.input_mask.iter().rposition(|&m| m == 1).map_or(0, |i| i + 1);
            len = len.max(valid);
        }
        let b = pages.len();
        let mut images = Array4::zeros((b, 1, h, w));
        for (i, p) in pages.iter().enumerate() {
            images.slice_mut(ndarray::s![i, 0, .., ..]).assign(&p.image);
        }
        let word_ids = Array2::from_shape_fn((b, len), |(i, j)| pages[i].tokens.input_word_ids[j] as usize);
        let type_ids = Array2::from_shape_fn((b, len), |(i, j)| pages[i].tokens.input_type_ids[j] as usize);
        let mask = Array2::from_shape_fn((b, len), |(i, j)| pages[i].tokens.input_mask[j] == 1);
        Ok(Self {
            images,
            word_ids,
            type_ids,
            mask,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.images.dim().0
    }
}

/// Fresh parameters and batch-norm buffers for `config`.
pub fn init_params<T: Scalar>(config: &ModelConfig, vocab_size: usize, seed: u64) -> (ParamStore<T>, ParamStore<T>) {
    let mut p = ParamStore::new();
    let mut b = ParamStore::new();
    let pd = config.projection_dim;
    if config.modality.uses_image() {
        let mut rng = rng_from(seed, &[tag("vision")]);
        init_vision(&mut p, &mut b, &config.vision, &mut rng);
        init_dense(
            &mut p,
            "fusion.visual_proj",
            config.vision.out_channels(),
            pd,
            true,
            &mut rng,
        );
    }
    if config.modality.uses_text() {
        let mut rng = rng_from(seed, &[tag("text")]);
        init_text(&mut p, &config.text, vocab_size, &mut rng);
        init_dense(&mut p, "fusion.text_proj", config.text.d_model, pd, true, &mut rng);
    }
    let mut rng = rng_from(seed, &[tag("fusion")]);
    if config.modality.uses_image() && config.modality.uses_text() {
        let (dt, dv) = (config.text.d_model, config.vision.out_channels());
        init_cross(&mut p, "fusion.cross", dt, dv, pd, &mut rng);
        if config.bidirectional_cross_attention {
            init_cross(&mut p, "fusion.cross_rev", dv, dt, pd, &mut rng);
        }
    }
    init_dense(
        &mut p,
        "head",
        config.head_input_dim(),
        config.num_classes,
        true,
        &mut rng,
    );
    (p, b)
}

fn init_vision<T: Scalar>(p: &mut ParamStore<T>, b: &mut ParamStore<T>, cfg: &VisionConfig, rng: &mut Rng) {
    let k = cfg.stem_patch;
    p.insert(
        "vision.stem.w",
        fan_in_normal(&[cfg.stem_channels, 1, k, k], k * k, 2.0, rng),
    );
    let mut c_in = cfg.stem_channels;
    for (si, stage) in cfg.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            init_preact_block(p, b, &block_name(si, bi), c_in, stage.channels, stride, rng);
            c_in = stage.channels;
        }
    }
    init_batch_norm(p, b, "vision.final_bn", c_in);
}

fn init_text<T: Scalar>(p: &mut ParamStore<T>, cfg: &TextConfig, vocab_size: usize, rng: &mut Rng) {
    let d = cfg.d_model;
    p.insert("text.word_emb", normal(&[vocab_size, d], EMBEDDING_STD, rng));
    p.insert("text.pos_emb", normal(&[cfg.seq_len, d], EMBEDDING_STD, rng));
    p.insert("text.type_emb", normal(&[TYPE_VOCAB, d], EMBEDDING_STD, rng));
    let talking = cfg.attention == AttentionKind::TalkingHeads;
    for l in 0..cfg.layers {
        let pre = format!("text.layer{l}");
        init_attention(p, &format!("{pre}.attn"), d, cfg.heads, d / cfg.heads, talking, rng);
        init_layer_norm(p, &format!("{pre}.ln1"), d);
        init_ffn(p, &format!("{pre}.ffn"), d, cfg.ffn_dim, rng);
        init_layer_norm(p, &format!("{pre}.ln2"), d);
    }
}

fn init_cross<T: Scalar>(
    p: &mut ParamStore<T>,
    prefix: &str,
    d_query: usize,
    d_kv: usize,
    width: usize,
    rng: &mut Rng,
) {
    p.insert(
        format!("{prefix}.wq"),
        fan_in_normal(&[d_query, width], d_query, 1.0, rng),
    );
    p.insert(format!("{prefix}.wk"), fan_in_normal(&[d_kv, width], d_kv, 1.0, rng));
    p.insert(format!("{prefix}.wv"), fan_in_normal(&[d_kv, width], d_kv, 1.0, rng));
    p.insert(format!("{prefix}.wo"), fan_in_normal(&[width, width], width, 1.0, rng));
}

fn block_name(stage: usize, block: usize) -> String {
    format!("vision.stage{stage}.block{block}")
}

/// Image stream: `[B, 1, H, W]` -> visual sequence `[B, gh * gw, C]`.
pub fn vision_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &VisionConfig,
    images: Var,
    bn: &mut BnMode<'_, T>,
) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != cfg.input_size {
        return Err(shape_err!(
            "image batch {:?} does not match the configured input {:?}",
            s,
            cfg.input_size
        ));
    }
    let stem = g.param_from(params, "vision.stem.w")?;
    let mut x = g.conv2d(
        images,
        stem,
        Conv2dSpec {
            stride: cfg.stem_patch,
            padding: 0,
        },
    )?;
    for (si, stage) in cfg.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            x = preact_block_layer(g, params, &block_name(si, bi), x, stride, bn)?;
        }
    }
    let x = batch_norm_layer(g, params, "vision.final_bn", x, bn)?;
    let x = g.relu(x);
    let (gh, gw) = cfg.pool_grid;
    let x = g.adaptive_avg_pool(x, gh, gw)?;
    let c = g.shape(x)[1];
    let x = g.reshape(x, &[s[0], c, gh * gw])?;
    g.permute(x, &[0, 2, 1])
}

/// Text stream: token ids `[B, L]` -> sequence `[B, L, d_model]`, post-norm layers.
pub fn text_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &TextConfig,
    word_ids: &Array2<usize>,
    type_ids: &Array2<usize>,
    mask: &Array2<bool>,
) -> Result<Var> {
    let (b, l) = word_ids.dim();
    if l > cfg.seq_len || type_ids.dim() != (b, l) || mask.dim() != (b, l) {
        return Err(shape_err!(
            "token batch {:?} for sequence length {}",
            word_ids.dim(),
            cfg.seq_len
        ));
    }
    let vocab = params.get("text.word_emb")?.shape()[0];
    if let Some(&bad) = word_ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Input(format!(
            "token id {bad} outside the vocabulary of {vocab}"
        )));
    }
    if let Some(&bad) = type_ids.iter().find(|&&id| id >= TYPE_VOCAB) {
        return Err(Error::Input(format!("type id {bad} outside 0..{TYPE_VOCAB}")));
    }
    let words = g.param_from(params, "text.word_emb")?;
    let pos = g.param_from(params, "text.pos_emb")?;
    let types = g.param_from(params, "text.type_emb")?;
    let e = g.embedding(words, word_ids.clone())?;
    let p = g.embedding(pos, Array2::from_shape_fn((b, l), |(_, j)| j))?;
    let t = g.embedding(types, type_ids.clone())?;
    let x = g.add(e, p)?;
    let mut x = g.add(x, t)?;
    for layer in 0..cfg.layers {
        let pre = format!("text.layer{layer}");
        let a = attention_layer(g, params, &format!("{pre}.attn"), cfg.heads, x, (x, x), Some(mask))?;
        let h = g.add(x, a.output)?;
        let h = layer_norm_layer(g, params, &format!("{pre}.ln1"), h)?;
        let f = gated_gelu_layer(g, params, &format!("{pre}.ffn"), h)?;
        let h2 = g.add(h, f)?;
        x = layer_norm_layer(g, params, &format!("{pre}.ln2"), h2)?;
    }
    Ok(x)
}

/// Pooling weights `[B, L]`: uniform over valid positions.
fn pooling_weights<T: Scalar>(mask: Option<&Array2<bool>>, b: usize, l: usize) -> Array2<T> {
    match mask {
        Some(m) => {
            let mut w = Array2::zeros((b, l));
            for (i, row) in m.axis_iter(Axis(0)).enumerate() {
                let n = row.iter().filter(|&&v| v).count().max(1);
                for (j, &v) in row.iter().enumerate() {
                    if v {
                        w[[i, j]] = T::of(1.0 / n as f64);
                    }
                }
            }
            w
        }
        None => Array2::from_elem((b, l), T::of(1.0 / l as f64)),
    }
}

/// Queries from one sequence attend over keys/values of the other; the
/// output sequence is mean-pooled over the valid query positions.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    queries: (Var, Option<&Array2<bool>>),
    keys: (Var, Option<&Array2<bool>>),
) -> Result<Var> {
    let (q, q_mask) = queries;
    let (kv, kv_mask) = keys;
    let out = attention_layer(g, params, prefix, heads, q, (kv, kv), kv_mask)?;
    let s = g.shape(out.output).to_vec();
    let w = pooling_weights(q_mask, s[0], s[1]);
    g.weighted_sum(out.output, w)
}

/// Logits plus the batch statistics gathered in training mode.
pub struct NetworkOutput<T> {
    pub logits: Var,
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

/// Full forward pass. `train` supplies the dropout stream and switches batch
/// norm to batch statistics; `None` is inference mode.
pub fn network_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    buffers: &ParamStore<T>,
    config: &ModelConfig,
    input: &ModelInput<T>,
    mut train: Option<&mut Rng>,
) -> Result<NetworkOutput<T>> {
    let mut stats = Vec::new();
    let mut parts = Vec::new();
    let mut visual = None;
    let mut text = None;
    if config.modality.uses_image() {
        let images = g.constant(input.images.clone().into_dyn());
        let mut bn = if train.is_some() {
            BnMode::Train(&mut stats)
        } else {
            BnMode::Infer(buffers)
        };
        let seq = vision_forward(g, params, &config.vision, images, &mut bn)?;
        let pooled = g.mean_axis(seq, 1)?;
        let proj = dense_layer(g, params, "fusion.visual_proj", pooled)?;
        parts.push(dropout_layer(g, proj, config.dropout, train.as_deref_mut())?);
        visual = Some(seq);
    }
    if config.modality.uses_text() {
        let seq = text_forward(g, params, &config.text, &input.word_ids, &input.type_ids, &input.mask)?;
        let cls = g.select(seq, 1, 0)?;
        let proj = dense_layer(g, params, "fusion.text_proj", cls)?;
        parts.push(dropout_layer(g, proj, config.dropout, train)?);
        text = Some(seq);
    }
    if let (Some(v), Some(t)) = (visual, text) {
        let heads = config.cross_heads;
        let c = cross_attention(g, params, "fusion.cross", heads, (t, Some(&input.mask)), (v, None))?;
        parts.push(c);
        if config.bidirectional_cross_attention {
            let r = cross_attention(g, params, "fusion.cross_rev", heads, (v, None), (t, Some(&input.mask)))?;
            parts.push(r);
        }
    }
    let fused = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
    let logits = dense_layer(g, params, "head", fused)?;
    Ok(NetworkOutput {
        logits,
        bn_stats: stats,
    })
}

/// Inference-mode logits `[B, K]`.
pub fn predict_logits<T: Scalar>(
    params: &ParamStore<T>,
    buffers: &ParamStore<T>,
    config: &ModelConfig,
    input: &ModelInput<T>,
) -> Result<Array2<T>> {
    let mut g = Graph::new();
    let out = network_forward(&mut g, params, buffers, config, input, None)?;
    Ok(g.value(out.logits).clone().into_dimensionality().expect("rank 2"))
}

/// Check that `params` and `buffers` have exactly the names and shapes `config` implies.
pub fn check_layout<T: Scalar>(
    config: &ModelConfig,
    vocab_size: usize,
    params: &ParamStore<T>,
    buffers: &ParamStore<T>,
) -> Result<()> {
    let (p0, b0) = init_params::<T>(config, vocab_size, 0);
    for (what, want, have) in [("parameter", &p0, params), ("buffer", &b0, buffers)] {
        for (name, v) in want.iter() {
            let got = have
                .get(name)
                .map_err(|_| Error::Config(format!("{what} `{name}` missing for this configuration")))?;
            if got.shape() != v.shape() {
                return Err(Error::Config(format!(
                    "{what} `{name}` has shape {:?}, configuration implies {:?}",
                    got.shape(),
                    v.shape()
                )));
            }
        }
        if let Some(extra) = have.names().find(|n| !want.contains(n)) {
            return Err(Error::Config(format!("unexpected {what} `{extra}`")));
        }
    }
    Ok(())
}
