//! Layers built on the tape: attention (multi-head and talking-heads), the
//! gated-GELU feed-forward, pre-activation residual blocks, batch norm,
//! dropout and dense layers. Each has a graph form used by the model and a
//! plain-array form for direct evaluation.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::graph::{BatchStats, Conv2dSpec, Graph, Var};
use super::params::{fan_in_normal, ones, zeros, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

/// Softmax along `axis` with max subtraction.
pub fn softmax<T: Scalar>(x: &ArrayD<T>, axis: usize) -> ArrayD<T> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let z = lane.sum();
        lane.mapv_inplace(|v| v / z);
    }
    out
}

/// Mean focal loss over a batch of logits `[B, K]`.
pub fn focal_loss<T: Scalar>(logits: &Array2<T>, labels: &[usize], gamma: f64) -> Result<T> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let mut g = Graph::new();
    let z = g.constant(logits.clone().into_dyn());
    let loss = g.focal_loss(z, labels, gamma)?;
    Ok(g.value(loss)[[]])
}

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

// ---------------------------------------------------------------- attention

/// Projections of one attention layer. Mixing matrices present means
/// talking-heads: `p_logit` is `[h_k, h]`, `p_weight` is `[h, h_v]`.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub heads: usize,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_out: Array2<T>,
    pub p_logit: Option<Array2<T>>,
    pub p_weight: Option<Array2<T>>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn to_store(&self, prefix: &str) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert(name(prefix, "wq"), self.w_q.clone().into_dyn());
        s.insert(name(prefix, "wk"), self.w_k.clone().into_dyn());
        s.insert(name(prefix, "wv"), self.w_v.clone().into_dyn());
        s.insert(name(prefix, "wo"), self.w_out.clone().into_dyn());
        if let Some(p) = &self.p_logit {
            s.insert(name(prefix, "p_logit"), p.clone().into_dyn());
        }
        if let Some(p) = &self.p_weight {
            s.insert(name(prefix, "p_weight"), p.clone().into_dyn());
        }
        s
    }
}

/// Output sequence plus the post-softmax (pre-mixing) weight maps `[B, h, L_q, L_k]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub output: Var,
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionResult<T> {
    pub output: Array3<T>,
    pub weights: Array4<T>,
}

/// Heads are taken from the mixing matrices when `{prefix}.p_logit` exists,
/// otherwise `heads` is used for queries, keys and values alike.
pub fn attention_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    q_in: Var,
    kv_in: (Var, Var),
    key_mask: Option<&Array2<bool>>,
) -> Result<AttentionVars> {
    let (k_in, v_in) = kv_in;
    let wq = g.param_from(store, &name(prefix, "wq"))?;
    let wk = g.param_from(store, &name(prefix, "wk"))?;
    let wv = g.param_from(store, &name(prefix, "wv"))?;
    let wo = g.param_from(store, &name(prefix, "wo"))?;
    let mixing = if store.contains(&name(prefix, "p_logit")) {
        let pl = g.param_from(store, &name(prefix, "p_logit"))?;
        let pw = g.param_from(store, &name(prefix, "p_weight"))?;
        Some((pl, pw))
    } else {
        None
    };
    let (hk, h, hv) = match mixing {
        Some((pl, pw)) => {
            let (a, b) = (g.shape(pl).to_vec(), g.shape(pw).to_vec());
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(shape_err!("mixing matrices {:?} and {:?} do not chain", a, b));
            }
            (a[0], a[1], b[1])
        }
        None => (heads, heads, heads),
    };
    if hk == 0 || h == 0 || hv == 0 {
        return Err(shape_err!("attention needs at least one head"));
    }
    let (qs, ks, vs) = (g.shape(q_in).to_vec(), g.shape(k_in).to_vec(), g.shape(v_in).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || ks[..2] != vs[..2] {
        return Err(shape_err!("attention inputs q {:?}, k {:?}, v {:?}", qs, ks, vs));
    }
    let (b, lq, lk) = (qs[0], qs[1], ks[1]);
    let q = g.linear(q_in, wq)?;
    let k = g.linear(k_in, wk)?;
    let v = g.linear(v_in, wv)?;
    let (qw, kw, vw) = (g.shape(q)[2], g.shape(k)[2], g.shape(v)[2]);
    if qw != kw || qw % hk != 0 || vw % hv != 0 {
        return Err(shape_err!(
            "projection widths q={qw}, k={kw}, v={vw} do not split into {hk}/{hv} heads"
        ));
    }
    let dk = qw / hk;
    let q = split_heads(g, q, hk)?;
    let k = split_heads(g, k, hk)?;
    let logits = g.batch_matmul(q, k, true)?;
    let logits = g.reshape(logits, &[b, hk, lq, lk])?;
    let logits = match mixing {
        Some((pl, _)) => mix_heads(g, logits, pl)?,
        None => logits,
    };
    let logits = g.scale(logits, T::of(1.0 / (dk as f64).sqrt()));
    let weights = g.softmax(logits, key_mask.cloned())?;
    let mixed = match mixing {
        Some((_, pw)) => mix_heads(g, weights, pw)?,
        None => weights,
    };
    let mixed = g.reshape(mixed, &[b * hv, lq, lk])?;
    let v = split_heads(g, v, hv)?;
    let out = g.batch_matmul(mixed, v, false)?;
    let out = merge_heads(g, out, b, hv)?;
    let output = g.linear(out, wo)?;
    Ok(AttentionVars { output, weights })
}

/// `[B, L, h*d]` -> `[B*h, L, d]`.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], s[1], h, s[2] / h])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[s[0] * h, s[1], s[2] / h])
}

/// `[B*h, L, d]` -> `[B, L, h*d]`.
fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, h: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[b, h, s[1], s[2]])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, s[1], h * s[2]])
}

/// Mix `[B, h1, Lq, Lk]` across the head axis with `p: [h1, h2]`.
fn mix_heads<T: Scalar>(g: &mut Graph<T>, x: Var, p: Var) -> Result<Var> {
    let h1 = g.shape(x)[1];
    if g.shape(p)[0] != h1 {
        return Err(shape_err!("mixing matrix {:?} for {h1} heads", g.shape(p)));
    }
    let x = g.permute(x, &[0, 2, 3, 1])?;
    let x = g.linear(x, p)?;
    g.permute(x, &[0, 3, 1, 2])
}

fn eval_attention<T: Scalar>(
    q_in: &Array3<T>,
    k_in: &Array3<T>,
    v_in: &Array3<T>,
    params: &AttentionParams<T>,
    key_mask: Option<&Array2<bool>>,
) -> Result<AttentionResult<T>> {
    let store = params.to_store("attn");
    let mut g = Graph::new();
    let q = g.constant(q_in.clone().into_dyn());
    let k = g.constant(k_in.clone().into_dyn());
    let v = g.constant(v_in.clone().into_dyn());
    let out = attention_layer(&mut g, &store, "attn", params.heads, q, (k, v), key_mask)?;
    Ok(AttentionResult {
        output: g.value(out.output).clone().into_dimensionality().expect("rank 3"),
        weights: g.value(out.weights).clone().into_dimensionality().expect("rank 4"),
    })
}

/// Standard multi-head attention over `[B, L, d]` inputs; `key_mask` is
/// `[B, L_k]` with `true` for valid keys. Mixing matrices are ignored.
pub fn multi_head_attention<T: Scalar>(
    q_in: &Array3<T>,
    k_in: &Array3<T>,
    v_in: &Array3<T>,
    params: &AttentionParams<T>,
    key_mask: Option<&Array2<bool>>,
) -> Result<AttentionResult<T>> {
    let plain = AttentionParams {
        p_logit: None,
        p_weight: None,
        ..params.clone()
    };
    eval_attention(q_in, k_in, v_in, &plain, key_mask)
}

/// Talking-heads attention; both mixing matrices are required.
pub fn talking_heads_attention<T: Scalar>(
    q_in: &Array3<T>,
    k_in: &Array3<T>,
    v_in: &Array3<T>,
    params: &AttentionParams<T>,
    key_mask: Option<&Array2<bool>>,
) -> Result<AttentionResult<T>> {
    if params.p_logit.is_none() || params.p_weight.is_none() {
        return Err(shape_err!("talking-heads attention needs both mixing matrices"));
    }
    eval_attention(q_in, k_in, v_in, params, key_mask)
}

/// Random attention parameters with `heads` heads of width `d_head`.
/// Talking-heads layers start with identity mixing.
pub fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_model: usize,
    heads: usize,
    d_head: usize,
    talking_heads: bool,
    rng: &mut Rng,
) {
    let width = heads * d_head;
    for leaf in ["wq", "wk", "wv"] {
        store.insert(name(prefix, leaf), fan_in_normal(&[d_model, width], d_model, 1.0, rng));
    }
    store.insert(name(prefix, "wo"), fan_in_normal(&[width, d_model], width, 1.0, rng));
    if talking_heads {
        let eye = Array2::<T>::eye(heads).into_dyn();
        store.insert(name(prefix, "p_logit"), eye.clone());
        store.insert(name(prefix, "p_weight"), eye);
    }
}

// ------------------------------------------------------------- feed-forward

#[derive(Debug, Clone)]
pub struct FfnParams<T: Scalar> {
    pub w_in: Array2<T>,
    pub w_gate: Array2<T>,
    pub w_out: Array2<T>,
}

impl<T: Scalar> FfnParams<T> {
    pub fn to_store(&self, prefix: &str) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert(name(prefix, "w_in"), self.w_in.clone().into_dyn());
        s.insert(name(prefix, "w_gate"), self.w_gate.clone().into_dyn());
        s.insert(name(prefix, "w_out"), self.w_out.clone().into_dyn());
        s
    }
}

/// `(GELU(x W_in) ⊙ (x W_gate)) W_out`, no biases.
pub fn gated_gelu_layer<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w_in = g.param_from(store, &name(prefix, "w_in"))?;
    let w_gate = g.param_from(store, &name(prefix, "w_gate"))?;
    let w_out = g.param_from(store, &name(prefix, "w_out"))?;
    let a = g.linear(x, w_in)?;
    let a = g.gelu(a);
    let b = g.linear(x, w_gate)?;
    let h = g.mul(a, b)?;
    g.linear(h, w_out)
}

pub fn gated_gelu_ffn<T: Scalar>(x: &ArrayD<T>, params: &FfnParams<T>) -> Result<ArrayD<T>> {
    let store = params.to_store("ffn");
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = gated_gelu_layer(&mut g, &store, "ffn", xv)?;
    Ok(g.value(y).clone())
}

pub fn init_ffn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d_model: usize, d_ff: usize, rng: &mut Rng) {
    store.insert(name(prefix, "w_in"), fan_in_normal(&[d_model, d_ff], d_model, 2.0, rng));
    store.insert(
        name(prefix, "w_gate"),
        fan_in_normal(&[d_model, d_ff], d_model, 1.0, rng),
    );
    store.insert(name(prefix, "w_out"), fan_in_normal(&[d_ff, d_model], d_ff, 1.0, rng));
}

// ------------------------------------------------------------ normalization

/// Batch norm either collects batch statistics (training) or reads running
/// statistics from a buffer store (inference).
pub enum BnMode<'a, T: Scalar> {
    Train(&'a mut Vec<(String, BatchStats<T>)>),
    Infer(&'a ParamStore<T>),
}

impl<T: Scalar> BnMode<'_, T> {
    pub fn is_training(&self) -> bool {
        matches!(self, BnMode::Train(_))
    }
}

pub fn batch_norm_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    mode: &mut BnMode<'_, T>,
) -> Result<Var> {
    let gamma = g.param_from(store, &name(prefix, "gamma"))?;
    let beta = g.param_from(store, &name(prefix, "beta"))?;
    match mode {
        BnMode::Train(stats) => {
            let (y, s) = g.batch_norm(x, gamma, beta, None, BN_EPS)?;
            stats.push((prefix.to_string(), s.expect("training mode yields stats")));
            Ok(y)
        }
        BnMode::Infer(buffers) => {
            let as1 = |a: &ArrayD<T>| -> Result<Array1<T>> {
                a.clone()
                    .into_dimensionality()
                    .map_err(|_| shape_err!("running statistic of {prefix} is not a vector"))
            };
            let m = as1(buffers.get(&name(prefix, "running_mean"))?)?;
            let v = as1(buffers.get(&name(prefix, "running_var"))?)?;
            Ok(g.batch_norm(x, gamma, beta, Some((&m, &v)), BN_EPS)?.0)
        }
    }
}

pub fn init_batch_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    buffers: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
) {
    store.insert(name(prefix, "gamma"), ones(&[channels]));
    store.insert(name(prefix, "beta"), zeros(&[channels]));
    buffers.insert(name(prefix, "running_mean"), zeros(&[channels]));
    buffers.insert(name(prefix, "running_var"), ones(&[channels]));
}

/// Exponential moving average of the running statistics:
/// `running = (1 - momentum) running + momentum batch`.
pub fn update_running_stats<T: Scalar>(
    buffers: &mut ParamStore<T>,
    stats: &[(String, BatchStats<T>)],
    momentum: f64,
) -> Result<()> {
    let mo = T::of(momentum);
    for (prefix, s) in stats {
        for (leaf, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let r = buffers.get_mut(&name(prefix, leaf))?;
            ndarray::Zip::from(r).and(batch.view().into_dyn()).for_each(|r, &b| {
                *r = (T::one() - mo) * *r + mo * b;
            });
        }
    }
    Ok(())
}

pub fn layer_norm_layer<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param_from(store, &name(prefix, "gamma"))?;
    let beta = g.param_from(store, &name(prefix, "beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.insert(name(prefix, "gamma"), ones(&[d]));
    store.insert(name(prefix, "beta"), zeros(&[d]));
}

// ------------------------------------------------------------ residual block

/// `x + conv2(relu(bn2(conv1(relu(bn1(x))))))`. When `{prefix}.proj` exists the
/// shortcut is a strided 1×1 convolution of the pre-activated input.
pub fn preact_block_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    mode: &mut BnMode<'_, T>,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(shape_err!("residual block input {:?} is not [N, C, H, W]", xs));
    }
    if stride == 0 || xs[2] < stride || xs[3] < stride {
        return Err(shape_err!(
            "{}x{} feature map too small for stride {stride}",
            xs[2],
            xs[3]
        ));
    }
    let conv = |g: &mut Graph<T>, input: Var, leaf: &str, stride: usize| -> Result<Var> {
        let w = g.param_from(store, &name(prefix, leaf))?;
        let k = g.shape(w)[2];
        g.conv2d(input, w, Conv2dSpec { stride, padding: k / 2 })
    };
    let a = batch_norm_layer(g, store, &name(prefix, "bn1"), x, mode)?;
    let a = g.relu(a);
    let h = conv(g, a, "conv1", stride)?;
    let h = batch_norm_layer(g, store, &name(prefix, "bn2"), h, mode)?;
    let h = g.relu(h);
    let h = conv(g, h, "conv2", 1)?;
    let shortcut = if store.contains(&name(prefix, "proj")) {
        conv(g, a, "proj", stride)?
    } else {
        if stride != 1 || g.shape(h) != xs.as_slice() {
            return Err(shape_err!(
                "identity shortcut cannot map {:?} to {:?}; a projection is required",
                xs,
                g.shape(h)
            ));
        }
        x
    };
    g.add(shortcut, h)
}

/// Parameters for one block; the second convolution starts at zero so the
/// block starts as its shortcut.
pub fn init_preact_block<T: Scalar>(
    store: &mut ParamStore<T>,
    buffers: &mut ParamStore<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    rng: &mut Rng,
) {
    init_batch_norm(store, buffers, &name(prefix, "bn1"), c_in);
    store.insert(
        name(prefix, "conv1"),
        fan_in_normal(&[c_out, c_in, 3, 3], c_in * 9, 2.0, rng),
    );
    init_batch_norm(store, buffers, &name(prefix, "bn2"), c_out);
    store.insert(name(prefix, "conv2"), zeros(&[c_out, c_out, 3, 3]));
    if c_in != c_out || stride != 1 {
        store.insert(
            name(prefix, "proj"),
            fan_in_normal(&[c_out, c_in, 1, 1], c_in, 1.0, rng),
        );
    }
}

/// Evaluate one block on `[N, C, H, W]`; `running` selects inference mode.
pub fn preact_residual_block<T: Scalar>(
    x: &Array4<T>,
    store: &ParamStore<T>,
    prefix: &str,
    stride: usize,
    running: Option<&ParamStore<T>>,
) -> Result<Array4<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone().into_dyn());
    let mut stats = Vec::new();
    let mut mode = match running {
        Some(b) => BnMode::Infer(b),
        None => BnMode::Train(&mut stats),
    };
    let y = preact_block_layer(&mut g, store, prefix, xv, stride, &mut mode)?;
    Ok(g.value(y).clone().into_dimensionality().expect("rank 4"))
}

// ------------------------------------------------------------ dense, dropout

/// `x W + b`; the bias is used when `{prefix}.b` exists.
pub fn dense_layer<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_from(store, &name(prefix, "w"))?;
    let y = g.linear(x, w)?;
    if store.contains(&name(prefix, "b")) {
        let b = g.param_from(store, &name(prefix, "b"))?;
        g.add_bias(y, b)
    } else {
        Ok(y)
    }
}

pub fn init_dense<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut Rng,
) {
    store.insert(name(prefix, "w"), fan_in_normal(&[d_in, d_out], d_in, 1.0, rng));
    if bias {
        store.insert(name(prefix, "b"), zeros(&[d_out]));
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut Rng) -> Result<ArrayD<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
    }
    let keep = T::of(1.0 / (1.0 - p));
    Ok(ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    }))
}

/// Dropout in training mode (`rng` given); identity in inference mode or at rate 0.
pub fn dropout_layer<T: Scalar>(g: &mut Graph<T>, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
    }
    match rng {
        Some(rng) if p > 0.0 => {
            let mask = dropout_mask(g.shape(x), p, rng)?;
            g.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, s, Array};
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn randn<Sh, D>(shape: Sh, rng: &mut Rng) -> Array<f64, D>
    where
        Sh: ndarray::ShapeBuilder<Dim = D>,
        D: ndarray::Dimension,
    {
        Array::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
    }

    fn attn_params(rng: &mut Rng, d: usize, heads: usize, dh: usize, mixing: bool) -> AttentionParams<f64> {
        AttentionParams {
            heads,
            w_q: randn((d, heads * dh), rng),
            w_k: randn((d, heads * dh), rng),
            w_v: randn((d, heads * dh), rng),
            w_out: randn((heads * dh, d), rng),
            p_logit: mixing.then(|| randn((heads, heads), rng)),
            p_weight: mixing.then(|| randn((heads, heads), rng)),
        }
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    /// Straight-line attention for one batch element: per-head logits,
    /// optional head mixing, masked softmax, mixing, values, output projection.
    fn attention_oracle(
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
        p: &AttentionParams<f64>,
        mask: &[bool],
        talking: bool,
    ) -> Array2<f64> {
        let h = p.heads;
        let dh = p.w_q.ncols() / h;
        let (qp, kp, vp) = (q.dot(&p.w_q), k.dot(&p.w_k), v.dot(&p.w_v));
        let (lq, lk) = (q.nrows(), k.nrows());
        let mut logits = vec![Array2::<f64>::zeros((lq, lk)); h];
        for (hh, l) in logits.iter_mut().enumerate() {
            let qh = qp.slice(s![.., hh * dh..(hh + 1) * dh]);
            let kh = kp.slice(s![.., hh * dh..(hh + 1) * dh]);
            *l = qh.dot(&kh.t());
        }
        let mix = |src: &[Array2<f64>], m: &Array2<f64>| -> Vec<Array2<f64>> {
            (0..m.ncols())
                .map(|j| (0..m.nrows()).fold(Array2::zeros(src[0].raw_dim()), |acc, i| acc + &src[i] * m[[i, j]]))
                .collect()
        };
        if talking {
            logits = mix(&logits, p.p_logit.as_ref().unwrap());
        }
        let mut weights: Vec<Array2<f64>> = logits
            .iter()
            .map(|l| {
                let mut w = l / (dh as f64).sqrt();
                for mut row in w.rows_mut() {
                    let max = (0..lk).filter(|&j| mask[j]).map(|j| row[j]).fold(f64::MIN, f64::max);
                    let z: f64 = (0..lk).filter(|&j| mask[j]).map(|j| (row[j] - max).exp()).sum();
                    for j in 0..lk {
                        row[j] = if mask[j] { (row[j] - max).exp() / z } else { 0.0 };
                    }
                }
                w
            })
            .collect();
        if talking {
            weights = mix(&weights, p.p_weight.as_ref().unwrap());
        }
        let mut concat = Array2::<f64>::zeros((lq, h * dh));
        for (hh, w) in weights.iter().enumerate() {
            let vh = vp.slice(s![.., hh * dh..(hh + 1) * dh]);
            concat.slice_mut(s![.., hh * dh..(hh + 1) * dh]).assign(&w.dot(&vh));
        }
        concat.dot(&p.w_out)
    }

    fn naive_conv(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Array4::zeros((n, o, ho, wo));
        for b in 0..n {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let y = (i * stride + a) as isize - pad as isize;
                                    let xx = (j * stride + bb) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += x[[b, ic, y as usize, xx as usize]] * w[[oc, ic, a, bb]];
                                    }
                                }
                            }
                        }
                        out[[b, oc, i, j]] = acc;
                    }
                }
            }
        }
        out
    }

    fn naive_bn_relu(x: &Array4<f64>, gamma: &[f64], beta: &[f64]) -> Array4<f64> {
        let mut out = x.clone();
        for ch in 0..x.dim().1 {
            let plane = x.slice(s![.., ch, .., ..]);
            let m = plane.mean().unwrap();
            let v = plane.mapv(|e| (e - m).powi(2)).mean().unwrap();
            out.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|e| (gamma[ch] * (e - m) / (v + BN_EPS).sqrt() + beta[ch]).max(0.0));
        }
        out
    }

    #[test]
    fn softmax_contracts() {
        let z = softmax(&ArrayD::<f64>::zeros(IxDyn(&[13])), 0);
        assert!(z.iter().all(|&p| (p - 1.0 / 13.0).abs() < 1e-15));
        let big = softmax(&arr1(&[1000.0f64, 0.0]).into_dyn(), 0);
        assert_eq!(big[0], 1.0);
        assert!(big[1] >= 0.0 && big[1] < 1e-300);
        let x = arr1(&[0.3f64, -1.2, 2.5, 0.0]);
        let direct: Vec<f64> = {
            let z: f64 = x.iter().map(|v| v.exp()).sum();
            x.iter().map(|v| v.exp() / z).collect()
        };
        let got = softmax(&x.clone().into_dyn(), 0);
        for (a, b) in got.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = arr2(&[[1.0f64, 2.0], [3.0, 5.0]]).into_dyn();
        let cols = softmax(&m, 0);
        assert!((cols[[0, 0]] + cols[[1, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mha_matches_dense_oracle() {
        let mut rng = Rng::seed_from_u64(1);
        let p = attn_params(&mut rng, 4, 2, 3, false);
        let q: Array3<f64> = randn((1, 2, 4), &mut rng);
        let kv: Array3<f64> = randn((1, 3, 4), &mut rng);
        let mask = arr2(&[[true, false, true]]);
        let got = multi_head_attention(&q, &kv, &kv, &p, Some(&mask)).unwrap();
        let want = attention_oracle(
            &q.slice(s![0, .., ..]).to_owned(),
            &kv.slice(s![0, .., ..]).to_owned(),
            &kv.slice(s![0, .., ..]).to_owned(),
            &p,
            &[true, false, true],
            false,
        );
        for (a, b) in got.output.slice(s![0, .., ..]).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!(got.weights.slice(s![.., .., .., 1]).iter().all(|&w| w == 0.0));
    }

    #[test]
    fn talking_heads_matches_contraction_oracle() {
        let mut rng = Rng::seed_from_u64(2);
        let p = attn_params(&mut rng, 4, 2, 2, true);
        let x: Array3<f64> = randn((1, 3, 4), &mut rng);
        let got = talking_heads_attention(&x, &x, &x, &p, None).unwrap();
        let x0 = x.slice(s![0, .., ..]).to_owned();
        let want = attention_oracle(&x0, &x0, &x0, &p, &[true; 3], true);
        for (a, b) in got.output.slice(s![0, .., ..]).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_mixing_reduces_to_mha() {
        let mut rng = Rng::seed_from_u64(3);
        let mut p = attn_params(&mut rng, 6, 3, 2, false);
        p.p_logit = Some(Array2::eye(3));
        p.p_weight = Some(Array2::eye(3));
        let q: Array3<f64> = randn((2, 4, 6), &mut rng);
        let kv: Array3<f64> = randn((2, 5, 6), &mut rng);
        let mask = Array2::from_shape_fn((2, 5), |(b, j)| j < 3 + b);
        let th = talking_heads_attention(&q, &kv, &kv, &p, Some(&mask)).unwrap();
        let mh = multi_head_attention(&q, &kv, &kv, &p, Some(&mask)).unwrap();
        let diff = (&th.output - &mh.output).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn averaging_logit_mixing_ties_the_heads() {
        let mut rng = Rng::seed_from_u64(4);
        let mut p = attn_params(&mut rng, 4, 2, 2, true);
        p.p_logit = Some(Array2::from_elem((2, 2), 0.5));
        let x: Array3<f64> = randn((1, 3, 4), &mut rng);
        let r = talking_heads_attention(&x, &x, &x, &p, None).unwrap();
        let (a, b) = (r.weights.slice(s![0, 0, .., ..]), r.weights.slice(s![0, 1, .., ..]));
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn single_key_attention_is_forced() {
        let mut rng = Rng::seed_from_u64(5);
        let p = attn_params(&mut rng, 3, 1, 3, false);
        let q: Array3<f64> = randn((1, 1, 3), &mut rng);
        let v: Array3<f64> = randn((1, 1, 3), &mut rng);
        let r = multi_head_attention(&q, &v, &v, &p, None).unwrap();
        let v0: Array2<f64> = v.slice(s![0, .., ..]).to_owned();
        let want = v0.dot(&p.w_v).dot(&p.w_out);
        for (a, b) in r.output.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.weights[[0, 0, 0, 0]], 1.0);
    }

    #[test]
    fn uniform_keys_give_uniform_weights_over_valid_keys() {
        let mut rng = Rng::seed_from_u64(6);
        let p = attn_params(&mut rng, 3, 2, 2, false);
        let q = Array3::<f64>::ones((1, 2, 3));
        let kv = Array3::<f64>::ones((1, 4, 3));
        let mask = arr2(&[[true, true, false, true]]);
        let r = multi_head_attention(&q, &kv, &kv, &p, Some(&mask)).unwrap();
        for row in r.weights.lanes(Axis(3)) {
            for (j, &w) in row.iter().enumerate() {
                let want = if j == 2 { 0.0 } else { 1.0 / 3.0 };
                assert!((w - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let mut rng = Rng::seed_from_u64(7);
        let mut p = attn_params(&mut rng, 4, 2, 2, true);
        let x: Array3<f64> = randn((1, 3, 4), &mut rng);
        let bad: Array3<f64> = randn((1, 3, 5), &mut rng);
        assert!(matches!(
            multi_head_attention(&bad, &x, &x, &p, None),
            Err(Error::Shape(_))
        ));
        p.p_weight = Some(Array2::eye(3));
        assert!(matches!(
            talking_heads_attention(&x, &x, &x, &p, None),
            Err(Error::Shape(_))
        ));
        p.p_weight = None;
        assert!(matches!(
            talking_heads_attention(&x, &x, &x, &p, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gated_ffn_oracles() {
        let mut rng = Rng::seed_from_u64(8);
        let p = FfnParams {
            w_in: randn((4, 5), &mut rng),
            w_gate: randn((4, 5), &mut rng),
            w_out: randn((5, 4), &mut rng),
        };
        let zero = gated_gelu_ffn(&ArrayD::zeros(IxDyn(&[2, 4])), &p).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let x: Array2<f64> = randn((2, 4), &mut rng);
        let got = gated_gelu_ffn(&x.clone().into_dyn(), &p).unwrap();
        for r in 0..2 {
            for o in 0..4 {
                let mut acc = 0.0;
                for f in 0..5 {
                    let a: f64 = (0..4).map(|i| x[[r, i]] * p.w_in[[i, f]]).sum();
                    let b: f64 = (0..4).map(|i| x[[r, i]] * p.w_gate[[i, f]]).sum();
                    acc += gelu(a) * b * p.w_out[[f, o]];
                }
                assert!((got[[r, o]] - acc).abs() < 1e-12);
            }
        }

        // x W_gate = 1 everywhere: the gate is neutral.
        let x1 = arr2(&[[1.0, 0.3, -0.2, 0.7], [1.0, -1.0, 0.5, 0.1]]);
        let mut neutral = p.clone();
        neutral.w_gate = Array2::zeros((4, 5));
        neutral.w_gate.row_mut(0).fill(1.0);
        let got = gated_gelu_ffn(&x1.clone().into_dyn(), &neutral).unwrap();
        let plain = x1.dot(&p.w_in).mapv(gelu).dot(&p.w_out);
        for (a, b) in got.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn block_store(rng: &mut Rng, c_in: usize, c_out: usize, stride: usize) -> (ParamStore<f64>, ParamStore<f64>) {
        let mut s = ParamStore::new();
        let mut b = ParamStore::new();
        init_preact_block(&mut s, &mut b, "blk", c_in, c_out, stride, rng);
        (s, b)
    }

    #[test]
    fn zero_residual_path_is_identity() {
        let mut rng = Rng::seed_from_u64(9);
        let (s, b) = block_store(&mut rng, 3, 3, 1);
        let x: Array4<f64> = randn((2, 3, 5, 5), &mut rng);
        assert_eq!(preact_residual_block(&x, &s, "blk", 1, None).unwrap(), x);
        assert_eq!(preact_residual_block(&x, &s, "blk", 1, Some(&b)).unwrap(), x);
    }

    #[test]
    fn strided_block_halves_the_map() {
        let mut rng = Rng::seed_from_u64(10);
        let (s, _) = block_store(&mut rng, 2, 4, 2);
        let x: Array4<f64> = randn((1, 2, 8, 8), &mut rng);
        assert_eq!(
            preact_residual_block(&x, &s, "blk", 2, None).unwrap().dim(),
            (1, 4, 4, 4)
        );
        let tiny: Array4<f64> = randn((1, 2, 1, 1), &mut rng);
        assert!(matches!(
            preact_residual_block(&tiny, &s, "blk", 2, None),
            Err(Error::Shape(_))
        ));
        let (same, _) = block_store(&mut rng, 2, 2, 1);
        assert!(matches!(
            preact_residual_block(&x, &same, "blk", 2, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn block_matches_naive_convolution() {
        let mut rng = Rng::seed_from_u64(11);
        let (mut s, _) = block_store(&mut rng, 2, 2, 1);
        let w2: Array4<f64> = randn((2, 2, 3, 3), &mut rng);
        s.insert("blk.conv2", w2.clone().into_dyn());
        let g1 = [1.3, 0.7];
        let b1 = [0.1, -0.2];
        s.insert("blk.bn1.gamma", arr1(&g1).into_dyn());
        s.insert("blk.bn1.beta", arr1(&b1).into_dyn());
        let x: Array4<f64> = randn((2, 2, 4, 4), &mut rng);
        let got = preact_residual_block(&x, &s, "blk", 1, None).unwrap();

        let w1: Array4<f64> = s.get("blk.conv1").unwrap().clone().into_dimensionality().unwrap();
        let a = naive_bn_relu(&x, &g1, &b1);
        let h = naive_conv(&a, &w1, 1, 1);
        let h = naive_bn_relu(&h, &[1.0, 1.0], &[0.0, 0.0]);
        let want = &x + &naive_conv(&h, &w2, 1, 1);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn inference_uses_running_statistics() {
        let mut rng = Rng::seed_from_u64(12);
        let (mut s, mut b) = block_store(&mut rng, 1, 1, 1);
        s.insert("blk.conv2", randn(IxDyn(&[1, 1, 3, 3]), &mut rng));
        b.insert("blk.bn1.running_mean", arr1(&[0.5]).into_dyn());
        b.insert("blk.bn1.running_var", arr1(&[4.0]).into_dyn());
        let x: Array4<f64> = randn((1, 1, 3, 3), &mut rng);
        let one = preact_residual_block(&x.slice(s![.., .., .., ..]).to_owned(), &s, "blk", 1, Some(&b)).unwrap();
        // Inference output of a sample does not depend on the rest of the batch.
        let mut pair = Array4::zeros((2, 1, 3, 3));
        pair.slice_mut(s![0..1, .., .., ..]).assign(&x);
        pair.slice_mut(s![1..2, .., .., ..])
            .assign(&randn((1, 1, 3, 3), &mut rng));
        let both = preact_residual_block(&pair, &s, "blk", 1, Some(&b)).unwrap();
        assert_eq!(both.slice(s![0..1, .., .., ..]), one);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut buffers = ParamStore::<f64>::new();
        buffers.insert("bn.running_mean", arr1(&[0.0]).into_dyn());
        buffers.insert("bn.running_var", arr1(&[1.0]).into_dyn());
        let stats = vec![(
            "bn".to_string(),
            BatchStats {
                mean: arr1(&[2.0]),
                var: arr1(&[3.0]),
            },
        )];
        update_running_stats(&mut buffers, &stats, 0.1).unwrap();
        assert!((buffers.get("bn.running_mean").unwrap()[[0]] - 0.2).abs() < 1e-15);
        assert!((buffers.get("bn.running_var").unwrap()[[0]] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn focal_loss_values() {
        let uniform = Array2::<f64>::zeros((1, 13));
        let ce = focal_loss(&uniform, &[4], 0.0).unwrap();
        assert!((ce - 13f64.ln()).abs() < 1e-9);
        assert!((ce - 2.5649).abs() < 1e-4);

        let half = arr2(&[[0.0f64, 0.0]]);
        let fl = focal_loss(&half, &[1], 2.0).unwrap();
        assert!((fl - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((fl - 0.17329).abs() < 1e-5);

        let confident = arr2(&[[40.0f64, 0.0, 0.0]]);
        for gamma in [0.0, 0.5, 2.0, 5.0] {
            assert!(focal_loss(&confident, &[0], gamma).unwrap() < 1e-15);
        }

        let mut rng = Rng::seed_from_u64(13);
        let z: Array2<f64> = randn((5, 7), &mut rng);
        let labels = [0, 3, 6, 2, 2];
        let ce_direct: f64 = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| {
                let row = z.row(b);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .sum::<f64>()
            / 5.0;
        assert!((focal_loss(&z, &labels, 0.0).unwrap() - ce_direct).abs() < 1e-12);
        assert!(matches!(focal_loss(&z, &[0, 1, 2, 3, 7], 2.0), Err(Error::Input(_))));
    }

    #[test]
    fn dropout_semantics() {
        let mut rng = Rng::seed_from_u64(14);
        let mut g = Graph::<f64>::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[1000]), 1.0));
        assert_eq!(dropout_layer(&mut g, x, 0.0, Some(&mut rng)).unwrap(), x);
        assert_eq!(dropout_layer(&mut g, x, 0.8, None).unwrap(), x);
        let y = dropout_layer(&mut g, x, 0.8, Some(&mut rng)).unwrap();
        let v = g.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || (e - 5.0).abs() < 1e-12));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((150..=250).contains(&kept), "{kept}");
        assert!(dropout_layer(&mut g, x, 1.0, Some(&mut rng)).is_err());
    }
}
