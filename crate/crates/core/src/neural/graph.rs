//! Reverse-mode autodiff tape over dense `ndarray` tensors.
//!
//! A [`Graph`] records every op applied during one forward pass; [`Graph::backward`]
//! replays the tape in reverse. Every stored value is in standard (row-major)
//! layout, which the matrix kernels below rely on.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::params::ParamStore;

pub type Tensor<T> = ArrayD<T>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Linear(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: ArrayD<T>,
        inv_std: Array1<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: ArrayD<T>,
        inv_std: Array1<T>,
        training: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        spec: Conv2dSpec,
        cols: Array2<T>,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Array2<usize>,
    },
    Concat(Vec<Var>),
    Dropout {
        x: Var,
        mask: ArrayD<T>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    WeightedSum {
        x: Var,
        weights: Array2<T>,
    },
    FocalLoss {
        logits: Var,
        labels: Vec<usize>,
        gamma: T,
        probs: Array2<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

/// Recorded computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn standard<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn view2<T: Scalar>(a: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    debug_assert!(a.is_standard_layout());
    ArrayView2::from_shape((rows, cols), a.as_slice().expect("standard layout")).expect("row-major reshape")
}

fn reshape<T: Scalar>(a: Array2<T>, shape: &[usize]) -> ArrayD<T> {
    let a = standard(a.into_dyn());
    a.into_shape_with_order(IxDyn(shape)).expect("element count preserved")
}

fn gelu_pieces<T: Scalar>(x: T) -> (T, T) {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (cdf, pdf)
}

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> Option<usize> {
    let padded = size + 2 * spec.padding;
    if padded < k || spec.stride == 0 {
        return None;
    }
    Some((padded - k) / spec.stride + 1)
}

fn pool_range(i: usize, out: usize, size: usize) -> (usize, usize) {
    (i * size / out, ((i + 1) * size).div_ceil(out))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that is not differentiated with respect to.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Named trainable leaf; its gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: ArrayD<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
        v
    }

    /// Leaf for `name` from `store`, registered once per graph.
    pub fn param_from(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.by_name.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        Ok(self.param(name, value))
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(shape_err!("add_bias: {:?} + {:?}", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).clone();
        let mut v = self.value(x).clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            lane += &bias;
        }
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).mapv(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    /// `x[..., k] @ w[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != k {
            return Err(shape_err!("linear: {:?} @ {:?}", xs, ws));
        }
        let rows = xs.iter().product::<usize>() / k.max(1);
        let out = view2(self.value(x), rows, k).dot(&view2(self.value(w), k, ws[1]));
        let mut shape = xs;
        *shape.last_mut().unwrap() = ws[1];
        Ok(self.push(reshape(out, &shape), Op::Linear(x, w)))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when `transpose_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err!(
                "batch_matmul: {:?} x {:?} (transpose_b={transpose_b})",
                sa,
                sb
            ));
        }
        let (batch, m) = (sa[0], sa[1]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = ndarray::Array3::<T>::zeros((batch, m, n));
        for i in 0..batch {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let prod = if transpose_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        Ok(self.push(out.into_dyn(), Op::BatchMatMul { a, b, transpose_b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let have: usize = self.shape(x).iter().product();
        let want: usize = shape.iter().product();
        if have != want {
            return Err(shape_err!("reshape {:?} -> {:?}", self.shape(x), shape));
        }
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let nd = self.shape(x).len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("permute {:?} by {:?}", self.shape(x), axes));
        }
        let v = self.value(x).clone().permuted_axes(IxDyn(axes));
        Ok(self.push(standard(v), Op::Permute(x, axes.to_vec())))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e * gelu_pieces(e).0);
        self.push(v, Op::Gelu(x))
    }

    /// Softmax over the last axis. With a key mask (`[B, L_last]`, first axis
    /// of `x` is `B`), masked entries get exactly zero probability.
    pub fn softmax(&mut self, x: Var, key_mask: Option<Array2<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        if let Some(m) = &key_mask {
            if m.dim() != (shape[0], last) {
                return Err(shape_err!("softmax mask {:?} for input {:?}", m.dim(), shape));
            }
        }
        let mut v = self.value(x).clone();
        let lanes_per_batch = v.len() / (shape[0] * last).max(1);
        for (i, mut lane) in v.lanes_mut(Axis(shape.len() - 1)).into_iter().enumerate() {
            let keep = |j: usize| key_mask.as_ref().is_none_or(|m| m[[i / lanes_per_batch, j]]);
            let max = (0..last)
                .filter(|&j| keep(j))
                .map(|j| lane[j])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..last {
                if keep(j) {
                    let e = (lane[j] - max).exp();
                    lane[j] = e;
                    z += e;
                } else {
                    lane[j] = T::zero();
                }
            }
            if z > T::zero() {
                lane.mapv_inplace(|e| e / z);
            }
        }
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layer_norm over {:?}", shape));
        }
        let rows = self.value(x).len() / d.max(1);
        let xv = view2(self.value(x), rows, d);
        let g = self.value(gamma).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b = self.value(beta).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut xhat = Array2::<T>::zeros((rows, d));
        let mut inv_std = Array1::<T>::zeros(rows);
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.sum() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            Zip::from(&mut row)
                .and(&g)
                .and(&b)
                .for_each(|o, &gg, &bb| *o = *o * gg + bb);
        }
        Ok(self.push(
            reshape(out, &shape),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: reshape(xhat, &shape),
                inv_std,
            },
        ))
    }

    /// Batch norm over `[N, C, H, W]` per channel. In training mode the batch
    /// statistics are used and returned; otherwise `running` supplies them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Array1<T>, &Array1<T>)>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(shape_err!("batch_norm over {:?}", shape));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let count = T::of((n * h * w) as f64);
        let (mean, var, training) = match running {
            Some((m, v)) => (m.clone(), v.clone(), false),
            None => {
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for ch in 0..c {
                    let plane = xv.slice(s![.., ch, .., ..]);
                    let m = plane.sum() / count;
                    mean[ch] = m;
                    var[ch] = plane.iter().map(|&e| (e - m) * (e - m)).sum::<T>() / count;
                }
                (mean, var, true)
            }
        };
        let inv_std = var.mapv(|v| T::one() / (v + T::of(eps)).sqrt());
        let g = self.value(gamma).clone();
        let b = self.value(beta).clone();
        let mut xhat = self.value(x).clone();
        let mut out = self.value(x).clone();
        for ch in 0..c {
            let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[[ch]], b[[ch]]);
            xhat.slice_mut(s![.., ch, .., ..]).mapv_inplace(|e| (e - m) * is);
            out.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|e| (e - m) * is * gg + bb);
        }
        let stats = training.then(|| BatchStats { mean, var });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        );
        Ok((v, stats))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err!("conv2d: input {:?}, kernel {:?}", xs, ws));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = match (conv_out(h, kh, spec), conv_out(wd, kw, spec)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err!(
                    "conv2d: {h}x{wd} input too small for {kh}x{kw} kernel with {spec:?}"
                ))
            }
        };
        let cols = im2col(self.value(x), (n, c, h, wd), (kh, kw), (ho, wo), spec);
        let wm = view2(self.value(w), o, c * kh * kw);
        let out = wm.dot(&cols);
        // [O, N*Ho*Wo] -> [N, O, Ho, Wo]
        let out = reshape(out, &[o, n, ho, wo]).permuted_axes(IxDyn(&[1, 0, 2, 3]));
        Ok(self.push(standard(out), Op::Conv2d { x, w, spec, cols }))
    }

    /// Average-pool `[N, C, H, W]` to `[N, C, out_h, out_w]` with adaptive windows.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 || xs[2] < out_h || xs[3] < out_w {
            return Err(shape_err!("adaptive_avg_pool {:?} -> {out_h}x{out_w}", xs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = ndarray::Array4::<T>::zeros((n, c, out_h, out_w));
        for i in 0..out_h {
            let (y0, y1) = pool_range(i, out_h, h);
            for j in 0..out_w {
                let (x0, x1) = pool_range(j, out_w, w);
                let area = T::of(((y1 - y0) * (x1 - x0)) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        out[[b, ch, i, j]] = xv.slice(s![b, ch, y0..y1, x0..x1]).sum() / area;
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::AdaptiveAvgPool { x }))
    }

    /// Row lookup: `table[V, d]`, `ids[B, L]` -> `[B, L, d]`.
    pub fn embedding(&mut self, table: Var, ids: Array2<usize>) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err!("embedding table {:?}", ts));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(crate::Error::Input(format!(
                "token id {bad} >= vocabulary size {}",
                ts[0]
            )));
        }
        let (b, l) = ids.dim();
        let tv = view2(self.value(table), ts[0], ts[1]);
        let mut out = ndarray::Array3::<T>::zeros((b, l, ts[1]));
        for ((i, j), &id) in ids.indexed_iter() {
            out.slice_mut(s![i, j, ..]).assign(&tv.row(id));
        }
        Ok(self.push(out.into_dyn(), Op::Embedding { table, ids }))
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len() || &sp[..sp.len() - 1] != lead {
                return Err(shape_err!("concat: {:?} vs {:?}", first, sp));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(first.len() - 1), &views).expect("checked shapes");
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Multiply by a fixed mask (entries 0 or `1 / (1 - p)`).
    pub fn dropout(&mut self, x: Var, mask: ArrayD<T>) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(shape_err!("dropout mask {:?} for {:?}", mask.shape(), self.shape(x)));
        }
        let v = self.value(x) * &mask;
        Ok(self.push(v, Op::Dropout { x, mask }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= self.shape(x).len() {
            return Err(shape_err!("mean over axis {axis} of {:?}", self.shape(x)));
        }
        let v = self
            .value(x)
            .mean_axis(Axis(axis))
            .ok_or_else(|| shape_err!("mean over an empty axis"))?;
        Ok(self.push(v, Op::Mean { x, axis }))
    }

    /// Take one index along an axis, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let sh = self.shape(x);
        if axis >= sh.len() || index >= sh[axis] {
            return Err(shape_err!("select {index} on axis {axis} of {:?}", sh));
        }
        let v = self.value(x).index_axis(Axis(axis), index).to_owned();
        Ok(self.push(v, Op::Select { x, axis, index }))
    }

    /// `x[B, L, d]`, fixed `weights[B, L]` -> `sum_l weights[b, l] * x[b, l, :]`.
    pub fn weighted_sum(&mut self, x: Var, weights: Array2<T>) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || weights.dim() != (sh[0], sh[1]) {
            return Err(shape_err!("weighted_sum of {:?} by {:?}", sh, weights.dim()));
        }
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = Array2::<T>::zeros((sh[0], sh[2]));
        for b in 0..sh[0] {
            out.row_mut(b).assign(&weights.row(b).dot(&xv.index_axis(Axis(0), b)));
        }
        Ok(self.push(out.into_dyn(), Op::WeightedSum { x, weights }))
    }

    /// Mean focal loss `-(1 - p_t)^gamma log p_t` over a batch of logits `[B, K]`.
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || sh[0] != labels.len() || sh[0] == 0 {
            return Err(shape_err!("focal_loss: logits {:?} for {} labels", sh, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= sh[1]) {
            return Err(crate::Error::Input(format!(
                "label index {bad} >= class count {}",
                sh[1]
            )));
        }
        let zv = view2(self.value(logits), sh[0], sh[1]);
        let mut probs = Array2::<T>::zeros((sh[0], sh[1]));
        let g = T::of(gamma);
        let mut total = T::zero();
        for (b, &y) in labels.iter().enumerate() {
            let row = zv.row(b);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            for k in 0..sh[1] {
                probs[[b, k]] = (row[k] - lse).exp();
            }
            let log_pt = row[y] - lse;
            let pt = probs[[b, y]];
            let w = if gamma == 0.0 {
                T::one()
            } else {
                (T::one() - pt).max(T::zero()).powf(g)
            };
            total += -w * log_pt;
        }
        let loss = total / T::of(sh[0] as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), loss);
        Ok(self.push(
            v,
            Op::FocalLoss {
                logits,
                labels: labels.to_vec(),
                gamma: g,
                probs,
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    /// Gradient of every named parameter (zeros when it did not affect `loss`).
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, ArrayD<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(self.value(*v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, gy: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let mut acc = |v: Var, g: ArrayD<T>| match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(standard(g)),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::AddBias(x, b) => {
                acc(*x, gy.clone());
                let n = self.shape(*b)[0];
                let rows = gy.len() / n.max(1);
                acc(*b, view2(gy, rows, n).sum_axis(Axis(0)).into_dyn());
            }
            Op::Mul(a, b) => {
                acc(*a, gy * self.value(*b));
                acc(*b, gy * self.value(*a));
            }
            Op::Scale(x, c) => acc(*x, gy.mapv(|e| e * *c)),
            Op::Linear(x, w) => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let rows = gy.len() / n.max(1);
                let g2 = view2(gy, rows, n);
                let x2 = view2(self.value(*x), rows, k);
                let w2 = view2(self.value(*w), k, n);
                acc(*x, reshape(g2.dot(&w2.t()), xs));
                acc(*w, x2.t().dot(&g2).into_dyn());
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let av = self.value(*a).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let gv = gy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut ga = ndarray::Array3::<T>::zeros(av.raw_dim());
                let mut gb = ndarray::Array3::<T>::zeros(bv.raw_dim());
                for t in 0..av.shape()[0] {
                    let (ai, bi, gi) = (
                        av.index_axis(Axis(0), t),
                        bv.index_axis(Axis(0), t),
                        gv.index_axis(Axis(0), t),
                    );
                    if *transpose_b {
                        ga.index_axis_mut(Axis(0), t).assign(&gi.dot(&bi));
                        gb.index_axis_mut(Axis(0), t).assign(&gi.t().dot(&ai));
                    } else {
                        ga.index_axis_mut(Axis(0), t).assign(&gi.dot(&bi.t()));
                        gb.index_axis_mut(Axis(0), t).assign(&ai.t().dot(&gi));
                    }
                }
                acc(*a, ga.into_dyn());
                acc(*b, gb.into_dyn());
            }
            Op::Reshape(x) => {
                let g = gy.clone().into_shape_with_order(self.value(*x).raw_dim()).unwrap();
                acc(*x, g);
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inv[a] = k;
                }
                acc(*x, standard(gy.clone().permuted_axes(IxDyn(&inv))));
            }
            Op::Relu(x) => {
                let mut g = gy.clone();
                Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                });
                acc(*x, g);
            }
            Op::Gelu(x) => {
                let mut g = gy.clone();
                Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                    let (cdf, pdf) = gelu_pieces(v);
                    *g *= cdf + v * pdf;
                });
                acc(*x, g);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let last = y.ndim() - 1;
                let mut g = gy.clone();
                for (mut gl, yl) in g.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot = gl.iter().zip(yl.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    Zip::from(&mut gl).and(&yl).for_each(|g, &p| *g = p * (*g - dot));
                }
                acc(*x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = gy.len() / d;
                let g2 = view2(gy, rows, d);
                let xh = view2(xhat, rows, d);
                let gam = self.value(*gamma);
                acc(*gamma, (&g2 * &xh).sum_axis(Axis(0)).into_dyn());
                acc(*beta, g2.sum_axis(Axis(0)).into_dyn());
                let dn = T::of(d as f64);
                let mut dx = Array2::<T>::zeros((rows, d));
                for r in 0..rows {
                    let dxhat: Vec<T> = (0..d).map(|c| g2[[r, c]] * gam[[c]]).collect();
                    let s1: T = dxhat.iter().copied().sum();
                    let s2: T = dxhat.iter().zip(xh.row(r)).map(|(&a, &b)| a * b).sum();
                    for c in 0..d {
                        dx[[r, c]] = inv_std[r] / dn * (dn * dxhat[c] - s1 - xh[[r, c]] * s2);
                    }
                }
                acc(*x, reshape(dx, self.shape(*x)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let c = self.shape(*gamma)[0];
                let gam = self.value(*gamma);
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                let mut dx = gy.clone();
                for ch in 0..c {
                    let gch = gy.slice(s![.., ch, .., ..]);
                    let xch = xhat.slice(s![.., ch, .., ..]);
                    let sum_g = gch.sum();
                    let sum_gx = Zip::from(&gch).and(&xch).fold(T::zero(), |a, &g, &xx| a + g * xx);
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let scale = gam[[ch]] * inv_std[ch];
                    let mut dch = dx.slice_mut(s![.., ch, .., ..]);
                    if *training {
                        let m = T::of(gch.len() as f64);
                        Zip::from(&mut dch).and(&xch).for_each(|d, &xx| {
                            *d = scale / m * (m * *d - sum_g - xx * sum_gx);
                        });
                    } else {
                        dch.mapv_inplace(|d| d * scale);
                    }
                }
                acc(*gamma, dgamma.into_dyn());
                acc(*beta, dbeta.into_dyn());
                acc(*x, dx);
            }
            Op::Conv2d { x, w, spec, cols } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, o, ho, wo) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
                let gperm = standard(gy.clone().permuted_axes(IxDyn(&[1, 0, 2, 3])));
                let g2 = view2(&gperm, o, n * ho * wo);
                let kdim = ws[1] * ws[2] * ws[3];
                acc(*w, reshape(g2.dot(&cols.t()), &ws));
                let wm = view2(self.value(*w), o, kdim);
                let dcols = wm.t().dot(&g2);
                acc(
                    *x,
                    col2im(&dcols, (xs[0], xs[1], xs[2], xs[3]), (ws[2], ws[3]), (ho, wo), *spec),
                );
            }
            Op::AdaptiveAvgPool { x } => {
                let xs = self.shape(*x).to_vec();
                let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
                let mut dx = ndarray::Array4::<T>::zeros((xs[0], xs[1], xs[2], xs[3]));
                for i in 0..oh {
                    let (y0, y1) = pool_range(i, oh, xs[2]);
                    for j in 0..ow {
                        let (x0, x1) = pool_range(j, ow, xs[3]);
                        let area = T::of(((y1 - y0) * (x1 - x0)) as f64);
                        for b in 0..xs[0] {
                            for ch in 0..xs[1] {
                                let g = gy[[b, ch, i, j]] / area;
                                dx.slice_mut(s![b, ch, y0..y1, x0..x1]).mapv_inplace(|e| e + g);
                            }
                        }
                    }
                }
                acc(*x, dx.into_dyn());
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let mut dt = Array2::<T>::zeros((ts[0], ts[1]));
                let gv = gy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                for ((i, j), &id) in ids.indexed_iter() {
                    let mut row = dt.row_mut(id);
                    row += &gv.slice(s![i, j, ..]);
                }
                acc(*table, dt.into_dyn());
            }
            Op::Concat(parts) => {
                let last = gy.ndim() - 1;
                let mut start = 0;
                for &p in parts {
                    let width = *self.shape(p).last().unwrap();
                    let g = gy.slice_axis(Axis(last), (start..start + width).into()).to_owned();
                    acc(p, g);
                    start += width;
                }
            }
            Op::Dropout { x, mask } => acc(*x, gy * mask),
            Op::Mean { x, axis } => {
                let xs = self.value(*x).raw_dim();
                let n = T::of(xs[*axis] as f64);
                let g = gy.mapv(|e| e / n).insert_axis(Axis(*axis));
                let g = g.broadcast(xs.clone()).unwrap().to_owned();
                acc(*x, g);
            }
            Op::Select { x, axis, index } => {
                let mut g = ArrayD::<T>::zeros(self.value(*x).raw_dim());
                g.index_axis_mut(Axis(*axis), *index).assign(gy);
                acc(*x, g);
            }
            Op::WeightedSum { x, weights } => {
                let sh = self.shape(*x);
                let mut g = ndarray::Array3::<T>::zeros((sh[0], sh[1], sh[2]));
                let g2 = gy.view().into_dimensionality::<Ix2>().unwrap();
                for b in 0..sh[0] {
                    for l in 0..sh[1] {
                        let wgt = weights[[b, l]];
                        g.slice_mut(s![b, l, ..]).assign(&g2.row(b).mapv(|e| e * wgt));
                    }
                }
                acc(*x, g.into_dyn());
            }
            Op::FocalLoss {
                logits,
                labels,
                gamma,
                probs,
            } => {
                let scale = gy.iter().next().copied().unwrap_or(T::one()) / T::of(labels.len() as f64);
                let mut dz = Array2::<T>::zeros(probs.raw_dim());
                for (b, &y) in labels.iter().enumerate() {
                    let pt = probs[[b, y]];
                    let q = T::one() - pt;
                    // a = (dL/dp_t) * p_t
                    let a = if *gamma == T::zero() {
                        -T::one()
                    } else if q <= T::zero() {
                        T::zero()
                    } else {
                        *gamma * q.powf(*gamma - T::one()) * pt * pt.ln() - q.powf(*gamma)
                    };
                    for k in 0..probs.ncols() {
                        let delta = if k == y { T::one() } else { T::zero() };
                        dz[[b, k]] = scale * a * (delta - probs[[b, k]]);
                    }
                }
                acc(*logits, dz.into_dyn());
            }
            Op::Sum(x) => {
                let g = gy.iter().next().copied().unwrap_or(T::one());
                acc(*x, ArrayD::from_elem(self.value(*x).raw_dim(), g));
            }
        }
    }
}

fn im2col<T: Scalar>(
    x: &ArrayD<T>,
    (n, c, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    spec: Conv2dSpec,
) -> Array2<T> {
    let xs = x.as_slice().expect("standard layout");
    let cols_n = n * ho * wo;
    let mut cols = vec![T::zero(); c * kh * kw * cols_n];
    let pad = spec.padding as isize;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let src = &xs[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * ho + oy) * wo;
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * spec.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * kh * kw, cols_n), cols).expect("im2col shape")
}

fn col2im<T: Scalar>(
    cols: &Array2<T>,
    (n, c, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    spec: Conv2dSpec,
) -> ArrayD<T> {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let cols_n = n * ho * wo;
    let mut out = vec![T::zero(); n * c * h * w];
    let pad = spec.padding as isize;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cs[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let dst = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * spec.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).expect("col2im shape")
}
