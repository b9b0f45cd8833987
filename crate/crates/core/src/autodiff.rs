//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, so the tape is already
//! topologically sorted and `backward` is a single reverse sweep. Parameters are
//! snapshotted into leaf nodes on first use; after `backward` their gradients
//! are moved back with [`Graph::accumulate_param_grads`].
//!
//! Broadcasting is limited to a right operand whose shape is a suffix of the
//! left operand's shape (bias rows, positional tables), and to matrix products
//! against a plain 2-D weight.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Relu(Var),
    MinClamp1(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SwapAxes { x: Var, a: usize, b: usize },
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    L2Distance { a: Var, b: Var, diff: Vec<f64> },
    CumsumExclusive { x: Var, axis: usize },
    MaskedMean { x: Var, mask: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Which keys a softmax row may attend to.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttnMask<'a> {
    /// `[batch, keys]` with 1.0 on valid keys; broadcast over every middle axis.
    pub keys: Option<&'a [f64]>,
    /// Query `t` may only see keys `s <= t`.
    pub causal: bool,
}

impl<'a> AttnMask<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn keys(mask: &'a [f64]) -> Self {
        AttnMask {
            keys: Some(mask),
            causal: false,
        }
    }
}

/// Operation tape plus the values and gradients of every node.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    param_links: Vec<(Var, ParamId)>,
    grad_enabled: bool,
    rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients for parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            param_links: Vec::new(),
            grad_enabled: true,
            rng: None,
        }
    }

    /// A graph whose parameter leaves do not require gradients.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables dropout, drawing masks from a generator seeded with `seed`.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding a snapshot of parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, self.grad_enabled);
        self.param_vars.insert(id, v);
        self.param_links.push((v, id));
        v
    }

    /// Adds the gradients of every parameter leaf into the parameter set.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for &(v, id) in &self.param_links {
            if let Some(g) = &self.nodes[v.0].grad {
                let p = params.get_mut(id);
                for (dst, src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: shape {sb:?} does not broadcast onto {sa:?}"
            )))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b).data();
        let m = bv.len();
        let data = av
            .data()
            .chunks(m)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    /// `a + b`, where `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "sub")?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), self.rg(&[a, b])))
    }

    /// Elementwise product, with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v * c);
        self.push(out, Op::Scale(x, c), self.rg(&[x]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v + c);
        self.push(out, Op::AddScalar(x), self.rg(&[x]))
    }

    /// `s * x` for a single-element tensor `s`; differentiable in both.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(format!(
                "scale_by expects a single-element scale, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).item();
        let out = self.map(x, |v| v * c);
        Ok(self.push(out, Op::ScaleBy(x, s), self.rg(&[x, s])))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x), self.rg(&[x]))
    }

    /// Elementwise `min(x, 1)`.
    pub fn min_clamp1(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.min(1.0));
        self.push(out, Op::MinClamp1(x), self.rg(&[x]))
    }

    /// Inverted dropout; a no-op unless the graph was built with a dropout seed.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - rate;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask }, self.rg(&[x]))
    }

    // ---------------------------------------------------------------- products

    /// Matrix product over the last two axes.
    ///
    /// Either `b` is a plain matrix shared by every leading index of `a`, or both
    /// operands carry identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes, without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let dims = MatDims::resolve(self.shape(a), self.shape(b), trans_b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; dims.out_shape.iter().product()];
        let (brs, bcs) = dims.b_strides(trans_b);
        if dims.shared_b {
            gemm(dims.batch * dims.m, dims.k, dims.n, av, (dims.k, 1), bv, (brs, bcs), &mut out, 0.0);
        } else {
            let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
            for i in 0..dims.batch {
                gemm(
                    dims.m,
                    dims.k,
                    dims.n,
                    &av[i * sa..(i + 1) * sa],
                    (dims.k, 1),
                    &bv[i * sb..(i + 1) * sb],
                    (brs, bcs),
                    &mut out[i * sc..(i + 1) * sc],
                    0.0,
                );
            }
        }
        let out = Tensor::new(&dims.out_shape, out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, self.rg(&[a, b])))
    }

    // ---------------------------------------------------------------- normalisers

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, AttnMask::none())
    }

    /// Softmax over the last axis with masked keys receiving exactly zero weight.
    ///
    /// The first axis of `x` is the batch axis for `mask.keys`; the second-to-last
    /// axis is the query axis for `mask.causal`.
    pub fn softmax_masked(&mut self, x: Var, mask: AttnMask<'_>) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let s = *shape.last().unwrap();
        let rows = xv.len() / s;
        let q = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let rows_per_batch = rows / shape[0].max(1);
        if let Some(keys) = mask.keys {
            if shape.len() < 2 || keys.len() != shape[0] * s {
                return Err(Error::Dimension(format!(
                    "key mask of length {} does not fit scores {shape:?}",
                    keys.len()
                )));
            }
        }
        let data = xv.data();
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            let row = &data[r * s..(r + 1) * s];
            let dst = &mut out[r * s..(r + 1) * s];
            let t = r % q;
            let key_row = mask.keys.map(|k| {
                let b = r / rows_per_batch;
                &k[b * s..(b + 1) * s]
            });
            let valid = |j: usize| -> bool {
                key_row.map_or(true, |k| k[j] > 0.0) && (!mask.causal || j <= t)
            };
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v.is_nan() {
                    return Err(Error::Numeric("NaN in softmax input".into()));
                }
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric(format!("softmax row {r} has no valid entries")));
            }
            let mut sum = 0.0;
            for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if valid(j) {
                    *d = (v - max).exp();
                    sum += *d;
                }
            }
            let inv = 1.0 / sum;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Softmax(x), self.rg(&[x])))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} must both be [{d}] for input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    // ---------------------------------------------------------------- reductions

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("axis {axis} out of range for {shape:?}")));
        }
        let (pre, n, post) = split_at_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            for i in 0..n {
                let src = &data[(p * n + i) * post..(p * n + i + 1) * post];
                for (o, v) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }, self.rg(&[x])))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.rg(&[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over axis 1 of `x: [B, S, D]`, counting only positions where `mask: [B, S]` is 1.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
            return Err(Error::Dimension(format!(
                "masked_mean expects [B, S, D] with a [B, S] mask, got {shape:?} and {} mask entries",
                mask.len()
            )));
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let data = self.value(x).data();
        let mut out = vec![0.0; b * d];
        let mut norm = Vec::with_capacity(mask.len());
        let mut column = Vec::with_capacity(s);
        for bi in 0..b {
            let row_mask = &mask[bi * s..(bi + 1) * s];
            let count: f64 = row_mask.iter().sum();
            if count <= 0.0 {
                return Err(Error::Contract(format!("masked_mean: row {bi} is fully masked")));
            }
            norm.extend(row_mask.iter().map(|m| m / count));
            // Summing each column in sorted order makes the mean independent of
            // the order of positions, bit for bit.
            for j in 0..d {
                column.clear();
                column.extend(
                    row_mask
                        .iter()
                        .enumerate()
                        .filter(|(_, &m)| m != 0.0)
                        .map(|(si, &m)| m * data[(bi * s + si) * d + j]),
                );
                column.sort_by(f64::total_cmp);
                out[bi * d + j] = column.iter().sum::<f64>() / count;
            }
        }
        let out = Tensor::new(&[b, d], out)?;
        Ok(self.push(out, Op::MaskedMean { x, mask: norm }, self.rg(&[x])))
    }

    /// Exclusive prefix sum along `axis`: position `i` holds the sum of positions `< i`.
    pub fn cumsum_exclusive(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("axis {axis} out of range for {shape:?}")));
        }
        let (pre, n, post) = split_at_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for p in 0..pre {
            for q in 0..post {
                let mut acc = 0.0;
                for i in 0..n {
                    let idx = (p * n + i) * post + q;
                    out[idx] = acc;
                    acc += data[idx];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::CumsumExclusive { x, axis }, self.rg(&[x])))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.rg(&[x])))
    }

    /// Exchanges two axes, materialising the result.
    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return Err(Error::Dimension(format!("cannot swap axes {a},{b} of {shape:?}")));
        }
        let (a, b) = (a.min(b), a.max(b));
        let mut out_shape = shape.clone();
        out_shape.swap(a, b);
        let out = swap_axes_copy(self.value(x).data(), &shape, a, b);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::SwapAxes { x, a, b }, self.rg(&[x])))
    }

    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::Dimension(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(x)
            )));
        }
        self.swap_axes(x, n - 2, n - 1)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "concat: {s:?} incompatible with {base:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (pre, _, post) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[p * n * post..(p + 1) * n * post]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    // ---------------------------------------------------------------- lookups and losses

    /// Rows of `table: [V, D]` selected by `ids`, shaped `ids_shape + [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be 2-D, got {ts:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension(format!(
                "{} ids do not fill shape {ids_shape:?}",
                ids.len()
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, self.rg(&[table])))
    }

    /// Weighted mean of `-log softmax(logits)[target]` over positions.
    ///
    /// `weights` defaults to all ones; positions with weight 0 are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.len() / v;
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for logits {:?}",
                targets.len(),
                lv.shape()
            )));
        }
        let weights = match weights {
            Some(w) if w.len() != rows => {
                return Err(Error::Dimension(format!("{} weights for {rows} positions", w.len())))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract("cross_entropy over an empty mask".into()));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= v {
                return Err(Error::Index(format!("target id {t} outside vocabulary of {v}")));
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max.is_nan() {
                return Err(Error::Numeric("NaN logits in cross_entropy".into()));
            }
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (log_z - row[t]);
            }
        }
        let normed: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let out = Tensor::scalar(loss / total);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: normed,
                probs,
            },
            rg,
        ))
    }

    /// Euclidean norm of `a - b` over the last axis.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "l2_distance: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let diff: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let norms: Vec<f64> = diff
            .chunks(d)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let out = Tensor::new(&out_shape, norms)?;
        Ok(self.push(out, Op::L2Distance { a, b, diff }, self.rg(&[a, b])))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    ///
    /// Calling it twice without [`Graph::zero_grads`] doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut pass: Vec<Option<Vec<f64>>> = Vec::new();
        pass.resize_with(loss.0 + 1, || None);
        pass[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            self.propagate(i, &g, &mut pass);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with {
            ($v:expr, |$gb:ident| $body:block) => {
                if let Some($gb) = slot(nodes, pass, $v) $body
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                with!(*a, |ga| {
                    add_into(ga, g);
                });
                with!(*b, |gb| {
                    let m = gb.len();
                    for chunk in g.chunks(m) {
                        for (d, s) in gb.iter_mut().zip(chunk) {
                            *d += sign * s;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = bv.len();
                with!(*a, |ga| {
                    for (k, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                        *d += s * bv[k % m];
                    }
                });
                with!(*b, |gb| {
                    for (k, s) in g.iter().enumerate() {
                        gb[k % m] += s * av[k];
                    }
                });
            }
            Op::Scale(x, c) => with!(*x, |gx| {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += c * s;
                }
            }),
            Op::AddScalar(x) => with!(*x, |gx| {
                add_into(gx, g);
            }),
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                with!(*x, |gx| {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d += c * v;
                    }
                });
                with!(*s, |gs| {
                    gs[0] += g.iter().zip(val(*x)).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let dims = MatDims::resolve(sa, sb, *trans_b).expect("validated in forward");
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let (brs, bcs) = dims.b_strides(*trans_b);
                // dA = dC · Bᵀ, where B is the logical [k, n] operand.
                with!(*a, |ga| {
                    if dims.shared_b {
                        gemm(dims.batch * m, n, k, g, (n, 1), bv, (bcs, brs), ga, 1.0);
                    } else {
                        for bi in 0..dims.batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n, 1),
                                &bv[bi * k * n..(bi + 1) * k * n],
                                (bcs, brs),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                });
                // dB = Aᵀ · dC, written back in B's storage layout.
                with!(*b, |gb| {
                    let rows = if dims.shared_b { dims.batch * m } else { m };
                    let reps = if dims.shared_b { 1 } else { dims.batch };
                    for bi in 0..reps {
                        let ga_ = &av[bi * rows * k..(bi + 1) * rows * k];
                        let gc = &g[bi * rows * n..(bi + 1) * rows * n];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // B stored [n, k]: dBᵀ = dCᵀ · A
                            gemm(n, rows, k, gc, (1, n), ga_, (k, 1), dst, 1.0);
                        } else {
                            gemm(k, rows, n, ga_, (1, k), gc, (n, 1), dst, 1.0);
                        }
                    }
                });
            }
            Op::Softmax(x) => with!(*x, |gx| {
                let y = nodes[i].value.data();
                let s = nodes[i].value.last_dim();
                for ((gr, yr), dr) in g.chunks(s).zip(y.chunks(s)).zip(gx.chunks_mut(s)) {
                    #[allow(unused_mut)]
                    let mut dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    #[cfg(test)]
                    if fault::CORRUPT_SOFTMAX.with(|c| c.get()) {
                        dot *= 0.5;
                    }
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yv * (gv - dot);
                    }
                }
            }),
            Op::Relu(x) => with!(*x, |gx| {
                for ((d, s), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if *xv > 0.0 {
                        *d += s;
                    }
                }
            }),
            Op::MinClamp1(x) => with!(*x, |gx| {
                for ((d, s), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if *xv < 1.0 {
                        *d += s;
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = nodes[x.0].value.last_dim();
                let gain_v = val(*gain);
                with!(*x, |gx| {
                    let mut gh = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gh[j] = gr[j] * gain_v[j];
                        }
                        let mean_g = gh.iter().sum::<f64>() / d as f64;
                        let mean_gh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (gh[j] - mean_g - hr[j] * mean_gh);
                        }
                    }
                });
                with!(*gain, |gg| {
                    for (k, (s, h)) in g.iter().zip(xhat).enumerate() {
                        gg[k % d] += s * h;
                    }
                });
                with!(*bias, |gb| {
                    for chunk in g.chunks(d) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::MeanAxis { x, axis } => with!(*x, |gx| {
                let (pre, n, post) = split_at_axis(nodes[x.0].value.shape(), *axis);
                let inv = 1.0 / n as f64;
                for p in 0..pre {
                    let src = &g[p * post..(p + 1) * post];
                    for j in 0..n {
                        let dst = &mut gx[(p * n + j) * post..(p * n + j + 1) * post];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s * inv;
                        }
                    }
                }
            }),
            Op::SumAll(x) => with!(*x, |gx| {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }),
            Op::MaskedMean { x, mask } => with!(*x, |gx| {
                let shape = nodes[x.0].value.shape();
                let (s, d) = (shape[1], shape[2]);
                for (row, &w) in mask.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let b = row / s;
                    let src = &g[b * d..(b + 1) * d];
                    for (dst, v) in gx[row * d..(row + 1) * d].iter_mut().zip(src) {
                        *dst += w * v;
                    }
                }
            }),
            Op::CumsumExclusive { x, axis } => with!(*x, |gx| {
                let (pre, n, post) = split_at_axis(nodes[x.0].value.shape(), *axis);
                for p in 0..pre {
                    for q in 0..post {
                        let mut acc = 0.0;
                        for j in (0..n).rev() {
                            let idx = (p * n + j) * post + q;
                            gx[idx] += acc;
                            acc += g[idx];
                        }
                    }
                }
            }),
            Op::Reshape(x) => with!(*x, |gx| {
                add_into(gx, g);
            }),
            Op::SwapAxes { x, a, b } => with!(*x, |gx| {
                let out_shape = nodes[i].value.shape();
                let back = swap_axes_copy(g, out_shape, *a, *b);
                add_into(gx, &back);
            }),
            Op::Concat { inputs, axis } => {
                let shape = nodes[i].value.shape();
                let (pre, total, post) = split_at_axis(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.shape()[*axis];
                    with!(v, |gv| {
                        for p in 0..pre {
                            let src = &g[(p * total + offset) * post..(p * total + offset + n) * post];
                            add_into(&mut gv[p * n * post..(p + 1) * n * post], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::Embedding { table, ids } => with!(*table, |gt| {
                let d = nodes[table.0].value.shape()[1];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }),
            Op::CrossEntropy { logits, targets, weights, probs } => with!(*logits, |gl| {
                let v = nodes[logits.0].value.last_dim();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = g[0] * w;
                    let row = &mut gl[r * v..(r + 1) * v];
                    for (d, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d += scale * p;
                    }
                    row[t] -= scale;
                }
            }),
            Op::L2Distance { a, b, diff } => {
                let norms = nodes[i].value.data();
                let d = nodes[a.0].value.last_dim();
                let unit: Vec<f64> = diff
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let nrm = norms[k / d];
                        if nrm > 0.0 { g[k / d] * v / nrm } else { 0.0 }
                    })
                    .collect();
                with!(*a, |ga| {
                    add_into(ga, &unit);
                });
                with!(*b, |gb| {
                    for (d, u) in gb.iter_mut().zip(&unit) {
                        *d -= u;
                    }
                });
            }
            Op::Dropout { x, mask } => with!(*x, |gx| {
                for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }),
        }
    }
}


fn slot<'a>(nodes: &[Node], pass: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(pass[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(product of axes before, extent of axis, product of axes after)`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

/// Copies `data` laid out as `shape` into the layout with axes `a < b` exchanged.
fn swap_axes_copy(data: &[f64], shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    if a == b {
        return data.to_vec();
    }
    let pre: usize = shape[..a].iter().product();
    let na = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let nb = shape[b];
    let post: usize = shape[b + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for p in 0..pre {
        for i in 0..na {
            for m in 0..mid {
                for j in 0..nb {
                    let src = ((((p * na + i) * mid + m) * nb) + j) * post;
                    let dst = ((((p * nb + j) * mid + m) * na) + i) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    out
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out_shape: Vec<usize>,
}

impl MatDims {
    fn resolve(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        let err = || {
            Error::Dimension(format!(
                "matmul{}: cannot multiply {sa:?} by {sb:?}",
                if trans_b { " (b transposed)" } else { "" }
            ))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if ka != kb {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(err());
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        Ok(MatDims {
            batch: lead_a.iter().product(),
            m,
            k: ka,
            n,
            shared_b,
            out_shape,
        })
    }

    /// Row/column strides of the logical `[k, n]` right operand.
    fn b_strides(&self, trans_b: bool) -> (usize, usize) {
        if trans_b {
            (1, self.k)
        } else {
            (self.n, 1)
        }
    }
}

/// `C = A·B + beta·C` for strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
