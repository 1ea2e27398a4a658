//! Append-only computation tape and reverse-mode gradients.
//!
//! Every op records a node holding the produced value plus whatever the
//! backward pass needs (saved activations, dropout masks, batch statistics).
//! Node inputs always precede the node, so one reverse scan visits each node
//! exactly once. Ops validate shapes on entry and reject non-finite outputs.

use std::collections::BTreeMap;

use crate::rng::SeedStream;
use crate::tensor::{Parameter, Tensor};
use crate::{CoreError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Train/eval switch for dropout and batchnorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Spatial padding for [`Tape::conv2d`].
///
/// `Same` pads with zeros at the trailing edge only, giving
/// `out = ceil(in / stride)` per axis. Trailing-only padding keeps output
/// frame `t` anchored at input frame `t * stride` regardless of the input
/// length, which is what makes padded batches equivalent to unpadded ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Per-channel batch statistics produced by a train-mode batchnorm node,
/// used by the caller to update running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        stride: (usize, usize),
        padding: Padding,
        // shapes after lifting rank-2 arguments to [C,H,W] / [Co,Ci,kh,kw]
        in_shape: [usize; 3],
        ker_shape: [usize; 4],
    },
    BiasAdd {
        x: TensorId,
        bias: TensorId,
        axis: usize,
    },
    Sigmoid(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Clamp {
        x: TensorId,
        lo: f64,
        hi: f64,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    SumAxis {
        x: TensorId,
        axis: usize,
    },
    MeanAxis {
        x: TensorId,
        axis: usize,
    },
    Embedding {
        table: TensorId,
        indices: Vec<usize>,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        // saved for backward
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        // None in eval mode: statistics are constants there
        train_valid: Option<usize>,
    },
    Dropout {
        x: TensorId,
        scale_mask: Vec<f64>,
    },
    MaskedSoftmax {
        x: TensorId,
        axis: usize,
        mask: Option<Vec<bool>>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct GradientMap {
    by_name: BTreeMap<String, Tensor>,
    leaf_grads: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    /// Gradient of a named parameter. Parameters registered on the tape but
    /// unreachable from the loss report zero gradients.
    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }

    /// Gradient of any leaf (used by the gradient checker).
    pub fn of(&self, id: TensorId) -> Option<&Tensor> {
        self.leaf_grads.get(&id.0)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, TensorId>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Record an input; whether gradients flow is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let requires_grad = t.requires_grad();
        self.push_unchecked(Op::Leaf, t.clone(), requires_grad)
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        let mut v = t.clone();
        v.requires_grad = false;
        self.push_unchecked(Op::Leaf, v, false)
    }

    /// Register a named parameter leaf. Names must be unique per tape.
    pub fn parameter(&mut self, p: &Parameter) -> Result<TensorId> {
        if self.params.contains_key(&p.name) {
            return Err(CoreError::InvalidArgument(format!(
                "duplicate parameter name on tape: {}",
                p.name
            )));
        }
        let id = self.push_unchecked(Op::Leaf, p.tensor.clone(), true);
        self.params.insert(p.name.clone(), id);
        Ok(id)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor {
            shape,
            data,
            requires_grad,
        };
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape_err(op: &'static str, details: String) -> CoreError {
        CoreError::ShapeMismatch { op, details }
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        self.push(name, op, shape, data, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| x + c).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs_grad(&[a]);
        self.push("add_scalar", Op::AddScalar(a), shape, data, rg)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs_grad(&[a]);
        self.push("mul_scalar", Op::MulScalar(a, c), shape, data, rg)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(name, op, shape, data, rg)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        self.push("matmul", Op::MatMul(a, b), vec![m, n], data, rg)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Self::shape_err(
                "transpose",
                format!("rank {} != 2", t.rank()),
            ));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push("transpose", Op::Transpose(x), vec![n, m], data, rg)
    }

    /// Broadcast-add `bias` along `axis` of `x`.
    pub fn bias_add(&mut self, x: TensorId, bias: TensorId, axis: usize) -> Result<TensorId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tb.rank() != 1 || axis >= tx.rank() || tb.shape()[0] != tx.shape()[axis] {
            return Err(Self::shape_err(
                "bias_add",
                format!("x {:?}, bias {:?}, axis {axis}", tx.shape(), tb.shape()),
            ));
        }
        let st = strides(tx.shape());
        let axis_len = tx.shape()[axis];
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[(i / st[axis]) % axis_len])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.needs_grad(&[x, bias]);
        self.push("bias_add", Op::BiasAdd { x, bias, axis }, shape, data, rg)
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D convolution (cross-correlation), valid or trailing-edge-same
    /// padding. Input is `[C_in, H, W]`, kernel `[C_out, C_in, kh, kw]`;
    /// rank-2 arguments are treated as single-channel and, when both are
    /// rank-2, the output is returned rank-2 as well.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<TensorId> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let in_shape: [usize; 3] = match ti.shape() {
            [h, w] => [1, *h, *w],
            [c, h, w] => [*c, *h, *w],
            other => {
                return Err(Self::shape_err("conv2d", format!("input shape {other:?}")));
            }
        };
        let ker_shape: [usize; 4] = match tk.shape() {
            [kh, kw] => [1, 1, *kh, *kw],
            [co, ci, kh, kw] => [*co, *ci, *kh, *kw],
            other => {
                return Err(Self::shape_err("conv2d", format!("kernel shape {other:?}")));
            }
        };
        let [ci, h, w] = in_shape;
        let [co, kci, kh, kw] = ker_shape;
        if kci != ci {
            return Err(Self::shape_err(
                "conv2d",
                format!("input channels {ci} != kernel channels {kci}"),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(CoreError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (oh, ow) = conv_out_dims((h, w), (kh, kw), stride, padding).ok_or_else(|| {
            Self::shape_err(
                "conv2d",
                format!("input {h}x{w} too small for kernel {kh}x{kw} (valid padding)"),
            )
        })?;

        let mut out = vec![0.0; co * oh * ow];
        let idata = ti.data();
        let kdata = tk.data();
        for c_out in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for c_in in 0..ci {
                        for ky in 0..kh {
                            let iy = y * stride.0 + ky;
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = x * stride.1 + kx;
                                if ix >= w {
                                    continue;
                                }
                                acc += idata[(c_in * h + iy) * w + ix]
                                    * kdata[((c_out * ci + c_in) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(c_out * oh + y) * ow + x] = acc;
                }
            }
        }

        let out_shape = if ti.rank() == 2 && tk.rank() == 2 {
            vec![oh, ow]
        } else {
            vec![co, oh, ow]
        };
        let rg = self.needs_grad(&[input, kernel]);
        self.push(
            "conv2d",
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
                in_shape,
                ker_shape,
            },
            out_shape,
            out,
            rg,
        )
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(CoreError::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Self::shape_err("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Self::shape_err(
                    "concat",
                    format!("{s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for id in inputs {
                let t = &self.nodes[id.0].value;
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.needs_grad(inputs);
        self.push(
            "concat",
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out_shape,
            data,
            rg,
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Self::shape_err(
                "slice",
                format!("slice {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.needs_grad(&[x]);
        self.push(
            "slice",
            Op::Slice { x, axis, start, len },
            out_shape,
            data,
            rg,
        )
    }

    /// Row `r` of a rank-2 tensor as a `[1, cols]` tensor.
    pub fn row(&mut self, x: TensorId, r: usize) -> Result<TensorId> {
        self.slice(x, 0, r, 1)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data().iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push("sum_all", Op::SumAll(x), vec![1], vec![s], rg)
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.needs_grad(&[x]);
        self.push("mean_all", Op::MeanAll(x), vec![1], vec![s], rg)
    }

    fn reduce_axis(
        &mut self,
        name: &'static str,
        x: TensorId,
        axis: usize,
        mean: bool,
    ) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Self::shape_err(name, format!("axis {axis} of {shape:?}")));
        }
        if shape.len() == 1 {
            return if mean { self.mean_all(x) } else { self.sum_all(x) };
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..axis_len {
                let base = (o * axis_len + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += t.data()[base + i];
                }
            }
        }
        if mean {
            for v in &mut data {
                *v /= axis_len as f64;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.needs_grad(&[x]);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        self.push(name, op, out_shape, data, rg)
    }

    /// Sum along `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    /// Mean along `axis`, dropping it from the shape.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    // ── lookup, normalization, regularization ───────────────────────────

    /// Gather rows of `table` (`[V, d]`) at `indices`, producing `[L, d]`.
    pub fn embedding(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Self::shape_err(
                "embedding",
                format!("table rank {} != 2", t.rank()),
            ));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if indices.is_empty() {
            return Err(CoreError::InvalidArgument("embedding of empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(CoreError::InvalidArgument(format!(
                "embedding index {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.needs_grad(&[table]);
        self.push(
            "embedding",
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            vec![indices.len(), d],
            data,
            rg,
        )
    }

    /// Batch normalization over a `[C, H, W]` feature map, per channel.
    ///
    /// In train mode the statistics are computed over the spatial positions
    /// of the leading `valid_h.unwrap_or(H)` time rows (masked rows are
    /// normalized with the same statistics but excluded from them), and the
    /// batch statistics are returned so the caller can maintain running
    /// averages. In eval mode the provided running statistics are used and
    /// no statistics are returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        mode: Mode,
        valid_h: Option<usize>,
    ) -> Result<(TensorId, Option<BatchStats>)> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 3 {
            return Err(Self::shape_err(
                "batchnorm",
                format!("expected [C,H,W], got {:?}", t.shape()),
            ));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Self::shape_err(
                "batchnorm",
                format!("gamma {:?} / beta {:?} vs {c} channels", tg.shape(), tb.shape()),
            ));
        }
        let vh = valid_h.unwrap_or(h).min(h);
        if vh == 0 {
            return Err(CoreError::InvalidArgument("batchnorm with zero valid rows".into()));
        }

        let (mean, var) = match mode {
            Mode::Train => {
                let n = (vh * w) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for y in 0..vh {
                        for xw in 0..w {
                            s += t.data()[(ch * h + y) * w + xw];
                        }
                    }
                    let m = s / n;
                    let mut v = 0.0;
                    for y in 0..vh {
                        for xw in 0..w {
                            let d = t.data()[(ch * h + y) * w + xw] - m;
                            v += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / n;
                }
                (mean, var)
            }
            Mode::Eval => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Self::shape_err(
                        "batchnorm",
                        format!("running stats length vs {c} channels"),
                    ));
                }
                (running_mean.to_vec(), running_var.to_vec())
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; c * h * w];
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let (g, b) = (tg.data()[ch], tb.data()[ch]);
            for i in 0..h * w {
                let idx = ch * h * w + i;
                let xh = (t.data()[idx] - mean[ch]) * inv_std[ch];
                xhat[idx] = xh;
                out[idx] = g * xh + b;
            }
        }

        let stats = match mode {
            Mode::Train => Some(BatchStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            Mode::Eval => None,
        };
        let rg = self.needs_grad(&[x, gamma, beta]);
        let id = self.push(
            "batchnorm",
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                train_valid: match mode {
                    Mode::Train => Some(vh),
                    Mode::Eval => None,
                },
            },
            vec![c, h, w],
            out,
            rg,
        )?;
        Ok((id, stats))
    }

    /// Inverted dropout: train mode zeroes each element with probability
    /// `rate` and scales survivors by `1/(1-rate)`; eval mode is identity.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        mode: Mode,
        rng: &mut SeedStream,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let t = &self.nodes[x.0].value;
        let scale = 1.0 / (1.0 - rate);
        let scale_mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(&scale_mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        self.push("dropout", Op::Dropout { x, scale_mask }, shape, data, rg)
    }

    /// Numerically-stabilized softmax along `axis` with an optional boolean
    /// mask. Masked positions get exactly zero probability. The mask either
    /// matches the axis length (shared across lanes) or the full shape.
    pub fn masked_softmax(
        &mut self,
        x: TensorId,
        mask: Option<&[bool]>,
        axis: usize,
    ) -> Result<TensorId> {
        let t = &self.nodes[x.0].value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Self::shape_err(
                "masked_softmax",
                format!("axis {axis} of {shape:?}"),
            ));
        }
        let axis_len = shape[axis];
        if let Some(m) = mask {
            if m.len() != axis_len && m.len() != t.numel() {
                return Err(Self::shape_err(
                    "masked_softmax",
                    format!(
                        "mask length {} matches neither axis {axis_len} nor numel {}",
                        m.len(),
                        t.numel()
                    ),
                ));
            }
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * axis_len + k) * inner + i;
                let masked = |k: usize| {
                    mask.map(|m| {
                        if m.len() == axis_len {
                            !m[k]
                        } else {
                            !m[at(k)]
                        }
                    })
                    .unwrap_or(false)
                };
                let mut max = f64::NEG_INFINITY;
                for k in 0..axis_len {
                    if !masked(k) {
                        max = max.max(t.data()[at(k)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(CoreError::InvalidArgument(
                        "masked_softmax: fully masked lane".into(),
                    ));
                }
                let mut denom = 0.0;
                for k in 0..axis_len {
                    if !masked(k) {
                        let e = (t.data()[at(k)] - max).exp();
                        data[at(k)] = e;
                        denom += e;
                    }
                }
                for k in 0..axis_len {
                    if !masked(k) {
                        data[at(k)] /= denom;
                    }
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        self.push(
            "masked_softmax",
            Op::MaskedSoftmax {
                x,
                axis,
                mask: mask.map(|m| m.to_vec()),
            },
            shape,
            data,
            rg,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// named parameter registered on this tape (zeros when unreachable) and
    /// for every leaf reached by the sweep.
    pub fn backward(&self, loss: TensorId) -> Result<GradientMap> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g); // keep leaf gradients for reporting
            }
        }

        let mut leaf_grads = BTreeMap::new();
        for (id, slot) in grads.into_iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[id].op, slot) {
                let shape = self.nodes[id].value.shape().to_vec();
                leaf_grads.insert(
                    id,
                    Tensor {
                        shape,
                        data: g,
                        requires_grad: false,
                    },
                );
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, pid) in &self.params {
            let t = match leaf_grads.get(&pid.0) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[pid.0].value.shape().to_vec()),
            };
            by_name.insert(name.clone(), t);
        }

        Ok(GradientMap {
            by_name,
            leaf_grads,
        })
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_inputs(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let ga: Vec<f64> = g.iter().zip(db).map(|(&gv, &bv)| gv * bv).collect();
                let gb: Vec<f64> = g.iter().zip(da).map(|(&gv, &av)| gv * av).collect();
                self.add_grad(grads, *a, &ga);
                self.add_grad(grads, *b, &gb);
            }
            Op::AddScalar(a) => self.add_grad(grads, *a, g),
            Op::MulScalar(a, c) => {
                let ga: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = g . B^T ; dB = A^T . g
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * db[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += da[i * k + p] * g[i * n + j];
                        }
                        gb[p * n + j] = acc;
                    }
                }
                self.add_grad(grads, *a, &ga);
                self.add_grad(grads, *b, &gb);
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                self.add_grad(grads, *a, &ga);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
                in_shape,
                ker_shape,
            } => {
                let [ci, h, w] = *in_shape;
                let [co, _, kh, kw] = *ker_shape;
                let (oh, ow) = conv_out_dims((h, w), (kh, kw), *stride, *padding).unwrap();
                let idata = self.data(*input);
                let kdata = self.data(*kernel);
                let mut gi = vec![0.0; ci * h * w];
                let mut gk = vec![0.0; co * ci * kh * kw];
                for c_out in 0..co {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = g[(c_out * oh + y) * ow + x];
                            if gv == 0.0 {
                                continue;
                            }
                            for c_in in 0..ci {
                                for ky in 0..kh {
                                    let iy = y * stride.0 + ky;
                                    if iy >= h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = x * stride.1 + kx;
                                        if ix >= w {
                                            continue;
                                        }
                                        let ii = (c_in * h + iy) * w + ix;
                                        let ki = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                                        gi[ii] += gv * kdata[ki];
                                        gk[ki] += gv * idata[ii];
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(grads, *input, &gi);
                self.add_grad(grads, *kernel, &gk);
            }
            Op::BiasAdd { x, bias, axis } => {
                self.add_grad(grads, *x, g);
                let sx = self.shape(*x);
                let st = strides(sx);
                let axis_len = sx[*axis];
                let mut gb = vec![0.0; axis_len];
                for (i, &gv) in g.iter().enumerate() {
                    gb[(i / st[*axis]) % axis_len] += gv;
                }
                self.add_grad(grads, *bias, &gb);
            }
            Op::Sigmoid(a) => {
                let y = self.data_of(id);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let y = self.data_of(id);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let y = self.data_of(id);
                let ga: Vec<f64> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::Log(a) => {
                let x = self.data(*a);
                let ga: Vec<f64> = g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect();
                self.add_grad(grads, *a, &ga);
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *x, &ga);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].value.shape();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let mut offset = 0;
                for inp in inputs {
                    let s = self.shape(*inp);
                    let block = s[*axis] * inner;
                    let total_block = out_shape[*axis] * inner;
                    let mut gi = vec![0.0; s.iter().product()];
                    for o in 0..outer {
                        let src = o * total_block + offset;
                        gi[o * block..(o + 1) * block].copy_from_slice(&g[src..src + block]);
                    }
                    self.add_grad(grads, *inp, &gi);
                    offset += block;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let sx = self.shape(*x);
                let inner: usize = sx[axis + 1..].iter().product();
                let outer: usize = sx[..*axis].iter().product();
                let mut gi = vec![0.0; sx.iter().product()];
                for o in 0..outer {
                    let dst = (o * sx[*axis] + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.add_grad(grads, *x, &gi);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                self.add_grad(grads, *a, &vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                self.add_grad(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let mean = matches!(self.nodes[id].op, Op::MeanAxis { .. });
                let sx = self.shape(*x);
                let inner: usize = sx[axis + 1..].iter().product();
                let outer: usize = sx[..*axis].iter().product();
                let axis_len = sx[*axis];
                let scale = if mean { 1.0 / axis_len as f64 } else { 1.0 };
                let mut gi = vec![0.0; sx.iter().product()];
                for o in 0..outer {
                    for k in 0..axis_len {
                        let base = (o * axis_len + k) * inner;
                        for i in 0..inner {
                            gi[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.add_grad(grads, *x, &gi);
            }
            Op::Embedding { table, indices } => {
                let st = self.shape(*table);
                let d = st[1];
                let mut gt = vec![0.0; st[0] * d];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[idx * d + j] += g[row * d + j];
                    }
                }
                self.add_grad(grads, *table, &gt);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                train_valid,
            } => {
                let sx = self.shape(*x);
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let gdata = self.data(*gamma);
                let xdata = self.data(*x);
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let base = ch * h * w;
                    for i in 0..h * w {
                        ggamma[ch] += g[base + i] * xhat[base + i];
                        gbeta[ch] += g[base + i];
                    }
                    match train_valid {
                        Some(vh) => {
                            // gradient flows through the batch statistics of
                            // the valid region; masked rows only see the
                            // direct normalization path
                            let n = (vh * w) as f64;
                            let mut dvar = 0.0;
                            let mut sum_dxhat = 0.0;
                            for i in 0..h * w {
                                let dxhat = g[base + i] * gdata[ch];
                                let xm = xdata[base + i] - mean[ch];
                                dvar += dxhat * xm * (-0.5) * inv_std[ch].powi(3);
                                sum_dxhat += dxhat;
                            }
                            let dmean = -inv_std[ch] * sum_dxhat;
                            for y in 0..h {
                                for xw in 0..w {
                                    let i = y * w + xw;
                                    let dxhat = g[base + i] * gdata[ch];
                                    let mut dx = dxhat * inv_std[ch];
                                    if y < *vh {
                                        dx += dvar * 2.0 * (xdata[base + i] - mean[ch]) / n
                                            + dmean / n;
                                    }
                                    gx[base + i] = dx;
                                }
                            }
                        }
                        None => {
                            for i in 0..h * w {
                                gx[base + i] = g[base + i] * gdata[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                self.add_grad(grads, *x, &gx);
                self.add_grad(grads, *gamma, &ggamma);
                self.add_grad(grads, *beta, &gbeta);
            }
            Op::Dropout { x, scale_mask } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(scale_mask)
                    .map(|(&gv, &m)| gv * m)
                    .collect();
                self.add_grad(grads, *x, &ga);
            }
            Op::MaskedSoftmax { x, axis, mask } => {
                let y = self.data_of(id);
                let shape = self.nodes[id].value.shape();
                let axis_len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * axis_len + k) * inner + i;
                        let masked = |k: usize| {
                            mask.as_ref()
                                .map(|m| {
                                    if m.len() == axis_len {
                                        !m[k]
                                    } else {
                                        !m[at(k)]
                                    }
                                })
                                .unwrap_or(false)
                        };
                        let mut dot = 0.0;
                        for k in 0..axis_len {
                            if !masked(k) {
                                dot += g[at(k)] * y[at(k)];
                            }
                        }
                        for k in 0..axis_len {
                            if !masked(k) {
                                gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
                self.add_grad(grads, *x, &gx);
            }
        }
    }

    fn data_of(&self, id: usize) -> &[f64] {
        self.nodes[id].value.data()
    }
}

/// `out = ceil(in/stride)` for same padding, standard formula for valid.
fn conv_out_dims(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    padding: Padding,
) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if h < kh || w < kw {
                None
            } else {
                Some(((h - kh) / sh + 1, (w - kw) / sw + 1))
            }
        }
        Padding::Same => Some((h.div_ceil(sh), w.div_ceil(sw))),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}
