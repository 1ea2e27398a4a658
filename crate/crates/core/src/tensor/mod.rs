//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable row-major `f64` array. Computations are
//! recorded on a [`Tape`]; [`Tape::backward`] replays it in reverse to
//! populate gradients for every named parameter. All tests and models run
//! in 64-bit so finite-difference gradient checks have headroom.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use tape::{BatchStats, GradientMap, Mode, Padding, Tape, TensorId};

use crate::rng::SeedStream;
use crate::{CoreError, Result};

/// Dense n-dimensional array of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(CoreError::ShapeMismatch {
                op: "tensor",
                details: format!("zero dimension in shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "tensor",
                details: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// 2-D convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Row of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() on rank-{} tensor", self.rank());
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub(crate) fn replace_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.data.len());
        self.data = data;
    }
}

/// Run every differentiable primitive through a finite-difference check on
/// one seed's worth of random inputs and return the worst-case report.
///
/// Shared by the unit tests, the `verify grad` command, and the acceptance
/// suite, which runs it over 100 seeds at tolerance 1e-4.
pub fn verify_primitive_gradients(seed: u64) -> Result<GradCheckReport> {
    let mut rng = SeedStream::new(seed);
    let mut rand = |shape: &[usize], lo: f64, hi: f64| -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };

    let step = 1e-5;
    let tol = 1e-4;
    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        tolerance: tol,
        checked: 0,
        worst: None,
    };
    let merge = |r: GradCheckReport, worst: &mut GradCheckReport| {
        worst.checked += r.checked;
        if r.max_rel_err > worst.max_rel_err {
            worst.max_rel_err = r.max_rel_err;
            worst.worst = r.worst;
        }
    };

    let a = rand(&[3, 4], -2.0, 2.0);
    let b = rand(&[3, 4], -2.0, 2.0);
    let m1 = rand(&[3, 4], -1.0, 1.0);
    let m2 = rand(&[4, 2], -1.0, 1.0);
    let pos = rand(&[6], 0.1, 3.0);
    let img = rand(&[2, 6, 5], -1.0, 1.0);
    let ker = rand(&[3, 2, 3, 3], -1.0, 1.0);
    let bias = rand(&[4], -1.0, 1.0);
    let chan_bias = rand(&[2], -1.0, 1.0);
    let gamma = rand(&[2], 0.5, 1.5);
    let beta = rand(&[2], -0.5, 0.5);
    let table = rand(&[5, 3], -1.0, 1.0);
    let logits = rand(&[2, 7], -3.0, 3.0);
    let mask = [true, false, true, true, true, false, true];

    type Check = Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>>;
    let cases: Vec<(Vec<Tensor>, Check)> = vec![
        (
            vec![a.clone(), b.clone()],
            Box::new(|t, ids| {
                let s = t.add(ids[0], ids[1])?;
                let d = t.sub(s, ids[1])?;
                let m = t.mul(d, ids[1])?;
                t.sum_all(m)
            }),
        ),
        (
            vec![a.clone()],
            Box::new(|t, ids| {
                let s = t.add_scalar(ids[0], 0.7)?;
                let m = t.mul_scalar(s, -1.3)?;
                t.mean_all(m)
            }),
        ),
        (
            vec![m1.clone(), m2.clone()],
            Box::new(|t, ids| {
                let p = t.matmul(ids[0], ids[1])?;
                let pt = t.transpose(p)?;
                let sq = t.mul(pt, pt)?;
                t.sum_all(sq)
            }),
        ),
        (
            vec![img.clone(), ker.clone()],
            Box::new(|t, ids| {
                let c = t.conv2d(ids[0], ids[1], (2, 1), Padding::Same)?;
                let r = t.relu(c)?;
                t.mean_all(r)
            }),
        ),
        (
            vec![img.clone(), ker.clone()],
            Box::new(|t, ids| {
                let c = t.conv2d(ids[0], ids[1], (1, 1), Padding::Valid)?;
                t.sum_all(c)
            }),
        ),
        (
            vec![m1.clone(), bias.clone()],
            Box::new(|t, ids| {
                let b = t.bias_add(ids[0], ids[1], 1)?;
                let sq = t.mul(b, b)?;
                t.sum_all(sq)
            }),
        ),
        (
            vec![img.clone(), chan_bias.clone()],
            Box::new(|t, ids| {
                let b = t.bias_add(ids[0], ids[1], 0)?;
                t.mean_all(b)
            }),
        ),
        (
            vec![a.clone()],
            Box::new(|t, ids| {
                let s = t.sigmoid(ids[0])?;
                let h = t.tanh(s)?;
                t.sum_all(h)
            }),
        ),
        (
            vec![pos.clone()],
            Box::new(|t, ids| {
                let l = t.log(ids[0])?;
                let e = t.exp(l)?;
                let c = t.clamp(e, 0.2, 2.5)?;
                t.sum_all(c)
            }),
        ),
        (
            vec![m1.clone(), m2.clone()],
            Box::new(|t, ids| {
                let tr = t.transpose(ids[1])?; // [2, 4]
                let cat = t.concat(&[ids[0], tr], 0)?; // [5, 4]
                let sl = t.slice(cat, 0, 1, 3)?;
                let sm = t.sum_axis(sl, 0)?;
                let mm = t.mean_axis(sl, 1)?;
                let s1 = t.sum_all(sm)?;
                let s2 = t.sum_all(mm)?;
                t.add(s1, s2)
            }),
        ),
        (
            vec![table.clone()],
            Box::new(|t, ids| {
                let e = t.embedding(ids[0], &[0, 2, 4, 2])?;
                let sq = t.mul(e, e)?;
                t.mean_all(sq)
            }),
        ),
        (
            vec![img.clone(), gamma.clone(), beta.clone()],
            Box::new(|t, ids| {
                let (y, _) =
                    t.batchnorm(ids[0], ids[1], ids[2], &[], &[], 1e-5, Mode::Train, Some(4))?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            }),
        ),
        (
            vec![img.clone(), gamma.clone(), beta.clone()],
            Box::new(|t, ids| {
                let (y, _) = t.batchnorm(
                    ids[0],
                    ids[1],
                    ids[2],
                    &[0.1, -0.2],
                    &[0.9, 1.1],
                    1e-5,
                    Mode::Eval,
                    None,
                )?;
                t.sum_all(y)
            }),
        ),
        (
            vec![a.clone()],
            Box::new(move |t, ids| {
                // fixed per-call seed keeps the dropout mask deterministic
                let mut drop_rng = SeedStream::new(99);
                let d = t.dropout(ids[0], 0.3, Mode::Train, &mut drop_rng)?;
                t.sum_all(d)
            }),
        ),
        (
            vec![logits.clone()],
            Box::new(move |t, ids| {
                let sm = t.masked_softmax(ids[0], Some(&mask), 1)?;
                let sq = t.mul(sm, sm)?;
                t.sum_all(sq)
            }),
        ),
        (
            vec![logits.clone()],
            Box::new(|t, ids| {
                let sm = t.masked_softmax(ids[0], None, 1)?;
                let l = t.log(sm)?;
                t.mean_all(l)
            }),
        ),
    ];

    for (inputs, f) in cases {
        let report = grad_check(f, &inputs, step, tol)?;
        merge(report, &mut worst);
    }
    Ok(worst)
}

/// Named learnable tensor. Names are dotted paths unique within a model,
/// e.g. `speech_enc.conv1.kernel`.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(),
        }
    }
}

#[cfg(test)]
mod tensor_type_tests {
    use super::*;

    #[test]
    fn rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(2.5);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 2.5);
    }
}
