//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every operation executed through it together with the
//! values the backward pass needs. [`Tape::backward`] walks the record in
//! exact reverse order and accumulates gradients additively. Parameters are
//! pulled in from a [`ParamSet`] with [`Tape::param`]; sets registered with
//! [`Tape::freeze`] enter the graph as constants, which is how stop-gradient
//! boundaries between the world model, actor and critic are expressed.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::array::Array;
use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeom, Mat};
use crate::params::{ParamId, ParamSet};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities with exact derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Elu,
    Sigmoid,
    Tanh,
    Softplus,
    Square,
    Exp,
    Ln,
}

impl Unary {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Square => 2.0 * x,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const HALF_LN_2PI: f32 = 0.918_938_5;

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Conv1d { x: Var, k: Var, geom: ConvGeom, out_channels: usize },
    ConvTranspose1d { x: Var, k: Var, geom: ConvGeom, conv_channels: usize },
    ChannelBias { x: Var, b: Var, channels: usize, len: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Unary(Var, Unary),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reparam { mean: Var, std: Var, eps: Vec<f32> },
    KlDiag { qm: Var, qs: Var, pm: Var, ps: Var },
    GaussLogProb { x: Var, m: Var, s: Var },
    GaussEntropy(Var),
    BceLogits { logits: Var, target: Vec<f32> },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<(u64, usize), Var>,
    frozen: HashSet<u64>,
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn mat_dims(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(invalid(op, format!("expected a 2-D array, got {:?}", a.shape())));
    }
    Ok((a.shape()[0], a.shape()[1]))
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Marks every parameter of `ps` as constant on this tape.
    pub fn freeze(&mut self, ps: &ParamSet) {
        self.frozen.insert(ps.uid());
    }

    /// Binds parameter `id` of `ps`, reusing the leaf when already bound.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        let key = (ps.uid(), id.index());
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&ps.uid());
        let v = self.push(ps.value(id).clone(), Op::Leaf, trainable);
        self.bindings.insert(key, v);
        v
    }

    /// `x[B,I] · w[I,O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bsz, i) = mat_dims("affine", self.value(x))?;
        let (i2, o) = mat_dims("affine", self.value(w))?;
        if i != i2 || self.value(b).len() != o {
            return Err(Error::ShapeMismatch {
                op: "affine",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(bsz * o);
        let bias = self.value(b).data();
        for _ in 0..bsz {
            out.extend_from_slice(bias);
        }
        kernels::gemm(
            Mat::new(self.value(x).data(), bsz, i),
            Mat::new(self.value(w).data(), i, o),
            1.0,
            &mut out,
        );
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(Array::new(&[bsz, o], out)?, Op::Affine { x, w, b }, ng))
    }

    /// Plain matrix product `a[M,K] · b[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_dims("matmul", self.value(a))?;
        let (k2, n) = mat_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Array::new(&[m, n], out)?, Op::MatMul { a, b }, ng))
    }

    /// Same-padded strided cross-correlation: `x[B,Ci,L]`, `kernels[Co,Ci,K]` -> `[B,Co,ceil(L/stride)]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid("conv1d", "stride must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: xs,
                right: ks,
            });
        }
        if ks[2] % 2 == 0 {
            return Err(invalid("conv1d", format!("kernel size {} must be odd", ks[2])));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[2], stride);
        let out = kernels::conv1d_forward(self.value(x).data(), self.value(kernels).data(), &geom, ks[0]);
        let ng = self.ng(&[x, kernels]);
        Ok(self.push(
            Array::new(&[xs[0], ks[0], geom.out_len], out)?,
            Op::Conv1d {
                x,
                k: kernels,
                geom,
                out_channels: ks[0],
            },
            ng,
        ))
    }

    /// Adjoint of [`Tape::conv1d`]: `x[B,Ci,Lin]`, `kernels[Ci,Co,K]` -> `[B,Co,out_len]`,
    /// where `ceil(out_len/stride)` must equal `Lin`.
    pub fn conv1d_transpose(&mut self, x: Var, kernels: Var, stride: usize, out_len: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid("conv1d_transpose", "stride must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[1] != ks[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_transpose",
                left: xs,
                right: ks,
            });
        }
        if ks[2] % 2 == 0 {
            return Err(invalid("conv1d_transpose", format!("kernel size {} must be odd", ks[2])));
        }
        let geom = ConvGeom::new(xs[0], ks[1], out_len, ks[2], stride);
        if geom.out_len != xs[2] {
            return Err(invalid(
                "conv1d_transpose",
                format!(
                    "declared output length {out_len} maps to {} under stride {stride}, input has {}",
                    geom.out_len, xs[2]
                ),
            ));
        }
        let out = kernels::conv1d_adjoint(self.value(x).data(), self.value(kernels).data(), &geom, ks[0]);
        let ng = self.ng(&[x, kernels]);
        Ok(self.push(
            Array::new(&[xs[0], ks[1], out_len], out)?,
            Op::ConvTranspose1d {
                x,
                k: kernels,
                geom,
                conv_channels: ks[0],
            },
            ng,
        ))
    }

    /// Adds `b[C]` to every position of channel `c` in `x[B,C,L]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.value(b).len() != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                left: xs,
                right: self.shape(b).to_vec(),
            });
        }
        let (channels, len) = (xs[1], xs[2]);
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(len).enumerate() {
            let c = bias[i % channels];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::ChannelBias { x, b, channels, len }, ng))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Array> {
        same_shape(op, self.value(a), self.value(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.ng(&[x]);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let ng = self.ng(&[x]);
        self.push(out, Op::Unary(x, kind), ng)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    /// Columns `start..start+len` of a 2-D array.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = mat_dims("slice_cols", self.value(x))?;
        if len == 0 || start + len > cols {
            return Err(invalid("slice_cols", format!("range {start}..{} out of {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Array::new(&[rows, len], out)?, Op::SliceCols { x, start }, ng))
    }

    /// Concatenates 2-D arrays with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = mat_dims("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = mat_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Array::new(&[rows, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..start+len` along the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(invalid("slice_rows", format!("range {start}..{} out of {}", start + len, shape[0])));
        }
        let per = self.value(x).cols();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Array::new(&new_shape, data)?, Op::SliceRows { x, start }, ng))
    }

    /// Stacks arrays along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(parts);
        Ok(self.push(Array::new(&shape, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let ng = self.ng(&[x]);
        self.push(Array::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = (v.sum() / v.len() as f64) as f32;
        let ng = self.ng(&[x]);
        self.push(Array::scalar(s), Op::Mean(x), ng)
    }

    /// `[B, F]` -> `[B, 1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims("row_sum", self.value(x))?;
        let src = self.value(x).data();
        let out = (0..rows).map(|r| src[r * cols..(r + 1) * cols].iter().sum()).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Array::new(&[rows, 1], out)?, Op::RowSum(x), ng))
    }

    /// Reparameterized draw `mean + eps * std` with `eps ~ N(0, I)` from `rng`.
    pub fn sample_gaussian<R: Rng + ?Sized>(&mut self, mean: Var, std: Var, rng: &mut R) -> Result<Var> {
        same_shape("sample_gaussian", self.value(mean), self.value(std))?;
        if let Some(bad) = self.value(std).data().iter().find(|&&s| !(s > 0.0)) {
            return Err(invalid("sample_gaussian", format!("stddev must be positive, got {bad}")));
        }
        let n = self.value(mean).len();
        let eps: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let m = self.value(mean);
        let s = self.value(std);
        let data = m
            .data()
            .iter()
            .zip(s.data())
            .zip(&eps)
            .map(|((&m, &s), &e)| m + e * s)
            .collect();
        let out = Array::new(m.shape(), data)?;
        let ng = self.ng(&[mean, std]);
        Ok(self.push(out, Op::Reparam { mean, std, eps }, ng))
    }

    /// Per-row `KL(N(qm, qs²) || N(pm, ps²))` summed over columns: `[B, D]` -> `[B, 1]`.
    pub fn kl_diag(&mut self, qm: Var, qs: Var, pm: Var, ps: Var) -> Result<Var> {
        for other in [qs, pm, ps] {
            same_shape("kl_diag", self.value(qm), self.value(other))?;
        }
        let (rows, cols) = mat_dims("kl_diag", self.value(qm))?;
        let (a, b, c, d) = (self.value(qm), self.value(qs), self.value(pm), self.value(ps));
        let mut out = vec![0.0f32; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for j in r * cols..(r + 1) * cols {
                acc += kl_term(a.data()[j], b.data()[j], c.data()[j], d.data()[j]) as f64;
            }
            *o = acc as f32;
        }
        let ng = self.ng(&[qm, qs, pm, ps]);
        Ok(self.push(Array::new(&[rows, 1], out)?, Op::KlDiag { qm, qs, pm, ps }, ng))
    }

    /// Per-row diagonal Gaussian log-density of `x` under `N(m, s²)`: `[B, D]` -> `[B, 1]`.
    pub fn gaussian_log_prob(&mut self, x: Var, m: Var, s: Var) -> Result<Var> {
        same_shape("gaussian_log_prob", self.value(x), self.value(m))?;
        same_shape("gaussian_log_prob", self.value(x), self.value(s))?;
        let (rows, cols) = mat_dims("gaussian_log_prob", self.value(x))?;
        let (xv, mv, sv) = (self.value(x).data(), self.value(m).data(), self.value(s).data());
        let out = (0..rows)
            .map(|r| {
                (r * cols..(r + 1) * cols)
                    .map(|j| {
                        let z = (xv[j] - mv[j]) / sv[j];
                        -0.5 * z * z - sv[j].ln() - HALF_LN_2PI
                    })
                    .sum()
            })
            .collect();
        let ng = self.ng(&[x, m, s]);
        Ok(self.push(Array::new(&[rows, 1], out)?, Op::GaussLogProb { x, m, s }, ng))
    }

    /// Per-row differential entropy of `N(·, s²)`: `[B, D]` -> `[B, 1]`.
    pub fn gaussian_entropy(&mut self, s: Var) -> Result<Var> {
        let (rows, cols) = mat_dims("gaussian_entropy", self.value(s))?;
        let sv = self.value(s).data();
        let out = (0..rows)
            .map(|r| sv[r * cols..(r + 1) * cols].iter().map(|&v| entropy_term(v)).sum())
            .collect();
        let ng = self.ng(&[s]);
        Ok(self.push(Array::new(&[rows, 1], out)?, Op::GaussEntropy(s), ng))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against probabilities `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f32]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: lv.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &y)| (softplus(x) - y * x) as f64)
            .sum();
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Array::scalar((total / n) as f32),
            Op::BceLogits {
                logits,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Mean squared error between `pred` and a constant target.
    pub fn mse(&mut self, pred: Var, target: &Array) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from `root`, seeding `d root = 1` elementwise.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Grads { grads };
        }
        grads[root.0] = Some(Array::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Backward from `root` and add the gradients of every bound parameter of each set.
    pub fn backward_into(&self, root: Var, sets: &mut [&mut ParamSet]) -> Grads {
        let grads = self.backward(root);
        for ps in sets.iter_mut() {
            self.accumulate(&grads, ps);
        }
        grads
    }

    /// Adds the gradients of `ps`'s bound parameters into its accumulators.
    pub fn accumulate(&self, grads: &Grads, ps: &mut ParamSet) {
        let uid = ps.uid();
        for (&(set, idx), &v) in &self.bindings {
            if set != uid {
                continue;
            }
            if let Some(g) = grads.get(v) {
                ps.grad_mut(ParamId::from_index(idx)).add_assign(g);
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let send = |v: Var, delta: Array, grads: &mut [Option<Array>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, i) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[1];
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; bsz * i];
                    kernels::gemm(Mat::new(gd, bsz, o), Mat::new(wv.data(), i, o).t(), 0.0, &mut dx);
                    send(*x, Array::new(xv.shape(), dx).unwrap(), grads);
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![0.0; i * o];
                    kernels::gemm(Mat::new(xv.data(), bsz, i).t(), Mat::new(gd, bsz, o), 0.0, &mut dw);
                    send(*w, Array::new(wv.shape(), dw).unwrap(), grads);
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0f32; o];
                    for row in gd.chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*b, Array::new(self.shape(*b), db).unwrap(), grads);
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(Mat::new(gd, m, n), Mat::new(bv.data(), k, n).t(), 0.0, &mut da);
                    send(*a, Array::new(av.shape(), da).unwrap(), grads);
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(Mat::new(av.data(), m, k).t(), Mat::new(gd, m, n), 0.0, &mut db);
                    send(*b, Array::new(bv.shape(), db).unwrap(), grads);
                }
            }
            Op::Conv1d {
                x,
                k,
                geom,
                out_channels,
            } => {
                if self.needs_grad(*x) {
                    let dx = kernels::conv1d_adjoint(gd, self.value(*k).data(), geom, *out_channels);
                    send(*x, Array::new(self.shape(*x), dx).unwrap(), grads);
                }
                if self.needs_grad(*k) {
                    let dk = kernels::conv1d_kernel_grad(self.value(*x).data(), gd, geom, *out_channels);
                    send(*k, Array::new(self.shape(*k), dk).unwrap(), grads);
                }
            }
            Op::ConvTranspose1d {
                x,
                k,
                geom,
                conv_channels,
            } => {
                // Forward was the conv adjoint, so the input gradient is a plain conv of g.
                if self.needs_grad(*x) {
                    let dx = kernels::conv1d_forward(gd, self.value(*k).data(), geom, *conv_channels);
                    send(*x, Array::new(self.shape(*x), dx).unwrap(), grads);
                }
                if self.needs_grad(*k) {
                    let dk = kernels::conv1d_kernel_grad(gd, self.value(*x).data(), geom, *conv_channels);
                    send(*k, Array::new(self.shape(*k), dk).unwrap(), grads);
                }
            }
            Op::ChannelBias { x, b, channels, len } => {
                send(*x, g.clone(), grads);
                if self.needs_grad(*b) {
                    let mut db = vec![0.0f32; *channels];
                    for (i, chunk) in gd.chunks(*len).enumerate() {
                        db[i % channels] += chunk.iter().sum::<f32>();
                    }
                    send(*b, Array::new(self.shape(*b), db).unwrap(), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs_grad(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    send(*a, Array::new(av.shape(), d).unwrap(), grads);
                }
                if self.needs_grad(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    send(*b, Array::new(bv.shape(), d).unwrap(), grads);
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * c), grads),
            Op::AddScalar(x) => send(*x, g.clone(), grads),
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .zip(node.value.data())
                    .map(|((&g, &x), &y)| g * kind.derivative(x, y))
                    .collect();
                send(*x, Array::new(xv.shape(), d).unwrap(), grads);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.value.shape()[1];
                let mut d = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                send(*x, Array::new(self.shape(*x), d).unwrap(), grads);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs_grad(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        send(p, Array::new(self.shape(p), d).unwrap(), grads);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let per = xv.cols();
                let mut d = vec![0.0f32; xv.len()];
                d[start * per..start * per + gd.len()].copy_from_slice(gd);
                send(*x, Array::new(xv.shape(), d).unwrap(), grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs_grad(p) {
                        send(p, Array::new(self.shape(p), gd[offset..offset + n].to_vec()).unwrap(), grads);
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => send(*x, g.clone().reshaped(self.shape(*x)).unwrap(), grads),
            Op::Sum(x) => send(*x, Array::full(self.shape(*x), gd[0]), grads),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f32;
                send(*x, Array::full(self.shape(*x), gd[0] / n), grads)
            }
            Op::RowSum(x) => {
                let cols = self.shape(*x)[1];
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                send(*x, Array::new(self.shape(*x), d).unwrap(), grads);
            }
            Op::Reparam { mean, std, eps } => {
                send(*mean, g.clone(), grads);
                if self.needs_grad(*std) {
                    let d = gd.iter().zip(eps).map(|(&g, &e)| g * e).collect();
                    send(*std, Array::new(self.shape(*std), d).unwrap(), grads);
                }
            }
            Op::KlDiag { qm, qs, pm, ps } => {
                let cols = self.shape(*qm)[1];
                let (a, b, c, d) = (
                    self.value(*qm).data(),
                    self.value(*qs).data(),
                    self.value(*pm).data(),
                    self.value(*ps).data(),
                );
                let n = a.len();
                let (mut dqm, mut dqs, mut dpm, mut dps) =
                    (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for j in 0..n {
                    let gr = gd[j / cols];
                    let diff = a[j] - c[j];
                    let pv = d[j] * d[j];
                    dqm[j] = gr * diff / pv;
                    dpm[j] = -gr * diff / pv;
                    dqs[j] = gr * (b[j] / pv - 1.0 / b[j]);
                    dps[j] = gr * (1.0 / d[j] - (b[j] * b[j] + diff * diff) / (pv * d[j]));
                }
                let shape = self.shape(*qm).to_vec();
                send(*qm, Array::new(&shape, dqm).unwrap(), grads);
                send(*qs, Array::new(&shape, dqs).unwrap(), grads);
                send(*pm, Array::new(&shape, dpm).unwrap(), grads);
                send(*ps, Array::new(&shape, dps).unwrap(), grads);
            }
            Op::GaussLogProb { x, m, s } => {
                let cols = self.shape(*x)[1];
                let (xv, mv, sv) = (self.value(*x).data(), self.value(*m).data(), self.value(*s).data());
                let n = xv.len();
                let (mut dx, mut dm, mut ds) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for j in 0..n {
                    let gr = gd[j / cols];
                    let diff = xv[j] - mv[j];
                    let var = sv[j] * sv[j];
                    dx[j] = -gr * diff / var;
                    dm[j] = gr * diff / var;
                    ds[j] = gr * (diff * diff / (var * sv[j]) - 1.0 / sv[j]);
                }
                let shape = self.shape(*x).to_vec();
                send(*x, Array::new(&shape, dx).unwrap(), grads);
                send(*m, Array::new(&shape, dm).unwrap(), grads);
                send(*s, Array::new(&shape, ds).unwrap(), grads);
            }
            Op::GaussEntropy(s) => {
                let cols = self.shape(*s)[1];
                let sv = self.value(*s).data();
                let d = sv.iter().enumerate().map(|(j, &v)| gd[j / cols] / v).collect();
                send(*s, Array::new(self.shape(*s), d).unwrap(), grads);
            }
            Op::BceLogits { logits, target } => {
                let n = target.len() as f32;
                let d = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&x, &y)| gd[0] * (sigmoid(x) - y) / n)
                    .collect();
                send(*logits, Array::new(self.shape(*logits), d).unwrap(), grads);
            }
        }
    }
}

/// One coordinate of the diagonal Gaussian KL.
pub fn kl_term(qm: f32, qs: f32, pm: f32, ps: f32) -> f32 {
    let diff = qm - pm;
    (ps / qs).ln() + (qs * qs + diff * diff) / (2.0 * ps * ps) - 0.5
}

/// `½ log(2πe σ²)`.
pub fn entropy_term(s: f32) -> f32 {
    0.5 + HALF_LN_2PI + s.ln()
}
