//! Reverse-mode automatic differentiation over a linear (Wengert) tape.
//!
//! Every op appends one node whose parents already exist on the tape, so the
//! node order is a topological order and the backward sweep is a single
//! reverse pass.

use super::gemm::{gemm, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow { x: Var, bias: Var },
    MulRows { x: Var, scale: Var },
    MulScalar { x: Var, scale: Var },
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gelu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, temperature: f64 },
    LogSoftmax { x: Var, temperature: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    SegmentMean { x: Var, segment: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick { x: Var, index: Vec<usize> },
    Attention(Box<AttentionSaved>),
}

struct AttentionSaved {
    qkv: Var,
    heads: usize,
    seq: usize,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records the forward computation of one evaluation.
///
/// A tape is built per step and dropped afterwards; nothing is shared
/// between tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v` as a tensor; zeros when unreached.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = K * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let u = K * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Overflow-safe `log(1 + e^x)`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `x / temperature` in place (max-subtracted).
pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize, temperature: f64) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param(
            "temperature",
            format!("must be positive and finite, got {temperature}"),
        ));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same values as `x`, cut from the gradient graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!(
                "{op} expects a matrix, got shape {other:?}"
            ))),
        }
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (kb, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let bv = if b_transposed {
            View::transposed(0, bc)
        } else {
            View::dense(0, bc)
        };
        gemm(
            m,
            k,
            n,
            1.0,
            self.data(a),
            View::dense(0, k),
            self.data(b),
            bv,
            0.0,
            &mut out,
            View::dense(0, n),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, b_transposed },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Adds `bias` (length = last extent) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).as_matrix_dims();
        if self.value(bias).len() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias).to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRow { x, bias }, needs))
    }

    /// Multiplies row `i` of `x` by `scale[i]`.
    pub fn mul_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if self.value(scale).len() != rows {
            return Err(Error::Dimension {
                op: "mul_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let s = self.data(scale).to_vec();
        let mut value = self.value(x).clone();
        for (row, sv) in value.data_mut().chunks_mut(cols.max(1)).zip(&s) {
            for v in row.iter_mut() {
                *v *= sv;
            }
        }
        let needs = self.needs(x) || self.needs(scale);
        Ok(self.push(value, Op::MulRows { x, scale }, needs))
    }

    /// Multiplies every entry of `x` by the single-element `scale`.
    pub fn mul_scalar(&mut self, x: Var, scale: Var) -> Result<Var> {
        if self.value(scale).len() != 1 {
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let s = self.data(scale)[0];
        let value = self.value(x).map(|v| v * s);
        let needs = self.needs(x) || self.needs(scale);
        Ok(self.push(value, Op::MulScalar { x, scale }, needs))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Elementwise `log(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus_scalar)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let (_, cols) = self.value(x).as_matrix_dims();
        let mut value = self.value(x).clone();
        softmax_rows_in_place(value.data_mut(), cols, temperature);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, temperature }, needs))
    }

    /// Log-softmax of `x / temperature` along the last axis (stable log-sum-exp).
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let (_, cols) = self.value(x).as_matrix_dims();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            for v in row.iter_mut() {
                *v = (*v - max) / temperature - lse;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::LogSoftmax { x, temperature }, needs))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// the affine `gamma`, `beta` (both of length = last extent).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.data(gamma);
        let b = self.data(beta);
        let xs = self.data(x);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (_, cols) = self.value(x).as_matrix_dims();
        let mut value = self.value(x).clone();
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let needs = self.needs(x);
        self.push(value, Op::L2NormRows { x, norms }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), needs))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let (_, cols) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather_rows", x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), cols], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Means over consecutive blocks of `segment` rows: `[S·segment, C] → [S, C]`.
    pub fn segment_mean(&mut self, x: Var, segment: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("segment_mean", x)?;
        if segment == 0 || rows % segment != 0 {
            return Err(Error::Shape(format!(
                "segment_mean: {rows} rows not divisible into segments of {segment}"
            )));
        }
        let src = self.data(x);
        let groups = rows / segment;
        let mut out = vec![0.0; groups * cols];
        for g in 0..groups {
            for r in 0..segment {
                let row = &src[(g * segment + r) * cols..(g * segment + r + 1) * cols];
                for c in 0..cols {
                    out[g * cols + c] += row[c];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= segment as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![groups, cols], out)?,
            Op::SegmentMean { x, segment },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).sum() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Picks entries by flat row-major index into a vector.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!(
                "pick index {bad} out of range for {n} entries"
            )));
        }
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::vector(data),
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Diagonal of a square matrix.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("diagonal", x)?;
        if r != c {
            return Err(Error::Dimension {
                op: "diagonal",
                lhs: vec![r, c],
                rhs: vec![c, r],
            });
        }
        let idx: Vec<usize> = (0..r).map(|i| i * c + i).collect();
        self.pick(x, &idx)
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[S·seq, 3C]` holding query, key and value projections side by
    /// side for `S` independent sequences of length `seq`. `key_mask`, when
    /// given, has one flag per row; `false` keys receive zero attention.
    /// Returns `[S·seq, C]`.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        seq: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (rows, width3) = self.matrix_dims("attention", qkv)?;
        if width3 % 3 != 0 || heads == 0 || (width3 / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: width {width3} is not 3·heads·d for {heads} heads"
            )));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::Shape(format!(
                "attention: {rows} rows not divisible into sequences of {seq}"
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != rows {
                return Err(Error::Shape(format!(
                    "attention: key mask has {} flags for {rows} rows",
                    m.len()
                )));
            }
        }
        let c = width3 / 3;
        let d = c / heads;
        let n_seq = rows / seq;
        let scale = 1.0 / (d as f64).sqrt();
        let src = self.data(qkv);
        let mut probs = vec![0.0; n_seq * heads * seq * seq];
        let mut out = vec![0.0; rows * c];
        for s in 0..n_seq {
            let base = s * seq * width3;
            for h in 0..heads {
                let p_off = (s * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(
                    seq,
                    d,
                    seq,
                    scale,
                    src,
                    View::strided(base + h * d, width3, 1),
                    src,
                    View::strided(base + c + h * d, 1, width3),
                    0.0,
                    p,
                    View::dense(0, seq),
                );
                if let Some(mask) = key_mask {
                    let m = &mask[s * seq..(s + 1) * seq];
                    for row in p.chunks_mut(seq) {
                        for (v, &keep) in row.iter_mut().zip(m) {
                            if !keep {
                                *v = f64::NEG_INFINITY;
                            }
                        }
                    }
                }
                softmax_rows_in_place(p, seq, 1.0);
                gemm(
                    seq,
                    seq,
                    d,
                    1.0,
                    p,
                    View::dense(0, seq),
                    src,
                    View::strided(base + 2 * c + h * d, width3, 1),
                    0.0,
                    &mut out,
                    View::strided(s * seq * c + h * d, c, 1),
                );
            }
        }
        if probs.iter().any(|v| v.is_nan()) {
            return Err(Error::Input(
                "attention: a sequence has every key masked".into(),
            ));
        }
        let needs = self.needs(qkv);
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::Attention(Box::new(AttentionSaved {
                qkv,
                heads,
                seq,
                probs,
            })),
            needs,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (m, k) = self.value(*a).as_matrix_dims();
                let n = node.value.shape()[1];
                let bcols = self.value(*b).shape()[1];
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = G · op(B)ᵀ
                    let bv = if *b_transposed {
                        View::dense(0, bcols)
                    } else {
                        View::transposed(0, bcols)
                    };
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        View::dense(0, n),
                        self.data(*b),
                        bv,
                        1.0,
                        ga,
                        View::dense(0, k),
                    );
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    if *b_transposed {
                        // B is n×k; dB = Gᵀ · A
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            g,
                            View::transposed(0, n),
                            self.data(*a),
                            View::dense(0, k),
                            1.0,
                            gb,
                            View::dense(0, k),
                        );
                    } else {
                        // dB = Aᵀ · G
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            self.data(*a),
                            View::transposed(0, k),
                            g,
                            View::dense(0, n),
                            1.0,
                            gb,
                            View::dense(0, n),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::AddRow { x, bias } => {
                let cols = self.value(*bias).len();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MulRows { x, scale } => {
                let (_, cols) = self.value(*x).as_matrix_dims();
                let cols = cols.max(1);
                let s = self.data(*scale);
                let xv = self.data(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (i, (gr, gi)) in gx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        gr.iter_mut().zip(gi).for_each(|(a, b)| *a += b * s[i]);
                    }
                }
                if let Some(gs) = self.grad_buf(grads, *scale) {
                    for (i, (xr, gi)) in xv.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        gs[i] += xr.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::MulScalar { x, scale } => {
                let s = self.data(*scale)[0];
                let xv = self.data(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * s);
                }
                if let Some(gs) = self.grad_buf(grads, *scale) {
                    gs[0] += xv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.data(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(xv[i]);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                let (_, cols) = node.value.as_matrix_dims();
                let y = node.value.data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((gxr, yr), gr) in gx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gxr[j] += yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                }
            }
            Op::LogSoftmax { x, temperature } => {
                let (_, cols) = node.value.as_matrix_dims();
                let y = node.value.data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((gxr, yr), gr) in gx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..cols {
                            gxr[j] += (gr[j] - yr[j].exp() * total) / temperature;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).len();
                let gam = self.data(*gamma);
                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for (hr, gr) in xhat.chunks(cols).zip(g.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *beta) {
                    for gr in g.chunks(cols) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let n = cols as f64;
                    for (r, ((gxr, hr), gr)) in gx
                        .chunks_mut(cols)
                        .zip(xhat.chunks(cols))
                        .zip(g.chunks(cols))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..cols {
                            let dh = gr[j] * gam[j];
                            gxr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                let (_, cols) = node.value.as_matrix_dims();
                let y = node.value.data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, ((gxr, yr), gr)) in gx
                        .chunks_mut(cols)
                        .zip(y.chunks(cols))
                        .zip(g.chunks(cols))
                        .enumerate()
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gxr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).as_matrix_dims();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.grad_buf(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                let (_, cols) = self.value(*x).as_matrix_dims();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (k, &i) in index.iter().enumerate() {
                        let src = &g[k * cols..(k + 1) * cols];
                        gx[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SegmentMean { x, segment } => {
                let (rows, cols) = self.value(*x).as_matrix_dims();
                let inv = 1.0 / *segment as f64;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        let grp = r / segment;
                        for c in 0..cols {
                            gx[r * cols + c] += g[grp * cols + c] * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::Pick { x, index } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (k, &i) in index.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
        }
    }

    fn attention_backward(&self, saved: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let AttentionSaved {
            qkv,
            heads,
            seq,
            probs,
        } = saved;
        let (heads, seq) = (*heads, *seq);
        let src = self.data(*qkv);
        let Some(gq) = self.grad_buf(grads, *qkv) else {
            return;
        };
        let (rows, width3) = self.value(*qkv).as_matrix_dims();
        let c = width3 / 3;
        let d = c / heads;
        let n_seq = rows / seq;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dp = vec![0.0; seq * seq];
        for s in 0..n_seq {
            let base = s * seq * width3;
            let gbase = s * seq * c;
            for h in 0..heads {
                let p_off = (s * heads + h) * seq * seq;
                let p = &probs[p_off..p_off + seq * seq];
                // dV += Pᵀ · dO
                gemm(
                    seq,
                    seq,
                    d,
                    1.0,
                    p,
                    View::transposed(0, seq),
                    g,
                    View::strided(gbase + h * d, c, 1),
                    1.0,
                    gq,
                    View::strided(base + 2 * c + h * d, width3, 1),
                );
                // dP = dO · Vᵀ
                gemm(
                    seq,
                    d,
                    seq,
                    1.0,
                    g,
                    View::strided(gbase + h * d, c, 1),
                    src,
                    View::strided(base + 2 * c + h * d, 1, width3),
                    0.0,
                    &mut dp,
                    View::dense(0, seq),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                // dQ += scale · dS · K
                gemm(
                    seq,
                    seq,
                    d,
                    scale,
                    &dp,
                    View::dense(0, seq),
                    src,
                    View::strided(base + c + h * d, width3, 1),
                    1.0,
                    gq,
                    View::strided(base + h * d, width3, 1),
                );
                // dK += scale · dSᵀ · Q
                gemm(
                    seq,
                    seq,
                    d,
                    scale,
                    &dp,
                    View::transposed(0, seq),
                    src,
                    View::strided(base + h * d, width3, 1),
                    1.0,
                    gq,
                    View::strided(base + c + h * d, width3, 1),
                );
            }
        }
    }
}
