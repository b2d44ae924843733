//! Pre-norm transformer blocks over batched token matrices.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Normal samples redrawn until they fall within two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            out.push(z * std);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        // Xavier-uniform keeps activations at unit scale through the stack.
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = Tensor::new(vec![inputs, outputs], (0..inputs * outputs).map(|_| rng.random_range(-a..a)).collect())?;
        let weight = store.insert(format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[outputs]), false)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[width], 1.0), false)?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[width]), false)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = width * mlp_ratio;
        Ok(Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), width, 3 * width, true, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), width, width, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, width, true, rng)?,
        })
    }

    /// `x` is `[S·seq, width]`; sequences attend only within themselves.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        seq: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, h)?;
        let a = tape.attention(qkv, self.heads, seq, key_mask)?;
        let a = self.proj.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// `len × dim` table of interleaved sine/cosine features.
pub fn sincos_1d(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("table dims")
}

/// `side² × dim` table: first half encodes the patch row, second half the column.
pub fn sincos_2d(side: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let rows = sincos_1d(side, half);
    let cols = sincos_1d(side, dim - half);
    let mut data = Vec::with_capacity(side * side * dim);
    for y in 0..side {
        for x in 0..side {
            data.extend_from_slice(rows.row(y));
            data.extend_from_slice(cols.row(x));
        }
    }
    Tensor::new(vec![side * side, dim], data).expect("table dims")
}

/// Rows of `table` at `index`, as a new tensor.
pub fn gather_table(table: &Tensor, index: &[usize]) -> Tensor {
    let (_, cols) = table.as_matrix_dims();
    let mut data = Vec::with_capacity(index.len() * cols);
    for &i in index {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![index.len(), cols], data).expect("gather dims")
}
