//! Reconstruction, importance weighting and contrastive losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::patching::MaskPlan;

/// Checkpoint name of the importance head's weight vector.
pub const IMPORTANCE_PARAM: &str = "importance.weight";

/// Mean squared error over the entries of masked rows only.
///
/// `pred` and `target` are `[B·N, D]`, instance `b` owning rows `b·N..(b+1)·N`.
pub fn loss_pretext(tape: &mut Tape, pred: Var, target: &Tensor, plans: &[MaskPlan]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::Dimension {
            op: "loss_pretext",
            lhs: shape,
            rhs: target.shape().to_vec(),
        });
    }
    let (rows, cols) = target.as_matrix_dims();
    let n = plans.first().map_or(0, |p| p.n_total);
    if plans.is_empty() || plans.iter().any(|p| p.n_total != n) || rows != plans.len() * n {
        return Err(Error::Shape(format!("{rows} prediction rows do not match {} plans", plans.len())));
    }
    let index: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.masked.iter().map(move |&i| b * n + i))
        .collect();
    if index.is_empty() {
        return Err(Error::Objective("no masked patches to reconstruct".into()));
    }
    let mut t = Vec::with_capacity(index.len() * cols);
    for &r in &index {
        t.extend_from_slice(target.row(r));
    }
    let picked = tape.gather_rows(pred, &index)?;
    let t = tape.constant(Tensor::matrix(index.len(), cols, t)?);
    let diff = tape.sub(picked, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// `W^s`: one score per instance, `maps · w`, as a `[B, 1]` column.
pub fn importance_scores(tape: &mut Tape, position_maps: &Tensor, weights: Var) -> Result<Var> {
    let (_, n) = position_maps.as_matrix_dims();
    let len = tape.value(weights).len();
    if len != n {
        return Err(Error::Dimension {
            op: "importance_scores",
            lhs: position_maps.shape().to_vec(),
            rhs: tape.shape(weights).to_vec(),
        });
    }
    let w = tape.reshape(weights, &[n, 1])?;
    let maps = tape.constant(position_maps.clone());
    tape.matmul(maps, w)
}

/// `W^c = softplus(W^s)`.
pub fn rescale_scores(tape: &mut Tape, scores: Var) -> Var {
    tape.softplus(scores)
}

fn check_square(tape: &Tape, logits: Var) -> Result<usize> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(Error::Shape(format!("logits must be a nonempty square matrix, got {s:?}")));
    }
    Ok(s[0])
}

fn inverse(tape: &mut Tape, tau: Var) -> Result<Var> {
    let t = tape.value(tau);
    if t.len() != 1 || !(t.item() > 0.0) {
        return Err(Error::param("tau", format!("must be a positive scalar, got {:?}", t.data())));
    }
    let l = tape.log(tau);
    let l = tape.scale(l, -1.0);
    Ok(tape.exp(l))
}

/// `−mean_i log softmax_row(x)_ii`, optionally weighted per row.
fn diagonal_nll(tape: &mut Tape, x: Var, weights: Option<Var>) -> Result<Var> {
    let ls = tape.log_softmax(x, 1.0)?;
    let d = tape.diagonal(ls)?;
    let d = match weights {
        Some(w) => {
            let n = tape.value(d).len();
            let col = tape.reshape(d, &[n, 1])?;
            tape.mul_rows(col, w)?
        }
        None => d,
    };
    let m = tape.mean(d);
    Ok(tape.scale(m, -1.0))
}

/// Symmetric InfoNCE over `logits / τ` with matched pairs on the diagonal.
pub fn loss_infonce(tape: &mut Tape, logits: Var, tau: Var) -> Result<Var> {
    check_square(tape, logits)?;
    let inv = inverse(tape, tau)?;
    let x = tape.mul_scalar(logits, inv)?;
    let xt = tape.transpose(x)?;
    let rows = diagonal_nll(tape, x, None)?;
    let cols = diagonal_nll(tape, xt, None)?;
    let s = tape.add(rows, cols)?;
    Ok(tape.scale(s, 0.5))
}

/// Which parts of the correlation-weighted loss are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastTerms {
    Both,
    /// Only the sharpened-logits term.
    SharpenOnly,
    /// Only the detached-weight term.
    WeightOnly,
}

/// Which terms are averaged over both contrast directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Both,
    /// The sharpened term is symmetric; the weight term is image-to-text only.
    SharpenOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastOptions {
    pub terms: ContrastTerms,
    pub symmetry: Symmetry,
}

impl Default for ContrastOptions {
    fn default() -> Self {
        Self {
            terms: ContrastTerms::Both,
            symmetry: Symmetry::Both,
        }
    }
}

/// Correlation-weighted masked-contrastive loss.
///
/// The first term multiplies row `i` of the logits by `wᵢᶜ` before the
/// temperature; the second weights each instance's plain InfoNCE term by a
/// detached copy of `wᵢᶜ`. Column terms use the transposed logits with the
/// same per-pair weights.
pub fn loss_masked_contrastive(tape: &mut Tape, logits: Var, tau: Var, wc: Var, opts: ContrastOptions) -> Result<Var> {
    let b = check_square(tape, logits)?;
    let w = tape.value(wc);
    if w.len() != b {
        return Err(Error::Dimension {
            op: "loss_masked_contrastive",
            lhs: tape.shape(logits).to_vec(),
            rhs: tape.shape(wc).to_vec(),
        });
    }
    if let Some(bad) = w.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Objective(format!("importance weights must be positive, got {bad}")));
    }
    let wc = tape.reshape(wc, &[b, 1])?;
    let inv = inverse(tape, tau)?;
    let lt = tape.transpose(logits)?;
    let mut parts = Vec::with_capacity(2);

    if opts.terms != ContrastTerms::WeightOnly {
        let r = tape.mul_rows(logits, wc)?;
        let r = tape.mul_scalar(r, inv)?;
        let c = tape.mul_rows(lt, wc)?;
        let c = tape.mul_scalar(c, inv)?;
        let r = diagonal_nll(tape, r, None)?;
        let c = diagonal_nll(tape, c, None)?;
        let s = tape.add(r, c)?;
        parts.push(tape.scale(s, 0.5));
    }
    if opts.terms != ContrastTerms::SharpenOnly {
        let wd = tape.detach(wc);
        let x = tape.mul_scalar(logits, inv)?;
        let r = diagonal_nll(tape, x, Some(wd))?;
        let term = if opts.symmetry == Symmetry::Both {
            let xt = tape.mul_scalar(lt, inv)?;
            let c = diagonal_nll(tape, xt, Some(wd))?;
            let s = tape.add(r, c)?;
            tape.scale(s, 0.5)
        } else {
            r
        };
        parts.push(term);
    }
    match parts[..] {
        [one] => Ok(one),
        [a, c] => tape.add(a, c),
        _ => unreachable!("at least one term is always selected"),
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param("lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `λ·L_pret + (1−λ)·L_contra`.
pub fn loss_total(tape: &mut Tape, l_pret: Var, l_contra: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = tape.scale(l_pret, lambda);
    let b = tape.scale(l_contra, 1.0 - lambda);
    tape.add(a, b)
}
