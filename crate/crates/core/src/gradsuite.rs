//! Central-difference checks for every differentiable tape op and for the
//! full training objective on a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::datagen::{generate_corpus, SceneSpec};
use crate::encoders::{DecoderConfig, Geometry, ImageEncoderConfig, MacoModel, ModelConfig, TextEncoderConfig, Vocabulary};
use crate::error::Result;
use crate::numerics::{finite_diff_check, Tape, Tensor, Var};
use crate::objectives::{
    importance_scores, loss_infonce, loss_masked_contrastive, loss_pretext, loss_total, rescale_scores, ContrastOptions,
    ContrastTerms, Symmetry,
};
use crate::patching::MaskPlan;
use crate::train::{forward_loss, prepare_batch};

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Relative-error denominator floor for the end-to-end check. Differencing
/// an objective of order one at `h = 1e-4` carries roundoff near `1e-11`, so
/// coordinates whose gradient is below this floor are compared absolutely.
pub const FULL_OBJECTIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

type ScalarFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// A named scalar function of one input tensor.
pub struct OpCase {
    pub name: &'static str,
    pub input: Tensor,
    pub f: ScalarFn,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, seed)
}

/// Reduces `out` to a scalar through fixed random weights, so every output
/// entry contributes a distinct cotangent.
fn readout(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let w = t.constant(rand(&shape, 1000 + seed));
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn case<F>(name: &'static str, input: Tensor, f: F) -> OpCase
where
    F: Fn(&mut Tape, Var) -> Result<Var> + 'static,
{
    OpCase {
        name,
        input,
        f: Box::new(f),
    }
}

/// The registered op list.
pub fn op_cases() -> Vec<OpCase> {
    let mut v = vec![
        case("matmul", rand(&[3, 4], 1), |t, x| {
            let b = t.constant(rand(&[4, 2], 2));
            let y = t.matmul(x, b)?;
            readout(t, y, 1)
        }),
        case("matmul_rhs", rand(&[4, 2], 3), |t, x| {
            let a = t.constant(rand(&[3, 4], 4));
            let y = t.matmul(a, x)?;
            readout(t, y, 2)
        }),
        case("matmul_nt", rand(&[3, 4], 5), |t, x| {
            let b = t.constant(rand(&[5, 4], 6));
            let y = t.matmul_nt(x, b)?;
            let z = t.matmul_nt(b, x)?;
            let s = readout(t, y, 3)?;
            let u = readout(t, z, 4)?;
            t.add(s, u)
        }),
        case("add_sub_mul", rand(&[2, 3], 7), |t, x| {
            let c = t.constant(rand(&[2, 3], 8));
            let a = t.add(x, c)?;
            let s = t.sub(c, x)?;
            let m = t.mul(a, s)?;
            let m = t.mul(m, x)?;
            readout(t, m, 5)
        }),
        case("scale_add_scalar", rand(&[4], 9), |t, x| {
            let y = t.scale(x, -1.7);
            let y = t.add_scalar(y, 0.3);
            let y = t.mul(y, y)?;
            readout(t, y, 6)
        }),
        case("add_row", rand(&[3], 10), |t, x| {
            let m = t.constant(rand(&[4, 3], 11));
            let y = t.add_row(m, x)?;
            let y = t.mul(y, y)?;
            readout(t, y, 7)
        }),
        case("mul_rows", rand(&[4, 1], 12), |t, x| {
            let m = t.constant(rand(&[4, 3], 13));
            let y = t.mul_rows(m, x)?;
            let y = t.mul(y, y)?;
            readout(t, y, 8)
        }),
        case("mul_rows_lhs", rand(&[4, 3], 14), |t, x| {
            let s = t.constant(rand(&[4, 1], 15));
            let y = t.mul_rows(x, s)?;
            readout(t, y, 9)
        }),
        case("mul_scalar", rand(&[1], 16), |t, x| {
            let m = t.constant(rand(&[3, 3], 17));
            let y = t.mul_scalar(m, x)?;
            let y = t.exp(y);
            readout(t, y, 10)
        }),
        case("exp", rand(&[5], 18), |t, x| {
            let y = t.exp(x);
            readout(t, y, 11)
        }),
        case("log", uniform(&[5], 0.5, 2.0, 19), |t, x| {
            let y = t.log(x);
            readout(t, y, 12)
        }),
        case("softplus", uniform(&[6], -3.0, 3.0, 20), |t, x| {
            let y = t.softplus(x);
            readout(t, y, 13)
        }),
        case("gelu", uniform(&[6], -3.0, 3.0, 21), |t, x| {
            let y = t.gelu(x);
            readout(t, y, 14)
        }),
        // Inputs stay away from the clamp bounds, where the function is smooth.
        case("clamp", Tensor::vector(vec![-2.0, -0.5, 0.1, 0.7, 2.5]), |t, x| {
            let y = t.clamp(x, -1.0, 1.0);
            let y = t.mul(y, x)?;
            readout(t, y, 15)
        }),
        case("softmax", rand(&[3, 4], 22), |t, x| {
            let y = t.softmax(x, 0.7)?;
            readout(t, y, 16)
        }),
        case("log_softmax", rand(&[3, 4], 23), |t, x| {
            let y = t.log_softmax(x, 1.3)?;
            readout(t, y, 17)
        }),
        case("layer_norm", rand(&[3, 5], 24), |t, x| {
            let g = t.constant(uniform(&[5], 0.5, 1.5, 25));
            let b = t.constant(rand(&[5], 26));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            readout(t, y, 18)
        }),
        case("layer_norm_affine", rand(&[10], 27), |t, x| {
            let m = t.constant(rand(&[3, 5], 28));
            let g = t.pick(x, &[0, 1, 2, 3, 4])?;
            let b = t.pick(x, &[5, 6, 7, 8, 9])?;
            let y = t.layer_norm(m, g, b, 1e-5)?;
            readout(t, y, 19)
        }),
        case("l2_normalize_rows", rand(&[3, 4], 29), |t, x| {
            let y = t.l2_normalize_rows(x);
            readout(t, y, 20)
        }),
        case("transpose", rand(&[2, 3], 30), |t, x| {
            let y = t.transpose(x)?;
            let c = t.constant(rand(&[3, 3], 31));
            let w = t.matmul(c, y)?;
            let w = t.mul(w, w)?;
            readout(t, w, 21)
        }),
        case("concat_rows", rand(&[2, 3], 32), |t, x| {
            let c = t.constant(rand(&[1, 3], 33));
            let y = t.concat_rows(&[x, c, x])?;
            let y = t.mul(y, y)?;
            readout(t, y, 23)
        }),
        case("gather_rows", rand(&[4, 2], 34), |t, x| {
            let y = t.gather_rows(x, &[3, 0, 3, 1])?;
            let y = t.mul(y, y)?;
            readout(t, y, 24)
        }),
        case("segment_mean", rand(&[6, 2], 35), |t, x| {
            let y = t.segment_mean(x, 3)?;
            let y = t.mul(y, y)?;
            readout(t, y, 25)
        }),
        case("reshape_sum_mean", rand(&[2, 3], 36), |t, x| {
            let y = t.reshape(x, &[3, 2])?;
            let y = t.mul(y, y)?;
            let s = t.sum(y);
            let m = t.mean(x);
            let m = t.mul(m, m)?;
            t.add(s, m)
        }),
        case("pick_diagonal", rand(&[3, 3], 37), |t, x| {
            let d = t.diagonal(x)?;
            let p = t.pick(x, &[1, 1, 5])?;
            let d = t.mul(d, p)?;
            readout(t, d, 26)
        }),
        case("attention", rand(&[6, 12], 38), |t, x| {
            let y = t.attention(x, 2, 3, None)?;
            readout(t, y, 27)
        }),
        case("attention_masked", rand(&[6, 12], 39), |t, x| {
            let y = t.attention(x, 2, 3, Some(&[true, true, false, true, false, true]))?;
            readout(t, y, 28)
        }),
    ];
    v.extend(objective_cases());
    v
}

fn objective_cases() -> Vec<OpCase> {
    let plans = vec![
        MaskPlan::from_sampled(4, &[0, 2]).expect("valid plan"),
        MaskPlan::from_sampled(4, &[3]).expect("valid plan"),
    ];
    let target = rand(&[8, 3], 40);
    let maps = Tensor::matrix(2, 4, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).expect("2×4");
    let logits = rand(&[3, 3], 41);
    vec![
        case("loss_pretext", rand(&[8, 3], 42), move |t, x| loss_pretext(t, x, &target, &plans)),
        case("importance_scores", rand(&[4, 1], 43), move |t, x| {
            let s = importance_scores(t, &maps, x)?;
            let w = rescale_scores(t, s);
            readout(t, w, 29)
        }),
        case("loss_infonce", rand(&[3, 3], 44), |t, x| {
            let tau = t.constant(Tensor::scalar(0.4));
            loss_infonce(t, x, tau)
        }),
        case("loss_infonce_tau", Tensor::scalar(0.35), |t, x| {
            let l = t.constant(rand(&[3, 3], 45));
            loss_infonce(t, l, x)
        }),
        case("loss_masked_contrastive_logits", rand(&[3, 3], 46), |t, x| {
            let tau = t.constant(Tensor::scalar(0.5));
            let w = t.constant(uniform(&[3, 1], 0.3, 1.5, 47));
            loss_masked_contrastive(t, x, tau, w, ContrastOptions::default())
        }),
        // The weight term sees `W^c` only through a detached copy, so the
        // weights are checked against the sharpened term alone.
        case("loss_masked_contrastive_weights", uniform(&[3, 1], 0.3, 1.5, 48), move |t, x| {
            let l = t.constant(logits.clone());
            let tau = t.constant(Tensor::scalar(0.5));
            loss_masked_contrastive(t, l, tau, x, SHARPEN_ONLY)
        }),
        case("loss_masked_contrastive_tau", Tensor::scalar(0.45), |t, x| {
            let l = t.constant(rand(&[3, 3], 49));
            let w = t.constant(uniform(&[3, 1], 0.3, 1.5, 50));
            loss_masked_contrastive(t, l, x, w, ContrastOptions::default())
        }),
        case("loss_total", Tensor::vector(vec![0.8, 2.1]), |t, x| {
            let a = t.pick(x, &[0])?;
            let b = t.pick(x, &[1])?;
            let a = t.mul(a, a)?;
            let b = t.exp(b);
            loss_total(t, a, b, 0.9)
        }),
    ]
}

const SHARPEN_ONLY: ContrastOptions = ContrastOptions {
    terms: ContrastTerms::SharpenOnly,
    symmetry: Symmetry::Both,
};

pub fn run_op_cases(h: f64) -> Result<Vec<GradCase>> {
    op_cases()
        .into_iter()
        .map(|c| {
            let r = finite_diff_check(c.f, &c.input, h)?;
            Ok(GradCase {
                name: c.name.to_string(),
                coordinates: c.input.len(),
                max_rel_err: r.max_rel_err,
                max_abs_err: r.analytic.iter().zip(&r.numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max),
            })
        })
        .collect()
}

/// Small model and run config for the end-to-end check.
pub fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    let geometry = Geometry {
        image_side: 16,
        patch_size: 4,
        downsample_ratio: 2,
    };
    c.model = ModelConfig {
        geometry,
        image: ImageEncoderConfig {
            width: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            width: 4,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        text: TextEncoderConfig {
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            max_len: 12,
        },
        embed_dim: 6,
        init_std: 0.3,
        tau_init: 0.2,
        ..ModelConfig::default()
    };
    c.data.scene = SceneSpec {
        image_side: 16,
        min_half_extent: 2,
        max_half_extent: 2,
        negative_probability: 0.0,
        ..SceneSpec::default()
    };
    c.train.mask_ratio = 0.5;
    c
}

/// Gradient of the full objective at `B = 2` against central differences,
/// over every parameter entry of the toy model.
pub fn full_objective_check(h: f64) -> Result<GradCase> {
    let cfg = toy_config();
    cfg.validate()?;
    let mut model = MacoModel::new(cfg.model, Vocabulary::synthetic(), 7)?;
    let n = model.n_patches();
    let w = rand(&[n, 1], 51).data().iter().map(|v| 0.5 * v).collect();
    model.params.set_value(crate::objectives::IMPORTANCE_PARAM, Tensor::new(vec![n, 1], w)?)?;
    let data = generate_corpus(&cfg.data.scene, 2, 3)?;
    let refs: Vec<_> = data.iter().collect();
    let batch = prepare_batch(&model, &cfg, &refs, &mut ChaCha8Rng::seed_from_u64(5))?;

    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let (loss, _) = forward_loss(&model, &cfg, &batch, &mut tape, &p)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = p.vars().iter().map(|&v| grads.wrt(v)).collect();

    // Central differences see through `detach`; the head is therefore
    // differenced on the objective without the detached-weight term, which
    // is the function whose gradient reverse mode computes for it.
    let mut frozen = cfg.clone();
    frozen.train.contrast_options.terms = ContrastTerms::SharpenOnly;
    let head = model.importance_id();
    let eval = |m: &MacoModel, c: &RunConfig| -> Result<f64> {
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        Ok(forward_loss(m, c, &batch, &mut tape, &p)?.1.l_total)
    };
    let (mut worst, mut worst_abs, mut count) = (0.0f64, 0.0f64, 0);
    for (k, g) in analytic.iter().enumerate() {
        let c = if k == head.0 { &frozen } else { &cfg };
        for i in 0..g.len() {
            let orig = model.params.params_mut()[k].value.data()[i];
            model.params.params_mut()[k].value.data_mut()[i] = orig + h;
            let plus = eval(&model, c)?;
            model.params.params_mut()[k].value.data_mut()[i] = orig - h;
            let minus = eval(&model, c)?;
            model.params.params_mut()[k].value.data_mut()[i] = orig;
            let (a, num) = (g.data()[i], (plus - minus) / (2.0 * h));
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(FULL_OBJECTIVE_FLOOR));
            worst_abs = worst_abs.max((a - num).abs());
            count += 1;
        }
    }
    Ok(GradCase {
        name: "full_objective".into(),
        coordinates: count,
        max_rel_err: worst,
        max_abs_err: worst_abs,
    })
}

/// Every registered op followed by the full objective.
pub fn run_suite(h: f64) -> Result<Vec<GradCase>> {
    let mut cases = run_op_cases(h)?;
    cases.push(full_objective_check(h)?);
    Ok(cases)
}
