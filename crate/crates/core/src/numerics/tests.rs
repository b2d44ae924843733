use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_selector() {
    let mut t = Tape::new();
    let i2 = t.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let m = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = t.constant(mat(1, 2, &[1.0, 0.0]));
    let c = t.constant(mat(2, 1, &[2.0, 5.0]));
    let p = t.matmul(r, c).unwrap();
    assert_eq!(t.value(p).data(), &[2.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}", other = other.err()),
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let b = random(&[4, 2], 11);
    let w = random(&[3, 2], 12);
    let report = finite_diff_check(
        |t, a| {
            let bv = t.constant(b.clone());
            let wv = t.constant(w.clone());
            let p = t.matmul(a, bv)?;
            let q = t.mul(p, wv)?;
            Ok(t.sum(q))
        },
        &random(&[3, 4], 10),
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
}

#[test]
fn softmax_closed_forms() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = t.softmax(x, 1.0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
    let y = t.softmax(x, 1.0).unwrap();
    assert!((t.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((t.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

    // 40-digit evaluation of exp(x/τ)/Σ at τ = 0.5
    let x = t.constant(Tensor::vector(vec![3.0, 1.0, -2.0]));
    let y = t.softmax(x, 0.5).unwrap();
    let want = [0.981_970_010_518_274_4, 0.017_985_408_112_219_218, 4.458_136_950_639_617e-5];
    for (a, b) in t.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0]));
    assert!(matches!(t.softmax(x, 0.0), Err(Error::Parameter { .. })));
    assert!(matches!(t.softmax(x, -1.0), Err(Error::Parameter { .. })));
}

#[test]
fn softplus_values() {
    assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-16);
    assert!((softplus_scalar(30.0) - 30.0).abs() < 1e-12);
    // high-precision reference for log(1 + e^-20)
    let want = 2.061_153_620_314_380_7e-9;
    assert!((softplus_scalar(-20.0) - want).abs() / want < 1e-14);
    assert!(softplus_scalar(800.0).is_finite());
}

#[test]
fn detach_freezes_one_factor() {
    let mut t = Tape::new();
    let w = t.param(Tensor::scalar(3.0));
    let frozen = t.detach(w);
    let f = t.mul(frozen, w).unwrap();
    let g = t.backward(f).unwrap();
    assert_eq!(g.wrt(w).item(), 3.0);

    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(1.7));
    let d = t.detach(x);
    let sq = t.mul(d, d).unwrap();
    let g = t.backward(sq).unwrap();
    assert_eq!(g.wrt(x).item(), 0.0);
}

#[test]
fn fan_out_accumulates_once() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(0.3));
    let y = t.add(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 2.0);
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(t.backward(x).is_err());
}

#[test]
fn sum_of_squares_gradient() {
    let r = finite_diff_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &Tensor::vector(vec![1.0, 2.0]),
        1e-4,
    )
    .unwrap();
    assert!((r.analytic[0] - 2.0).abs() < 1e-15);
    assert!((r.analytic[1] - 4.0).abs() < 1e-15);
    assert!(r.max_rel_err < 1e-8);
}

#[test]
fn softmax_cross_entropy_gradient() {
    let r = finite_diff_check(
        |t, x| {
            let ls = t.log_softmax(x, 0.7)?;
            let picked = t.pick(ls, &[1, 5, 10])?;
            let s = t.sum(picked);
            Ok(t.scale(s, -1.0 / 3.0))
        },
        &random(&[3, 4], 5),
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{}", r.max_rel_err);
}

#[test]
fn oracle_rejects_non_finite() {
    let r = finite_diff_check(
        |t, x| {
            let l = t.log(x);
            Ok(t.sum(l))
        },
        &Tensor::vector(vec![-1.0]),
        1e-4,
    );
    assert!(matches!(r, Err(Error::Oracle(_))));
}

#[test]
fn bilinear_matches_scalar_formula() {
    let m = random(&[3, 3], 99);
    let up = bilinear_upsample(&m, 7, 7).unwrap();
    // independent evaluation: weights of the four neighbours written out
    for oy in 0..7 {
        for ox in 0..7 {
            let sy = oy as f64 * 2.0 / 6.0;
            let sx = ox as f64 * 2.0 / 6.0;
            let mut acc = 0.0;
            for iy in 0..3 {
                for ix in 0..3 {
                    let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                    let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                    acc += wy * wx * m.at(iy, ix);
                }
            }
            assert!((up.at(oy, ox) - acc).abs() < 1e-14);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-5.0f64..5.0, 1..24),
        temp in 0.05f64..5.0,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vals));
        let y = t.softmax(x, temp).unwrap();
        let out = t.value(y).data();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softplus_strictly_positive(x in -700.0f64..700.0) {
        prop_assert!(softplus_scalar(x) > 0.0);
    }

    #[test]
    fn upsampled_constant_is_exact(c in -1e3f64..1e3, h in 1usize..6, w in 1usize..6, oh in 1usize..20, ow in 1usize..20) {
        let up = bilinear_upsample(&Tensor::full(&[h, w], c), oh.max(h), ow.max(w)).unwrap();
        prop_assert!(up.data().iter().all(|&v| v == c));
    }

    #[test]
    fn detached_edge_has_zero_gradient(seed in 0u64..1000) {
        let x0 = random(&[2, 3], seed);
        let mut t = Tape::new();
        let x = t.param(x0);
        let d = t.detach(x);
        let e = t.exp(d);
        let s = t.softmax(e, 1.3).unwrap();
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        prop_assert!(g.get(x).is_none());
        prop_assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }
}
