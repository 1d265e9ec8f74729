//! Finite-difference checks for every operation kind plus algebraic properties.

use autodiff::{check_gradients, AutodiffError, Graph, Result, Sgd, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;
const POINTS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces any tensor to a scalar through a fixed random projection so that
/// every output coordinate contributes a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    g.mean(prod)
}

fn check_op<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Graph, Var, &mut ChaCha8Rng) -> Result<Var>,
{
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = random(&mut rng, shape);
        let err = check_gradients(
            |g, x| {
                let mut inner = ChaCha8Rng::seed_from_u64(1000 + seed);
                let y = f(g, x, &mut inner)?;
                project(g, y, seed)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{name}: seed {seed} relative error {err:.3e}");
    }
}

#[test]
fn matmul_both_sides() {
    check_op("matmul-lhs", &[3, 4], |g, x, r| {
        let b = g.constant(random(r, &[4, 2]));
        g.matmul(x, b)
    });
    check_op("matmul-rhs", &[4, 2], |g, x, r| {
        let a = g.constant(random(r, &[3, 4]));
        g.matmul(a, x)
    });
}

#[test]
fn add_and_mul_with_broadcast() {
    check_op("add", &[2, 3], |g, x, r| {
        let b = g.constant(random(r, &[2, 3]));
        g.add(x, b)
    });
    check_op("add-bias", &[3], |g, x, r| {
        let a = g.constant(random(r, &[4, 3]));
        g.add(a, x)
    });
    check_op("mul-column", &[4, 1], |g, x, r| {
        let a = g.constant(random(r, &[4, 3]));
        g.mul(a, x)
    });
    check_op("mul-self", &[5], |g, x, _| g.mul(x, x));
    check_op("mul-scalar", &[1], |g, x, r| {
        let a = g.constant(random(r, &[2, 2]));
        g.mul(a, x)
    });
}

#[test]
fn scale_concat_slice_reshape_transpose() {
    check_op("scale", &[3, 2], |g, x, _| g.scale(x, -2.5));
    check_op("concat-0", &[2, 3], |g, x, r| {
        let b = g.constant(random(r, &[1, 3]));
        g.concat(&[b, x, x], 0)
    });
    check_op("concat-1", &[2, 3], |g, x, r| {
        let b = g.constant(random(r, &[2, 2]));
        g.concat(&[x, b], 1)
    });
    check_op("slice", &[4, 3], |g, x, _| {
        let a = g.slice(x, 0, 1, 3)?;
        g.slice(a, 1, 1, 3)
    });
    check_op("reshape", &[2, 6], |g, x, _| g.reshape(x, &[3, 4]));
    check_op("transpose", &[2, 5], |g, x, _| g.transpose(x));
}

#[test]
fn gather_rows_with_repeats() {
    check_op("gather-rows", &[5, 3], |g, x, _| g.gather_rows(x, &[4, 0, 4, 2]));
}

#[test]
fn layer_norm_all_inputs() {
    check_op("layer-norm-x", &[3, 6], |g, x, r| {
        let gain = g.constant(random(r, &[6]));
        let bias = g.constant(random(r, &[6]));
        g.layer_norm(x, gain, bias)
    });
    check_op("layer-norm-gain", &[6], |g, x, r| {
        let a = g.constant(random(r, &[3, 6]));
        let bias = g.constant(random(r, &[6]));
        g.layer_norm(a, x, bias)
    });
    check_op("layer-norm-bias", &[6], |g, x, r| {
        let a = g.constant(random(r, &[3, 6]));
        let gain = g.constant(random(r, &[6]));
        g.layer_norm(a, gain, x)
    });
}

#[test]
fn softmax_family_with_temperature() {
    for t in [0.5, 1.0, 2.0] {
        check_op("softmax", &[3, 4], move |g, x, _| g.softmax(x, t));
        check_op("log-softmax", &[3, 4], move |g, x, _| g.log_softmax(x, t));
    }
}

#[test]
fn pointwise_and_reductions() {
    check_op("gelu", &[4, 3], |g, x, _| g.gelu(x));
    check_op("l2-normalize", &[3, 4], |g, x, _| g.l2_normalize(x));
    check_op("mean", &[3, 4], |g, x, _| g.mean(x));
    check_op("mean-axis0", &[3, 4], |g, x, _| g.mean_axis(x, 0));
    check_op("mean-axis1", &[2, 3, 4], |g, x, _| g.mean_axis(x, 1));
}

#[test]
fn losses() {
    check_op("mse", &[2, 3], |g, x, r| {
        let t = g.constant(random(r, &[2, 3]));
        g.mse(x, t)
    });
    check_op("mse-rhs", &[2, 3], |g, x, r| {
        let t = g.constant(random(r, &[2, 3]));
        g.mse(t, x)
    });
    check_op("cross-entropy", &[4, 5], |g, x, _| g.cross_entropy(x, &[0, 4, 2, 2]));
    check_op("kl-student", &[3, 4], |g, x, r| {
        let q = random(r, &[3, 4]);
        let q = g.constant(q);
        let q = g.softmax(q, 1.0)?;
        let p = g.softmax(x, 1.0)?;
        g.kl_divergence(q, p)
    });
    check_op("kl-teacher", &[3, 4], |g, x, r| {
        let p = g.constant(random(r, &[3, 4]));
        let p = g.softmax(p, 1.0)?;
        let q = g.softmax(x, 1.0)?;
        g.kl_divergence(q, p)
    });
}

#[test]
fn gumbel_soft_path_with_frozen_noise() {
    for t in [0.5, 1.0, 2.0] {
        check_op("gumbel-softmax", &[4, 4], move |g, x, r| {
            let noise = random(r, &[4, 4]);
            g.gumbel_softmax(x, noise, t, false)
        });
    }
}

#[test]
fn straight_through_backward_equals_soft_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&mut rng, &[4, 4]);
    let noise = random(&mut rng, &[4, 4]);
    let v = random(&mut rng, &[4, 4]);
    let grad_for = |hard: bool| {
        let mut g = Graph::new();
        let l = g.param("l", logits.clone());
        let w = g.gumbel_softmax(l, noise.clone(), 1.0, hard).unwrap();
        let c = g.constant(v.clone());
        let y = g.matmul(w, c).unwrap();
        let s = g.mean(y).unwrap();
        g.backward(s).unwrap().by_name("l").unwrap().clone()
    };
    assert_eq!(grad_for(true), grad_for(false));
}

#[test]
fn mse_of_normalized_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = random(&mut rng, &[1, 6]);
    for seed in 0..POINTS {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let v = random(&mut r, &[1, 6]);
        let err = check_gradients(
            |g, x| {
                let n = g.l2_normalize(x)?;
                let t = g.constant(target.clone());
                g.mse(n, t)
            },
            &v,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err:.3e}");
    }
}

#[test]
fn softmax_cross_entropy_at_random_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(&mut rng, &[6, 5]);
    let err = check_gradients(
        |g, x| {
            let s = g.scale(x, 3.0)?;
            g.cross_entropy(s, &[0, 1, 2, 3, 4, 0])
        },
        &logits,
        STEP,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn sgd_converges_on_quadratic() {
    // f(p) = ½‖p − p*‖²; with lr 0.5 and no momentum the error halves each step.
    let target = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut p = Tensor::zeros(&[3]);
    let mut opt = Sgd::new(0.5, 0.0).unwrap();
    for _ in 0..100 {
        let mut g = Graph::new();
        let x = g.param("p", p.clone());
        let t = g.constant(target.clone());
        let d = g.sub(x, t).unwrap();
        let sq = g.mul(d, d).unwrap();
        let s = g.mean(sq).unwrap();
        let loss = g.scale(s, 1.5).unwrap(); // mean over 3 coords × 1.5 = ½ sum
        let grads = g.backward(loss).unwrap().named();
        opt.step(&mut [("p", &mut p)], &grads).unwrap();
    }
    for (a, b) in p.data().iter().zip(target.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn unknown_kind_is_rejected() {
    let err = autodiff::Op::from_name("fft", &autodiff::Attrs::new()).unwrap_err();
    assert!(matches!(err, AutodiffError::UnknownKind(_)));
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-20.0f64..20.0, len)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in finite_vec(12), t in 0.1f64..4.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = g.softmax(x, t).unwrap();
        for r in 0..3 {
            let row = g.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(data in finite_vec(8)) {
        prop_assume!(data[..4].iter().any(|v| v.abs() > 1e-6) && data[4..].iter().any(|v| v.abs() > 1e-6));
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 4], data).unwrap());
        let n = g.l2_normalize(x).unwrap();
        for r in 0..2 {
            let norm: f64 = g.value(n).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear(data in finite_vec(6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let point = Tensor::new(vec![2, 3], data).unwrap();
        let f = |g: &mut Graph, x: Var| -> Result<Var> { let s = g.softmax(x, 1.0)?; let s2 = g.mul(s, s)?; g.mean(s2) };
        let h = |g: &mut Graph, x: Var| -> Result<Var> { let n = g.gelu(x)?; g.mean(n) };
        let grad = |combo: &dyn Fn(&mut Graph, Var) -> Result<Var>| {
            let mut g = Graph::new();
            let x = g.param("x", point.clone());
            let l = combo(&mut g, x).unwrap();
            g.backward(l).unwrap().by_name("x").unwrap().clone()
        };
        let gf = grad(&f);
        let gh = grad(&h);
        let gc = grad(&|g: &mut Graph, x: Var| {
            let fv = f(g, x)?;
            let hv = h(g, x)?;
            let fa = g.scale(fv, a)?;
            let hb = g.scale(hv, b)?;
            g.add(fa, hb)
        });
        for i in 0..6 {
            let expect = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((gc.data()[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(data in finite_vec(12)) {
        let run = || {
            let mut g = Graph::new();
            let x = g.param("x", Tensor::new(vec![3, 4], data.clone()).unwrap());
            let w = g.constant(Tensor::new(vec![4, 2], vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.4, 0.05]).unwrap());
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y).unwrap();
            let l = g.cross_entropy(y, &[0, 1, 1]).unwrap();
            let v = g.value(l).item().to_bits();
            let gr = g.backward(l).unwrap().by_name("x").unwrap().clone();
            (v, gr.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
