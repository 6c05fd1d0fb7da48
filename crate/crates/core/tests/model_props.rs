mod common;

use std::time::Instant;

use astgode::data::SampleBundle;
use astgode::graph::{cheb_basis, scaled_laplacian, SensorGraph};
use astgode::model::{
    self, model_forward, Attention, ModelDims, ModelParams, CHEB_ORDER,
};
use astgode::odeint::IntegratorConfig;
use astgode::training::{sample_gradient, sample_loss, GradientMode, LossConfig};
use astgode::{Tape, Tensor};
use common::{fd_params, fixture, param_errors, rng, uniform};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn fd_check(cfg: IntegratorConfig) -> Vec<(String, f64)> {
    let fx = fixture();
    let lc = LossConfig::default();
    let ad = sample_gradient(&fx.params, &fx.bundle, &fx.basis, cfg, &lc, GradientMode::Tape).unwrap();
    let f = |p: &ModelParams| sample_loss(p, &fx.bundle, &fx.basis, cfg, &lc).unwrap();
    let fd = fd_params(&f, &fx.params);
    param_errors(&ad.grads, &fd)
}

#[test]
fn full_model_gradient_matches_finite_differences_euler() {
    let started = Instant::now();
    let errs = fd_check(IntegratorConfig::default());
    assert!(errs[0].1 < 1e-4, "worst: {:?}", &errs[..3]);
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn full_model_gradient_matches_finite_differences_rk4() {
    let errs = fd_check(IntegratorConfig::rk4(2));
    assert!(errs[0].1 < 1e-4, "worst: {:?}", &errs[..3]);
}

#[test]
fn euler_adjoint_equals_tape_on_fixture() {
    let fx = fixture();
    let lc = LossConfig::default();
    for cfg in [IntegratorConfig::euler(1), IntegratorConfig::euler(3)] {
        let t = sample_gradient(&fx.params, &fx.bundle, &fx.basis, cfg, &lc, GradientMode::Tape).unwrap();
        let a = sample_gradient(&fx.params, &fx.bundle, &fx.basis, cfg, &lc, GradientMode::Adjoint).unwrap();
        let errs = param_errors(&t.grads, &a.grads);
        assert!(errs[0].1 < 1e-10, "{:?}", &errs[..3]);
    }
}

fn random_attention(r: &mut rand_chacha::ChaCha8Rng, a: usize, b: usize, d: usize) -> Attention<Tensor> {
    Attention {
        w1: uniform(r, &[a], -1.0, 1.0),
        w2: uniform(r, &[d, a], -1.0, 1.0),
        w3: uniform(r, &[d], -1.0, 1.0),
        bias: uniform(r, &[b, b], -1.0, 1.0),
        v: uniform(r, &[b, b], -1.0, 1.0),
    }
}

fn leaf_attention(tape: &mut Tape, a: &Attention<Tensor>) -> Attention<astgode::Var> {
    Attention {
        w1: tape.leaf(a.w1.clone()),
        w2: tape.leaf(a.w2.clone()),
        w3: tape.leaf(a.w3.clone()),
        bias: tape.leaf(a.bias.clone()),
        v: tape.leaf(a.v.clone()),
    }
}

#[test]
fn attention_rows_are_stochastic_on_random_inputs() {
    let mut r = rng(100);
    for _ in 0..100 {
        let (t, n, d) = (3, 5, 4);
        let h = uniform(&mut r, &[t, n, d], -5.0, 5.0);
        let sp = random_attention(&mut r, t, n, d);
        let tp = random_attention(&mut r, n, t, d);
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let (spv, tpv) = (leaf_attention(&mut tape, &sp), leaf_attention(&mut tape, &tp));
        let a_s = model::spatial_attention(&mut tape, &spv, hv).unwrap();
        let a_t = model::temporal_attention(&mut tape, &tpv, hv).unwrap();
        for (a, size) in [(a_s, n), (a_t, t)] {
            let m = tape.value(a);
            assert_eq!(m.shape(), &[size, size]);
            for row in m.data().chunks(size) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|x| *x >= 0.0));
            }
        }
    }
}

#[test]
fn zero_input_attention_is_exactly_uniform() {
    let mut r = rng(5);
    let (t, n, d) = (4, 6, 3);
    let mut sp = random_attention(&mut r, t, n, d);
    let mut tp = random_attention(&mut r, n, t, d);
    sp.bias = Tensor::zeros(&[n, n]);
    tp.bias = Tensor::zeros(&[t, t]);
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::zeros(&[t, n, d]));
    let (spv, tpv) = (leaf_attention(&mut tape, &sp), leaf_attention(&mut tape, &tp));
    let a_s = model::spatial_attention(&mut tape, &spv, hv).unwrap();
    let a_t = model::temporal_attention(&mut tape, &tpv, hv).unwrap();
    assert!(tape.value(a_s).data().iter().all(|x| *x == 1.0 / n as f64));
    assert!(tape.value(a_t).data().iter().all(|x| *x == 1.0 / t as f64));
}

/// `out[.., perm[v], ..] = x[.., v, ..]` along `axis`.
fn permute_axis(x: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let shape = x.shape().to_vec();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let mut out = x.clone();
    for (i, v) in x.data().iter().enumerate() {
        let (outer, idx, rest) = (i / (inner * len), (i / inner) % len, i % inner);
        out.data_mut()[(outer * len + perm[idx]) * inner + rest] = *v;
    }
    out
}

fn permute_params(p: &ModelParams, perm: &[usize]) -> ModelParams {
    p.map(|name, t| {
        if name.ends_with("spatial.bias") || name.ends_with("spatial.v") {
            permute_axis(&permute_axis(t, 0, perm), 1, perm)
        } else if name.ends_with("temporal.w1") {
            permute_axis(t, 0, perm)
        } else if name.ends_with("temporal.w2") {
            permute_axis(t, 1, perm)
        } else {
            t.clone()
        }
    })
}

fn permute_bundle(b: &SampleBundle, perm: &[usize]) -> SampleBundle {
    let mut out = b.clone();
    for x in out.inputs.iter_mut() {
        *x = permute_axis(x, 1, perm);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_is_permutation_equivariant(seed in any::<u64>()) {
        let fx = fixture();
        let mut r = rng(seed);
        let n = 4;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let mut params = fx.params.clone();
        // Random attention biases so the permutation of vertex-indexed
        // parameters is actually exercised.
        for b in params.branches.iter_mut() {
            b.spatial.bias = uniform(&mut r, &[n, n], -0.5, 0.5);
            b.spatial.v = uniform(&mut r, &[n, n], 0.5, 1.5);
        }
        let l = fx.basis.polys()[1].clone();
        let l_perm = permute_axis(&permute_axis(&l, 0, &perm), 1, &perm);
        let basis_perm = cheb_basis(&l_perm, CHEB_ORDER).unwrap();

        let cfg = IntegratorConfig::rk4(2);
        let base = model_forward(&fx.bundle, &params, &fx.basis, cfg).unwrap();
        let moved = model_forward(&permute_bundle(&fx.bundle, &perm), &permute_params(&params, &perm), &basis_perm, cfg).unwrap();
        let want = permute_axis(&base.fused, 1, &perm);
        prop_assert!(moved.fused.sub(&want).unwrap().max_abs() < 1e-10);
        for b in 0..3 {
            let want = permute_axis(&base.branch_finals[b], 1, &perm);
            prop_assert!(moved.branch_finals[b].sub(&want).unwrap().max_abs() < 1e-10);
        }
    }
}

#[test]
fn same_seed_gives_bitwise_identical_init_and_forward() {
    let dims = ModelDims {
        vertices: 5,
        features: 1,
        steps: 3,
        hidden: 6,
    };
    let a = ModelParams::init(dims, 42).unwrap();
    let b = ModelParams::init(dims, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, ModelParams::init(dims, 43).unwrap());
    let basis = cheb_basis(&scaled_laplacian(&SensorGraph::empty(5)).unwrap(), CHEB_ORDER).unwrap();
    let bundle = {
        let mut r = rng(9);
        let x = uniform(&mut r, &[3, 5, 1], -1.0, 1.0);
        let seg = astgode::data::Segment {
            start: 0,
            values: x.clone(),
            mask: Tensor::ones(&[3, 5, 1]),
        };
        SampleBundle {
            anchor: 0,
            periods: astgode::data::Periods::new(3, 6).unwrap(),
            inputs: [x.clone(), x.scale(0.5), x.scale(-1.0)],
            input_starts: [0; 3],
            intermediate: [0; 3].map(|_| [seg.clone(), seg.clone()]),
            predicted: seg,
        }
    };
    let cfg = IntegratorConfig::rk4(2);
    assert_eq!(
        model_forward(&bundle, &a, &basis, cfg).unwrap(),
        model_forward(&bundle, &b, &basis, cfg).unwrap()
    );
}
