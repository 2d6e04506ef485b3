//! Reverse-mode gradients against central finite differences.

mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use res_tuner_core::nn::Parameter;
use res_tuner_core::tensor::{finite_diff_grad, relative_error, OpKind, Tape, Tensor, Var};
use res_tuner_core::training::{grad_check, GradCheckOptions};
use res_tuner_core::tuners::{AttachOp, AttachSpec, ResAttnConfig, ResAttnTuner, TunerConfig};
use res_tuner_core::{build_backbone, Result};

/// Gradient of `f(x)` w.r.t. the leaf `x` by backprop and by FD.
fn both(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> (Tensor, Tensor) {
    let mut tape = Tape::eval();
    let xv = tape.leaf(x.clone(), true);
    let l = f(&mut tape, xv).unwrap();
    tape.backward(l).unwrap();
    let auto = tape.grad(xv).unwrap();
    let fd = finite_diff_grad(
        |t| {
            let mut tp = Tape::eval();
            let v = tp.leaf(t.clone(), false);
            let l = f(&mut tp, v)?;
            Ok(tp.value(l).item())
        },
        x,
        1e-5,
    )
    .unwrap();
    (auto, fd)
}

/// A fixed random projection to a scalar so every output element matters.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(tape.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[2, 3, 4], 1.0, &mut rng);
    let b = rand_tensor(&[4, 5], 1.0, &mut rng);
    let (auto, fd) = both(&a, |t, x| {
        let bv = t.constant(b.clone());
        let y = t.matmul(x, bv)?;
        weighted_sum(t, y, 9)
    });
    assert!(relative_error(&auto, &fd) < 1e-7);
    let (auto, fd) = both(&b, |t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul(av, x)?;
        weighted_sum(t, y, 9)
    });
    assert!(relative_error(&auto, &fd) < 1e-7);
}

#[test]
fn softmax_gradient() {
    let x = rand_tensor(&[3, 7], 3.0, &mut ChaCha8Rng::seed_from_u64(2));
    let (auto, fd) = both(&x, |t, x| {
        let y = t.softmax_lastdim(x)?;
        weighted_sum(t, y, 3)
    });
    assert!(relative_error(&auto, &fd) < 1e-6);
}

#[test]
fn layer_norm_gradient_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 5], 2.0, &mut rng);
    let g = rand_tensor(&[5], 1.0, &mut rng);
    let b = rand_tensor(&[5], 1.0, &mut rng);
    let (auto, fd) = both(&x, |t, x| {
        let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
        let y = t.layer_norm(x, gv, bv, 1e-6)?;
        weighted_sum(t, y, 4)
    });
    assert!(relative_error(&auto, &fd) < 1e-6);
    let (auto, fd) = both(&g, |t, gv| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        let y = t.layer_norm(xv, gv, bv, 1e-6)?;
        weighted_sum(t, y, 4)
    });
    assert!(relative_error(&auto, &fd) < 1e-7);
}

#[test]
fn cross_entropy_gradient_with_smoothing() {
    let x = rand_tensor(&[4, 5], 2.0, &mut ChaCha8Rng::seed_from_u64(5));
    for s in [0.0, 0.1] {
        let (auto, fd) = both(&x, |t, x| t.cross_entropy(x, &[0, 4, 2, 2], s));
        assert!(relative_error(&auto, &fd) < 1e-7, "smoothing {s}");
    }
}

fn param_mut<'a>(t: &'a mut ResAttnTuner, name: &str) -> &'a mut Parameter {
    t.params_mut().into_iter().find(|p| p.name() == name).unwrap()
}

#[test]
fn res_attn_parameters_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cfg = ResAttnConfig::new(6, 2, 3);
    cfg.qkv_bias = true;
    let mut t = ResAttnTuner::init(cfg, "t", &mut rng).unwrap();
    let o = rand_tensor(&[6, 6], 0.5, &mut rng);
    t.o.weight.set_value(o).unwrap();
    let x = rand_tensor(&[2, 4, 6], 1.0, &mut rng);
    let loss = |t: &ResAttnTuner, tape: &mut Tape| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let y = t.forward(tape, xv)?;
        weighted_sum(tape, y, 8)
    };
    let mut tape = Tape::eval();
    let l = loss(&t, &mut tape).unwrap();
    tape.backward(l).unwrap();
    let names: Vec<String> = t.params().iter().map(|p| p.name().to_string()).collect();
    for name in names {
        let auto = tape.param_grad(&name).unwrap();
        let base = param_mut(&mut t, &name).value().clone();
        let fd = finite_diff_grad(
            |v| {
                let mut c = t.clone();
                param_mut(&mut c, &name).set_value(v.clone())?;
                let mut tp = Tape::eval();
                let l = loss(&c, &mut tp)?;
                Ok(tp.value(l).item())
            },
            &base,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&auto, &fd);
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn grad_check_head_only_is_tight() {
    let cfg = toy_backbone(8, 2, 2);
    let m = build_backbone(&cfg).unwrap();
    let x = images(3, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
    let opts = GradCheckOptions {
        tol: 1e-7,
        ..GradCheckOptions::default()
    };
    let r = grad_check(&m, &x, &[0, 1, 2], &opts).unwrap();
    assert_eq!(r.entries.len(), 2);
    assert!(r.pass, "{:?}", r.entries);
}

#[test]
fn grad_check_res_attn_and_negative_control() {
    let cfg = toy_backbone(8, 2, 2);
    let mut m = build_backbone(&cfg).unwrap();
    m.attach(&AttachSpec::every_block(2, AttachOp::Mha, TunerConfig::res_attn(2, 2)))
        .unwrap();
    let x = images(3, &cfg, &mut ChaCha8Rng::seed_from_u64(8));
    let r = grad_check(&m, &x, &[2, 0, 1], &GradCheckOptions::default()).unwrap();
    assert_eq!(r.entries.len(), 2 + 2 * 3);
    assert!(r.pass, "{:?}", r.entries);
    for fault in [OpKind::Softmax, OpKind::MatMul, OpKind::LayerNorm] {
        let opts = GradCheckOptions {
            fault: Some(fault),
            ..GradCheckOptions::default()
        };
        let r = grad_check(&m, &x, &[2, 0, 1], &opts).unwrap();
        assert!(!r.pass, "fault in {} went unnoticed", fault.name());
    }
}

#[test]
fn grad_check_refuses_large_models() {
    let cfg = toy_backbone(8, 2, 2);
    let m = build_backbone(&cfg).unwrap();
    let x = images(1, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let opts = GradCheckOptions {
        max_scalars: 10,
        ..GradCheckOptions::default()
    };
    assert!(grad_check(&m, &x, &[0], &opts).is_err());
}
