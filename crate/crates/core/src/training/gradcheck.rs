//! Reverse-mode gradients of the training loss against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::backbone::ModelGraph;
use crate::error::{Error, Result};
use crate::tensor::{finite_diff_grad, relative_error, OpKind, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Std of the Gaussian noise added to every trainable tensor before checking.
    pub perturb: f64,
    pub seed: u64,
    /// Corrupt the backward rule of this op (negative-control fixture).
    pub fault: Option<OpKind>,
    pub max_scalars: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            perturb: 0.05,
            seed: 0,
            fault: None,
            max_scalars: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub loss: f64,
    pub entries: Vec<GradCheckEntry>,
    pub pass: bool,
}

fn loss_of(model: &ModelGraph, images: &Tensor, labels: &[usize], fault: Option<OpKind>) -> Result<(Tape, f64)> {
    let mut tape = Tape::eval();
    tape.inject_fault(fault);
    let logits = model.forward(&mut tape, images)?;
    let loss = tape.cross_entropy(logits, labels, 0.0)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad-check loss".into()));
    }
    tape.backward(loss)?;
    Ok((tape, v))
}

/// Compare every trainable tensor's gradient of the eval-mode cross-entropy
/// on `(images, labels)` with central differences.
pub fn grad_check(
    model: &ModelGraph,
    images: &Tensor,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut m = model.clone();
    let scalars: usize = m.trainable_parameters().iter().map(|p| p.numel()).sum();
    if scalars > opts.max_scalars {
        return Err(Error::Config(format!(
            "{scalars} trainable scalars exceed the grad-check limit of {}",
            opts.max_scalars
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for p in m.params_mut() {
        if p.trainable() && opts.perturb > 0.0 {
            for v in p.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += opts.perturb * z;
            }
        }
    }
    let (tape, loss) = loss_of(&m, images, labels, opts.fault)?;
    let names: Vec<String> = m.trainable_parameters().iter().map(|p| p.name().to_string()).collect();
    let mut entries = Vec::new();
    for name in names {
        let base = m.param(&name).unwrap().value().clone();
        let auto = tape
            .param_grad(&name)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for {name}")))?;
        let mut probe = m.clone();
        let fd = finite_diff_grad(
            |t| {
                probe.param_mut(&name).unwrap().set_value(t.clone())?;
                let mut tp = Tape::eval();
                let logits = probe.forward(&mut tp, images)?;
                let l = tp.cross_entropy(logits, labels, 0.0)?;
                Ok(tp.value(l).item())
            },
            &base,
            opts.eps,
        )?;
        let rel_error = relative_error(&auto, &fd);
        entries.push(GradCheckEntry {
            numel: base.numel(),
            pass: rel_error < opts.tol,
            rel_error,
            name,
        });
    }
    Ok(GradCheckReport {
        eps: opts.eps,
        tol: opts.tol,
        loss,
        pass: entries.iter().all(|e| e.pass),
        entries,
    })
}
