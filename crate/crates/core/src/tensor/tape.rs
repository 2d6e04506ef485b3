use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, axis_extents};
use super::Tensor;
use crate::error::{Error, Result};
use crate::nn::Parameter;

/// Forward-pass mode. Dropout is active only in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation kinds, used to name ops in errors and to select an op for
/// gradient fault injection in negative-control tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    MulConst,
    Sum,
    Softmax,
    Gelu,
    LayerNorm,
    Reshape,
    Permute,
    Narrow,
    Concat,
    Expand,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MulConst => "mul_const",
            OpKind::Sum => "sum",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::Expand => "expand",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        const ALL: [OpKind; 16] = [
            OpKind::Leaf,
            OpKind::MatMul,
            OpKind::Add,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::MulConst,
            OpKind::Sum,
            OpKind::Softmax,
            OpKind::Gelu,
            OpKind::LayerNorm,
            OpKind::Reshape,
            OpKind::Permute,
            OpKind::Narrow,
            OpKind::Concat,
            OpKind::Expand,
            OpKind::CrossEntropy,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    MulConst {
        a: Var,
        mask: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Expand {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<f64>,
        batch: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::MulConst { .. } => OpKind::MulConst,
            Op::Sum { .. } => OpKind::Sum,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Expand { .. } => OpKind::Expand,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::MulConst { a, .. }
            | Op::Sum { a }
            | Op::Softmax { a }
            | Op::Gelu { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Narrow { a, .. }
            | Op::Expand { a } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run recording of one forward pass.
///
/// Every node's inputs are recorded before it, so reverse insertion order is a
/// valid reverse topological order. A tape supports exactly one
/// [`backward`](Tape::backward); a second call is rejected.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    bindings: BTreeMap<String, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bindings: BTreeMap::new(),
            grads: None,
            fault: None,
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupt the backward rule of one op kind (its input gradient is scaled
    /// by 1.5). Test fixture for gradient-check negative controls.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.kind().name().to_string()));
        }
        if self.grads.is_some() {
            return Err(Error::Contract("tape already differentiated".into()));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Record a parameter. Repeated use of the same parameter name on one tape
    /// returns the same node so gradients accumulate in one place.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.bindings.get(p.name()) {
            return v;
        }
        let v = self.leaf(p.value().clone(), p.trainable());
        self.bindings.insert(p.name().to_string(), v);
        v
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---------------------------------------------------------------- ops

    /// Batched matrix product `[..., m, k] @ [..., k, n]`. Batch dimensions
    /// must match, or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch_shape = if ba.is_empty() { bb } else { ba };
        let batch: usize = batch_shape.iter().product();
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                kernels::gemm_acc(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);
        self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
        )
    }

    /// `a + b`, where `b`'s shape equals `a`'s or is a suffix of it (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % nb])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        self.push(value, Op::Scale { a, c })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { a })
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * kernels::std_normal_cdf(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Gelu { a })
    }

    /// Layer normalization over the last dimension (biased variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { a })
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid("transpose_last2", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Narrow { a, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Repeat `a` along a new leading axis of size `n`.
    pub fn expand_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::invalid("expand", "n must be ≥ 1"));
        }
        let t = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Expand { a })
    }

    /// Inverted dropout. Identity when `p == 0` or in eval mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1]")));
        }
        if p == 0.0 || self.mode == Mode::Eval {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if keep > 0.0 && self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::MulConst { a, mask })
    }

    /// `x · W (+ b)` with `W: [d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("linear", sx, sw));
        }
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                if self.shape(b) != [self.shape(w)[1]] {
                    return Err(Error::shape("linear", self.shape(w), self.shape(b)));
                }
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Mean cross-entropy of `logits: [B, K]` against integer labels, with
    /// the target distribution `(1 - s)·onehot + s/K`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid("cross_entropy", "smoothing must be in [0, 1)"));
        }
        let (batch, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; batch * k];
        let mut target = vec![smoothing / k as f64; batch * k];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv[b * k..(b + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            target[b * k + label] += 1.0 - smoothing;
            for j in 0..k {
                let logp = row[j] - lse;
                probs[b * k + j] = logp.exp();
                loss -= target[b * k + j] * logp;
            }
        }
        self.push(
            Tensor::scalar(loss / batch as f64),
            Op::CrossEntropy {
                logits,
                probs,
                target,
                batch,
            },
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Fills gradients for every
    /// node that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract("backward called twice on the same tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let fault = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
        let scaled = |v: Vec<f64>| -> Vec<f64> {
            if fault == 1.0 {
                v
            } else {
                v.into_iter().map(|x| x * fault).collect()
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; av.len()];
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        kernels::gemm_a_bt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut da[ao..ao + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, a, scaled(da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; bv.len()];
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        kernels::gemm_at_b_acc(
                            &av[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, b, scaled(db));
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, scaled(g.to_vec()));
                if self.nodes[b.0].needs_grad {
                    let nb = self.value(b).numel();
                    let mut db = vec![0.0; nb];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % nb] += gv;
                    }
                    self.accumulate(grads, b, scaled(db));
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let da = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                self.accumulate(grads, a, scaled(da));
                self.accumulate(grads, b, scaled(db));
            }
            &Op::Scale { a, c } => {
                self.accumulate(grads, a, scaled(g.iter().map(|x| x * c).collect()));
            }
            Op::MulConst { a, mask } => {
                let da = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(grads, *a, scaled(da));
            }
            &Op::Sum { a } => {
                let n = self.value(a).numel();
                self.accumulate(grads, a, scaled(vec![g[0]; n]));
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(da.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, a, scaled(da));
            }
            &Op::Gelu { a } => {
                let x = self.value(a).data();
                let da = x
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        gv * (kernels::std_normal_cdf(x) + x * kernels::std_normal_pdf(x))
                    })
                    .collect();
                self.accumulate(grads, a, scaled(da));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let o = r * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[o + j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[o + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = g[o + j] * gam[j];
                            dx[o + j] = rs * (dh - mean_dh - xhat[o + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, scaled(dx));
                }
                if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % d] += gv * h;
                        db[j % d] += gv;
                    }
                    self.accumulate(grads, *gamma, scaled(dg));
                    self.accumulate(grads, *beta, scaled(db));
                }
            }
            &Op::Reshape { a } => self.accumulate(grads, a, scaled(g.to_vec())),
            Op::Permute { a, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (_, da) = kernels::permute(node.value.shape(), g, &inv);
                self.accumulate(grads, *a, scaled(da));
            }
            &Op::Narrow { a, axis, start } => {
                let in_shape = self.shape(a);
                let (outer, dim, inner) = axis_extents(in_shape, axis);
                let len = node.value.shape()[axis];
                let mut da = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, a, scaled(da));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[*axis] * inner;
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            dp.extend_from_slice(&g[base..base + w]);
                        }
                        self.accumulate(grads, p, scaled(dp));
                    }
                    offset += w;
                }
            }
            &Op::Expand { a } => {
                let n = self.value(a).numel();
                let mut da = vec![0.0; n];
                for chunk in g.chunks(n) {
                    da.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
                self.accumulate(grads, a, scaled(da));
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
                batch,
            } => {
                let c = g[0] / *batch as f64;
                let dl = probs.iter().zip(target).map(|(p, q)| (p - q) * c).collect();
                self.accumulate(grads, *logits, scaled(dl));
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`. `None` before
    /// backward or for nodes that do not depend on any trainable leaf; a
    /// trainable leaf the loss never reached gets an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn param_grad(&self, name: &str) -> Option<Tensor> {
        self.bindings.get(name).and_then(|&v| self.grad(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::eval();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 4., 5., 6.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::eval();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_shared_rhs_broadcasts_over_batch() {
        let mut tape = Tape::eval();
        let a = tape.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let w = tape.constant(t(&[2, 1], &[1., 1.]));
        let y = tape.matmul(a, w).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 1]);
        assert_eq!(tape.value(y).data(), &[1., 5., 9., 13., 17., 21.]);
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::zeros([4]));
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let x = tape.constant(t(&[2], &[1000., 0.]));
        let y = tape.softmax_lastdim(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    #[cfg(debug_assertions)]
    fn softmax_rejects_nan_in_debug() {
        let mut tape = Tape::eval();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(tape.softmax_lastdim(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::eval();
        let x = tape.constant(t(&[2], &[1., 2.]));
        let x = tape.reshape(x, &[1, 2]).unwrap();
        let w = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2.]);

        let x = tape.constant(t(&[1, 2], &[1., 1.]));
        let w = tape.constant(t(&[2, 1], &[2., 3.]));
        let b = tape.constant(t(&[1], &[1.]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.]);

        let x = tape.constant(t(&[1, 3], &[0.3, -7., 2.]));
        let w = tape.constant(Tensor::zeros([3, 2]));
        let b = tape.constant(t(&[2], &[0.5, 0.5]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let bad = tape.constant(Tensor::zeros([4, 2]));
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::eval();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut tape = Tape::eval();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::eval();
        let x = tape.leaf(Tensor::ones([3]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_trainable_leaf_gets_zero_grad() {
        let mut tape = Tape::eval();
        let x = tape.leaf(Tensor::ones([2]), true);
        let unused = tape.leaf(Tensor::ones([3]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn frozen_leaf_has_no_grad() {
        let mut tape = Tape::eval();
        let w = tape.constant(Tensor::ones([2]));
        let x = tape.leaf(Tensor::ones([2]), true);
        let y = tape.mul(w, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::new(Mode::Train, 1);
        let x = tape.constant(Tensor::ones([4]));
        assert_eq!(tape.dropout(x, 0.0).unwrap(), x);
        let mut eval = Tape::eval();
        let x = eval.constant(Tensor::ones([4]));
        assert_eq!(eval.dropout(x, 0.5).unwrap(), x);
        let mut tape = Tape::new(Mode::Train, 1);
        let x = tape.constant(Tensor::ones([1000]));
        let y = tape.dropout(x, 0.5).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((400..600).contains(&kept), "{kept}");
        assert!(tape.dropout(x, 1.5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::eval();
        let l = tape.constant(Tensor::zeros([3, 4]));
        let loss = tape.cross_entropy(l, &[0, 1, 3], 0.0).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);

        let l = tape.constant(t(&[1, 3], &[0., 800., 0.]));
        let loss = tape.cross_entropy(l, &[1], 0.0).unwrap();
        assert!(tape.value(loss).item() < 1e-300);

        assert!(tape.cross_entropy(l, &[3], 0.0).is_err());
    }

    #[test]
    fn narrow_concat_expand_shapes() {
        let mut tape = Tape::eval();
        let x = tape.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let n = tape.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(tape.shape(n), &[2, 2, 2]);
        assert_eq!(tape.value(n).data(), &[2., 3., 4., 5., 8., 9., 10., 11.]);
        let head = tape.narrow(x, 1, 0, 1).unwrap();
        let c = tape.concat(&[head, n], 1).unwrap();
        assert!(tape.value(c).bit_eq(tape.value(x)));
        let e = tape.expand_leading(head, 3).unwrap();
        assert_eq!(tape.shape(e), &[3, 2, 1, 2]);
        assert!(tape.narrow(x, 1, 2, 2).is_err());
    }

    #[test]
    fn op_kind_names_round_trip() {
        assert_eq!(OpKind::parse("softmax"), Some(OpKind::Softmax));
        assert_eq!(OpKind::parse("nope"), None);
    }
}
