use serde::{Deserialize, Serialize};

use super::{LinearLayer, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhaConfig {
    pub dim: usize,
    pub heads: usize,
    pub qkv_bias: bool,
    pub attn_drop: f64,
    pub proj_drop: f64,
}

impl MhaConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        MhaConfig {
            dim,
            heads,
            qkv_bias: true,
            attn_drop: 0.0,
            proj_drop: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        for p in [self.attn_drop, self.proj_drop] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Output of [`MultiHeadAttention::forward`].
pub struct MhaOutput {
    /// `[B, N, dim]`
    pub out: Var,
    /// Per-head queries `[B, heads, N, head_dim]`, reused by query-sharing tuners.
    pub query: Var,
}

/// Multi-head self-attention with a fused `[dim, 3·dim]` QKV projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: MhaConfig,
    pub qkv: LinearLayer,
    pub proj: LinearLayer,
}

impl MultiHeadAttention {
    pub fn new(cfg: MhaConfig, qkv: LinearLayer, proj: LinearLayer) -> Result<Self> {
        cfg.validate()?;
        if qkv.d_in() != cfg.dim || qkv.d_out() != 3 * cfg.dim {
            return Err(Error::shape("mha.qkv", &[cfg.dim, 3 * cfg.dim], qkv.weight.value().shape()));
        }
        if proj.d_in() != cfg.dim || proj.d_out() != cfg.dim {
            return Err(Error::shape("mha.proj", &[cfg.dim, cfg.dim], proj.weight.value().shape()));
        }
        Ok(MultiHeadAttention { cfg, qkv, proj })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<MhaOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.dim {
            return Err(Error::shape("multi_head_attention", &s, &[self.cfg.dim]));
        }
        let qkv = self.qkv.forward(tape, x)?;
        let (q, k, v) = split_qkv(tape, qkv, self.cfg.heads, self.cfg.head_dim())?;
        let scale = (self.cfg.head_dim() as f64).powf(-0.5);
        let ctx = attention(tape, q, k, v, scale, self.cfg.attn_drop)?;
        let merged = merge_heads(tape, ctx)?;
        let out = self.proj.forward(tape, merged)?;
        let out = tape.dropout(out, self.cfg.proj_drop)?;
        Ok(MhaOutput { out, query: q })
    }

    /// Per-head queries of an arbitrary input `[B, N, dim]`, using the
    /// query slice of the fused projection.
    pub fn query(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let dim = self.cfg.dim;
        let w = tape.param(&self.qkv.weight);
        let wq = tape.narrow(w, 1, 0, dim)?;
        let bq = match &self.qkv.bias {
            Some(b) => {
                let b = tape.param(b);
                Some(tape.narrow(b, 0, 0, dim)?)
            }
            None => None,
        };
        let q = tape.linear(x, wq, bq)?;
        split_heads(tape, q, self.cfg.heads, self.cfg.head_dim())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.qkv.params();
        p.extend(self.proj.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.qkv.params_mut();
        p.extend(self.proj.params_mut());
        p
    }
}

/// `[B, N, h·d] -> [B, h, N, d]`
pub(crate) fn split_heads(tape: &mut Tape, x: Var, heads: usize, head_dim: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, head_dim])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// Split a fused projection `[B, N, 3·h·d]` into per-head `q, k, v`, each
/// `[B, h, N, d]`, via `reshape(B, N, 3, h, d).permute(2, 0, 3, 1, 4)`.
pub fn split_qkv(tape: &mut Tape, qkv: Var, heads: usize, head_dim: usize) -> Result<(Var, Var, Var)> {
    let s = tape.shape(qkv).to_vec();
    if s.len() != 3 || s[2] != 3 * heads * head_dim {
        return Err(Error::shape("split_qkv", &s, &[3, heads, head_dim]));
    }
    let (b, n) = (s[0], s[1]);
    let r = tape.reshape(qkv, &[b, n, 3, heads, head_dim])?;
    let p = tape.permute(r, &[2, 0, 3, 1, 4])?;
    let mut parts = [None; 3];
    for (i, slot) in parts.iter_mut().enumerate() {
        let t = tape.narrow(p, 0, i, 1)?;
        *slot = Some(tape.reshape(t, &[b, heads, n, head_dim])?);
    }
    let [q, k, v] = parts.map(Option::unwrap);
    Ok((q, k, v))
}

/// Scaled dot-product attention: `softmax(q·kᵀ · scale) · v`.
///
/// `q: [B, h, N, d]`, `k, v: [B, h, M, d]` → `[B, h, N, d]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64, drop: f64) -> Result<Var> {
    let kt = tape.transpose_last2(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, scale)?;
    let weights = tape.softmax_lastdim(logits)?;
    let weights = tape.dropout(weights, drop)?;
    tape.matmul(weights, v)
}

/// `[B, h, N, d] -> [B, N, h·d]`
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(t, &[s[0], s[2], s[1] * s[3]])
}
