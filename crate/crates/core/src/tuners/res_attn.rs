//! Res-Attn: an independent low-rank multi-head attention run in parallel
//! with a frozen operation.
//!
//! The input is projected to `3·r·h` features (query, key and value for `h`
//! heads of width `r`), attended with scale `r^-1/2`, merged back to `r·h`
//! and mapped to the model width by a zero-initialized projection `o`. A
//! fresh tuner therefore outputs exactly zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::{kaiming_uniform, uniform};
use crate::nn::{attention, merge_heads, split_qkv, LinearLayer, ParamInfo, Parameter};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResAttnConfig {
    pub dim: usize,
    pub rank: usize,
    pub heads: usize,
    #[serde(default)]
    pub qkv_bias: bool,
    #[serde(default)]
    pub attn_drop: f64,
    #[serde(default)]
    pub proj_drop: f64,
}

impl ResAttnConfig {
    pub fn new(dim: usize, rank: usize, heads: usize) -> Self {
        ResAttnConfig {
            dim,
            rank,
            heads,
            qkv_bias: false,
            attn_drop: 0.0,
            proj_drop: 0.0,
        }
    }

    /// Width of the merged heads, `r·h`.
    pub fn inner(&self) -> usize {
        self.rank * self.heads
    }

    /// Softmax temperature, `rank^-1/2`.
    pub fn scale(&self) -> f64 {
        (self.rank as f64).powf(-0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.rank == 0 || self.heads == 0 {
            return Err(Error::Config(format!(
                "res-attn needs dim, rank and heads ≥ 1 (got {}, {}, {})",
                self.dim, self.rank, self.heads
            )));
        }
        for p in [self.attn_drop, self.proj_drop] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub(crate) fn layout(&self, prefix: &str) -> Vec<ParamInfo> {
        let mut v = vec![ParamInfo::new(format!("{prefix}.qkv.weight"), [self.dim, 3 * self.inner()])];
        if self.qkv_bias {
            v.push(ParamInfo::new(format!("{prefix}.qkv.bias"), [3 * self.inner()]));
        }
        v.push(ParamInfo::new(format!("{prefix}.o.weight"), [self.inner(), self.dim]));
        v.push(ParamInfo::new(format!("{prefix}.o.bias"), [self.dim]));
        v
    }
}

#[derive(Clone, Debug)]
pub struct ResAttnTuner {
    pub cfg: ResAttnConfig,
    pub qkv: LinearLayer,
    pub o: LinearLayer,
}

impl ResAttnTuner {
    /// Kaiming-uniform (`a = √5`) QKV weight; a bias, when enabled, keeps the
    /// default linear-layer init `U(±1/√fan_in)`. `o` is all zeros.
    pub fn init<R: Rng>(cfg: ResAttnConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let inner = cfg.inner();
        let w = kaiming_uniform(&[cfg.dim, 3 * inner], 5f64.sqrt(), rng);
        let b = cfg.qkv_bias.then(|| {
            Parameter::new(
                format!("{prefix}.qkv.bias"),
                uniform(&[3 * inner], (cfg.dim as f64).powf(-0.5), rng),
                true,
            )
        });
        let qkv = LinearLayer::new(Parameter::new(format!("{prefix}.qkv.weight"), w, true), b)?;
        let o = LinearLayer::new(
            Parameter::new(format!("{prefix}.o.weight"), Tensor::zeros([inner, cfg.dim]), true),
            Some(Parameter::new(format!("{prefix}.o.bias"), Tensor::zeros([cfg.dim]), true)),
        )?;
        Ok(ResAttnTuner { cfg, qkv, o })
    }

    /// `x: [B, N, dim] -> [B, N, dim]`
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.dim {
            return Err(Error::shape("res_attn_forward", &s, &[self.cfg.dim]));
        }
        let (b, n) = (s[0], s[1]);
        let qkv = self.qkv.forward(tape, x)?;
        let (q, k, v) = split_qkv(tape, qkv, self.cfg.heads, self.cfg.rank)?;
        let ctx = attention(tape, q, k, v, self.cfg.scale(), self.cfg.attn_drop)?;
        let merged = merge_heads(tape, ctx)?;
        debug_assert_eq!(tape.shape(merged), &[b, n, self.cfg.inner()]);
        let out = self.o.forward(tape, merged)?;
        tape.dropout(out, self.cfg.proj_drop)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.qkv.params();
        p.extend(self.o.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.qkv.params_mut();
        p.extend(self.o.params_mut());
        p
    }
}
