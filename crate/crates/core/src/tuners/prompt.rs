//! Parallel prompt tuner: trainable prompt embeddings are projected to keys
//! and values by the block's frozen attention weights, attended by the
//! backbone queries and mapped out through the frozen output projection.
//!
//! Only the prompt embeddings train. The shared projections are applied
//! without their biases and the prompts start at zero, so a fresh tuner
//! contributes exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, merge_heads, MultiHeadAttention, ParamInfo, Parameter};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_PROMPT_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub dim: usize,
    pub length: usize,
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.dim == 0 {
            return Err(Error::Config("prompt tuner needs length ≥ 1".into()));
        }
        Ok(())
    }

    pub(crate) fn layout(&self, prefix: &str) -> Vec<ParamInfo> {
        vec![ParamInfo::new(format!("{prefix}.prompt"), [self.length, self.dim])]
    }
}

#[derive(Clone, Debug)]
pub struct PromptTuner {
    pub cfg: PromptConfig,
    /// `[L, dim]`
    pub prompt: Parameter,
}

impl PromptTuner {
    pub fn init(cfg: PromptConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let prompt = Parameter::new(
            format!("{prefix}.prompt"),
            Tensor::zeros([cfg.length, cfg.dim]),
            true,
        );
        Ok(PromptTuner { cfg, prompt })
    }

    /// `query: [B, heads, N, head_dim]`, `mha`: the same block's frozen
    /// attention → `[B, N, dim]`.
    pub fn forward(&self, tape: &mut Tape, query: Var, mha: &MultiHeadAttention) -> Result<Var> {
        let dim = self.cfg.dim;
        if mha.cfg.dim != dim {
            return Err(Error::shape("prompt_forward", &[mha.cfg.dim], &[dim]));
        }
        let (heads, hd) = (mha.cfg.heads, mha.cfg.head_dim());
        let s = tape.shape(query).to_vec();
        if s.len() != 4 || s[1] != heads || s[3] != hd {
            return Err(Error::shape("prompt_forward", &s, &[heads, hd]));
        }
        let p = tape.param(&self.prompt);
        let w = tape.param(&mha.qkv.weight);
        let project = |tape: &mut Tape, offset: usize| -> Result<Var> {
            let wslice = tape.narrow(w, 1, offset, dim)?;
            let t = tape.matmul(p, wslice)?;
            let t = tape.reshape(t, &[self.cfg.length, heads, hd])?;
            let t = tape.permute(t, &[1, 0, 2])?;
            tape.expand_leading(t, s[0])
        };
        let k = project(tape, dim)?;
        let v = project(tape, 2 * dim)?;
        let ctx = attention(tape, query, k, v, (hd as f64).powf(-0.5), 0.0)?;
        let merged = merge_heads(tape, ctx)?;
        let wo = tape.param(&mha.proj.weight);
        tape.linear(merged, wo, None)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.prompt]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.prompt]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::uniform;
    use crate::nn::{LinearLayer, MhaConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mha(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> MultiHeadAttention {
        let qkv = LinearLayer::new(
            Parameter::new("m.qkv.weight", uniform(&[dim, 3 * dim], 0.5, rng), false),
            Some(Parameter::new("m.qkv.bias", uniform(&[3 * dim], 0.5, rng), false)),
        )
        .unwrap();
        let proj = LinearLayer::new(
            Parameter::new("m.proj.weight", uniform(&[dim, dim], 0.5, rng), false),
            Some(Parameter::new("m.proj.bias", uniform(&[dim], 0.5, rng), false)),
        )
        .unwrap();
        MultiHeadAttention::new(MhaConfig::new(dim, heads), qkv, proj).unwrap()
    }

    #[test]
    fn fresh_prompt_outputs_zero_and_only_prompt_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = mha(4, 2, &mut rng);
        let t = PromptTuner::init(PromptConfig { dim: 4, length: 3 }, "p").unwrap();
        let mut tape = Tape::new(crate::tensor::Mode::Train, 0);
        let x = tape.constant(uniform(&[2, 5, 4], 1.0, &mut rng));
        let q = m.query(&mut tape, x).unwrap();
        let y = t.forward(&mut tape, q, &m).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.param_grad("p.prompt").is_some());
        assert!(tape.param_grad("m.qkv.weight").is_none());
        assert!(tape.param_grad("m.proj.weight").is_none());
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (dim, heads, len, b, n) = (6, 3, 4, 2, 3);
        let hd = dim / heads;
        let m = mha(dim, heads, &mut rng);
        let mut t = PromptTuner::init(PromptConfig { dim, length: len }, "p").unwrap();
        t.prompt.set_value(uniform(&[len, dim], 1.0, &mut rng)).unwrap();
        let q = uniform(&[b, heads, n, hd], 1.0, &mut rng);
        let mut tape = Tape::eval();
        let qv = tape.constant(q.clone());
        let y = t.forward(&mut tape, qv, &m).unwrap();
        let got = tape.value(y).clone();

        let w = m.qkv.weight.value();
        let wo = m.proj.weight.value();
        let p = t.prompt.value();
        let proj = |l: usize, col: usize| (0..dim).map(|i| p.get(&[l, i]) * w.get(&[i, col])).sum::<f64>();
        let scale = (hd as f64).powf(-0.5);
        for bi in 0..b {
            for ni in 0..n {
                let mut merged = vec![0.0; dim];
                for h in 0..heads {
                    let logits: Vec<f64> = (0..len)
                        .map(|l| (0..hd).map(|e| q.get(&[bi, h, ni, e]) * proj(l, dim + h * hd + e)).sum::<f64>() * scale)
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
                    for e in 0..hd {
                        merged[h * hd + e] = (0..len)
                            .map(|l| (logits[l] - mx).exp() / z * proj(l, 2 * dim + h * hd + e))
                            .sum();
                    }
                }
                for j in 0..dim {
                    let expect: f64 = (0..dim).map(|i| merged[i] * wo.get(&[i, j])).sum();
                    assert!((got.get(&[bi, ni, j]) - expect).abs() < 1e-10);
                }
            }
        }
    }
}
