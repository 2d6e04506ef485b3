//! Parallel prefix tuner: attention of the backbone's own queries over a set
//! of trainable keys and values, projected back by a zero-initialized linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::trunc_normal;
use crate::nn::{attention, merge_heads, LinearLayer, ParamInfo, Parameter};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_PREFIX_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixConfig {
    pub dim: usize,
    /// Backbone head count; the trainable keys are laid out per head.
    pub heads: usize,
    pub length: usize,
}

impl PrefixConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "prefix tuner needs length ≥ 1 and dim {} divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub(crate) fn layout(&self, prefix: &str) -> Vec<ParamInfo> {
        let kv = [self.heads, self.length, self.head_dim()];
        vec![
            ParamInfo::new(format!("{prefix}.key"), kv),
            ParamInfo::new(format!("{prefix}.value"), kv),
            ParamInfo::new(format!("{prefix}.o.weight"), [self.dim, self.dim]),
            ParamInfo::new(format!("{prefix}.o.bias"), [self.dim]),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct PrefixTuner {
    pub cfg: PrefixConfig,
    /// `[heads, L, head_dim]`
    pub key: Parameter,
    /// `[heads, L, head_dim]`
    pub value: Parameter,
    pub o: LinearLayer,
}

impl PrefixTuner {
    pub fn init<R: Rng>(cfg: PrefixConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let kv = [cfg.heads, cfg.length, cfg.head_dim()];
        let key = Parameter::new(format!("{prefix}.key"), trunc_normal(&kv, 0.02, rng), true);
        let value = Parameter::new(format!("{prefix}.value"), trunc_normal(&kv, 0.02, rng), true);
        let o = LinearLayer::new(
            Parameter::new(format!("{prefix}.o.weight"), Tensor::zeros([cfg.dim, cfg.dim]), true),
            Some(Parameter::new(format!("{prefix}.o.bias"), Tensor::zeros([cfg.dim]), true)),
        )?;
        Ok(PrefixTuner { cfg, key, value, o })
    }

    /// `query: [B, heads, N, head_dim]` from the backbone → `[B, N, dim]`.
    pub fn forward(&self, tape: &mut Tape, query: Var) -> Result<Var> {
        let s = tape.shape(query).to_vec();
        if s.len() != 4 || s[1] != self.cfg.heads || s[3] != self.cfg.head_dim() {
            return Err(Error::shape(
                "prefix_forward",
                &s,
                &[self.cfg.heads, self.cfg.head_dim()],
            ));
        }
        let k = tape.param(&self.key);
        let v = tape.param(&self.value);
        let k = tape.expand_leading(k, s[0])?;
        let v = tape.expand_leading(v, s[0])?;
        let scale = (self.cfg.head_dim() as f64).powf(-0.5);
        let ctx = attention(tape, query, k, v, scale, 0.0)?;
        let merged = merge_heads(tape, ctx)?;
        self.o.forward(tape, merged)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = vec![&self.key, &self.value];
        p.extend(self.o.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = vec![&mut self.key, &mut self.value];
        p.extend(self.o.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(length: usize) -> PrefixConfig {
        PrefixConfig {
            dim: 8,
            heads: 2,
            length,
        }
    }

    #[test]
    fn fresh_prefix_outputs_zero() {
        let t = PrefixTuner::init(cfg(3), "p", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::eval();
        let q = tape.constant(Tensor::from_fn([2, 2, 4, 4], |i| i as f64 * 0.1));
        let y = t.forward(&mut tape, q).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 8]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_prefix_ignores_query() {
        let mut t = PrefixTuner::init(cfg(1), "p", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        t.o.weight.set_value(trunc_normal(&[8, 8], 1.0, &mut rng)).unwrap();
        let run = |scale: f64| {
            let mut tape = Tape::eval();
            let q = tape.constant(Tensor::from_fn([1, 2, 3, 4], |i| scale * (i as f64).cos()));
            let y = t.forward(&mut tape, q).unwrap();
            tape.value(y).clone()
        };
        let a = run(1.0);
        let b = run(-37.0);
        assert!(a.bit_eq(&b));
        // every token sees exactly V merged across heads, then o
        let v = t.value.value();
        for tok in 0..3 {
            for c in 0..8 {
                let mut expect = 0.0;
                for e in 0..8 {
                    expect += v.data()[e] * t.o.weight.value().get(&[e, c]);
                }
                assert!((a.get(&[0, tok, c]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_head_mismatch() {
        let t = PrefixTuner::init(cfg(2), "p", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::eval();
        let q = tape.constant(Tensor::zeros([1, 4, 3, 2]));
        assert!(t.forward(&mut tape, q).is_err());
    }
}
