//! Residual tuners and the machinery that attaches them to a frozen backbone.
//!
//! Every tuner runs in parallel with one frozen operation and its output is
//! added to that operation's output: `x' = OP(x) + tuner(x)`. Four kinds are
//! provided:
//!
//! | kind | trainable state | output path |
//! |------|-----------------|-------------|
//! | [`ResAttnTuner`] | low-rank QKV projection, `o` | zero-init `o` |
//! | [`PrefixTuner`]  | per-head keys/values, `o` | zero-init `o` |
//! | [`PromptTuner`]  | prompt embeddings (zero-init) | frozen backbone projections |
//! | [`Adapter`]      | down / up projections | zero-init `up` |
//!
//! A tuner attaches to a slot `(block, op)` where `op` is the attention, the
//! feed-forward network, or the whole block. Each slot holds at most one
//! tuner.

mod adapter;
mod count;
mod prefix;
mod prompt;
mod res_attn;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{Adapter, AdapterConfig, DEFAULT_BOTTLENECK};
pub use count::{analytic_tuner_params, ComponentCount, CountOptions, ParamCount};
pub use prefix::{PrefixConfig, PrefixTuner, DEFAULT_PREFIX_LEN};
pub use prompt::{PromptConfig, PromptTuner, DEFAULT_PROMPT_LEN};
pub use res_attn::{ResAttnConfig, ResAttnTuner};

use crate::error::{Error, Result};
use crate::nn::{MultiHeadAttention, ParamInfo, Parameter};
use crate::tensor::{Tape, Var};

/// The frozen operation a tuner runs alongside.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachOp {
    Mha,
    Ffn,
    Block,
}

impl AttachOp {
    pub const ALL: [AttachOp; 3] = [AttachOp::Mha, AttachOp::Ffn, AttachOp::Block];

    pub fn as_str(self) -> &'static str {
        match self {
            AttachOp::Mha => "mha",
            AttachOp::Ffn => "ffn",
            AttachOp::Block => "block",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for AttachOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TunerKind {
    Adapter,
    Prefix,
    Prompt,
    ResAttn,
}

impl TunerKind {
    /// Row order of the single/dual attach tables.
    pub const ALL: [TunerKind; 4] = [
        TunerKind::Adapter,
        TunerKind::Prefix,
        TunerKind::Prompt,
        TunerKind::ResAttn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TunerKind::Adapter => "adapter",
            TunerKind::Prefix => "prefix",
            TunerKind::Prompt => "prompt",
            TunerKind::ResAttn => "res-attn",
        }
    }

    /// Short table label.
    pub fn label(self) -> &'static str {
        match self {
            TunerKind::Adapter => "Res-Ada.",
            TunerKind::Prefix => "Res-Pre.",
            TunerKind::Prompt => "Res-Pro.",
            TunerKind::ResAttn => "Res-Attn.",
        }
    }

    fn ident(self) -> &'static str {
        match self {
            TunerKind::Adapter => "adapter",
            TunerKind::Prefix => "prefix",
            TunerKind::Prompt => "prompt",
            TunerKind::ResAttn => "res_attn",
        }
    }
}

impl fmt::Display for TunerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kind-specific hyperparameters. The model width and head count come from
/// the backbone at attach time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TunerConfig {
    ResAttn {
        rank: usize,
        heads: usize,
        #[serde(default)]
        qkv_bias: bool,
        #[serde(default)]
        attn_drop: f64,
        #[serde(default)]
        proj_drop: f64,
    },
    Prefix {
        length: usize,
    },
    Prompt {
        length: usize,
    },
    Adapter {
        bottleneck: usize,
    },
}

impl TunerConfig {
    pub fn res_attn(rank: usize, heads: usize) -> Self {
        TunerConfig::ResAttn {
            rank,
            heads,
            qkv_bias: false,
            attn_drop: 0.0,
            proj_drop: 0.0,
        }
    }

    pub fn default_for(kind: TunerKind) -> Self {
        match kind {
            TunerKind::ResAttn => Self::res_attn(4, 4),
            TunerKind::Prefix => TunerConfig::Prefix {
                length: DEFAULT_PREFIX_LEN,
            },
            TunerKind::Prompt => TunerConfig::Prompt {
                length: DEFAULT_PROMPT_LEN,
            },
            TunerKind::Adapter => TunerConfig::Adapter {
                bottleneck: DEFAULT_BOTTLENECK,
            },
        }
    }

    pub fn kind(&self) -> TunerKind {
        match self {
            TunerConfig::ResAttn { .. } => TunerKind::ResAttn,
            TunerConfig::Prefix { .. } => TunerKind::Prefix,
            TunerConfig::Prompt { .. } => TunerKind::Prompt,
            TunerConfig::Adapter { .. } => TunerKind::Adapter,
        }
    }
}

/// One tuner placed at one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachSpec {
    pub block: usize,
    pub op: AttachOp,
    pub tuner: TunerConfig,
}

impl AttachSpec {
    pub fn new(block: usize, op: AttachOp, tuner: TunerConfig) -> Self {
        AttachSpec { block, op, tuner }
    }

    /// The same tuner at `op` in every block.
    pub fn every_block(depth: usize, op: AttachOp, tuner: TunerConfig) -> Vec<AttachSpec> {
        (0..depth).map(|b| AttachSpec::new(b, op, tuner.clone())).collect()
    }

    pub fn slot(&self) -> (usize, AttachOp) {
        (self.block, self.op)
    }

    pub(crate) fn param_prefix(&self) -> String {
        format!("tuners.{}.{}.{}", self.block, self.op, self.tuner.kind().ident())
    }
}

/// What a tuner may read besides its input tap.
pub struct TunerContext<'a> {
    /// The frozen attention of the block the tuner is attached to.
    pub mha: &'a MultiHeadAttention,
    /// Backbone queries of this block's attention, when the tap is the
    /// attention input.
    pub query: Option<Var>,
}

#[derive(Clone, Debug)]
pub enum Tuner {
    ResAttn(ResAttnTuner),
    Prefix(PrefixTuner),
    Prompt(PromptTuner),
    Adapter(Adapter),
}

/// Backbone geometry a tuner is sized against.
#[derive(Clone, Copy, Debug)]
pub struct BackboneDims {
    pub dim: usize,
    pub heads: usize,
}

fn res_attn_config(tc: &TunerConfig, dims: BackboneDims) -> Option<ResAttnConfig> {
    match *tc {
        TunerConfig::ResAttn {
            rank,
            heads,
            qkv_bias,
            attn_drop,
            proj_drop,
        } => Some(ResAttnConfig {
            dim: dims.dim,
            rank,
            heads,
            qkv_bias,
            attn_drop,
            proj_drop,
        }),
        _ => None,
    }
}

impl Tuner {
    pub fn build(spec: &AttachSpec, dims: BackboneDims, seed: u64) -> Result<Tuner> {
        let prefix = spec.param_prefix();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match &spec.tuner {
            tc @ TunerConfig::ResAttn { .. } => Tuner::ResAttn(ResAttnTuner::init(
                res_attn_config(tc, dims).expect("res-attn"),
                &prefix,
                &mut rng,
            )?),
            &TunerConfig::Prefix { length } => Tuner::Prefix(PrefixTuner::init(
                PrefixConfig {
                    dim: dims.dim,
                    heads: dims.heads,
                    length,
                },
                &prefix,
                &mut rng,
            )?),
            &TunerConfig::Prompt { length } => Tuner::Prompt(PromptTuner::init(
                PromptConfig {
                    dim: dims.dim,
                    length,
                },
                &prefix,
            )?),
            &TunerConfig::Adapter { bottleneck } => Tuner::Adapter(Adapter::init(
                AdapterConfig {
                    dim: dims.dim,
                    bottleneck,
                },
                &prefix,
                &mut rng,
            )?),
        })
    }

    /// Parameter names and shapes `build` would produce, without allocating.
    pub fn layout(spec: &AttachSpec, dims: BackboneDims) -> Result<Vec<ParamInfo>> {
        let prefix = spec.param_prefix();
        Ok(match &spec.tuner {
            tc @ TunerConfig::ResAttn { .. } => {
                let c = res_attn_config(tc, dims).expect("res-attn");
                c.validate()?;
                c.layout(&prefix)
            }
            &TunerConfig::Prefix { length } => {
                let c = PrefixConfig {
                    dim: dims.dim,
                    heads: dims.heads,
                    length,
                };
                c.validate()?;
                c.layout(&prefix)
            }
            &TunerConfig::Prompt { length } => {
                let c = PromptConfig { dim: dims.dim, length };
                c.validate()?;
                c.layout(&prefix)
            }
            &TunerConfig::Adapter { bottleneck } => {
                let c = AdapterConfig {
                    dim: dims.dim,
                    bottleneck,
                };
                c.validate()?;
                c.layout(&prefix)
            }
        })
    }

    pub fn kind(&self) -> TunerKind {
        match self {
            Tuner::ResAttn(_) => TunerKind::ResAttn,
            Tuner::Prefix(_) => TunerKind::Prefix,
            Tuner::Prompt(_) => TunerKind::Prompt,
            Tuner::Adapter(_) => TunerKind::Adapter,
        }
    }

    /// Tuner output for input tap `x: [B, N, dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, ctx: &TunerContext<'_>) -> Result<Var> {
        let query = |tape: &mut Tape| match ctx.query {
            Some(q) => Ok(q),
            None => ctx.mha.query(tape, x),
        };
        match self {
            Tuner::ResAttn(t) => t.forward(tape, x),
            Tuner::Adapter(t) => t.forward(tape, x),
            Tuner::Prefix(t) => {
                let q = query(tape)?;
                t.forward(tape, q)
            }
            Tuner::Prompt(t) => {
                let q = query(tape)?;
                t.forward(tape, q, ctx.mha)
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Tuner::ResAttn(t) => t.params(),
            Tuner::Prefix(t) => t.params(),
            Tuner::Prompt(t) => t.params(),
            Tuner::Adapter(t) => t.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Tuner::ResAttn(t) => t.params_mut(),
            Tuner::Prefix(t) => t.params_mut(),
            Tuner::Prompt(t) => t.params_mut(),
            Tuner::Adapter(t) => t.params_mut(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttachedTuner {
    pub spec: AttachSpec,
    pub tuner: Tuner,
}

/// Tuners of a model, kept sorted by slot.
#[derive(Clone, Debug, Default)]
pub struct TunerSet {
    entries: Vec<AttachedTuner>,
}

impl TunerSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AttachedTuner> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut AttachedTuner> {
        self.entries.iter_mut()
    }

    pub fn get(&self, block: usize, op: AttachOp) -> Option<&Tuner> {
        self.entries
            .binary_search_by_key(&(block, op), |e| e.spec.slot())
            .ok()
            .map(|i| &self.entries[i].tuner)
    }

    pub fn specs(&self) -> Vec<AttachSpec> {
        self.entries.iter().map(|e| e.spec.clone()).collect()
    }

    /// Build and insert tuners for `specs`. Fails without modifying the set
    /// if any slot is duplicated or out of range.
    pub fn attach(&mut self, specs: &[AttachSpec], depth: usize, dims: BackboneDims, seed: u64) -> Result<()> {
        let mut slots: Vec<(usize, AttachOp)> = self.entries.iter().map(|e| e.spec.slot()).collect();
        for s in specs {
            if s.block >= depth {
                return Err(Error::Config(format!(
                    "tuner at block {} but the backbone has {depth} blocks",
                    s.block
                )));
            }
            if slots.contains(&s.slot()) {
                return Err(Error::SlotConflict {
                    block: s.block,
                    op: s.op.to_string(),
                });
            }
            slots.push(s.slot());
        }
        let mut built = Vec::with_capacity(specs.len());
        for s in specs {
            let tuner = Tuner::build(s, dims, slot_seed(seed, s.block, s.op))?;
            built.push(AttachedTuner {
                spec: s.clone(),
                tuner,
            });
        }
        self.entries.extend(built);
        self.entries.sort_by_key(|e| e.spec.slot());
        Ok(())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.entries.iter().flat_map(|e| e.tuner.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.entries.iter_mut().flat_map(|e| e.tuner.params_mut()).collect()
    }
}

/// Per-slot RNG seed, independent of attach order.
pub fn slot_seed(base: u64, block: usize, op: AttachOp) -> u64 {
    let mut z = base ^ 0x5EED_7A11_u64.wrapping_add((block as u64) << 8 | op.index());
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_seeds_differ() {
        let a = slot_seed(1, 0, AttachOp::Mha);
        let b = slot_seed(1, 0, AttachOp::Ffn);
        let c = slot_seed(1, 1, AttachOp::Mha);
        let d = slot_seed(2, 0, AttachOp::Mha);
        assert!(a != b && a != c && a != d && b != c);
    }

    #[test]
    fn tuner_config_round_trips_through_toml() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Wrap {
            tuners: Vec<AttachSpec>,
        }
        let w = Wrap {
            tuners: vec![
                AttachSpec::new(0, AttachOp::Mha, TunerConfig::res_attn(4, 4)),
                AttachSpec::new(1, AttachOp::Block, TunerConfig::default_for(TunerKind::Prefix)),
            ],
        };
        let text = toml::to_string(&w).unwrap();
        assert_eq!(toml::from_str::<Wrap>(&text).unwrap(), w);
    }

    #[test]
    fn attach_rejects_duplicate_and_out_of_range_slots() {
        let dims = BackboneDims { dim: 8, heads: 2 };
        let mut set = TunerSet::default();
        let a = AttachSpec::new(0, AttachOp::Mha, TunerConfig::res_attn(2, 2));
        let dup = [a.clone(), a.clone()];
        assert!(matches!(set.attach(&dup, 2, dims, 0), Err(Error::SlotConflict { .. })));
        assert!(set.is_empty());
        set.attach(&[a.clone()], 2, dims, 0).unwrap();
        let again = AttachSpec::new(0, AttachOp::Mha, TunerConfig::default_for(TunerKind::Adapter));
        assert!(matches!(set.attach(&[again], 2, dims, 0), Err(Error::SlotConflict { .. })));
        let far = AttachSpec::new(2, AttachOp::Ffn, TunerConfig::res_attn(2, 2));
        assert!(matches!(set.attach(&[far], 2, dims, 0), Err(Error::Config(_))));
    }

    #[test]
    fn layout_matches_built_parameters() {
        let dims = BackboneDims { dim: 8, heads: 2 };
        let configs = [
            TunerConfig::ResAttn {
                rank: 2,
                heads: 3,
                qkv_bias: true,
                attn_drop: 0.0,
                proj_drop: 0.0,
            },
            TunerConfig::res_attn(4, 1),
            TunerConfig::Prefix { length: 3 },
            TunerConfig::Prompt { length: 2 },
            TunerConfig::Adapter { bottleneck: 5 },
        ];
        for tc in configs {
            let spec = AttachSpec::new(1, AttachOp::Ffn, tc);
            let built = Tuner::build(&spec, dims, 9).unwrap();
            let infos: Vec<ParamInfo> = built.params().into_iter().map(ParamInfo::from).collect();
            assert_eq!(infos, Tuner::layout(&spec, dims).unwrap());
        }
    }
}
