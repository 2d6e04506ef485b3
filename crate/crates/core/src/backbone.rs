//! Frozen ViT-style encoder with a trainable classification head.
//!
//! Images are cut into non-overlapping patches, linearly embedded, prefixed
//! with a class token and offset by fixed sinusoidal position embeddings.
//! Each block is pre-norm:
//!
//! ```text
//! n1 = norm1(x);  u = x + MHA(n1) + T_mha(n1)
//! n2 = norm2(u);  y = u + FFN(n2) + T_ffn(n2) + T_block(x)
//! ```
//!
//! where `T_*` are the optional tuners attached at that slot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::trunc_normal;
use crate::nn::{LayerNorm, LinearLayer, MhaConfig, Mlp, MultiHeadAttention, ParamInfo, Parameter};
use crate::tensor::{Tape, Tensor, Var};
use crate::tuners::{
    AttachOp, AttachSpec, BackboneDims, CountOptions, ParamCount, Tuner, TunerContext, TunerSet,
};

/// FFN hidden width as a multiple of the model width.
pub const MLP_RATIO: usize = 4;

fn default_init_std() -> f64 {
    0.02
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Std of the truncated-normal init of projection weights.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_true")]
    pub qkv_bias: bool,
}

impl BackboneConfig {
    /// ViT-B/16 at 224×224.
    pub fn vit_b16(num_classes: usize) -> Self {
        BackboneConfig {
            dim: 768,
            depth: 12,
            heads: 12,
            patch: 16,
            image_size: 224,
            in_channels: 3,
            num_classes,
            seed: 0,
            init_std: 0.02,
            qkv_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 {
            return fail("depth must be ≥ 1".into());
        }
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return fail(format!(
                "image_size {} must be divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be ≥ 1".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be ≥ 1".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch * self.patch
    }

    pub fn dims(&self) -> BackboneDims {
        BackboneDims {
            dim: self.dim,
            heads: self.heads,
        }
    }

    fn mha_config(&self) -> MhaConfig {
        MhaConfig {
            qkv_bias: self.qkv_bias,
            ..MhaConfig::new(self.dim, self.heads)
        }
    }
}

/// Backbone geometry plus tuner placement: everything needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub tuners: Vec<AttachSpec>,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.mlp.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.norm1.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.norm2.params_mut());
        p.extend(self.mlp.params_mut());
        p
    }
}

/// The frozen part of the model.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_embed: LinearLayer,
    /// `[1, dim]`
    pub cls_token: Parameter,
    /// Fixed `[tokens, dim]` sinusoidal table; not a parameter.
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Backbone {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.patch_embed.params();
        p.push(&self.cls_token);
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.norm.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.patch_embed.params_mut();
        p.push(&mut self.cls_token);
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.norm.params_mut());
        p
    }

    fn layout(cfg: &BackboneConfig) -> Vec<ParamInfo> {
        let d = cfg.dim;
        let h = MLP_RATIO * d;
        let mut v = vec![
            ParamInfo::frozen("patch_embed.weight", [cfg.patch_dim(), d]),
            ParamInfo::frozen("patch_embed.bias", [d]),
            ParamInfo::frozen("cls_token", [1, d]),
        ];
        for i in 0..cfg.depth {
            let p = format!("blocks.{i}");
            v.push(ParamInfo::frozen(format!("{p}.norm1.gamma"), [d]));
            v.push(ParamInfo::frozen(format!("{p}.norm1.beta"), [d]));
            v.push(ParamInfo::frozen(format!("{p}.attn.qkv.weight"), [d, 3 * d]));
            if cfg.qkv_bias {
                v.push(ParamInfo::frozen(format!("{p}.attn.qkv.bias"), [3 * d]));
            }
            v.push(ParamInfo::frozen(format!("{p}.attn.proj.weight"), [d, d]));
            v.push(ParamInfo::frozen(format!("{p}.attn.proj.bias"), [d]));
            v.push(ParamInfo::frozen(format!("{p}.norm2.gamma"), [d]));
            v.push(ParamInfo::frozen(format!("{p}.norm2.beta"), [d]));
            v.push(ParamInfo::frozen(format!("{p}.mlp.fc1.weight"), [d, h]));
            v.push(ParamInfo::frozen(format!("{p}.mlp.fc1.bias"), [h]));
            v.push(ParamInfo::frozen(format!("{p}.mlp.fc2.weight"), [h, d]));
            v.push(ParamInfo::frozen(format!("{p}.mlp.fc2.bias"), [d]));
        }
        v.push(ParamInfo::frozen("norm.gamma", [d]));
        v.push(ParamInfo::frozen("norm.beta", [d]));
        v
    }
}

/// Frozen backbone + attached tuners + classifier head.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub backbone: Backbone,
    pub tuners: TunerSet,
    pub head: LinearLayer,
}

fn frozen_linear<R: rand::Rng>(
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    std: f64,
    rng: &mut R,
) -> Result<LinearLayer> {
    LinearLayer::new(
        Parameter::new(format!("{name}.weight"), trunc_normal(&[d_in, d_out], std, rng), false),
        bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros([d_out]), false)),
    )
}

fn head_layer(cfg: &BackboneConfig, seed: u64) -> Result<LinearLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4EAD);
    let mut head = frozen_linear("head", cfg.dim, cfg.num_classes, true, cfg.init_std, &mut rng)?;
    head.set_trainable(true);
    Ok(head)
}

/// Fixed sinusoidal embeddings: even columns `sin(pos/10000^(2i/d))`, odd columns `cos`.
pub fn sinusoidal_positions(tokens: usize, dim: usize) -> Tensor {
    Tensor::from_fn([tokens, dim], |flat| {
        let (pos, j) = (flat / dim, flat % dim);
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Rearrange `[B, C, H, W]` into `[B, patches, C·p·p]`; patches in row-major
/// grid order, features in `(c, row, col)` order.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(Error::shape("patchify", s, &[patch, patch]));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for r in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + r) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new([b, gh * gw, pd], out)
}

/// Build a model with deterministic seeded "pretrained" weights. Every
/// backbone parameter is frozen; the head is trainable.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let std = cfg.init_std;
    let patch_embed = frozen_linear("patch_embed", cfg.patch_dim(), d, true, std, &mut rng)?;
    let cls_token = Parameter::new("cls_token", trunc_normal(&[1, d], std, &mut rng), false);
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        let qkv = frozen_linear(&format!("{p}.attn.qkv"), d, 3 * d, cfg.qkv_bias, std, &mut rng)?;
        let proj = frozen_linear(&format!("{p}.attn.proj"), d, d, true, std, &mut rng)?;
        let fc1 = frozen_linear(&format!("{p}.mlp.fc1"), d, MLP_RATIO * d, true, std, &mut rng)?;
        let fc2 = frozen_linear(&format!("{p}.mlp.fc2"), MLP_RATIO * d, d, true, std, &mut rng)?;
        blocks.push(Block {
            norm1: LayerNorm::new(&format!("{p}.norm1"), d, false),
            attn: MultiHeadAttention::new(cfg.mha_config(), qkv, proj)?,
            norm2: LayerNorm::new(&format!("{p}.norm2"), d, false),
            mlp: Mlp { fc1, fc2 },
        });
    }
    let backbone = Backbone {
        cfg: cfg.clone(),
        patch_embed,
        cls_token,
        pos_embed: sinusoidal_positions(cfg.tokens(), d),
        blocks,
        norm: LayerNorm::new("norm", d, false),
    };
    Ok(ModelGraph {
        head: head_layer(cfg, cfg.seed)?,
        backbone,
        tuners: TunerSet::default(),
    })
}

/// One pre-norm block with whatever tuners occupy its slots.
pub fn block_forward(tape: &mut Tape, block: &Block, index: usize, tuners: &TunerSet, x: Var) -> Result<Var> {
    let n1 = block.norm1.forward(tape, x)?;
    let attn = block.attn.forward(tape, n1)?;
    let mut u = tape.add(x, attn.out)?;
    if let Some(t) = tuners.get(index, AttachOp::Mha) {
        let ctx = TunerContext {
            mha: &block.attn,
            query: Some(attn.query),
        };
        let delta = t.forward(tape, n1, &ctx)?;
        u = add_checked(tape, u, delta)?;
    }
    let n2 = block.norm2.forward(tape, u)?;
    let f = block.mlp.forward(tape, n2)?;
    let mut y = tape.add(u, f)?;
    let ctx = TunerContext {
        mha: &block.attn,
        query: None,
    };
    if let Some(t) = tuners.get(index, AttachOp::Ffn) {
        let delta = t.forward(tape, n2, &ctx)?;
        y = add_checked(tape, y, delta)?;
    }
    if let Some(t) = tuners.get(index, AttachOp::Block) {
        let delta = t.forward(tape, x, &ctx)?;
        y = add_checked(tape, y, delta)?;
    }
    Ok(y)
}

fn add_checked(tape: &mut Tape, stream: Var, delta: Var) -> Result<Var> {
    if tape.shape(stream) != tape.shape(delta) {
        return Err(Error::shape("tuner residual", tape.shape(stream), tape.shape(delta)));
    }
    tape.add(stream, delta)
}

impl ModelGraph {
    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.cfg
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.cfg.clone(),
            tuners: self.tuners.specs(),
        }
    }

    /// Build the backbone and attach the configured tuners.
    pub fn from_config(cfg: &ModelConfig) -> Result<ModelGraph> {
        let mut m = build_backbone(&cfg.backbone)?;
        m.attach(&cfg.tuners)?;
        Ok(m)
    }

    pub fn attach(&mut self, specs: &[AttachSpec]) -> Result<()> {
        let cfg = &self.backbone.cfg;
        self.tuners.attach(specs, cfg.depth, cfg.dims(), cfg.seed)
    }

    /// Class-token features after the final norm, `[B, dim]`.
    pub fn features(&self, tape: &mut Tape, images: &Tensor) -> Result<Var> {
        let cfg = &self.backbone.cfg;
        let s = images.shape();
        let expect = [cfg.in_channels, cfg.image_size, cfg.image_size];
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::shape("forward", s, &expect));
        }
        let b = s[0];
        let patches = tape.constant(patchify(images, cfg.patch)?);
        let tokens = self.backbone.patch_embed.forward(tape, patches)?;
        let cls = tape.param(&self.backbone.cls_token);
        let cls = tape.expand_leading(cls, b)?;
        let x = tape.concat(&[cls, tokens], 1)?;
        let pos = tape.constant(self.backbone.pos_embed.clone());
        let mut x = tape.add(x, pos)?;
        for (i, block) in self.backbone.blocks.iter().enumerate() {
            x = block_forward(tape, block, i, &self.tuners, x)?;
        }
        let x = self.backbone.norm.forward(tape, x)?;
        let cls = tape.narrow(x, 1, 0, 1)?;
        tape.reshape(cls, &[b, cfg.dim])
    }

    /// Logits `[B, num_classes]`.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor) -> Result<Var> {
        let f = self.features(tape, images)?;
        self.head.forward(tape, f)
    }

    /// Eval-mode logits without keeping the tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::eval();
        let y = self.forward(&mut tape, images)?;
        Ok(tape.value(y).clone())
    }

    /// All parameters: backbone, then tuners by slot, then head.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.backbone.params();
        p.extend(self.tuners.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.backbone.params_mut();
        p.extend(self.tuners.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params().into_iter().find(|p| p.name() == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params_mut().into_iter().find(|p| p.name() == name)
    }

    /// Tuner and head parameters (plus any explicitly unfrozen backbone
    /// weights), ordered by name.
    pub fn trainable_parameters(&self) -> Vec<&Parameter> {
        let mut p: Vec<&Parameter> = self.params().into_iter().filter(|p| p.trainable()).collect();
        p.sort_by(|a, b| a.name().cmp(b.name()));
        p
    }

    /// Freeze every backbone parameter. Tuners and head stay trainable.
    pub fn freeze_all(&mut self) {
        for p in self.backbone.params_mut() {
            p.set_trainable(false);
        }
    }

    /// Make the backbone trainable, e.g. to pretrain it on a source task.
    pub fn unfreeze_backbone(&mut self) {
        for p in self.backbone.params_mut() {
            p.set_trainable(true);
        }
    }

    /// Fresh classifier head for a new task.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be ≥ 1".into()));
        }
        self.backbone.cfg.num_classes = num_classes;
        self.head = head_layer(&self.backbone.cfg, seed)?;
        Ok(())
    }

    pub fn count_trainable_params(&self, opts: CountOptions) -> ParamCount {
        let infos: Vec<ParamInfo> = self.params().into_iter().map(ParamInfo::from).collect();
        ParamCount::from_params(&infos, opts)
    }

    /// Parameter layout of `ModelGraph::from_config(cfg)` without building it.
    pub fn layout(cfg: &ModelConfig) -> Result<Vec<ParamInfo>> {
        let b = &cfg.backbone;
        b.validate()?;
        let mut probe = TunerSet::default();
        probe_slots(&mut probe, &cfg.tuners, b.depth)?;
        let mut specs = cfg.tuners.clone();
        specs.sort_by_key(|s| s.slot());
        let mut v = Backbone::layout(b);
        for s in &specs {
            v.extend(Tuner::layout(s, b.dims())?);
        }
        v.push(ParamInfo::new("head.weight", [b.dim, b.num_classes]));
        v.push(ParamInfo::new("head.bias", [b.num_classes]));
        Ok(v)
    }
}

/// Slot validation without building tuners.
fn probe_slots(_set: &mut TunerSet, specs: &[AttachSpec], depth: usize) -> Result<()> {
    let mut seen = Vec::new();
    for s in specs {
        if s.block >= depth {
            return Err(Error::Config(format!(
                "tuner at block {} but the backbone has {depth} blocks",
                s.block
            )));
        }
        if seen.contains(&s.slot()) {
            return Err(Error::SlotConflict {
                block: s.block,
                op: s.op.to_string(),
            });
        }
        seen.push(s.slot());
    }
    Ok(())
}

/// Consume a model and return it with `specs` attached.
pub fn attach(mut model: ModelGraph, specs: &[AttachSpec]) -> Result<ModelGraph> {
    model.attach(specs)?;
    Ok(model)
}
