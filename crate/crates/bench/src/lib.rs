//! Fixtures shared by the benchmarks.

use res_tuner_core::tensor::Tensor;
use res_tuner_core::tuners::{AttachOp, AttachSpec, TunerConfig};
use res_tuner_core::{build_backbone, BackboneConfig, ModelGraph};

/// Deterministic `[b, n, dim]` activations in `[-1, 1)`.
pub fn activations(b: usize, n: usize, dim: usize) -> Tensor {
    Tensor::from_fn([b, n, dim], |i| ((i * 7919 % 2000) as f64) / 1000.0 - 1.0)
}

pub fn toy_backbone() -> BackboneConfig {
    BackboneConfig {
        dim: 64,
        depth: 2,
        heads: 4,
        patch: 4,
        image_size: 16,
        in_channels: 3,
        num_classes: 10,
        seed: 0,
        init_std: 0.02,
        qkv_bias: true,
    }
}

/// Toy model with a Res-Attn tuner beside every MHA.
pub fn toy_model(rank: usize, heads: usize) -> ModelGraph {
    let cfg = toy_backbone();
    let mut m = build_backbone(&cfg).expect("valid toy config");
    m.attach(&AttachSpec::every_block(cfg.depth, AttachOp::Mha, TunerConfig::res_attn(rank, heads)))
        .expect("free slots");
    m
}
