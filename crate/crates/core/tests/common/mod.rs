//! Naive-loop references and small fixtures shared by integration tests.
#![allow(dead_code)]

use rand::Rng;
use res_tuner_core::nn::{LinearLayer, MhaConfig, MultiHeadAttention, Parameter};
use res_tuner_core::tensor::Tensor;
use res_tuner_core::tuners::{PrefixTuner, PromptTuner, ResAttnTuner};
use res_tuner_core::BackboneConfig;

pub fn rand_tensor<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

pub fn toy_backbone(dim: usize, depth: usize, heads: usize) -> BackboneConfig {
    BackboneConfig {
        dim,
        depth,
        heads,
        patch: 4,
        image_size: 8,
        in_channels: 3,
        num_classes: 3,
        seed: 5,
        init_std: 0.5,
        qkv_bias: true,
    }
}

pub fn images<R: Rng>(b: usize, cfg: &BackboneConfig, rng: &mut R) -> Tensor {
    Tensor::from_fn([b, cfg.in_channels, cfg.image_size, cfg.image_size], |_| rng.random_range(0.0..1.0))
}

fn linear_row(x: &[f64], layer: &LinearLayer) -> Vec<f64> {
    let w = layer.weight.value();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|j| {
            let b = layer.bias.as_ref().map_or(0.0, |b| b.value().data()[j]);
            (0..din).map(|i| x[i] * w.get(&[i, j])).sum::<f64>() + b
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Per-head attention of `q[h][n]` over `k[h][l]`, `v[h][l]` → merged `[n][h·e]`.
fn attend(q: &[Vec<Vec<f64>>], k: &[Vec<Vec<f64>>], v: &[Vec<Vec<f64>>], scale: f64) -> Vec<Vec<f64>> {
    let heads = q.len();
    let n = q[0].len();
    let e = v[0][0].len();
    let mut out = vec![vec![0.0; heads * e]; n];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = k[h]
                .iter()
                .map(|kl| kl.iter().zip(&q[h][i]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let a = softmax(&logits);
            for (l, w) in a.iter().enumerate() {
                for c in 0..e {
                    out[i][h * e + c] += w * v[h][l][c];
                }
            }
        }
    }
    out
}

fn rows(x: &Tensor, b: usize) -> Vec<Vec<f64>> {
    let s = x.shape();
    (0..s[1]).map(|n| (0..s[2]).map(|d| x.get(&[b, n, d])).collect()).collect()
}

fn heads_of(q: &Tensor, b: usize) -> Vec<Vec<Vec<f64>>> {
    let s = q.shape();
    (0..s[1])
        .map(|h| (0..s[2]).map(|n| (0..s[3]).map(|e| q.get(&[b, h, n, e])).collect()).collect())
        .collect()
}

fn stack(out: Vec<Vec<Vec<f64>>>) -> Tensor {
    let (b, n, d) = (out.len(), out[0].len(), out[0][0].len());
    Tensor::new([b, n, d], out.into_iter().flatten().flatten().collect()).unwrap()
}

pub fn naive_res_attn(t: &ResAttnTuner, x: &Tensor) -> Tensor {
    let (r, h) = (t.cfg.rank, t.cfg.heads);
    let mut out = Vec::new();
    for b in 0..x.shape()[0] {
        let qkv: Vec<Vec<f64>> = rows(x, b).iter().map(|row| linear_row(row, &t.qkv)).collect();
        let part = |s: usize| -> Vec<Vec<Vec<f64>>> {
            (0..h)
                .map(|hh| qkv.iter().map(|row| row[s * h * r + hh * r..s * h * r + (hh + 1) * r].to_vec()).collect())
                .collect()
        };
        let merged = attend(&part(0), &part(1), &part(2), (r as f64).powf(-0.5));
        out.push(merged.iter().map(|m| linear_row(m, &t.o)).collect());
    }
    stack(out)
}

pub fn naive_prefix(t: &PrefixTuner, q: &Tensor) -> Tensor {
    let kv = |p: &Tensor| -> Vec<Vec<Vec<f64>>> {
        let s = p.shape();
        (0..s[0])
            .map(|h| (0..s[1]).map(|l| (0..s[2]).map(|e| p.get(&[h, l, e])).collect()).collect())
            .collect()
    };
    let (k, v) = (kv(t.key.value()), kv(t.value.value()));
    let scale = (t.cfg.head_dim() as f64).powf(-0.5);
    let out = (0..q.shape()[0])
        .map(|b| {
            attend(&heads_of(q, b), &k, &v, scale)
                .iter()
                .map(|m| linear_row(m, &t.o))
                .collect()
        })
        .collect();
    stack(out)
}

pub fn naive_prompt(t: &PromptTuner, q: &Tensor, mha: &MultiHeadAttention) -> Tensor {
    let dim = mha.cfg.dim;
    let heads = mha.cfg.heads;
    let e = dim / heads;
    let w = mha.qkv.weight.value();
    let p = t.prompt.value();
    let proj = |l: usize, col: usize| (0..dim).map(|i| p.get(&[l, i]) * w.get(&[i, col])).sum::<f64>();
    let len = p.shape()[0];
    let kv = |offset: usize| -> Vec<Vec<Vec<f64>>> {
        (0..heads)
            .map(|h| (0..len).map(|l| (0..e).map(|c| proj(l, offset + h * e + c)).collect()).collect())
            .collect()
    };
    let (k, v) = (kv(dim), kv(2 * dim));
    let wo = mha.proj.weight.value();
    let out = (0..q.shape()[0])
        .map(|b| {
            attend(&heads_of(q, b), &k, &v, (e as f64).powf(-0.5))
                .iter()
                .map(|m| (0..dim).map(|j| (0..dim).map(|i| m[i] * wo.get(&[i, j])).sum()).collect())
                .collect()
        })
        .collect();
    stack(out)
}

/// Frozen attention with random weights for prompt tests.
pub fn random_mha<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> MultiHeadAttention {
    let qkv = LinearLayer::new(
        Parameter::new("m.qkv.weight", rand_tensor(&[dim, 3 * dim], 0.5, rng), false),
        Some(Parameter::new("m.qkv.bias", rand_tensor(&[3 * dim], 0.5, rng), false)),
    )
    .unwrap();
    let proj = LinearLayer::new(
        Parameter::new("m.proj.weight", rand_tensor(&[dim, dim], 0.5, rng), false),
        Some(Parameter::new("m.proj.bias", rand_tensor(&[dim], 0.5, rng), false)),
    )
    .unwrap();
    MultiHeadAttention::new(MhaConfig::new(dim, heads), qkv, proj).unwrap()
}
