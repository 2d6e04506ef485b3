use std::path::Path;

use res_tuner_core::backbone::ModelConfig;
use res_tuner_core::config::RunConfig;
use res_tuner_core::tuners::{analytic_tuner_params, AttachOp, CountOptions, ParamCount, TunerConfig};
use res_tuner_core::ModelGraph;
use serde_json::json;

use crate::{CmdResult, Failure};

/// Published Res-Attn totals (millions) for ViT-B/16 with one tuner beside
/// every block's MHA, keyed by (rank, heads).
const REFERENCE: [((usize, usize), f64); 4] = [((8, 8), 2.35), ((8, 4), 1.22), ((4, 4), 0.66), ((2, 4), 0.32)];

pub struct Reference {
    pub rank: usize,
    pub heads: usize,
    pub millions: f64,
}

/// The reference row matching `cfg`, if it is a ViT-B/16 with a uniform
/// Res-Attn placement at every MHA.
pub fn reference_for(cfg: &ModelConfig) -> Option<Reference> {
    let b = &cfg.backbone;
    if (b.dim, b.depth, b.heads, b.patch) != (768, 12, 12, 16) || cfg.tuners.len() != b.depth {
        return None;
    }
    let first = cfg.tuners.first()?;
    let (rank, heads) = match first.tuner {
        TunerConfig::ResAttn {
            rank,
            heads,
            qkv_bias: false,
            ..
        } => (rank, heads),
        _ => return None,
    };
    let uniform = cfg.tuners.iter().all(|s| s.op == AttachOp::Mha && s.tuner == first.tuner);
    let mut blocks: Vec<usize> = cfg.tuners.iter().map(|s| s.block).collect();
    blocks.sort();
    if !uniform || blocks != (0..b.depth).collect::<Vec<_>>() {
        return None;
    }
    REFERENCE
        .iter()
        .find(|(rh, _)| *rh == (rank, heads))
        .map(|&(_, millions)| Reference { rank, heads, millions })
}

fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn count_params(config: &Path, include_head: bool, include_bias: bool, as_json: bool) -> CmdResult {
    let cfg = RunConfig::from_path(config)?;
    let mc = cfg.model_config()?;
    let layout = ModelGraph::layout(&mc)?;
    let opts = CountOptions {
        include_head,
        include_output_bias: include_bias,
    };
    let count = ParamCount::from_params(&layout, opts);
    let b = &mc.backbone;
    let mut analytic: usize = mc
        .tuners
        .iter()
        .map(|s| analytic_tuner_params(&s.tuner, b.dims(), include_bias))
        .sum();
    if include_head {
        analytic += b.dim * b.num_classes + b.num_classes;
    }
    let agrees = analytic == count.total;
    let reference = reference_for(&mc).map(|r| {
        let target = r.millions * 1e6;
        (r, (count.total as f64 - target).abs() / target)
    });

    if as_json {
        let reference = reference.as_ref().map(|(r, dev)| {
            json!({ "rank": r.rank, "heads": r.heads, "millions": r.millions, "deviation": dev })
        });
        println!(
            "{}",
            json!({
                "components": count.components,
                "total": count.total,
                "analytic": analytic,
                "agrees": agrees,
                "include_head": include_head,
                "include_bias": include_bias,
                "reference": reference,
            })
        );
    } else {
        println!("{:<20} {:>14}", "component", "params");
        for c in &count.components {
            println!("{:<20} {:>14}", c.component, group(c.count));
        }
        println!("{:<20} {:>14}", "total", group(count.total));
        let verdict = if agrees { "agrees" } else { "MISMATCH" };
        println!("{:<20} {:>14}  ({verdict})", "closed form", group(analytic));
        if let Some((r, dev)) = &reference {
            println!(
                "reference: {:.2}M for Res-Attn {}×{}, deviation {:.1}%",
                r.millions,
                r.rank,
                r.heads,
                dev * 100.0
            );
        }
    }
    if agrees {
        Ok(())
    } else {
        Err(Failure::Check(format!("flag sum {} ≠ closed form {analytic}", count.total)))
    }
}
