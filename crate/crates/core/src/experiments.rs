//! Attach-matrix grids and the frozen-backbone transfer protocol.

use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{build_backbone, ModelGraph};
use crate::config::RunConfig;
use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::training::{evaluate, train, verify_frozen, TrainConfig};
use crate::tuners::{AttachOp, AttachSpec, TunerConfig, TunerKind};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixCell {
    pub row: String,
    pub col: String,
    /// Fresh tuners left the eval-mode logits bit-identical.
    pub zero_init: bool,
    /// Frozen parameters bit-identical after training.
    pub frozen_intact: bool,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<MatrixCell>>,
}

impl Grid {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn cells(&self) -> impl Iterator<Item = &MatrixCell> {
        self.cells.iter().flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixReport {
    /// Tuner kind × attach op.
    pub single: Grid,
    /// Tuner kind at MHA × tuner kind at FFN.
    pub dual: Grid,
}

impl MatrixReport {
    pub fn cells(&self) -> impl Iterator<Item = &MatrixCell> {
        self.single.cells().chain(self.dual.cells())
    }
}

/// Tuner settings for `kind`: the first `[[tuners]]` entry of that kind, or
/// the defaults.
fn tuner_for(cfg: &RunConfig, kind: TunerKind) -> Result<TunerConfig> {
    match cfg.tuners.iter().position(|e| e.kind == kind) {
        Some(i) => cfg.tuners[i].tuner_config(i),
        None => Ok(TunerConfig::default_for(kind)),
    }
}

struct CellPlan {
    row: String,
    col: String,
    specs: Vec<AttachSpec>,
}

fn run_cell(cfg: &RunConfig, plan: &CellPlan, train_set: &Dataset, test_set: &Dataset) -> Result<MatrixCell> {
    let base = build_backbone(&cfg.backbone)?;
    let mut model = base.clone();
    model.attach(&plan.specs)?;
    let probe_len = train_set.len().min(8);
    let (probe, _) = train_set.batch(&(0..probe_len).collect::<Vec<_>>())?;
    let zero_init = base.logits(&probe)?.bit_eq(&model.logits(&probe)?);
    let snapshot: Vec<_> = model
        .params()
        .into_iter()
        .filter(|p| !p.trainable())
        .map(|p| (p.name().to_string(), p.value().clone()))
        .collect();
    train(&mut model, train_set, None, &cfg.train, &mut |_| Ok(()))?;
    let frozen_intact = verify_frozen(&model, &snapshot).is_ok();
    let test_accuracy = if test_set.is_empty() {
        None
    } else {
        Some(evaluate(&model, test_set)?.accuracy)
    };
    Ok(MatrixCell {
        row: plan.row.clone(),
        col: plan.col.clone(),
        zero_init,
        frozen_intact,
        train_accuracy: evaluate(&model, train_set)?.accuracy,
        test_accuracy,
    })
}

/// Train one model per grid cell, tuners attached uniformly to every block.
/// Cells run on up to `threads` threads; results are ordered by position.
pub fn run_matrix(cfg: &RunConfig, threads: usize) -> Result<MatrixReport> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.data.load()?;
    let depth = cfg.backbone.depth;
    let kinds = TunerKind::ALL;
    let mut plans = Vec::new();
    for kind in kinds {
        let tc = tuner_for(cfg, kind)?;
        for op in AttachOp::ALL {
            plans.push(CellPlan {
                row: kind.label().into(),
                col: op.as_str().into(),
                specs: AttachSpec::every_block(depth, op, tc.clone()),
            });
        }
    }
    for mha in kinds {
        for ffn in kinds {
            let mut specs = AttachSpec::every_block(depth, AttachOp::Mha, tuner_for(cfg, mha)?);
            specs.extend(AttachSpec::every_block(depth, AttachOp::Ffn, tuner_for(cfg, ffn)?));
            plans.push(CellPlan {
                row: mha.label().into(),
                col: ffn.label().into(),
                specs,
            });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("matrix threads: {e}")))?;
    let cells: Vec<MatrixCell> = pool.install(|| {
        plans
            .par_iter()
            .map(|p| run_cell(cfg, p, &train_set, &test_set))
            .collect::<Result<_>>()
    })?;
    let labels: Vec<String> = kinds.iter().map(|k| k.label().to_string()).collect();
    let ops: Vec<String> = AttachOp::ALL.iter().map(|o| o.as_str().to_string()).collect();
    let (single, dual) = cells.split_at(kinds.len() * ops.len());
    Ok(MatrixReport {
        single: Grid {
            rows: labels.clone(),
            cols: ops.clone(),
            cells: single.chunks(ops.len()).map(|c| c.to_vec()).collect(),
        },
        dual: Grid {
            rows: labels.clone(),
            cols: labels,
            cells: dual.chunks(kinds.len()).map(|c| c.to_vec()).collect(),
        },
    })
}

/// Pretrain the whole network on a source task, freeze it, then compare a
/// head-only probe with a tuned model on a target task.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub run: RunConfig,
    pub source: DatasetSpec,
    pub target: DatasetSpec,
    pub pretrain: TrainConfig,
    pub tune: TrainConfig,
    pub tuners: Vec<AttachSpec>,
    pub head_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferReport {
    pub source_test_accuracy: f64,
    pub probe_test_accuracy: f64,
    pub tuned_test_accuracy: f64,
    pub probe_train_accuracy: f64,
    pub tuned_train_accuracy: f64,
}

pub fn run_transfer(cfg: &TransferConfig) -> Result<TransferReport> {
    let (src_train, src_test) = cfg.source.load()?;
    let (tgt_train, tgt_test) = cfg.target.load()?;
    let mut model = build_backbone(&cfg.run.backbone)?;
    model.unfreeze_backbone();
    train(&mut model, &src_train, None, &cfg.pretrain, &mut |_| Ok(()))?;
    let source_test_accuracy = evaluate(&model, &src_test)?.accuracy;
    model.freeze_all();
    let fit = |specs: &[AttachSpec]| -> Result<(f64, f64)> {
        let mut m: ModelGraph = model.clone();
        m.reset_head(cfg.target.num_classes, cfg.head_seed)?;
        m.attach(specs)?;
        train(&mut m, &tgt_train, None, &cfg.tune, &mut |_| Ok(()))?;
        Ok((evaluate(&m, &tgt_train)?.accuracy, evaluate(&m, &tgt_test)?.accuracy))
    };
    let (probe_train_accuracy, probe_test_accuracy) = fit(&[])?;
    let (tuned_train_accuracy, tuned_test_accuracy) = fit(&cfg.tuners)?;
    Ok(TransferReport {
        source_test_accuracy,
        probe_test_accuracy,
        tuned_test_accuracy,
        probe_train_accuracy,
        tuned_train_accuracy,
    })
}
