use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use res_tuner_core::config::RunConfig;
use res_tuner_core::data::{load_binary_dataset, load_checkpoint, save_binary_dataset, save_checkpoint};
use res_tuner_core::tensor::OpKind;
use res_tuner_core::training::{self, evaluate, GradCheckOptions};
use res_tuner_core::{Error, ModelGraph};
use serde_json::json;

use crate::{CmdResult, Failure};

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult {
    let mut cfg = RunConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.output.clone());
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let (train_set, test_set) = cfg.data.load()?;
    let mut model = ModelGraph::from_config(&cfg.model_config()?)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);
    let eval = (!test_set.is_empty()).then_some(&test_set);
    training::train(&mut model, &train_set, eval, &cfg.train, &mut |rec| {
        let line = rec.to_json_line();
        println!("{line}");
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))
    })?;
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;

    save_checkpoint(&model, &out.join("model.rtck"))?;
    save_binary_dataset(&train_set, &out.join("train.rtds"))?;
    if !test_set.is_empty() {
        save_binary_dataset(&test_set, &out.join("test.rtds"))?;
    }
    let resolved = out.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()).map_err(|e| io_err(&resolved, e))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, json: bool) -> CmdResult {
    let model = load_checkpoint(checkpoint)?;
    let data = load_binary_dataset(data)?;
    let m = evaluate(&model, &data)?;
    if json {
        println!("{}", json!({ "accuracy": m.accuracy, "loss": m.loss, "count": m.count }));
    } else {
        println!("accuracy {:.6}  loss {:.6}  samples {}", m.accuracy, m.loss, m.count);
    }
    Ok(())
}

pub fn grad_check(config: &Path, eps: f64, tol: f64, batch: usize, json: bool, fault: Option<&str>) -> CmdResult {
    let cfg = RunConfig::from_path(config)?;
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| Failure::Usage(format!("unknown op `{name}`")))?),
    };
    if !(eps > 0.0) || !(tol > 0.0) || batch == 0 {
        return Err(Failure::Usage("--eps, --tol and --batch must be positive".into()));
    }
    let model = ModelGraph::from_config(&cfg.model_config()?)?;
    let (train_set, _) = cfg.data.load()?;
    let n = batch.min(train_set.len());
    let (images, labels) = train_set.batch(&(0..n).collect::<Vec<_>>())?;
    let opts = GradCheckOptions {
        eps,
        tol,
        seed: cfg.train.seed,
        fault,
        ..GradCheckOptions::default()
    };
    let report = training::grad_check(&model, &images, &labels, &opts)?;
    if json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        println!("grad-check  eps {eps:e}  tol {tol:e}  loss {:.6}", report.loss);
        for e in &report.entries {
            let mark = if e.pass { "ok  " } else { "FAIL" };
            println!("{mark} {:<44} {:>6}  rel err {:.3e}", e.name, e.numel, e.rel_error);
        }
        let failed = report.entries.iter().filter(|e| !e.pass).count();
        println!("{} tensors, {failed} failed", report.entries.len());
    }
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch above tol {tol:e}")))
    }
}
