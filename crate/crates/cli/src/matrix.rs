use std::path::Path;

use res_tuner_core::config::RunConfig;
use res_tuner_core::experiments::{run_matrix, Grid};

use crate::{CmdResult, Failure};

/// `RES_TUNER_THREADS` caps the worker threads; 0 or unset means one per core.
fn thread_cap() -> Result<usize, Failure> {
    match std::env::var("RES_TUNER_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("RES_TUNER_THREADS={v} is not a thread count"))),
    }
}

fn print_grid(title: &str, g: &Grid) {
    println!("{title}");
    print!("{:<10}", "");
    for c in &g.cols {
        print!(" {c:>9}");
    }
    println!();
    for (r, row) in g.rows.iter().zip(&g.cells) {
        print!("{r:<10}");
        for cell in row {
            print!(" {:>9.3}", cell.train_accuracy);
        }
        println!();
    }
}

pub fn matrix(config: &Path, json: bool) -> CmdResult {
    let cfg = RunConfig::from_path(config)?;
    let report = run_matrix(&cfg, thread_cap()?)?;
    if json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        print_grid("single: train accuracy, tuner kind × attach op", &report.single);
        println!();
        print_grid("dual: train accuracy, MHA tuner × FFN tuner", &report.dual);
    }
    let broken: Vec<String> = report
        .cells()
        .filter(|c| !c.zero_init || !c.frozen_intact)
        .map(|c| format!("{}/{}", c.row, c.col))
        .collect();
    if broken.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "zero-init or frozen-weight check failed in {}",
            broken.join(", ")
        )))
    }
}
