//! Generates a synthetic corpus, runs the full pipeline on raw features and
//! on multilingual bottleneck features, and compares the two runs.
//!
//!     cargo run --release --example run_pipeline -- [work_dir]

use std::env;
use std::path::PathBuf;

use qbe::corpus::synth_corpus;
use qbe::models::Architecture;
use qbe::pipeline::{compare_runs, run_files, run_pipeline, ExperimentConfig};

fn main() -> qbe::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let work = env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| env::temp_dir().join("qbe-pipeline"));
    let base = ExperimentConfig {
        corpus: work.join("corpus"),
        ..ExperimentConfig::default()
    };
    synth_corpus(&base.synth)?.write(&base.corpus)?;

    let mut raw = base.clone();
    raw.out = work.join("raw");
    raw.model.architecture = None;
    let mut ffn = base.clone();
    ffn.out = work.join("ffn");
    ffn.model.architecture = Some(Architecture::Ffn);

    for cfg in [&raw, &ffn] {
        let report = run_pipeline(cfg)?;
        println!("== {}", cfg.out.display());
        print!("{}", report.to_text(&cfg.eval));
        print!(
            "{}",
            std::fs::read_to_string(cfg.out.join(run_files::RUN_LOG))?
        );
    }
    println!("== per-query Cnxe, raw vs ffn");
    print!("{}", compare_runs(&raw.out, &ffn.out)?.summary());
    Ok(())
}
