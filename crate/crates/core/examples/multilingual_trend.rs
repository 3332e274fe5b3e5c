//! Raw features vs. monolingual vs. multilingual bottleneck features on the
//! synthetic corpus, with paired t-tests between the systems.
//!
//!     cargo run --release --example multilingual_trend -- [seeds] [--resnet] [section.key=value ...]

use std::env;

use qbe::pipeline::ExperimentConfig;
use qbe::trend::{trend_experiment, TrendResult};

fn main() -> qbe::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(5);
    let resnet = args.iter().any(|a| a == "--resnet");
    let overrides: Vec<&String> = args.iter().filter(|a| a.contains('=')).collect();
    let cfg = ExperimentConfig::default().with_overrides(&overrides)?;
    let work = tempfile_dir()?;
    let seeds: Vec<u64> = (1..=seeds).collect();
    let r = trend_experiment(&cfg, &seeds, resnet, &work)?;

    print!("{}", r.table());
    let best = r.best_monolingual();
    for (worse, better) in [(&r.baseline, best), (best, &r.multilingual)] {
        match TrendResult::gap(worse, better) {
            Ok((t, p)) => println!("{} > {}: t = {t:.3}, p = {p:.4}", worse.name, better.name),
            Err(e) => println!("{} vs {}: {e}", worse.name, better.name),
        }
    }
    println!("{:.0} s", r.seconds);
    std::fs::remove_dir_all(&work)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = env::temp_dir().join(format!("qbe-trend-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
