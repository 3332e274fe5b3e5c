use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qbe::corpus::synth_corpus;
use qbe::eval::{self, emit_det_file, TrialLabels};
use qbe::frontend::{add_deltas, compute_mfcc, read_wav, write_archive, MfccConfig};
use qbe::pipeline::{self, compare_runs, run_files, ExperimentConfig, RunLog};
use qbe::search::{Normalization, ScoreTable};
use qbe::{Error, Result};

#[derive(Parser)]
#[command(
    name = "qbe",
    version,
    about = "Query-by-example spoken term detection"
)]
struct Cli {
    /// INI experiment config; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Search threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into the corpus directory.
    Synth,
    /// Deltas and normalisation for the corpus, or MFCCs for a WAV list.
    Featurize {
        /// Lines of `utterance_id<TAB>path.wav`; writes one archive to --output.
        #[arg(long, requires = "output")]
        wav_list: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the configured model (or copy in the configured checkpoint).
    Train,
    /// Bottleneck features for documents and queries.
    Extract,
    /// Speech activity detection on the extracted features.
    Sad,
    /// DTW scores for every query-document pair.
    Search,
    /// Per-query z-normalisation of a score file.
    Znorm {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cnxe_min, MTWV, per-query Cnxe and the DET file for a score file.
    Eval {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// DET points only.
    Det {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// One-tailed paired t-test on the per-query Cnxe of two runs.
    Compare { run_a: PathBuf, run_b: PathBuf },
    /// Every stage from featurize to eval.
    Pipeline,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(c) = &cli.corpus {
        cfg.corpus = c.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn featurize_wavs(list: &Path, output: &Path, delta_window: usize) -> Result<()> {
    let text = std::fs::read_to_string(list)?;
    let mut mats = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (id, path) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("wav list line `{line}`")))?;
        let (pcm, rate) = read_wav(Path::new(path))?;
        let mfcc = compute_mfcc(id, &pcm, rate, &MfccConfig::default())?;
        mats.push(add_deltas(&mfcc, delta_window)?);
    }
    write_archive(&mats, output)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let out = |name: &str| cfg.out.join(name);
    match &cli.command {
        Command::Synth => {
            synth_corpus(&cfg.synth)?.write(&cfg.corpus)?;
            println!("corpus written to {}", cfg.corpus.display());
        }
        Command::Featurize { wav_list, output } => match (wav_list, output) {
            (Some(list), Some(output)) => featurize_wavs(list, output, cfg.delta_window)?,
            _ => pipeline::featurize(&cfg)?,
        },
        Command::Train => {
            std::fs::create_dir_all(&cfg.out)?;
            if pipeline::train(&cfg)?.is_none() {
                println!("architecture = none: nothing to train");
            }
        }
        Command::Extract => {
            let mut model = pipeline::load_run_model(&cfg)?;
            pipeline::extract(&cfg, model.as_mut())?;
        }
        Command::Sad => {
            let (d, q) = pipeline::sad(&cfg)?;
            println!("admitted {d} documents, {q} queries");
        }
        Command::Search => {
            let mut log = RunLog::default();
            let t = pipeline::search(&cfg, &mut log)?;
            print!("{}", log.to_text());
            println!("{} scores written", t.len());
        }
        Command::Znorm { scores, output } => {
            let input = scores.clone().unwrap_or_else(|| out(run_files::RAW_SCORES));
            let output = output
                .clone()
                .unwrap_or_else(|| out(run_files::ZNORM_SCORES));
            pipeline::znorm_scores(&input, &output)?;
        }
        Command::Eval { scores, labels } => {
            let scores = scores
                .clone()
                .unwrap_or_else(|| out(run_files::ZNORM_SCORES));
            let labels = labels
                .clone()
                .unwrap_or_else(|| cfg.corpus.join(qbe::corpus::layout::TRIALS));
            let table = ScoreTable::read(&scores, Normalization::ZNormed)?;
            std::fs::create_dir_all(&cfg.out)?;
            let report =
                pipeline::evaluate_scores(&table, &TrialLabels::read(&labels)?, &cfg, &cfg.out)?;
            print!("{}", report.to_text(&cfg.eval));
        }
        Command::Det {
            scores,
            labels,
            output,
        } => {
            let scores = scores
                .clone()
                .unwrap_or_else(|| out(run_files::ZNORM_SCORES));
            let labels = labels
                .clone()
                .unwrap_or_else(|| cfg.corpus.join(qbe::corpus::layout::TRIALS));
            let points = eval::det(
                &ScoreTable::read(&scores, Normalization::ZNormed)?,
                &TrialLabels::read(&labels)?,
            )?;
            emit_det_file(
                &points,
                &output.clone().unwrap_or_else(|| out(run_files::DET)),
            )?;
        }
        Command::Compare { run_a, run_b } => {
            print!("{}", compare_runs(run_a, run_b)?.summary());
        }
        Command::Pipeline => {
            let report = pipeline::run_pipeline(&cfg)?;
            print!("{}", report.to_text(&cfg.eval));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
