//! Raw features vs. monolingual vs. multilingual bottleneck features over
//! several corpus seeds, with paired significance tests on per-query Cnxe.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;

use crate::corpus::{language_name, synth_corpus};
use crate::error::{Error, Result};
use crate::eval::paired_ttest_one_tailed;
use crate::models::Architecture;
use crate::pipeline::{run_pipeline, ExperimentConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SystemResult {
    pub name: String,
    /// One Cnxe_min per seed.
    pub cnxe_min: Vec<f64>,
    pub mtwv: Vec<f64>,
    /// Per-query Cnxe concatenated over seeds, in a fixed order.
    pub per_query: Vec<f64>,
}

impl SystemResult {
    pub fn mean_cnxe(&self) -> f64 {
        self.cnxe_min.iter().sum::<f64>() / self.cnxe_min.len() as f64
    }

    pub fn mean_mtwv(&self) -> f64 {
        self.mtwv.iter().sum::<f64>() / self.mtwv.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrendResult {
    pub baseline: SystemResult,
    pub monolingual: Vec<SystemResult>,
    pub multilingual: SystemResult,
    pub resnet: Option<SystemResult>,
    pub seconds: f64,
}

impl TrendResult {
    /// The monolingual system with the lowest mean Cnxe_min.
    pub fn best_monolingual(&self) -> &SystemResult {
        self.monolingual
            .iter()
            .min_by(|a, b| a.mean_cnxe().total_cmp(&b.mean_cnxe()))
            .expect("at least one language")
    }

    /// `(t, p)` for "`worse` has higher per-query Cnxe than `better`".
    pub fn gap(worse: &SystemResult, better: &SystemResult) -> Result<(f64, f64)> {
        paired_ttest_one_tailed(&worse.per_query, &better.per_query)
    }

    pub fn table(&self) -> String {
        let mut rows = vec![&self.baseline];
        rows.extend(self.monolingual.iter());
        rows.push(&self.multilingual);
        rows.extend(self.resnet.iter());
        let mut out = format!("{:<24}{:>12}{:>10}\n", "system", "cnxe_min", "mtwv");
        for r in rows {
            out.push_str(&format!(
                "{:<24}{:>12.4}{:>10.4}\n",
                r.name,
                r.mean_cnxe(),
                r.mean_mtwv()
            ));
        }
        out
    }
}

fn system(name: &str) -> SystemResult {
    SystemResult {
        name: name.to_string(),
        cnxe_min: Vec::new(),
        mtwv: Vec::new(),
        per_query: Vec::new(),
    }
}

/// Runs every system on one corpus per seed under `work`. The corpus and
/// model seeds both follow the run seed.
pub fn trend_experiment(
    base: &ExperimentConfig,
    seeds: &[u64],
    with_resnet: bool,
    work: &Path,
) -> Result<TrendResult> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    let t0 = Instant::now();
    let languages: Vec<String> = (0..base.synth.languages).map(language_name).collect();
    let mut baseline = system("raw features");
    let mut mono: Vec<SystemResult> = languages
        .iter()
        .map(|l| system(&format!("ffn mono {l}")))
        .collect();
    let mut multi = system("ffn multilingual");
    let mut resnet = with_resnet.then(|| system("resnet multilingual"));

    for &seed in seeds {
        let corpus_dir = work.join(format!("corpus_{seed}"));
        let synth = crate::corpus::SyntheticCorpusConfig {
            seed,
            ..base.synth.clone()
        };
        synth_corpus(&synth)?.write(&corpus_dir)?;
        let run = |name: &str,
                   arch: Option<Architecture>,
                   langs: &[String],
                   out: &mut SystemResult|
         -> Result<()> {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.synth = synth.clone();
            cfg.corpus = corpus_dir.clone();
            cfg.out = work.join(format!("run_{seed}_{name}"));
            cfg.model.architecture = arch;
            cfg.model.languages = langs.to_vec();
            let t = Instant::now();
            let report = run_pipeline(&cfg)?;
            info!(
                "seed {seed} {name}: cnxe_min {:.4} mtwv {:.4} ({:.1} s)",
                report.cnxe_min,
                report.mtwv,
                t.elapsed().as_secs_f64()
            );
            out.cnxe_min.push(report.cnxe_min);
            out.mtwv.push(report.mtwv);
            let per: BTreeMap<String, f64> = report.per_query_cnxe;
            out.per_query.extend(per.values());
            Ok(())
        };
        run("raw", None, &[], &mut baseline)?;
        for (l, m) in languages.iter().zip(mono.iter_mut()) {
            run(
                &format!("mono_{l}"),
                Some(Architecture::Ffn),
                std::slice::from_ref(l),
                m,
            )?;
        }
        run("multi", Some(Architecture::Ffn), &languages, &mut multi)?;
        if let Some(r) = resnet.as_mut() {
            run("resnet", Some(Architecture::ResNet), &languages, r)?;
        }
    }
    Ok(TrendResult {
        baseline,
        monolingual: mono,
        multilingual: multi,
        resnet,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
