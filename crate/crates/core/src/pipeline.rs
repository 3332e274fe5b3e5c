//! Experiment configuration and the featurize → train → extract → SAD →
//! search → z-norm → evaluate pipeline over a corpus directory.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, so stages can also be run one at a time from the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ini::Ini;
use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::corpus::{layout, read_alignments, read_languages, SyntheticCorpusConfig};
use crate::error::{Error, Result};
use crate::eval::{
    self, cnxe, emit_det_file, paired_ttest_one_tailed, read_per_query, CalibrationMode,
    EvalConfig, MetricReport, TrialLabels,
};
use crate::frontend::{add_deltas, read_archive, write_archive, FeatureMatrix, MeanVarNorm};
use crate::models::{
    build_ffn, build_resnet, Architecture, FfnConfig, LanguageData, LanguageSpec, Model,
    ResNetConfig, TrainConfig,
};
use crate::sad::{admit, filter_frames, SadConfig, StreamSet};
use crate::search::{search_all_timed, DtwConfig, Normalization, ScoreTable};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `None` searches the normalised input features directly.
    pub architecture: Option<Architecture>,
    pub languages: Vec<String>,
    pub ffn: FfnConfig,
    pub resnet: ResNetConfig,
    pub train: TrainConfig,
    /// Load this checkpoint (and its `.manifest`) instead of training.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Search threads; 0 uses every core.
    pub threads: usize,
    pub model: ModelConfig,
    pub delta_window: usize,
    pub sad: SadConfig,
    pub dtw: DtwConfig,
    pub eval: EvalConfig,
    pub calibration: CalibrationMode,
    pub synth: SyntheticCorpusConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("run"),
            threads: 0,
            model: ModelConfig {
                architecture: Some(Architecture::Ffn),
                languages: vec!["L0".into(), "L1".into(), "L2".into()],
                ffn: FfnConfig {
                    hidden_width: 128,
                    post_bottleneck_width: 128,
                    ..FfnConfig::default()
                },
                resnet: ResNetConfig {
                    stage_channels: vec![8, 16, 32],
                    stem_channels: 8,
                    post_bottleneck_width: 64,
                    ..ResNetConfig::default()
                },
                train: TrainConfig {
                    epochs: 12,
                    ..TrainConfig::default()
                },
                checkpoint: None,
            },
            delta_window: 2,
            sad: SadConfig::default(),
            dtw: DtwConfig::default(),
            eval: EvalConfig::default(),
            calibration: CalibrationMode::Monotone,
            synth: SyntheticCorpusConfig::default(),
        }
    }
}

/// Reads keys out of one INI section, remembering which were used so that
/// misspelt keys are reported instead of silently ignored.
struct Section<'a> {
    name: &'static str,
    props: Option<&'a ini::Properties>,
    used: Vec<&'static str>,
}

impl Section<'_> {
    fn get<T: FromStr>(&mut self, key: &'static str, into: &mut T) -> Result<()> {
        self.used.push(key);
        if let Some(v) = self.props.and_then(|p| p.get(key)) {
            *into = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("[{}] {key}: cannot parse `{v}`", self.name)))?;
        }
        Ok(())
    }

    fn raw(&mut self, key: &'static str) -> Option<String> {
        self.used.push(key);
        self.props
            .and_then(|p| p.get(key))
            .map(|v| v.trim().to_string())
    }

    fn range(&mut self, key: &'static str, into: &mut (usize, usize)) -> Result<()> {
        if let Some(v) = self.raw(key) {
            let bad = || {
                Error::Config(format!(
                    "[{}] {key}: expected `lo-hi`, got `{v}`",
                    self.name
                ))
            };
            let (lo, hi) = v.split_once('-').ok_or_else(bad)?;
            *into = (
                lo.trim().parse().map_err(|_| bad())?,
                hi.trim().parse().map_err(|_| bad())?,
            );
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(p) = self.props {
            for (k, _) in p.iter() {
                if !self.used.contains(&k) {
                    return Err(Error::Config(format!("[{}] unknown key `{k}`", self.name)));
                }
            }
        }
        Ok(())
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

const SECTIONS: [&str; 11] = [
    "experiment",
    "model",
    "ffn",
    "resnet",
    "train",
    "frontend",
    "sad",
    "dtw",
    "eval",
    "corpus",
    "paths",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (name, props) in ini.iter() {
            match name {
                Some(n) if SECTIONS.contains(&n) => {}
                None if props.is_empty() => {}
                other => return Err(Error::Config(format!("unknown section {other:?}"))),
            }
        }
        let sec = |name: &'static str| Section {
            name,
            props: ini.section(Some(name)),
            used: Vec::new(),
        };
        let mut c = ExperimentConfig::default();

        let mut s = sec("experiment");
        s.get("seed", &mut c.seed)?;
        s.get("threads", &mut c.threads)?;
        s.finish()?;

        let mut s = sec("paths");
        s.get("corpus", &mut c.corpus)?;
        s.get("out", &mut c.out)?;
        s.finish()?;

        let m = &mut c.model;
        let mut s = sec("model");
        if let Some(a) = s.raw("architecture") {
            m.architecture = match a.as_str() {
                "none" | "mfcc" => None,
                other => Some(other.parse()?),
            };
        }
        if let Some(l) = s.raw("languages") {
            m.languages = l
                .split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect();
        }
        if let Some(p) = s.raw("checkpoint") {
            m.checkpoint = (!p.is_empty()).then(|| PathBuf::from(p));
        }
        s.finish()?;

        let mut s = sec("ffn");
        s.get("hidden_width", &mut m.ffn.hidden_width)?;
        if let Some(v) = s.raw("hidden_layers") {
            m.ffn.hidden_layers = match v.as_str() {
                "auto" | "" => None,
                v => Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("[ffn] hidden_layers: `{v}`")))?,
                ),
            };
        }
        s.get("post_bottleneck_width", &mut m.ffn.post_bottleneck_width)?;
        s.get("dropout", &mut m.ffn.dropout)?;
        s.get("context_left", &mut m.ffn.left)?;
        s.get("context_right", &mut m.ffn.right)?;
        s.finish()?;

        let mut s = sec("resnet");
        s.get("stem_channels", &mut m.resnet.stem_channels)?;
        if let Some(v) = s.raw("stage_channels") {
            m.resnet.stage_channels = v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("[resnet] stage_channels: `{v}`")))
                })
                .collect::<Result<_>>()?;
        }
        s.get("blocks_per_stage", &mut m.resnet.blocks_per_stage)?;
        s.get("post_bottleneck_width", &mut m.resnet.post_bottleneck_width)?;
        s.get("dropout", &mut m.resnet.dropout)?;
        s.get("context_left", &mut m.resnet.left)?;
        s.get("context_right", &mut m.resnet.right)?;
        s.finish()?;

        let mut s = sec("train");
        s.get("epochs", &mut m.train.epochs)?;
        s.get("batch_size", &mut m.train.batch_size)?;
        s.get("initial_lr", &mut m.train.initial_lr)?;
        s.get("final_lr", &mut m.train.final_lr)?;
        s.finish()?;

        let mut s = sec("frontend");
        s.get("delta_window", &mut c.delta_window)?;
        s.finish()?;

        let mut s = sec("sad");
        s.get("bias", &mut c.sad.bias)?;
        s.get("min_frames", &mut c.sad.min_frames)?;
        s.finish()?;

        let mut s = sec("dtw");
        s.get(
            "max_consecutive_nondiagonal",
            &mut c.dtw.max_consecutive_nondiagonal,
        )?;
        s.finish()?;

        let mut s = sec("eval");
        s.get("cost_false_alarm", &mut c.eval.cost_false_alarm)?;
        s.get("cost_miss", &mut c.eval.cost_miss)?;
        if let Some(p) = s.raw("target_prior") {
            c.eval.target_prior = match p.as_str() {
                "empirical" | "" => None,
                v => Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("[eval] target_prior: `{v}`")))?,
                ),
            };
        }
        s.get("per_query_mtwv", &mut c.eval.per_query_mtwv)?;
        if let Some(v) = s.raw("calibration") {
            c.calibration = match v.as_str() {
                "monotone" | "pav" => CalibrationMode::Monotone,
                "affine" => CalibrationMode::Affine,
                other => return Err(Error::Config(format!("[eval] calibration: `{other}`"))),
            };
        }
        s.finish()?;

        let y = &mut c.synth;
        let mut s = sec("corpus");
        s.get("languages", &mut y.languages)?;
        s.get("phones_per_language", &mut y.phones_per_language)?;
        s.get("shared_phone_fraction", &mut y.shared_phone_fraction)?;
        s.get("static_dims", &mut y.static_dims)?;
        s.get("train_utterances", &mut y.train_utterances)?;
        s.get("dev_utterances", &mut y.dev_utterances)?;
        s.get("documents", &mut y.documents)?;
        s.get("queries", &mut y.queries)?;
        s.get("plant_rate", &mut y.plant_rate)?;
        s.range("phones_per_utterance", &mut y.phones_per_utterance)?;
        s.range("query_phones", &mut y.query_phones)?;
        s.range("frames_per_phone", &mut y.frames_per_phone)?;
        s.get("emission_noise", &mut y.emission_noise)?;
        s.get("speaker_noise", &mut y.speaker_noise)?;
        s.get("silence_rate", &mut y.silence_rate)?;
        s.get("posterior_streams", &mut y.posterior_streams)?;
        s.get("seed", &mut y.seed)?;
        s.finish()?;

        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dtw.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        if self.model.architecture.is_some() && self.model.languages.is_empty() {
            return Err(Error::Config(
                "a model needs at least one training language".into(),
            ));
        }
        if self.delta_window == 0 {
            return Err(Error::Config("delta_window must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical INI text; `parse(to_ini())` reproduces the config.
    pub fn to_ini(&self) -> String {
        let mut ini = Ini::new();
        let m = &self.model;
        ini.with_section(Some("experiment"))
            .set("seed", self.seed.to_string())
            .set("threads", self.threads.to_string());
        ini.with_section(Some("paths"))
            .set("corpus", self.corpus.display().to_string())
            .set("out", self.out.display().to_string());
        ini.with_section(Some("model"))
            .set(
                "architecture",
                m.architecture.map_or("none".to_string(), |a| a.to_string()),
            )
            .set("languages", m.languages.join(","))
            .set(
                "checkpoint",
                m.checkpoint
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            );
        ini.with_section(Some("ffn"))
            .set("hidden_width", m.ffn.hidden_width.to_string())
            .set(
                "hidden_layers",
                m.ffn.hidden_layers.map_or("auto".into(), |v| v.to_string()),
            )
            .set(
                "post_bottleneck_width",
                m.ffn.post_bottleneck_width.to_string(),
            )
            .set("dropout", m.ffn.dropout.to_string())
            .set("context_left", m.ffn.left.to_string())
            .set("context_right", m.ffn.right.to_string());
        ini.with_section(Some("resnet"))
            .set("stem_channels", m.resnet.stem_channels.to_string())
            .set("stage_channels", list(&m.resnet.stage_channels))
            .set("blocks_per_stage", m.resnet.blocks_per_stage.to_string())
            .set(
                "post_bottleneck_width",
                m.resnet.post_bottleneck_width.to_string(),
            )
            .set("dropout", m.resnet.dropout.to_string())
            .set("context_left", m.resnet.left.to_string())
            .set("context_right", m.resnet.right.to_string());
        ini.with_section(Some("train"))
            .set("epochs", m.train.epochs.to_string())
            .set("batch_size", m.train.batch_size.to_string())
            .set("initial_lr", m.train.initial_lr.to_string())
            .set("final_lr", m.train.final_lr.to_string());
        ini.with_section(Some("frontend"))
            .set("delta_window", self.delta_window.to_string());
        ini.with_section(Some("sad"))
            .set("bias", self.sad.bias.to_string())
            .set("min_frames", self.sad.min_frames.to_string());
        ini.with_section(Some("dtw")).set(
            "max_consecutive_nondiagonal",
            self.dtw.max_consecutive_nondiagonal.to_string(),
        );
        ini.with_section(Some("eval"))
            .set("cost_false_alarm", self.eval.cost_false_alarm.to_string())
            .set("cost_miss", self.eval.cost_miss.to_string())
            .set(
                "target_prior",
                self.eval
                    .target_prior
                    .map_or("empirical".into(), |p| p.to_string()),
            )
            .set("per_query_mtwv", self.eval.per_query_mtwv.to_string())
            .set(
                "calibration",
                match self.calibration {
                    CalibrationMode::Monotone => "monotone",
                    CalibrationMode::Affine => "affine",
                },
            );
        let y = &self.synth;
        let range = |(lo, hi): (usize, usize)| format!("{lo}-{hi}");
        ini.with_section(Some("corpus"))
            .set("languages", y.languages.to_string())
            .set("phones_per_language", y.phones_per_language.to_string())
            .set("shared_phone_fraction", y.shared_phone_fraction.to_string())
            .set("static_dims", y.static_dims.to_string())
            .set("train_utterances", y.train_utterances.to_string())
            .set("dev_utterances", y.dev_utterances.to_string())
            .set("documents", y.documents.to_string())
            .set("queries", y.queries.to_string())
            .set("plant_rate", y.plant_rate.to_string())
            .set("phones_per_utterance", range(y.phones_per_utterance))
            .set("query_phones", range(y.query_phones))
            .set("frames_per_phone", range(y.frames_per_phone))
            .set("emission_noise", y.emission_noise.to_string())
            .set("speaker_noise", y.speaker_noise.to_string())
            .set("silence_rate", y.silence_rate.to_string())
            .set("posterior_streams", y.posterior_streams.to_string())
            .set("seed", y.seed.to_string());
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is UTF-8")
    }

    /// Applies `section.key=value` overrides on top of this config.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut ini =
            Ini::load_from_str(&self.to_ini()).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not section.key=value")))?;
            let (section, key) = path
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not section.key=value")))?;
            ini.with_section(Some(section.trim()))
                .set(key.trim(), value.trim());
        }
        let mut buf = Vec::new();
        ini.write_to(&mut buf)?;
        ExperimentConfig::parse(&String::from_utf8_lossy(&buf))
    }

    /// SHA-256 of the canonical config text, minus the output directory so
    /// that reruns elsewhere hash the same.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            out: PathBuf::new(),
            threads: 0,
            ..self.clone()
        }
        .to_ini();
        Sha256::digest(canonical.as_bytes())
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

/// Files inside a run directory.
pub mod run_files {
    pub const FEATURES: &str = "features";
    pub const BOTTLENECK: &str = "bottleneck";
    pub const SAD: &str = "sad";
    pub const CHECKPOINT: &str = "model.qbem";
    pub const MODEL_MANIFEST: &str = "model.manifest";
    pub const TRAIN_LOG: &str = "train.log";
    pub const RAW_SCORES: &str = "scores.raw.tsv";
    pub const ZNORM_SCORES: &str = "scores.znorm.tsv";
    pub const REPORT: &str = "report.txt";
    pub const PER_QUERY: &str = "per_query_cnxe.tsv";
    pub const DET: &str = "det.tsv";
    pub const RUN_LOG: &str = "run.log";
    pub const CONFIG: &str = "config.ini";
}

/// Stage timings and facts gathered while running; written as `run.log`.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub lines: Vec<(String, String)>,
}

impl RunLog {
    pub fn record(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.lines.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }
}

const SPLITS: [&str; 2] = ["train", "dev"];

fn archive(dir: &Path, name: &str) -> Result<Vec<FeatureMatrix>> {
    read_archive(&dir.join(name))
}

/// Deltas plus normalisation with statistics from every training split of
/// the corpus; writes `features/*.qbe`.
pub fn featurize(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out.join(run_files::FEATURES);
    fs::create_dir_all(&out)?;
    let languages = read_languages(&cfg.corpus)?;
    let deltas = |mats: Vec<FeatureMatrix>| -> Result<Vec<FeatureMatrix>> {
        mats.iter()
            .map(|m| add_deltas(m, cfg.delta_window))
            .collect()
    };
    let mut sets: Vec<(String, Vec<FeatureMatrix>)> = Vec::new();
    for (lang, _) in &languages {
        for split in SPLITS {
            let name = layout::features(split, lang);
            sets.push((name.clone(), deltas(archive(&cfg.corpus, &name)?)?));
        }
    }
    for name in [layout::DOCUMENTS, layout::QUERIES] {
        sets.push((name.to_string(), deltas(archive(&cfg.corpus, name)?)?));
    }
    let norm = MeanVarNorm::fit(
        sets.iter()
            .filter(|(n, _)| n.starts_with("train_"))
            .flat_map(|(_, m)| m.iter()),
    )?;
    for (name, mats) in &sets {
        let normed = mats
            .iter()
            .map(|m| norm.apply(m))
            .collect::<Result<Vec<_>>>()?;
        write_archive(&normed, &out.join(name))?;
    }
    Ok(())
}

fn language_data(cfg: &ExperimentConfig, split: &str, lang: &str) -> Result<LanguageData> {
    let feats = archive(
        &cfg.out.join(run_files::FEATURES),
        &layout::features(split, lang),
    )?;
    let mut ali = read_alignments(&cfg.corpus.join(layout::alignments(split, lang)))?;
    let labels = feats
        .iter()
        .map(|f| {
            ali.remove(&f.utterance_id).ok_or_else(|| {
                Error::FrameMismatch(format!("no alignment for `{}`", f.utterance_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LanguageData::new(lang, feats, labels)
}

/// Trains the configured model (or loads the configured checkpoint) and
/// saves it in the run directory. `Ok(None)` when searching raw features.
pub fn train(cfg: &ExperimentConfig) -> Result<Option<Model>> {
    let m = &cfg.model;
    let Some(arch) = m.architecture else {
        return Ok(None);
    };
    let ckpt = cfg.out.join(run_files::CHECKPOINT);
    let manifest = cfg.out.join(run_files::MODEL_MANIFEST);
    if let Some(src) = &m.checkpoint {
        let model = Model::load(src, &src.with_extension("manifest"))?;
        model.save(&ckpt, &manifest)?;
        return Ok(Some(model));
    }
    let classes: BTreeMap<String, usize> = read_languages(&cfg.corpus)?.into_iter().collect();
    let specs = m
        .languages
        .iter()
        .map(|l| {
            classes
                .get(l)
                .map(|&c| LanguageSpec::new(l.clone(), c))
                .ok_or_else(|| Error::Config(format!("language `{l}` is not in the corpus")))
        })
        .collect::<Result<Vec<_>>>()?;
    let train: Vec<LanguageData> = m
        .languages
        .iter()
        .map(|l| language_data(cfg, "train", l))
        .collect::<Result<_>>()?;
    let dev: Vec<LanguageData> = m
        .languages
        .iter()
        .map(|l| language_data(cfg, "dev", l))
        .collect::<Result<_>>()?;
    let dims = train[0].utterances[0].dims;
    let mut model = match arch {
        Architecture::Ffn => build_ffn(
            &specs,
            &FfnConfig {
                base_dims: dims,
                ..m.ffn.clone()
            },
            cfg.seed,
        )?,
        Architecture::ResNet => build_resnet(
            &specs,
            &ResNetConfig {
                base_dims: dims,
                ..m.resnet.clone()
            },
            cfg.seed,
        )?,
    };
    let report = model.train(
        &train,
        &dev,
        &TrainConfig {
            seed: cfg.seed,
            ..m.train.clone()
        },
    )?;
    let mut log = String::from("epoch\ttrain_loss\tdev_loss\tlr\n");
    for (e, ((t, d), lr)) in report
        .train_loss
        .iter()
        .zip(&report.dev_loss)
        .zip(&report.learning_rate)
        .enumerate()
    {
        let _ = writeln!(log, "{e}\t{t:.6}\t{d:.6}\t{lr:e}");
    }
    fs::write(cfg.out.join(run_files::TRAIN_LOG), log)?;
    model.save(&ckpt, &manifest)?;
    Ok(Some(model))
}

/// Bottleneck features for documents and queries (or a copy of the input
/// features when no model is configured).
pub fn extract(cfg: &ExperimentConfig, model: Option<&mut Model>) -> Result<()> {
    let src = cfg.out.join(run_files::FEATURES);
    let out = cfg.out.join(run_files::BOTTLENECK);
    fs::create_dir_all(&out)?;
    let mut model = model;
    for name in [layout::DOCUMENTS, layout::QUERIES] {
        let feats = archive(&src, name)?;
        let extracted = match model.as_deref_mut() {
            Some(m) => feats
                .iter()
                .map(|f| m.extract_bottleneck(f))
                .collect::<Result<Vec<_>>>()?,
            None => feats,
        };
        write_archive(&extracted, &out.join(name))?;
    }
    Ok(())
}

/// Loads the run's model for `extract` when it was trained in an earlier
/// invocation.
pub fn load_run_model(cfg: &ExperimentConfig) -> Result<Option<Model>> {
    if cfg.model.architecture.is_none() {
        return Ok(None);
    }
    Model::load(
        &cfg.out.join(run_files::CHECKPOINT),
        &cfg.out.join(run_files::MODEL_MANIFEST),
    )
    .map(Some)
}

/// Removes non-speech frames and drops utterances left with too few frames.
/// Returns `(documents kept, queries kept)`.
pub fn sad(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    let src = cfg.out.join(run_files::BOTTLENECK);
    let out = cfg.out.join(run_files::SAD);
    fs::create_dir_all(&out)?;
    let mut kept = Vec::new();
    for (name, sidecar) in [
        (layout::DOCUMENTS, layout::DOCUMENT_STREAMS),
        (layout::QUERIES, layout::QUERY_STREAMS),
    ] {
        let streams = StreamSet::load(&cfg.corpus.join(sidecar))?;
        let mut admitted = Vec::new();
        for f in archive(&src, name)? {
            let filtered = filter_frames(&f, &streams.for_utterance(&f.utterance_id)?, &cfg.sad)?;
            if admit(&filtered, &cfg.sad) {
                admitted.push(filtered);
            } else {
                warn!(
                    "`{}`: {} speech frames after SAD, excluded",
                    f.utterance_id, filtered.frames
                );
            }
        }
        write_archive(&admitted, &out.join(name))?;
        kept.push(admitted.len());
    }
    Ok((kept[0], kept[1]))
}

/// Raw DTW scores for every admitted query × document pair.
pub fn search(cfg: &ExperimentConfig, log: &mut RunLog) -> Result<ScoreTable> {
    let dir = cfg.out.join(run_files::SAD);
    let docs = archive(&dir, layout::DOCUMENTS)?;
    let queries = archive(&dir, layout::QUERIES)?;
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map_or(1, usize::from)
    } else {
        cfg.threads
    };
    let run = search_all_timed(&queries, &docs, &cfg.dtw, threads)?;
    log.record("search_pairs", run.table.len());
    log.record("search_threads", run.threads);
    log.record(
        "search_ms",
        format!("{:.3}", run.elapsed.as_secs_f64() * 1e3),
    );
    run.table.write(&cfg.out.join(run_files::RAW_SCORES))?;
    Ok(run.table)
}

pub fn znorm_scores(raw: &Path, out: &Path) -> Result<ScoreTable> {
    let (z, flagged) = eval::znorm(&ScoreTable::read(raw, Normalization::Raw)?);
    if !flagged.is_empty() {
        warn!("{} queries could not be z-normalised", flagged.len());
    }
    z.write(out)?;
    Ok(z)
}

/// Report, per-query Cnxe and DET files for a score table.
pub fn evaluate_scores(
    scores: &ScoreTable,
    labels: &TrialLabels,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<MetricReport> {
    let mut report = eval::evaluate(scores, labels, &cfg.eval)?;
    if cfg.calibration == CalibrationMode::Affine {
        let (c, per) = cnxe(scores, labels, &cfg.eval, CalibrationMode::Affine)?;
        report.cnxe_min = c;
        report.per_query_cnxe = per;
    }
    fs::write(out_dir.join(run_files::REPORT), report.to_text(&cfg.eval))?;
    fs::write(out_dir.join(run_files::PER_QUERY), report.per_query_tsv())?;
    emit_det_file(&report.det_points, &out_dir.join(run_files::DET))?;
    Ok(report)
}

fn timed<T>(
    log: &mut RunLog,
    stage: &'static str,
    f: impl FnOnce(&mut RunLog) -> Result<T>,
) -> Result<T> {
    let t0 = Instant::now();
    let out = f(log).map_err(|e| e.in_stage(stage))?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    info!("{stage}: {ms:.1} ms");
    log.record(format!("stage_{stage}_ms"), format!("{ms:.3}"));
    Ok(out)
}

/// Runs every stage and writes the run log. Reports and score files depend
/// only on the config (timings live in the log alone).
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if !cfg.corpus.join(layout::MANIFEST).is_file() {
        return Err(Error::Config(format!(
            "no corpus at {}",
            cfg.corpus.display()
        )));
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(run_files::CONFIG), cfg.to_ini())?;
    let mut log = RunLog::default();
    log.record("config_hash", cfg.hash());
    log.record("seed", cfg.seed);
    timed(&mut log, "featurize", |_| featurize(cfg))?;
    let mut model = timed(&mut log, "train", |_| train(cfg))?;
    timed(&mut log, "extract", |_| extract(cfg, model.as_mut()))?;
    let (docs, queries) = timed(&mut log, "sad", |_| sad(cfg))?;
    log.record("documents_admitted", docs);
    log.record("queries_admitted", queries);
    timed(&mut log, "search", |log| search(cfg, log))?;
    let z = timed(&mut log, "znorm", |_| {
        znorm_scores(
            &cfg.out.join(run_files::RAW_SCORES),
            &cfg.out.join(run_files::ZNORM_SCORES),
        )
    })?;
    let report = timed(&mut log, "evaluate", |_| {
        let labels = TrialLabels::read(&cfg.corpus.join(layout::TRIALS))?;
        evaluate_scores(&z, &labels, cfg, &cfg.out)
    })?;
    fs::write(cfg.out.join(run_files::RUN_LOG), log.to_text())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Significance {
    pub t: f64,
    pub p: f64,
    pub queries: usize,
    pub mean_a: f64,
    pub mean_b: f64,
}

impl Significance {
    pub fn summary(&self) -> String {
        let dir = if self.t > 0.0 { "a > b" } else { "a <= b" };
        format!(
            "queries = {}\nmean_a = {:.6}\nmean_b = {:.6}\nt = {:.6}\np = {:.6}\ndirection = {dir} (one-tailed test of mean(a - b) > 0)\n",
            self.queries, self.mean_a, self.mean_b, self.t, self.p
        )
    }
}

/// Paired one-tailed t-test on per-query Cnxe, matched by query id.
pub fn compare_per_query(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
) -> Result<Significance> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Shape(
            "the two runs scored different query sets".into(),
        ));
    }
    let va: Vec<f64> = a.values().copied().collect();
    let vb: Vec<f64> = b.values().copied().collect();
    let (t, p) = paired_ttest_one_tailed(&va, &vb)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Significance {
        t,
        p,
        queries: va.len(),
        mean_a: mean(&va),
        mean_b: mean(&vb),
    })
}

/// Compares two run directories.
pub fn compare_runs(run_a: &Path, run_b: &Path) -> Result<Significance> {
    compare_per_query(
        &read_per_query(&run_a.join(run_files::PER_QUERY))?,
        &read_per_query(&run_b.join(run_files::PER_QUERY))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut c = ExperimentConfig::default();
        c.model.architecture = Some(Architecture::ResNet);
        c.model.checkpoint = Some(PathBuf::from("m.qbem"));
        c.eval.target_prior = Some(0.1);
        c.synth.frames_per_phone = (2, 5);
        let back = ExperimentConfig::parse(&c.to_ini()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let moved = ExperimentConfig {
            out: PathBuf::from("elsewhere"),
            ..c.clone()
        };
        assert_eq!(moved.hash(), c.hash());
        let reseeded = ExperimentConfig {
            seed: 9,
            ..c.clone()
        };
        assert_ne!(reseeded.hash(), c.hash());
    }

    #[test]
    fn config_errors() {
        for text in [
            "[model]\narchitecture = transformer\n",
            "[dtw]\nmax_consecutive_nondiagonal = 0\n",
            "[eval]\ncost_miss = -1\n",
            "[ffn]\nhidden_widht = 3\n",
            "[nonsense]\nx = 1\n",
            "[corpus]\nframes_per_phone = 4\n",
            "[experiment]\nseed = abc\n",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
        let c = ExperimentConfig::parse("[model]\narchitecture = none\n[experiment]\nseed = 4\n")
            .unwrap();
        assert_eq!((c.model.architecture, c.seed), (None, 4));
        let o = c
            .with_overrides(&["corpus.emission_noise=2.5", "train.epochs = 3"])
            .unwrap();
        assert_eq!(
            (o.synth.emission_noise, o.model.train.epochs, o.seed),
            (2.5, 3, 4)
        );
        assert!(c.with_overrides(&["epochs=3"]).is_err());
        assert!(c.with_overrides(&["train.epoch=3"]).is_err());
    }

    #[test]
    fn compare_is_antisymmetric() {
        let a: BTreeMap<String, f64> = [("q1", 0.9), ("q2", 0.8), ("q3", 0.95)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let b: BTreeMap<String, f64> = [("q1", 0.5), ("q2", 0.7), ("q3", 0.6)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let ab = compare_per_query(&a, &b).unwrap();
        let ba = compare_per_query(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert!(ab.p > 0.0 && ab.p < 0.5);
        assert!(matches!(
            compare_per_query(&a, &a),
            Err(Error::Degenerate(_))
        ));
        let mut c = b.clone();
        c.insert("q4".into(), 0.1);
        assert!(matches!(compare_per_query(&a, &c), Err(Error::Shape(_))));
    }
}
