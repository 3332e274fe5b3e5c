//! Score normalisation and detection metrics.
//!
//! Every (query, document) pair is one trial. Thresholds accept a trial when
//! `score >= threshold`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::search::{Normalization, ScoreTable};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialLabels {
    pub labels: BTreeMap<(String, String), bool>,
}

impl TrialLabels {
    pub fn insert(&mut self, query: &str, doc: &str, target: bool) -> Result<()> {
        if self
            .labels
            .insert((query.to_string(), doc.to_string()), target)
            .is_some()
        {
            return Err(Error::DuplicateId(format!("{query}/{doc}")));
        }
        Ok(())
    }

    pub fn get(&self, query: &str, doc: &str) -> Option<bool> {
        self.labels
            .get(&(query.to_string(), doc.to_string()))
            .copied()
    }

    pub fn target_count(&self) -> usize {
        self.labels.values().filter(|&&t| t).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ((q, d), &t) in &self.labels {
            let _ = writeln!(out, "{q}\t{d}\t{}", u8::from(t));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = TrialLabels::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let target = match f.as_slice() {
                [_, _, "1"] => true,
                [_, _, "0"] => false,
                _ => return Err(Error::Parse(format!("label line {}: `{line}`", n + 1))),
            };
            out.insert(f[0], f[1], target)?;
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        TrialLabels::parse(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub cost_false_alarm: f64,
    pub cost_miss: f64,
    /// `None` uses the empirical target rate of the trial list.
    pub target_prior: Option<f64>,
    /// Average MTWV over queries instead of pooling all trials.
    pub per_query_mtwv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cost_false_alarm: 1.0,
            cost_miss: 100.0,
            target_prior: None,
            per_query_mtwv: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cost_false_alarm > 0.0 && self.cost_miss > 0.0) {
            return Err(Error::Config("costs must be positive".into()));
        }
        if let Some(p) = self.target_prior {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("target prior {p} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn beta(&self, prior: f64) -> f64 {
        self.cost_false_alarm / self.cost_miss * (1.0 / prior - 1.0)
    }
}

/// A scored, labelled trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub score: f64,
    pub target: bool,
}

/// Joins scores with labels; every scored pair must be labelled and both
/// classes must be present.
pub fn trials(scores: &ScoreTable, labels: &TrialLabels) -> Result<BTreeMap<String, Vec<Trial>>> {
    let mut out: BTreeMap<String, Vec<Trial>> = BTreeMap::new();
    for ((q, d), &score) in &scores.entries {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score for {q}/{d}")));
        }
        let target = labels
            .get(q, d)
            .ok_or_else(|| Error::MissingLabel(q.clone(), d.clone()))?;
        out.entry(q.clone())
            .or_default()
            .push(Trial { score, target });
    }
    let all = out.values().flatten();
    let (t, n) = all.fold(
        (0, 0),
        |(t, n), x| if x.target { (t + 1, n) } else { (t, n + 1) },
    );
    if t == 0 {
        return Err(Error::NoTargets);
    }
    if n == 0 {
        return Err(Error::NoNonTargets);
    }
    Ok(out)
}

/// Per-query standardisation with the sample standard deviation. Queries with
/// fewer than two documents or no spread get all-zero scores and are
/// returned in the second element.
pub fn znorm(raw: &ScoreTable) -> (ScoreTable, Vec<String>) {
    let mut out = ScoreTable {
        state: Normalization::ZNormed,
        ..Default::default()
    };
    let mut flagged = Vec::new();
    for (q, docs) in raw.by_query() {
        let n = docs.len() as f64;
        let mean = docs.iter().map(|d| d.1).sum::<f64>() / n;
        let var = docs.iter().map(|d| (d.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        let degenerate = docs.len() < 2 || !(sd > 0.0) || !sd.is_finite();
        if degenerate {
            warn!(
                "query `{q}`: {} scores with no spread, z-norm set to 0",
                docs.len()
            );
            flagged.push(q.to_string());
        }
        for (d, s) in docs {
            let z = if degenerate { 0.0 } else { (s - mean) / sd };
            out.entries.insert((q.to_string(), d.to_string()), z);
        }
    }
    (out, flagged)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    /// `f64::INFINITY` for the always-reject corner.
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

/// One operating point per distinct score (accept `score >= threshold`),
/// plus the always-reject corner, in increasing threshold order.
pub fn det_curve(trials: &[Trial]) -> Result<Vec<DetPoint>> {
    let nt = trials.iter().filter(|t| t.target).count();
    let nn = trials.len() - nt;
    if nt == 0 {
        return Err(Error::NoTargets);
    }
    if nn == 0 {
        return Err(Error::NoNonTargets);
    }
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut points = Vec::new();
    // counts strictly below the current threshold
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let theta = sorted[i].score;
        points.push(DetPoint {
            threshold: theta,
            p_fa: (nn - non_below) as f64 / nn as f64,
            p_miss: tar_below as f64 / nt as f64,
        });
        while i < sorted.len() && sorted[i].score == theta {
            if sorted[i].target {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_fa: 0.0,
        p_miss: 1.0,
    });
    Ok(points)
}

pub fn det(scores: &ScoreTable, labels: &TrialLabels) -> Result<Vec<DetPoint>> {
    let all: Vec<Trial> = trials(scores, labels)?.into_values().flatten().collect();
    det_curve(&all)
}

fn empirical_prior(trials: &[Trial]) -> f64 {
    trials.iter().filter(|t| t.target).count() as f64 / trials.len() as f64
}

/// Best `1 - P_miss - beta * P_fa` over the DET sweep, with the smallest
/// threshold reaching it.
pub fn mtwv_trials(trials: &[Trial], beta: f64) -> Result<(f64, f64)> {
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for p in det_curve(trials)? {
        let twv = 1.0 - p.p_miss - beta * p.p_fa;
        if twv > best.0 {
            best = (twv, p.threshold);
        }
    }
    Ok(best)
}

/// MTWV and its threshold. In per-query mode the value is the mean of the
/// per-query maxima (queries lacking either class are skipped) and the
/// threshold is NaN.
pub fn mtwv(scores: &ScoreTable, labels: &TrialLabels, cfg: &EvalConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let by_query = trials(scores, labels)?;
    let all: Vec<Trial> = by_query.values().flatten().copied().collect();
    let beta = cfg.beta(cfg.target_prior.unwrap_or_else(|| empirical_prior(&all)));
    if !cfg.per_query_mtwv {
        return mtwv_trials(&all, beta);
    }
    let mut values = Vec::new();
    for (q, t) in &by_query {
        match mtwv_trials(t, beta) {
            Ok((v, _)) => values.push(v),
            Err(Error::NoTargets | Error::NoNonTargets) => {
                warn!("query `{q}` lacks a trial class, skipped in MTWV")
            }
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::Degenerate(
            "no query has both target and non-target trials".into(),
        ));
    }
    Ok((values.iter().sum::<f64>() / values.len() as f64, f64::NAN))
}

/// Calibration map from scores to target posteriors.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibration {
    /// Pool-adjacent-violators blocks: `(upper score bound, posterior)`,
    /// increasing in both.
    Monotone(Vec<(f64, f64)>),
    /// `sigmoid(a * score + b)`.
    Affine { a: f64, b: f64 },
}

impl Calibration {
    pub fn posterior(&self, score: f64) -> f64 {
        match self {
            Calibration::Monotone(blocks) => {
                let i = blocks
                    .partition_point(|&(hi, _)| hi < score)
                    .min(blocks.len() - 1);
                blocks[i].1
            }
            Calibration::Affine { a, b } => sigmoid(a * score + b),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Optimal monotone calibration. Tied scores start in one block; each final
/// block's posterior is `(targets + 0.5) / (trials + 1)`.
pub fn pav(trials: &[Trial]) -> Calibration {
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // (upper score, targets, count)
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        let (mut t, mut c) = (0, 0);
        while i < sorted.len() && sorted[i].score == s {
            t += usize::from(sorted[i].target);
            c += 1;
            i += 1;
        }
        blocks.push((s, t, c));
        // merge while the rate fails to increase: t1/c1 >= t2/c2
        while blocks.len() >= 2 {
            let (_, t2, c2) = blocks[blocks.len() - 1];
            let (_, t1, c1) = blocks[blocks.len() - 2];
            if t1 * c2 >= t2 * c1 {
                let (hi, ..) = blocks.pop().expect("two blocks");
                let last = blocks.last_mut().expect("one block");
                *last = (hi, t1 + t2, c1 + c2);
            } else {
                break;
            }
        }
    }
    Calibration::Monotone(
        blocks
            .into_iter()
            .map(|(hi, t, c)| (hi, (t as f64 + 0.5) / (c as f64 + 1.0)))
            .collect(),
    )
}

/// Prior-weighted logistic regression (minimises the cross-entropy below).
pub fn fit_affine(trials: &[Trial], prior: f64) -> Calibration {
    let nt = trials.iter().filter(|t| t.target).count() as f64;
    let nn = trials.len() as f64 - nt;
    let (wt, wn) = (prior / nt, (1.0 - prior) / nn);
    let (mut a, mut b) = (0.0, logit(prior));
    for _ in 0..100 {
        // Newton step on the weighted negative log-likelihood
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for t in trials {
            let p = sigmoid(a * t.score + b);
            let (w, y) = if t.target { (wt, 1.0) } else { (wn, 0.0) };
            let r = w * (p - y);
            let h = w * p * (1.0 - p);
            ga += r * t.score;
            gb += r;
            haa += h * t.score * t.score;
            hab += h * t.score;
            hbb += h;
        }
        let det = haa * hbb - hab * hab;
        if !(det.abs() > 1e-300) {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        a -= da;
        b -= db;
        if da.abs() + db.abs() < 1e-12 {
            break;
        }
    }
    Calibration::Affine { a, b }
}

fn entropy2(p: f64) -> f64 {
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

/// Normalised cross entropy of calibrated posteriors. The calibration's
/// posteriors are taken to be under the empirical prior of `fit_trials` and
/// are re-targeted to `prior` through their log-likelihood ratio.
/// Trial classes absent from `trials` contribute nothing.
fn cnxe_with(cal: &Calibration, trials: &[Trial], empirical: f64, prior: f64) -> f64 {
    let shift = logit(prior) - logit(empirical);
    let (mut tar, mut nt, mut non, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for t in trials {
        let p = sigmoid(logit(cal.posterior(t.score)) + shift);
        if t.target {
            tar -= p.log2();
            nt += 1;
        } else {
            non -= (1.0 - p).log2();
            nn += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (prior * mean(tar, nt) + (1.0 - prior) * mean(non, nn)) / entropy2(prior)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CalibrationMode {
    #[default]
    Monotone,
    Affine,
}

/// `(Cnxe, per-query Cnxe)`; with the default monotone calibration this is
/// Cnxe_min. Per-query values use the calibration fitted on all trials.
pub fn cnxe(
    scores: &ScoreTable,
    labels: &TrialLabels,
    cfg: &EvalConfig,
    mode: CalibrationMode,
) -> Result<(f64, BTreeMap<String, f64>)> {
    cfg.validate()?;
    let by_query = trials(scores, labels)?;
    let all: Vec<Trial> = by_query.values().flatten().copied().collect();
    let empirical = empirical_prior(&all);
    let prior = cfg.target_prior.unwrap_or(empirical);
    let cal = match mode {
        CalibrationMode::Monotone => pav(&all),
        CalibrationMode::Affine => fit_affine(&all, empirical),
    };
    let total = cnxe_with(&cal, &all, empirical, prior);
    let per_query = by_query
        .iter()
        .map(|(q, t)| (q.clone(), cnxe_with(&cal, t, empirical, prior)))
        .collect();
    Ok((total, per_query))
}

pub fn cnxe_min(
    scores: &ScoreTable,
    labels: &TrialLabels,
    cfg: &EvalConfig,
) -> Result<(f64, BTreeMap<String, f64>)> {
    cnxe(scores, labels, cfg, CalibrationMode::Monotone)
}

/// Cnxe of a given calibration on raw trials, at their empirical prior.
pub fn cnxe_of(cal: &Calibration, trials: &[Trial]) -> f64 {
    let p = empirical_prior(trials);
    cnxe_with(cal, trials, p, p)
}

/// One-tailed paired t-test of `mean(a - b) > 0`: returns `(t, p)`.
pub fn paired_ttest_one_tailed(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("{n} paired samples")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let t = mean / (sd / nf.sqrt());
    let dof = nf - 1.0;
    // P(T > |t|) = I_{dof/(dof+t^2)}(dof/2, 1/2) / 2
    let tail = 0.5 * beta_reg(dof / 2.0, 0.5, dof / (dof + t * t));
    let p = if t >= 0.0 { tail } else { 1.0 - tail };
    Ok((t, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub cnxe_min: f64,
    pub mtwv: f64,
    pub mtwv_threshold: f64,
    pub targets: usize,
    pub nontargets: usize,
    pub prior: f64,
    pub beta: f64,
    pub det_points: Vec<DetPoint>,
    pub per_query_cnxe: BTreeMap<String, f64>,
}

pub fn evaluate(
    scores: &ScoreTable,
    labels: &TrialLabels,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    let by_query = trials(scores, labels)?;
    let all: Vec<Trial> = by_query.values().flatten().copied().collect();
    let targets = all.iter().filter(|t| t.target).count();
    let prior = cfg
        .target_prior
        .unwrap_or(targets as f64 / all.len() as f64);
    let (cnxe_min, per_query_cnxe) = cnxe_min(scores, labels, cfg)?;
    let (mtwv, mtwv_threshold) = mtwv(scores, labels, cfg)?;
    Ok(MetricReport {
        cnxe_min,
        mtwv,
        mtwv_threshold,
        targets,
        nontargets: all.len() - targets,
        prior,
        beta: cfg.beta(prior),
        det_points: det_curve(&all)?,
        per_query_cnxe,
    })
}

impl MetricReport {
    pub fn to_text(&self, cfg: &EvalConfig) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# trial-based P_fa; cnxe_min via PAV calibration with (k+0.5)/(n+1) smoothing; prior {}; mtwv {}",
            if cfg.target_prior.is_some() { "configured" } else { "= empirical target rate" },
            if cfg.per_query_mtwv { "averaged per query" } else { "pooled" }
        );
        let _ = writeln!(out, "cnxe_min = {:.6}", self.cnxe_min);
        let _ = writeln!(out, "mtwv = {:.6}", self.mtwv);
        let _ = writeln!(out, "threshold = {:.6}", self.mtwv_threshold);
        let _ = writeln!(out, "targets = {}", self.targets);
        let _ = writeln!(out, "nontargets = {}", self.nontargets);
        let _ = writeln!(out, "prior = {:.6}", self.prior);
        let _ = writeln!(out, "beta = {:.6}", self.beta);
        out
    }

    pub fn per_query_tsv(&self) -> String {
        let mut out = String::new();
        for (q, v) in &self.per_query_cnxe {
            let _ = writeln!(out, "{q}\t{v:.9}");
        }
        out
    }
}

pub fn read_per_query(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.is_empty()) {
        let (q, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("per-query line `{line}`")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::Parse(format!("per-query value `{v}`")))?;
        if out.insert(q.to_string(), v).is_some() {
            return Err(Error::DuplicateId(q.to_string()));
        }
    }
    Ok(out)
}

/// DET points as `p_fa<TAB>p_miss`, sorted by `p_fa` ascending.
pub fn det_to_tsv(points: &[DetPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::EmptySplit("no DET points".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.p_fa
            .total_cmp(&b.p_fa)
            .then(b.p_miss.total_cmp(&a.p_miss))
    });
    let mut out = String::new();
    for p in sorted {
        let _ = writeln!(out, "{:.6}\t{:.6}", p.p_fa, p.p_miss);
    }
    Ok(out)
}

pub fn emit_det_file(points: &[DetPoint], path: &Path) -> Result<()> {
    fs::write(path, det_to_tsv(points)?)?;
    Ok(())
}

/// Reads `(p_fa, p_miss)` pairs back.
pub fn read_det_file(path: &Path) -> Result<Vec<(f64, f64)>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("DET line `{l}`")))?;
            let p = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("DET value `{s}`")))
            };
            Ok((p(a)?, p(b)?))
        })
        .collect()
}
