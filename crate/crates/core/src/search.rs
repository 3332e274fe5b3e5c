//! Cosine similarity and slope-constrained subsequence DTW.
//!
//! The DTW keeps, for every cell and every count of consecutive
//! non-diagonal moves, the partial path with the best average similarity
//! (sum / length). Averages are compared exactly by cross-multiplying the
//! carried `(sum, length)` pairs, so the returned path reproduces the
//! returned score.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use log::{debug, info};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::nn::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} similarity matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity matrix".into()));
        }
        Ok(SimilarityMatrix { rows, cols, values })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

fn unit_rows(f: &FeatureMatrix) -> (Vec<f64>, usize) {
    let mut zero = 0;
    let mut out = Vec::with_capacity(f.data.len());
    for row in f.rows() {
        let norm = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            out.extend(row.iter().map(|&v| f64::from(v) / norm));
        } else {
            zero += 1;
            out.extend(std::iter::repeat_n(0.0, row.len()));
        }
    }
    (out, zero)
}

/// `(1 + cos(q_i, d_j)) / 2`; an all-zero frame is orthogonal to everything.
pub fn similarity(q: &FeatureMatrix, d: &FeatureMatrix) -> Result<SimilarityMatrix> {
    if q.dims != d.dims {
        return Err(Error::Shape(format!(
            "query `{}` has {} dims, document `{}` has {}",
            q.utterance_id, q.dims, d.utterance_id, d.dims
        )));
    }
    let (qn, qz) = unit_rows(q);
    let (dn, dz) = unit_rows(d);
    if qz + dz > 0 {
        debug!(
            "{} zero-norm frames in `{}` / `{}` scored as orthogonal",
            qz + dz,
            q.utterance_id,
            d.utterance_id
        );
    }
    let mut values = vec![0.0; q.frames * d.frames];
    f64::matmul(
        q.frames,
        q.dims,
        d.frames,
        &qn,
        false,
        &dn,
        true,
        &mut values,
        false,
    );
    for v in &mut values {
        *v = (0.5 * (1.0 + *v)).clamp(0.0, 1.0);
    }
    SimilarityMatrix::new(q.frames, d.frames, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DtwConfig {
    pub max_consecutive_nondiagonal: usize,
}

impl Default for DtwConfig {
    fn default() -> Self {
        DtwConfig {
            max_consecutive_nondiagonal: 2,
        }
    }
}

impl DtwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=200).contains(&self.max_consecutive_nondiagonal) {
            return Err(Error::Config(format!(
                "max_consecutive_nondiagonal must be in 1..=200, got {}",
                self.max_consecutive_nondiagonal
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub score: f64,
    pub doc_start: usize,
    pub doc_end: usize,
    pub path: Vec<(usize, usize)>,
}

/// Is the partial path `(sum_a, len_a)` preferred over `(sum_b, len_b)`?
/// Higher average first, then the longer path.
#[inline]
pub fn prefer(sum_a: f64, len_a: u32, sum_b: f64, len_b: u32) -> bool {
    match (sum_a * f64::from(len_b)).partial_cmp(&(sum_b * f64::from(len_a))) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => len_a > len_b,
        _ => false,
    }
}

const NONE: u8 = 0;
const START: u8 = 1;
// 2 + k: diagonal from slope state k; then vertical and horizontal.
const DIAG: u8 = 2;

#[derive(Clone, Copy)]
struct Acc {
    sum: f64,
    len: u32,
}

const EMPTY: Acc = Acc { sum: 0.0, len: 0 };

/// Subsequence DTW: the path starts anywhere in row 0 and ends anywhere in
/// the last row. A query too long for the document under the slope
/// constraint has no legal path and yields `Error::NoPath`.
pub fn dtw_subsequence(s: &SimilarityMatrix, cfg: &DtwConfig) -> Result<MatchResult> {
    cfg.validate()?;
    let (m, n) = (s.rows, s.cols);
    if m == 0 || n == 0 {
        return Err(Error::Shape(format!("empty {m}x{n} similarity matrix")));
    }
    let kmax = cfg.max_consecutive_nondiagonal;
    let ks = kmax + 1;
    let vert = DIAG + ks as u8;
    let horiz = vert + 1;
    let idx = |j: usize, k: usize| j * ks + k;

    let mut prev = vec![EMPTY; n * ks];
    let mut cur = vec![EMPTY; n * ks];
    let mut back = vec![NONE; m * n * ks];

    for i in 0..m {
        for j in 0..n {
            let sij = s.at(i, j);
            let base = (i * n + j) * ks;
            // k = 0: fresh start in row 0, otherwise a diagonal step.
            if i == 0 {
                cur[idx(j, 0)] = Acc { sum: sij, len: 1 };
                back[base] = START;
            } else {
                let mut best = EMPTY;
                let mut from = NONE;
                if j > 0 {
                    for k in 0..ks {
                        let p = prev[idx(j - 1, k)];
                        if p.len > 0
                            && (from == NONE || prefer(p.sum + sij, p.len + 1, best.sum, best.len))
                        {
                            best = Acc {
                                sum: p.sum + sij,
                                len: p.len + 1,
                            };
                            from = DIAG + k as u8;
                        }
                    }
                }
                cur[idx(j, 0)] = best;
                back[base] = from;
            }
            for k in 1..ks {
                let mut best = EMPTY;
                let mut from = NONE;
                if i > 0 {
                    let p = prev[idx(j, k - 1)];
                    if p.len > 0 {
                        best = Acc {
                            sum: p.sum + sij,
                            len: p.len + 1,
                        };
                        from = vert;
                    }
                }
                if j > 0 {
                    let p = cur[idx(j - 1, k - 1)];
                    if p.len > 0
                        && (from == NONE || prefer(p.sum + sij, p.len + 1, best.sum, best.len))
                    {
                        best = Acc {
                            sum: p.sum + sij,
                            len: p.len + 1,
                        };
                        from = horiz;
                    }
                }
                cur[idx(j, k)] = best;
                back[base + k] = from;
            }
        }
        if i + 1 < m {
            std::mem::swap(&mut prev, &mut cur);
        }
    }

    let mut end: Option<(usize, usize, Acc)> = None;
    for j in 0..n {
        for k in 0..ks {
            let a = cur[idx(j, k)];
            if a.len == 0 {
                continue;
            }
            if end.is_none_or(|(_, _, b)| prefer(a.sum, a.len, b.sum, b.len)) {
                end = Some((j, k, a));
            }
        }
    }
    let (mut j, mut k, best) = end.ok_or(Error::NoPath { rows: m, cols: n })?;

    let mut path = Vec::with_capacity(best.len as usize);
    let mut i = m - 1;
    loop {
        path.push((i, j));
        let b = back[(i * n + j) * ks + k];
        match b {
            START => break,
            b if b == vert => {
                i -= 1;
                k -= 1;
            }
            b if b == horiz => {
                j -= 1;
                k -= 1;
            }
            b if (DIAG..vert).contains(&b) => {
                i -= 1;
                j -= 1;
                k = usize::from(b - DIAG);
            }
            _ => unreachable!("back pointer into an unreachable state"),
        }
    }
    path.reverse();
    Ok(MatchResult {
        score: best.sum / f64::from(best.len),
        doc_start: path[0].1,
        doc_end: path[path.len() - 1].1,
        path,
    })
}

/// Average similarity along a path, summed in path order.
pub fn path_score(s: &SimilarityMatrix, path: &[(usize, usize)]) -> f64 {
    path.iter().map(|&(i, j)| s.at(i, j)).sum::<f64>() / path.len() as f64
}

/// Checks moves and the slope constraint; returns a description of the first violation.
pub fn check_path(
    path: &[(usize, usize)],
    rows: usize,
    cfg: &DtwConfig,
) -> std::result::Result<(), String> {
    let (first, last) = match (path.first(), path.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err("empty path".into()),
    };
    if first.0 != 0 || last.0 + 1 != rows {
        return Err(format!(
            "path spans rows {}..={}, need 0..={}",
            first.0,
            last.0,
            rows - 1
        ));
    }
    let mut run = 0;
    for w in path.windows(2) {
        let (di, dj) = (
            w[1].0 as isize - w[0].0 as isize,
            w[1].1 as isize - w[0].1 as isize,
        );
        match (di, dj) {
            (1, 1) => run = 0,
            (1, 0) | (0, 1) => {
                run += 1;
                if run > cfg.max_consecutive_nondiagonal {
                    return Err(format!(
                        "{run} consecutive non-diagonal moves at {:?}",
                        w[1]
                    ));
                }
            }
            _ => return Err(format!("illegal move {:?} -> {:?}", w[0], w[1])),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    Raw,
    ZNormed,
}

/// One score per (query, document) pair, keyed so iteration order never
/// depends on how the scores were produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub entries: BTreeMap<(String, String), f64>,
    pub state: Normalization,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, query: &str, doc: &str) -> Option<f64> {
        self.entries
            .get(&(query.to_string(), doc.to_string()))
            .copied()
    }

    pub fn insert(&mut self, query: &str, doc: &str, score: f64) -> Result<()> {
        if self
            .entries
            .insert((query.to_string(), doc.to_string()), score)
            .is_some()
        {
            return Err(Error::DuplicateId(format!("{query}/{doc}")));
        }
        Ok(())
    }

    /// Scores grouped by query, documents in key order.
    pub fn by_query(&self) -> BTreeMap<&str, Vec<(&str, f64)>> {
        let mut out: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for ((q, d), &s) in &self.entries {
            out.entry(q.as_str()).or_default().push((d.as_str(), s));
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ((q, d), s) in &self.entries {
            let _ = writeln!(out, "{q}\t{d}\t{s:.6}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn parse(text: &str, state: Normalization) -> Result<Self> {
        let mut table = ScoreTable {
            state,
            ..Default::default()
        };
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let mut it = line.split('\t');
            let (q, d, s) = match (it.next(), it.next(), it.next(), it.next()) {
                (Some(q), Some(d), Some(s), None) => (q, d, s),
                _ => return Err(Error::Parse(format!("score line {}: `{line}`", n + 1))),
            };
            let s: f64 = s
                .parse()
                .map_err(|_| Error::Parse(format!("score line {}: bad score `{s}`", n + 1)))?;
            table.insert(q, d, s)?;
        }
        Ok(table)
    }

    pub fn read(path: &Path, state: Normalization) -> Result<Self> {
        ScoreTable::parse(&fs::read_to_string(path)?, state)
    }
}

#[derive(Debug, Clone)]
pub struct SearchRun {
    pub table: ScoreTable,
    pub elapsed: Duration,
    pub threads: usize,
}

fn unique_ids<'a>(set: &'a [FeatureMatrix], what: &str) -> Result<BTreeSet<&'a str>> {
    if set.is_empty() {
        return Err(Error::EmptySplit(format!("no {what}")));
    }
    let mut seen = BTreeSet::new();
    for f in set {
        if !seen.insert(f.utterance_id.as_str()) {
            return Err(Error::DuplicateId(f.utterance_id.clone()));
        }
    }
    Ok(seen)
}

/// Scores every query against every document on the current rayon pool.
pub fn search_all(
    queries: &[FeatureMatrix],
    docs: &[FeatureMatrix],
    cfg: &DtwConfig,
) -> Result<ScoreTable> {
    cfg.validate()?;
    unique_ids(queries, "queries")?;
    unique_ids(docs, "documents")?;
    let pairs: Vec<(usize, usize)> = (0..queries.len())
        .flat_map(|q| (0..docs.len()).map(move |d| (q, d)))
        .collect();
    let scored = pairs
        .par_iter()
        .map(|&(q, d)| {
            let s = similarity(&queries[q], &docs[d])?;
            let score = match dtw_subsequence(&s, cfg) {
                Ok(r) => r.score,
                // the document is too short to hold the query at any legal slope
                Err(Error::NoPath { .. }) => 0.0,
                Err(e) => return Err(e),
            };
            Ok(((q, d), score))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = ScoreTable::default();
    for ((q, d), score) in scored {
        table.insert(&queries[q].utterance_id, &docs[d].utterance_id, score)?;
    }
    Ok(table)
}

/// `search_all` on a dedicated pool of `threads` workers, timed.
pub fn search_all_timed(
    queries: &[FeatureMatrix],
    docs: &[FeatureMatrix],
    cfg: &DtwConfig,
    threads: usize,
) -> Result<SearchRun> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let t0 = Instant::now();
    let table = pool.install(|| search_all(queries, docs, cfg))?;
    let elapsed = t0.elapsed();
    info!(
        "search: {} pairs in {:.1} ms on {} threads",
        table.len(),
        elapsed.as_secs_f64() * 1e3,
        pool.current_num_threads()
    );
    Ok(SearchRun {
        table,
        elapsed,
        threads: pool.current_num_threads(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(id: &str, rows: &[&[f32]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(id, &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> SimilarityMatrix {
        SimilarityMatrix::new(m, n, (0..m * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let q = fm("q", &[&[1.0, 2.0], &[0.0, 0.0]]);
        let d = fm("d", &[&[1.0, 2.0], &[-2.0, 1.0], &[-1.0, -2.0]]);
        let s = similarity(&q, &d).unwrap();
        assert!((s.at(0, 0) - 1.0).abs() < 1e-12);
        assert!((s.at(0, 1) - 0.5).abs() < 1e-12);
        assert!(s.at(0, 2).abs() < 1e-12);
        assert_eq!(&s.values[3..], &[0.5, 0.5, 0.5]);
        let e = fm("e", &[&[1.0, 2.0, 3.0]]);
        assert!(matches!(similarity(&q, &e), Err(Error::Shape(_))));
    }

    #[test]
    fn single_row_picks_the_maximum() {
        let s = SimilarityMatrix::new(1, 5, vec![0.1, 0.7, 0.3, 0.7, 0.2]).unwrap();
        let r = dtw_subsequence(&s, &DtwConfig::default()).unwrap();
        assert_eq!(r.score, 0.7);
        assert_eq!(r.path, vec![(0, 1)]);
    }

    #[test]
    fn constant_matrix_is_deterministic() {
        let s = SimilarityMatrix::new(3, 6, vec![0.25; 18]).unwrap();
        let a = dtw_subsequence(&s, &DtwConfig::default()).unwrap();
        assert!((a.score - 0.25).abs() < 1e-15);
        assert_eq!(a, dtw_subsequence(&s, &DtwConfig::default()).unwrap());
        // the tie rule favours the longest path: stretches as far as the slope allows
        assert!(a.path.len() > 3);
    }

    #[test]
    fn diagonal_match_is_found() {
        let mut v = vec![0.1; 3 * 8];
        for i in 0..3 {
            v[i * 8 + 4 + i] = 1.0;
        }
        let s = SimilarityMatrix::new(3, 8, v).unwrap();
        let r = dtw_subsequence(&s, &DtwConfig::default()).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!((r.doc_start, r.doc_end), (4, 6));
    }

    #[test]
    fn query_too_long_for_the_slope() {
        let s = SimilarityMatrix::new(4, 1, vec![1.0; 4]).unwrap();
        assert!(matches!(
            dtw_subsequence(&s, &DtwConfig::default()),
            Err(Error::NoPath { rows: 4, cols: 1 })
        ));
        let s = SimilarityMatrix::new(3, 1, vec![1.0; 3]).unwrap();
        assert_eq!(
            dtw_subsequence(&s, &DtwConfig::default())
                .unwrap()
                .path
                .len(),
            3
        );
    }

    #[test]
    fn bad_inputs() {
        let s = SimilarityMatrix::new(0, 3, vec![]).unwrap();
        assert!(dtw_subsequence(&s, &DtwConfig::default()).is_err());
        let s = SimilarityMatrix::new(1, 1, vec![1.0]).unwrap();
        let cfg = DtwConfig {
            max_consecutive_nondiagonal: 0,
        };
        assert!(matches!(dtw_subsequence(&s, &cfg), Err(Error::Config(_))));
        assert!(SimilarityMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    /// Top-down evaluation of the same state-dominance rule, carrying whole
    /// paths and scoring them from scratch.
    fn dominant_path(
        s: &SimilarityMatrix,
        i: usize,
        j: usize,
        k: usize,
        kmax: usize,
    ) -> Option<Vec<(usize, usize)>> {
        let score = |p: &Vec<(usize, usize)>| {
            (
                p.iter().map(|&(a, b)| s.at(a, b)).sum::<f64>(),
                p.len() as u32,
            )
        };
        let mut cands: Vec<Vec<(usize, usize)>> = Vec::new();
        if k == 0 {
            if i == 0 {
                return Some(vec![(0, j)]);
            }
            if j > 0 {
                for kk in 0..=kmax {
                    cands.extend(dominant_path(s, i - 1, j - 1, kk, kmax));
                }
            }
        } else {
            if i > 0 {
                cands.extend(dominant_path(s, i - 1, j, k - 1, kmax));
            }
            if j > 0 {
                cands.extend(dominant_path(s, i, j - 1, k - 1, kmax));
            }
        }
        let mut best: Option<Vec<(usize, usize)>> = None;
        for mut c in cands {
            c.push((i, j));
            let (cs, cl) = score(&c);
            let take = match &best {
                None => true,
                Some(b) => {
                    let (bs, bl) = score(b);
                    prefer(cs, cl, bs, bl)
                }
            };
            if take {
                best = Some(c);
            }
        }
        best
    }

    fn oracle_dominant(s: &SimilarityMatrix, kmax: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for j in 0..s.cols {
            for k in 0..=kmax {
                if let Some(p) = dominant_path(s, s.rows - 1, j, k, kmax) {
                    best = best.max(path_score(s, &p));
                }
            }
        }
        best
    }

    /// Best sum/length over every legal complete path.
    fn oracle_global(s: &SimilarityMatrix, kmax: usize) -> f64 {
        fn walk(
            s: &SimilarityMatrix,
            kmax: usize,
            i: usize,
            j: usize,
            run: usize,
            sum: f64,
            len: usize,
            best: &mut f64,
        ) {
            let sum = sum + s.at(i, j);
            let len = len + 1;
            if i + 1 == s.rows {
                *best = best.max(sum / len as f64);
            }
            if i + 1 < s.rows && j + 1 < s.cols {
                walk(s, kmax, i + 1, j + 1, 0, sum, len, best);
            }
            if run < kmax {
                if i + 1 < s.rows {
                    walk(s, kmax, i + 1, j, run + 1, sum, len, best);
                }
                if j + 1 < s.cols {
                    walk(s, kmax, i, j + 1, run + 1, sum, len, best);
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..s.cols {
            walk(s, kmax, 0, j, 0, 0.0, 0, &mut best);
        }
        best
    }

    #[test]
    fn matches_oracles_on_random_matrices() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, n) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
            let s = random_matrix(&mut rng, m, n);
            let cfg = DtwConfig::default();
            let r = match dtw_subsequence(&s, &cfg) {
                Ok(r) => r,
                Err(Error::NoPath { .. }) => {
                    assert_eq!(oracle_global(&s, 2), f64::NEG_INFINITY, "seed {seed}");
                    continue;
                }
                Err(e) => panic!("{e}"),
            };
            assert_eq!(r.score, oracle_dominant(&s, 2), "seed {seed}");
            assert!(r.score <= oracle_global(&s, 2) + 1e-9, "seed {seed}");
            check_path(&r.path, m, &cfg).unwrap();
        }
    }

    #[test]
    fn search_all_covers_every_pair() {
        let mk = |id: &str, seed: u64, frames: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            FeatureMatrix::new(
                id,
                frames,
                4,
                (0..frames * 4).map(|_| rng.gen::<f32>() - 0.5).collect(),
            )
            .unwrap()
        };
        let qs = vec![mk("q1", 1, 5), mk("q2", 2, 6)];
        let ds = vec![mk("d1", 3, 20), mk("d2", 4, 15), mk("d3", 5, 30)];
        let cfg = DtwConfig::default();
        let a = search_all(&qs, &ds, &cfg).unwrap();
        assert_eq!(a.len(), 6);
        let b = search_all_timed(&qs, &ds, &cfg, 3).unwrap();
        assert_eq!(a, b.table);
        let mut rev = ds.clone();
        rev.reverse();
        assert_eq!(a, search_all(&qs, &rev, &cfg).unwrap());
        assert!(matches!(
            search_all(&[], &ds, &cfg),
            Err(Error::EmptySplit(_))
        ));
        let dup = vec![mk("q1", 1, 5), mk("q1", 2, 5)];
        assert!(matches!(
            search_all(&dup, &ds, &cfg),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn score_file_round_trip() {
        let mut t = ScoreTable::default();
        t.insert("q", "d1", 0.123_456_7).unwrap();
        t.insert("q", "d0", 1.0).unwrap();
        let text = t.to_tsv();
        assert_eq!(text, "q\td0\t1.000000\nq\td1\t0.123457\n");
        let back = ScoreTable::parse(&text, Normalization::Raw).unwrap();
        assert!((back.get("q", "d1").unwrap() - 0.123_457).abs() < 1e-12);
        assert!(ScoreTable::parse("q\td\n", Normalization::Raw).is_err());
        assert!(ScoreTable::parse("q\td\t1\nq\td\t2\n", Normalization::Raw).is_err());
    }

    fn sim_strategy() -> impl Strategy<Value = SimilarityMatrix> {
        (1usize..7, 1usize..12).prop_flat_map(|(m, n)| {
            proptest::collection::vec(0.0f64..=1.0, m * n)
                .prop_map(move |v| SimilarityMatrix::new(m, n, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn returned_path_realizes_score(s in sim_strategy(), kmax in 1usize..4) {
            let cfg = DtwConfig { max_consecutive_nondiagonal: kmax };
            let r = match dtw_subsequence(&s, &cfg) {
                Err(Error::NoPath { .. }) => {
                    prop_assert_eq!(oracle_global(&s, kmax), f64::NEG_INFINITY);
                    return Ok(());
                }
                r => r.unwrap(),
            };
            prop_assert!((0.0..=1.0).contains(&r.score));
            prop_assert!((path_score(&s, &r.path) - r.score).abs() < 1e-9);
            prop_assert!(check_path(&r.path, s.rows, &cfg).is_ok());
            prop_assert!(r.score <= oracle_global(&s, kmax) + 1e-9);
        }

        #[test]
        fn appending_document_columns_never_lowers_the_score(s in sim_strategy(), extra in proptest::collection::vec(0usize..100, 1..4)) {
            let cfg = DtwConfig::default();
            let base = dtw_subsequence(&s, &cfg).map_or(0.0, |r| r.score);
            let cols: Vec<usize> = (0..s.cols).chain(extra.iter().map(|e| e % s.cols)).collect();
            let mut v = Vec::new();
            for i in 0..s.rows {
                v.extend(cols.iter().map(|&j| s.at(i, j)));
            }
            let wider = SimilarityMatrix::new(s.rows, cols.len(), v).unwrap();
            prop_assert!(dtw_subsequence(&wider, &cfg).map_or(0.0, |r| r.score) >= base);
        }
    }
}
