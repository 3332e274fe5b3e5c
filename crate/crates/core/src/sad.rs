//! Speech activity detection from phone-recogniser posterior streams.
//!
//! Each stream gives per-frame class posteriors plus the set of classes that
//! count as non-speech (silence, noise). Streams are averaged frame by frame
//! and a frame is dropped when the mean non-speech mass reaches the mean of
//! the per-stream best speech-class posterior.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frontend::{read_archive, FeatureMatrix};

/// Minimum number of frames an utterance needs after SAD to be searched.
pub const MIN_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStream {
    pub utterance_id: String,
    pub frames: usize,
    pub classes: usize,
    /// Row-major `[frames x classes]` probabilities.
    pub probs: Vec<f32>,
    pub nonspeech: Vec<usize>,
}

impl PosteriorStream {
    pub fn new(
        utterance_id: impl Into<String>,
        classes: usize,
        probs: Vec<f32>,
        nonspeech: Vec<usize>,
    ) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if classes < 2 || !probs.len().is_multiple_of(classes) {
            return Err(Error::Shape(format!(
                "{utterance_id}: {} values for {classes} classes",
                probs.len()
            )));
        }
        if let Some(&bad) = nonspeech.iter().find(|&&c| c >= classes) {
            return Err(Error::Shape(format!(
                "{utterance_id}: non-speech class {bad} >= {classes}"
            )));
        }
        if nonspeech.len() >= classes {
            return Err(Error::Shape(format!(
                "{utterance_id}: no speech classes left"
            )));
        }
        for (t, row) in probs.chunks_exact(classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Shape(format!(
                    "{utterance_id}: frame {t} has a probability outside [0, 1]"
                )));
            }
            let sum: f32 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::Shape(format!(
                    "{utterance_id}: frame {t} sums to {sum}"
                )));
            }
        }
        Ok(PosteriorStream {
            frames: probs.len() / classes,
            utterance_id,
            classes,
            probs,
            nonspeech,
        })
    }

    pub fn from_matrix(m: &FeatureMatrix, nonspeech: &[usize]) -> Result<Self> {
        PosteriorStream::new(
            m.utterance_id.clone(),
            m.dims,
            m.data.clone(),
            nonspeech.to_vec(),
        )
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    fn is_nonspeech(&self, class: usize) -> bool {
        self.nonspeech.contains(&class)
    }

    pub fn nonspeech_mass(&self, t: usize) -> f64 {
        self.nonspeech
            .iter()
            .map(|&c| f64::from(self.row(t)[c]))
            .sum()
    }

    pub fn best_speech(&self, t: usize) -> f64 {
        self.row(t)
            .iter()
            .enumerate()
            .filter(|(c, _)| !self.is_nonspeech(*c))
            .map(|(_, &p)| f64::from(p))
            .fold(0.0, f64::max)
    }

    pub fn select_frames(&self, keep: &[bool]) -> PosteriorStream {
        let probs = self
            .probs
            .chunks_exact(self.classes)
            .zip(keep)
            .filter(|(_, &k)| k)
            .flat_map(|(r, _)| r.iter().copied())
            .collect::<Vec<_>>();
        PosteriorStream {
            utterance_id: self.utterance_id.clone(),
            frames: probs.len() / self.classes,
            classes: self.classes,
            probs,
            nonspeech: self.nonspeech.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SadConfig {
    /// Added to the speech side of the comparison; positive values keep more frames.
    pub bias: f64,
    pub min_frames: usize,
}

impl Default for SadConfig {
    fn default() -> Self {
        SadConfig {
            bias: 0.0,
            min_frames: MIN_FRAMES,
        }
    }
}

fn aligned_frames(streams: &[PosteriorStream]) -> Result<usize> {
    let first = streams
        .first()
        .ok_or_else(|| Error::FrameMismatch("no posterior streams".into()))?;
    if let Some(s) = streams.iter().find(|s| s.frames != first.frames) {
        return Err(Error::FrameMismatch(format!(
            "{}: streams with {} and {} frames",
            first.utterance_id, first.frames, s.frames
        )));
    }
    Ok(first.frames)
}

/// Per-frame non-speech mass averaged over streams.
pub fn nonspeech_score(streams: &[PosteriorStream]) -> Result<Vec<f64>> {
    let frames = aligned_frames(streams)?;
    let n = streams.len() as f64;
    Ok((0..frames)
        .map(|t| streams.iter().map(|s| s.nonspeech_mass(t)).sum::<f64>() / n)
        .collect())
}

/// Per-frame best speech-class posterior averaged over streams.
pub fn speech_score(streams: &[PosteriorStream]) -> Result<Vec<f64>> {
    let frames = aligned_frames(streams)?;
    let n = streams.len() as f64;
    Ok((0..frames)
        .map(|t| streams.iter().map(|s| s.best_speech(t)).sum::<f64>() / n)
        .collect())
}

pub fn speech_mask(streams: &[PosteriorStream], cfg: &SadConfig) -> Result<Vec<bool>> {
    let ns = nonspeech_score(streams)?;
    let sp = speech_score(streams)?;
    Ok(ns.iter().zip(&sp).map(|(n, s)| *n < s + cfg.bias).collect())
}

/// Drops the non-speech frames of `f`, keeping the order of the rest.
pub fn filter_frames(
    f: &FeatureMatrix,
    streams: &[PosteriorStream],
    cfg: &SadConfig,
) -> Result<FeatureMatrix> {
    let frames = aligned_frames(streams)?;
    if frames != f.frames {
        return Err(Error::FrameMismatch(format!(
            "{}: {} feature frames, {frames} posterior frames",
            f.utterance_id, f.frames
        )));
    }
    Ok(f.select_frames(&speech_mask(streams, cfg)?))
}

pub fn admit(f: &FeatureMatrix, cfg: &SadConfig) -> bool {
    f.frames >= cfg.min_frames
}

/// Posterior streams for a set of utterances: `streams[k][utterance]`.
#[derive(Debug, Clone, Default)]
pub struct StreamSet {
    pub streams: Vec<HashMap<String, PosteriorStream>>,
}

impl StreamSet {
    pub fn for_utterance(&self, id: &str) -> Result<Vec<PosteriorStream>> {
        self.streams
            .iter()
            .enumerate()
            .map(|(k, s)| {
                s.get(id).cloned().ok_or_else(|| {
                    Error::FrameMismatch(format!("stream {k} has no posteriors for `{id}`"))
                })
            })
            .collect()
    }

    /// Reads the sidecar listing: one line per stream,
    /// `<archive path><TAB><space separated non-speech class indices>`, with
    /// archive paths relative to the sidecar's directory.
    pub fn load(sidecar: &Path) -> Result<StreamSet> {
        let dir = sidecar.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(sidecar)?;
        let mut streams = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (path, classes) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("stream listing line `{line}`")))?;
            let nonspeech = classes
                .split_whitespace()
                .map(|c| {
                    c.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("class index `{c}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let mats = read_archive(&dir.join(path))?;
            let map = mats
                .iter()
                .map(|m| {
                    Ok((
                        m.utterance_id.clone(),
                        PosteriorStream::from_matrix(m, &nonspeech)?,
                    ))
                })
                .collect::<Result<HashMap<_, _>>>()?;
            streams.push(map);
        }
        if streams.is_empty() {
            return Err(Error::Parse(format!(
                "{}: no streams listed",
                sidecar.display()
            )));
        }
        Ok(StreamSet { streams })
    }

    /// Writes each stream as a feature archive next to `sidecar` and the listing itself.
    pub fn save(&self, sidecar: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = sidecar.parent().unwrap_or(Path::new("."));
        let mut listing = String::new();
        let mut written = Vec::new();
        for (k, s) in self.streams.iter().enumerate() {
            let name = format!("{stem}.post{k}.qbe");
            let sorted: BTreeMap<&String, &PosteriorStream> = s.iter().collect();
            let nonspeech = sorted
                .values()
                .next()
                .map(|p| p.nonspeech.clone())
                .unwrap_or_default();
            let mats = sorted
                .values()
                .map(|p| {
                    FeatureMatrix::new(p.utterance_id.clone(), p.frames, p.classes, p.probs.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            crate::frontend::write_archive(&mats, &dir.join(&name))?;
            let idx: Vec<String> = nonspeech.iter().map(ToString::to_string).collect();
            listing.push_str(&format!("{name}\t{}\n", idx.join(" ")));
            written.push(dir.join(name));
        }
        fs::write(sidecar, listing)?;
        Ok(written)
    }
}
