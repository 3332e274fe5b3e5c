//! Acoustic front end: MFCCs, delta features, context stacking, the
//! single-channel image layout used by the convolutional models, and the
//! binary feature archive.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Per-utterance matrix of frame vectors, row-major `[frames x dims]`.
///
/// A matrix may hold zero frames (e.g. after speech activity filtering);
/// everything produced by feature extraction has at least one.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub frames: usize,
    pub dims: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(
        utterance_id: impl Into<String>,
        frames: usize,
        dims: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if dims == 0 {
            return Err(Error::Shape(format!("{utterance_id}: zero dims")));
        }
        if data.len() != frames * dims {
            return Err(Error::Shape(format!(
                "{utterance_id}: {} values for {frames}x{dims}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(utterance_id));
        }
        Ok(FeatureMatrix {
            utterance_id,
            frames,
            dims,
            data,
        })
    }

    pub fn from_rows(utterance_id: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        FeatureMatrix::new(utterance_id, rows.len(), dims, data)
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dims)
    }

    /// Keeps the frames whose flag is set, preserving order.
    pub fn select_frames(&self, keep: &[bool]) -> FeatureMatrix {
        let mut data = Vec::new();
        for (row, _) in self.rows().zip(keep).filter(|(_, &k)| k) {
            data.extend_from_slice(row);
        }
        FeatureMatrix {
            utterance_id: self.utterance_id.clone(),
            frames: data.len() / self.dims,
            dims: self.dims,
            data,
        }
    }
}

/// MFCC analysis parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub preemphasis: f64,
    pub num_filters: usize,
    pub num_ceps: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            window_ms: 25.0,
            hop_ms: 10.0,
            preemphasis: 0.97,
            num_filters: 23,
            num_ceps: 13,
            log_floor: 1e-10,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over `fft_len / 2 + 1` power bins.
fn mel_filterbank(num_filters: usize, fft_len: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let bins = fft_len / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(top * i as f64 / (num_filters + 1) as f64))
        .collect();
    let bin_hz = sample_rate / fft_len as f64;
    (0..num_filters)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// 13 cepstra per 10 ms hop (under the default config) from 16-bit mono PCM.
pub fn compute_mfcc(
    utterance_id: &str,
    pcm: &[i16],
    sample_rate: u32,
    cfg: &MfccConfig,
) -> Result<FeatureMatrix> {
    if sample_rate != 8000 && sample_rate != 16000 {
        return Err(Error::SampleRate(sample_rate));
    }
    let sr = f64::from(sample_rate);
    let window = (sr * cfg.window_ms / 1000.0).round() as usize;
    let hop = (sr * cfg.hop_ms / 1000.0).round() as usize;
    if pcm.len() < window {
        return Err(Error::InputTooShort {
            samples: pcm.len(),
            window,
        });
    }
    let frames = (pcm.len() - window) / hop + 1;
    let fft_len = window.next_power_of_two();

    let mut signal: Vec<f64> = pcm.iter().map(|&s| f64::from(s) / 32768.0).collect();
    for i in (1..signal.len()).rev() {
        signal[i] -= cfg.preemphasis * signal[i - 1];
    }

    let hamming: Vec<f64> = (0..window)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (window - 1) as f64).cos())
        .collect();
    let fbank = mel_filterbank(cfg.num_filters, fft_len, sr);
    let nf = cfg.num_filters as f64;
    let dct: Vec<Vec<f64>> = (0..cfg.num_ceps)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / nf).sqrt()
            } else {
                (2.0 / nf).sqrt()
            };
            (0..cfg.num_filters)
                .map(|m| scale * (PI * k as f64 * (m as f64 + 0.5) / nf).cos())
                .collect()
        })
        .collect();

    let fft = FftPlanner::new().plan_fft_forward(fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut data = Vec::with_capacity(frames * cfg.num_ceps);
    let mut logmel = vec![0.0; cfg.num_filters];
    for f in 0..frames {
        let start = f * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let re = if i < window {
                signal[start + i] * hamming[i]
            } else {
                0.0
            };
            *c = Complex::new(re, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..fft_len / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();
        for (out, filt) in logmel.iter_mut().zip(&fbank) {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            *out = e.max(cfg.log_floor).ln();
        }
        data.extend(
            dct.iter()
                .map(|basis| basis.iter().zip(&logmel).map(|(b, l)| b * l).sum::<f64>() as f32),
        );
    }
    FeatureMatrix::new(utterance_id, frames, cfg.num_ceps, data)
}

/// Reads a 16-bit mono WAV file.
pub fn read_wav(path: &Path) -> Result<(Vec<i16>, u32)> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::Parse(format!(
            "{}: need 16-bit mono, got {} channels x {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

fn regression_deltas(rows: &[f32], frames: usize, dims: usize, window: usize) -> Vec<f32> {
    let denom: f32 = 2.0 * (1..=window).map(|d| (d * d) as f32).sum::<f32>();
    let at = |t: isize, k: usize| rows[(t.clamp(0, frames as isize - 1) as usize) * dims + k];
    let mut out = vec![0.0; frames * dims];
    for t in 0..frames {
        for k in 0..dims {
            let mut acc = 0.0;
            for d in 1..=window {
                let d_i = d as isize;
                acc += d as f32 * (at(t as isize + d_i, k) - at(t as isize - d_i, k));
            }
            out[t * dims + k] = acc / denom;
        }
    }
    out
}

/// Appends first and second order regression deltas: `[static, delta, delta-delta]`.
pub fn add_deltas(f: &FeatureMatrix, window: usize) -> Result<FeatureMatrix> {
    if window == 0 {
        return Err(Error::Config("delta window must be >= 1".into()));
    }
    let (n, d) = (f.frames, f.dims);
    if n == 0 {
        return FeatureMatrix::new(f.utterance_id.clone(), 0, 3 * d, Vec::new());
    }
    let delta = regression_deltas(&f.data, n, d, window);
    let delta2 = regression_deltas(&delta, n, d, window);
    let mut data = Vec::with_capacity(n * d * 3);
    for t in 0..n {
        data.extend_from_slice(f.row(t));
        data.extend_from_slice(&delta[t * d..(t + 1) * d]);
        data.extend_from_slice(&delta2[t * d..(t + 1) * d]);
    }
    FeatureMatrix::new(f.utterance_id.clone(), n, 3 * d, data)
}

/// Symmetric-or-not frame context around each center frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameContextConfig {
    pub left: usize,
    pub right: usize,
    pub base_dims: usize,
}

impl FrameContextConfig {
    pub fn width(&self) -> usize {
        self.left + self.right + 1
    }

    pub fn stacked_dims(&self) -> usize {
        self.base_dims * self.width()
    }
}

impl Default for FrameContextConfig {
    fn default() -> Self {
        FrameContextConfig {
            left: 6,
            right: 6,
            base_dims: 39,
        }
    }
}

#[inline]
fn clamp_frame(t: isize, frames: usize) -> usize {
    t.clamp(0, frames as isize - 1) as usize
}

/// Writes the stacked vector `[t-left, ..., t, ..., t+right]` for frame `t` into `out`.
pub fn stack_frame(f: &FeatureMatrix, t: usize, left: usize, right: usize, out: &mut [f32]) {
    let d = f.dims;
    for (c, off) in (-(left as isize)..=right as isize).enumerate() {
        let src = clamp_frame(t as isize + off, f.frames);
        out[c * d..(c + 1) * d].copy_from_slice(f.row(src));
    }
}

/// Writes the `[dims x (left+right+1)]` image centred on frame `t` into `out`.
pub fn image_frame(f: &FeatureMatrix, t: usize, left: usize, right: usize, out: &mut [f32]) {
    let width = left + right + 1;
    for c in 0..width {
        let src = f.row(clamp_frame(
            t as isize - left as isize + c as isize,
            f.frames,
        ));
        for (k, &v) in src.iter().enumerate() {
            out[k * width + c] = v;
        }
    }
}

pub fn stack_context(f: &FeatureMatrix, cfg: &FrameContextConfig) -> Result<FeatureMatrix> {
    if f.dims != cfg.base_dims {
        return Err(Error::Shape(format!(
            "{}: {} dims, context config expects {}",
            f.utterance_id, f.dims, cfg.base_dims
        )));
    }
    let out_dims = cfg.stacked_dims();
    let mut data = vec![0.0; f.frames * out_dims];
    for (t, chunk) in data.chunks_exact_mut(out_dims).enumerate() {
        stack_frame(f, t, cfg.left, cfg.right, chunk);
    }
    FeatureMatrix::new(f.utterance_id.clone(), f.frames, out_dims, data)
}

/// A single-channel `[rows x cols]` patch of features around one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub utterance_id: String,
    pub center_frame: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureImage {
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

pub fn extract_images(f: &FeatureMatrix, left: usize, right: usize) -> Vec<FeatureImage> {
    let cols = left + right + 1;
    (0..f.frames)
        .map(|t| {
            let mut data = vec![0.0; f.dims * cols];
            image_frame(f, t, left, right, &mut data);
            FeatureImage {
                utterance_id: f.utterance_id.clone(),
                center_frame: t,
                rows: f.dims,
                cols,
                data,
            }
        })
        .collect()
}

/// Per-dimension standardisation with statistics from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanVarNorm {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl MeanVarNorm {
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.dims];
                sq = vec![0.0; m.dims];
            } else if sum.len() != m.dims {
                return Err(Error::Shape(
                    "inconsistent dims while fitting normalisation".into(),
                ));
            }
            for row in m.rows() {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += f64::from(v);
                    sq[k] += f64::from(v) * f64::from(v);
                }
            }
            n += m.frames;
        }
        if n == 0 {
            return Err(Error::EmptySplit("normalisation statistics".into()));
        }
        let nf = n as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / nf) as f32).collect();
        let inv_std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let var = (q / nf - (s / nf).powi(2)).max(1e-12);
                (1.0 / var.sqrt()) as f32
            })
            .collect();
        Ok(MeanVarNorm { mean, inv_std })
    }

    pub fn apply(&self, f: &FeatureMatrix) -> Result<FeatureMatrix> {
        if f.dims != self.mean.len() {
            return Err(Error::Shape(format!(
                "{}: {} dims, normaliser has {}",
                f.utterance_id,
                f.dims,
                self.mean.len()
            )));
        }
        let mut out = f.clone();
        for row in out.data.chunks_exact_mut(f.dims) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        Ok(out)
    }
}

pub const ARCHIVE_MAGIC: [u8; 4] = *b"QBE1";

pub fn write_archive_to<W: Write>(features: &[FeatureMatrix], mut w: W) -> Result<()> {
    let mut seen = HashSet::new();
    for f in features {
        if !seen.insert(f.utterance_id.as_str()) {
            return Err(Error::DuplicateId(f.utterance_id.clone()));
        }
    }
    w.write_all(&ARCHIVE_MAGIC)?;
    w.write_all(&(features.len() as u32).to_le_bytes())?;
    for f in features {
        let id = f.utterance_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Shape(format!("utterance id too long: {}", id.len())))?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(f.frames as u32).to_le_bytes())?;
        w.write_all(&(f.dims as u32).to_le_bytes())?;
        for v in &f.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_archive(features: &[FeatureMatrix], path: &Path) -> Result<()> {
    write_archive_to(features, BufWriter::new(File::create(path)?))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_archive_from<R: Read>(mut r: R) -> Result<Vec<FeatureMatrix>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::BadMagic {
            expected: ARCHIVE_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(&mut r, "record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let what = format!("record {i}");
        let mut len = [0u8; 2];
        read_exact_or(&mut r, &mut len, &what)?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(&mut r, &mut id, &what)?;
        let id =
            String::from_utf8(id).map_err(|_| Error::Parse(format!("{what}: id is not UTF-8")))?;
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let frames = read_u32(&mut r, &what)? as usize;
        let dims = read_u32(&mut r, &what)? as usize;
        let mut raw = vec![0u8; frames * dims * 4];
        read_exact_or(&mut r, &mut raw, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(FeatureMatrix::new(id, frames, dims, data)?);
    }
    Ok(out)
}

pub fn read_archive(path: &Path) -> Result<Vec<FeatureMatrix>> {
    read_archive_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, sr: u32, secs: f64) -> Vec<i16> {
        let n = (f64::from(sr) * secs) as usize;
        (0..n)
            .map(|i| (8000.0 * (2.0 * PI * freq * i as f64 / f64::from(sr)).sin()) as i16)
            .collect()
    }

    fn ramp(frames: usize, dims: usize, slope: f32) -> FeatureMatrix {
        let data = (0..frames)
            .flat_map(|t| (0..dims).map(move |k| slope * t as f32 + k as f32))
            .collect();
        FeatureMatrix::new("ramp", frames, dims, data).unwrap()
    }

    #[test]
    fn mfcc_frame_count_one_second() {
        let f = compute_mfcc("s", &sine(440.0, 16000, 1.0), 16000, &MfccConfig::default()).unwrap();
        // (16000 - 400) / 160 + 1
        assert_eq!(f.frames, 98);
        assert_eq!(f.dims, 13);
    }

    #[test]
    fn mfcc_silence_frames_identical() {
        let f = compute_mfcc("z", &vec![0i16; 8000], 16000, &MfccConfig::default()).unwrap();
        for t in 1..f.frames {
            assert_eq!(f.row(t), f.row(0));
        }
    }

    #[test]
    fn mfcc_distinguishes_pitches() {
        let cfg = MfccConfig::default();
        let a = compute_mfcc("a", &sine(440.0, 16000, 0.5), 16000, &cfg).unwrap();
        let b = compute_mfcc("b", &sine(880.0, 16000, 0.5), 16000, &cfg).unwrap();
        let max_diff = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max);
        assert!(max_diff > 1e-6);
    }

    #[test]
    fn mfcc_errors() {
        let cfg = MfccConfig::default();
        assert!(matches!(
            compute_mfcc("x", &[0; 399], 16000, &cfg),
            Err(Error::InputTooShort { window: 400, .. })
        ));
        assert!(matches!(
            compute_mfcc("x", &[0; 4000], 44100, &cfg),
            Err(Error::SampleRate(44100))
        ));
        let f = compute_mfcc("x", &sine(300.0, 8000, 0.25), 8000, &cfg).unwrap();
        assert_eq!(f.frames, (2000 - 200) / 80 + 1);
    }

    #[test]
    fn mfcc_deterministic() {
        let s = sine(523.0, 16000, 0.3);
        let a = compute_mfcc("d", &s, 16000, &MfccConfig::default()).unwrap();
        let b = compute_mfcc("d", &s, 16000, &MfccConfig::default()).unwrap();
        let bytes = |m: &FeatureMatrix| {
            m.data
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<_>>()
        };
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn deltas_of_constant_are_zero() {
        let f = FeatureMatrix::new("c", 7, 2, vec![3.5; 14]).unwrap();
        let d = add_deltas(&f, 2).unwrap();
        assert_eq!(d.dims, 6);
        for row in d.rows() {
            assert_eq!(&row[2..], &[0.0; 4]);
        }
        let one = add_deltas(
            &FeatureMatrix::new("o", 1, 3, vec![1.0, -2.0, 4.0]).unwrap(),
            2,
        )
        .unwrap();
        assert_eq!(one.data, vec![1.0, -2.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn delta_of_ramp_is_slope_in_interior() {
        // sum_d d * (2 d s) / (2 sum d^2) = s for any interior frame.
        let d = add_deltas(&ramp(12, 3, 0.75), 2).unwrap();
        for t in 2..10 {
            for k in 0..3 {
                assert!((d.row(t)[3 + k] - 0.75).abs() < 1e-5);
            }
        }
        // second derivative vanishes once the delta itself is flat
        for t in 4..8 {
            assert!(d.row(t)[6].abs() < 1e-5);
        }
    }

    #[test]
    fn stacking_dims_and_order() {
        let f = ramp(5, 39, 1.0);
        let s = stack_context(&f, &FrameContextConfig::default()).unwrap();
        assert_eq!(s.dims, 507);
        let id = stack_context(
            &f,
            &FrameContextConfig {
                left: 0,
                right: 0,
                base_dims: 39,
            },
        )
        .unwrap();
        assert_eq!(id, f);
        // frame 2 with left=right=1: blocks are frames 1,2,3
        let s1 = stack_context(
            &f,
            &FrameContextConfig {
                left: 1,
                right: 1,
                base_dims: 39,
            },
        )
        .unwrap();
        assert_eq!(&s1.row(2)[..39], f.row(1));
        assert_eq!(&s1.row(2)[78..], f.row(3));
        assert!(stack_context(
            &f,
            &FrameContextConfig {
                left: 1,
                right: 1,
                base_dims: 13
            }
        )
        .is_err());
    }

    #[test]
    fn stacking_single_frame_replicates() {
        let f = FeatureMatrix::new("one", 1, 39, (0..39).map(|v| v as f32).collect()).unwrap();
        let s = stack_context(&f, &FrameContextConfig::default()).unwrap();
        for block in s.data.chunks_exact(39) {
            assert_eq!(block, f.row(0));
        }
    }

    #[test]
    fn images_shape_and_columns() {
        let f = ramp(30, 39, 1.0);
        let imgs = extract_images(&f, 12, 12);
        assert_eq!(imgs.len(), 30);
        assert_eq!((imgs[0].rows, imgs[0].cols), (39, 25));
        // column c holds frame t - 12 + c (clamped)
        assert_eq!(imgs[15].at(4, 0), f.row(3)[4]);
        assert_eq!(imgs[15].at(4, 24), f.row(27)[4]);
        assert_eq!(imgs[0].at(7, 3), f.row(0)[7]);

        let c = FeatureMatrix::new("c", 4, 39, vec![2.0; 156]).unwrap();
        for img in extract_images(&c, 12, 12) {
            for r in 0..39 {
                assert!((0..25).all(|col| img.at(r, col) == img.at(r, 0)));
            }
        }
    }

    #[test]
    fn archive_errors() {
        let mut buf = Vec::new();
        write_archive_to(&[], &mut buf).unwrap();
        assert_eq!(buf, [b'Q', b'B', b'E', b'1', 0, 0, 0, 0]);
        assert!(read_archive_from(&buf[..]).unwrap().is_empty());

        let f = ramp(3, 2, 1.0);
        let mut buf = Vec::new();
        write_archive_to(&[f.clone()], &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_archive_from(&bad[..]),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            read_archive_from(&buf[..buf.len() - 1]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            write_archive_to(&[f.clone(), f.clone()], &mut Vec::new()),
            Err(Error::DuplicateId(_))
        ));
        // hand-crafted duplicate on the read side
        let mut dup = buf.clone();
        dup[4] = 2;
        dup.extend_from_slice(&buf[8..]);
        assert!(matches!(
            read_archive_from(&dup[..]),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn stacking_centre_block_projects_back() {
        let f = ramp(9, 4, -0.3);
        let cfg = FrameContextConfig {
            left: 3,
            right: 2,
            base_dims: 4,
        };
        let s = stack_context(&f, &cfg).unwrap();
        for t in 0..f.frames {
            assert_eq!(&s.row(t)[12..16], f.row(t));
        }
    }

    fn matrix_strategy() -> impl Strategy<Value = FeatureMatrix> {
        (1usize..12, 1usize..6).prop_flat_map(|(n, d)| {
            proptest::collection::vec(-1e6f32..1e6, n * d)
                .prop_map(move |data| FeatureMatrix::new("p", n, d, data).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn archive_round_trip_bit_exact(mats in proptest::collection::vec(matrix_strategy(), 0..4)) {
            let mats: Vec<_> = mats.into_iter().enumerate().map(|(i, mut m)| {
                m.utterance_id = format!("utt_{i}");
                m
            }).collect();
            let mut buf = Vec::new();
            write_archive_to(&mats, &mut buf).unwrap();
            let back = read_archive_from(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), mats.len());
            for (a, b) in mats.iter().zip(&back) {
                prop_assert_eq!(&a.utterance_id, &b.utterance_id);
                let bits = |m: &FeatureMatrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
            }
        }

        #[test]
        fn deltas_translation_equivariant(m in matrix_strategy(), k in -10f32..10.0) {
            let m = FeatureMatrix::new("t", m.frames, m.dims, m.data.iter().map(|v| v / 1e5).collect()).unwrap();
            let shifted = FeatureMatrix::new("t", m.frames, m.dims, m.data.iter().map(|v| v + k).collect()).unwrap();
            let a = add_deltas(&m, 2).unwrap();
            let b = add_deltas(&shifted, 2).unwrap();
            let d = m.dims;
            for (ra, rb) in a.rows().zip(b.rows()) {
                for j in 0..d {
                    prop_assert!((rb[j] - ra[j] - k).abs() < 1e-4);
                }
                for j in d..3 * d {
                    prop_assert!((rb[j] - ra[j]).abs() < 1e-4);
                }
            }
        }
    }
}
