//! Speech activity detection from phone-posterior streams: frames whose
//! summed silence/noise posterior beats the best speech class are dropped.
//!
//!     cargo run --example speech_activity

use qbe::frontend::FeatureMatrix;
use qbe::sad::{admit, filter_frames, nonspeech_score, speech_mask, PosteriorStream, SadConfig};

fn main() -> qbe::Result<()> {
    // classes: 0 = silence, 1 = noise, 2..5 = phones
    let frames: [[f32; 5]; 8] = [
        [0.80, 0.10, 0.05, 0.03, 0.02],
        [0.60, 0.20, 0.10, 0.05, 0.05],
        [0.10, 0.05, 0.70, 0.10, 0.05],
        [0.05, 0.05, 0.10, 0.75, 0.05],
        [0.20, 0.20, 0.25, 0.20, 0.15],
        [0.05, 0.05, 0.05, 0.05, 0.80],
        [0.30, 0.40, 0.10, 0.10, 0.10],
        [0.90, 0.05, 0.02, 0.02, 0.01],
    ];
    let probs: Vec<f32> = frames.iter().flatten().copied().collect();
    let a = PosteriorStream::new("utt", 5, probs.clone(), vec![0, 1])?;
    // a second, less confident recogniser
    let flat: Vec<f32> = probs.iter().map(|p| 0.5 * p + 0.1).collect();
    let b = PosteriorStream::new("utt", 5, flat, vec![0, 1])?;
    let streams = [a, b];

    let ns = nonspeech_score(&streams)?;
    for bias in [-0.2, 0.0, 0.2] {
        let cfg = SadConfig {
            bias,
            ..SadConfig::default()
        };
        let mask = speech_mask(&streams, &cfg)?;
        let marks: String = mask.iter().map(|&k| if k { '#' } else { '.' }).collect();
        println!(
            "bias {bias:+.1}: {marks}  ({} of {} frames kept)",
            mask.iter().filter(|&&k| k).count(),
            mask.len()
        );
    }
    println!(
        "non-speech score per frame: {:?}",
        ns.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
    );

    let feats = FeatureMatrix::new("utt", 8, 2, (0..16).map(|i| i as f32).collect())?;
    let cfg = SadConfig::default();
    let kept = filter_frames(&feats, &streams, &cfg)?;
    println!(
        "{} frames survive; admitted for search: {} (needs at least {})",
        kept.frames,
        admit(&kept, &cfg),
        cfg.min_frames
    );
    Ok(())
}
