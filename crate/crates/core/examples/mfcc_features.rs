//! MFCCs, deltas and context stacking for a synthetic two-tone WAV file.
//!
//!     cargo run --example mfcc_features [-- path.wav]

use std::env;
use std::f64::consts::PI;
use std::path::PathBuf;

use qbe::frontend::{
    add_deltas, compute_mfcc, read_wav, stack_context, FrameContextConfig, MfccConfig,
};

fn write_tones(path: &PathBuf, rate: u32) -> Result<(), hound::Error> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    // half a second at 440 Hz, then half a second at 1.5 kHz
    for n in 0..rate {
        let f = if n < rate / 2 { 440.0 } else { 1500.0 };
        let s = 0.3 * (2.0 * PI * f * n as f64 / rate as f64).sin();
        w.write_sample((s * i16::MAX as f64) as i16)?;
    }
    w.finalize()
}

fn main() -> qbe::Result<()> {
    let path = match env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let p = env::temp_dir().join("qbe-tones.wav");
            write_tones(&p, 16000).map_err(|e| qbe::Error::Parse(e.to_string()))?;
            p
        }
    };
    let (pcm, rate) = read_wav(&path)?;
    let mfcc = compute_mfcc("tones", &pcm, rate, &MfccConfig::default())?;
    println!(
        "{}: {} samples at {rate} Hz -> {} frames x {} cepstra",
        path.display(),
        pcm.len(),
        mfcc.frames,
        mfcc.dims
    );

    let full = add_deltas(&mfcc, 2)?;
    println!(
        "with deltas and delta-deltas: {} x {}",
        full.frames, full.dims
    );
    let stacked = stack_context(&full, &FrameContextConfig::default())?;
    println!("stacked +-6 frames: {} x {}", stacked.frames, stacked.dims);

    let show = |t: usize| {
        let row: Vec<String> = mfcc.row(t)[..6]
            .iter()
            .map(|v| format!("{v:7.2}"))
            .collect();
        println!("  frame {t:3}: {}", row.join(" "));
    };
    println!("first cepstra either side of the tone change:");
    show(mfcc.frames / 4);
    show(3 * mfcc.frames / 4);
    Ok(())
}
