//! Z-normalisation, Cnxe_min, MTWV and the DET curve for a synthetic score
//! table where targets score about one unit higher than non-targets.
//!
//!     cargo run --example evaluate_scores

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use qbe::eval::{evaluate, znorm, EvalConfig, TrialLabels};
use qbe::search::ScoreTable;

fn main() -> qbe::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut raw = ScoreTable::default();
    let mut labels = TrialLabels::default();
    for q in 0..20 {
        // each query has its own score offset, which z-norm removes
        let offset = Normal::new(0.0, 2.0).unwrap().sample(&mut rng);
        for d in 0..50 {
            let target = d % 10 == q % 10;
            let mean = offset + if target { 1.0 } else { 0.0 };
            let s = Normal::new(mean, 0.6).unwrap().sample(&mut rng);
            raw.insert(&format!("q{q:02}"), &format!("d{d:02}"), s)?;
            labels.insert(&format!("q{q:02}"), &format!("d{d:02}"), target)?;
        }
    }
    let cfg = EvalConfig::default();
    let before = evaluate(&raw, &labels, &cfg)?;
    let (z, flagged) = znorm(&raw);
    let after = evaluate(&z, &labels, &cfg)?;
    println!(
        "{} trials, {} targets; {} queries with constant scores",
        raw.len(),
        labels.target_count(),
        flagged.len()
    );
    println!(
        "raw:    cnxe_min {:.4}  mtwv {:.4}",
        before.cnxe_min, before.mtwv
    );
    println!(
        "z-norm: cnxe_min {:.4}  mtwv {:.4} at threshold {:.3}",
        after.cnxe_min, after.mtwv, after.mtwv_threshold
    );
    println!("\nreport:\n{}", after.to_text(&cfg));
    println!("DET (every 100th point):");
    for p in after.det_points.iter().step_by(100) {
        println!(
            "  threshold {:8.3}  p_fa {:.3}  p_miss {:.3}",
            p.threshold, p.p_fa, p.p_miss
        );
    }
    Ok(())
}
