//! Subsequence DTW: find a query inside a longer document, then score a
//! small query/document set.
//!
//!     cargo run --example dtw_search

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qbe::frontend::FeatureMatrix;
use qbe::search::{dtw_subsequence, search_all_timed, similarity, DtwConfig};

fn random_frames(id: &str, frames: usize, dims: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    FeatureMatrix::new(
        id,
        frames,
        dims,
        (0..frames * dims)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// The query with every frame repeated or dropped now and then: a spoken
/// instance at a different rate.
fn warped_copy(q: &FeatureMatrix, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = Vec::new();
    for t in 0..q.frames {
        let repeats = match rng.gen_range(0..6) {
            0 => 0,
            1 => 2,
            _ => 1,
        };
        for _ in 0..repeats {
            out.extend(q.row(t).iter().map(|v| v + rng.gen_range(-0.2..0.2)));
        }
    }
    out
}

fn main() -> qbe::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = 16;
    let query = random_frames("query", 20, dims, &mut rng);
    let mut data = random_frames("doc", 300, dims, &mut rng).data;
    let copy = warped_copy(&query, &mut rng);
    let at = 120;
    data.splice(at * dims..at * dims, copy.iter().copied());
    let doc = FeatureMatrix::new("doc", data.len() / dims, dims, data)?;

    let cfg = DtwConfig::default();
    let s = similarity(&query, &doc)?;
    let m = dtw_subsequence(&s, &cfg)?;
    println!(
        "query of {} frames planted at {at} ({} frames long) in a {}-frame document",
        query.frames,
        copy.len() / dims,
        doc.frames
    );
    println!(
        "best match: frames {}..={} score {:.4}, path of {} cells",
        m.doc_start,
        m.doc_end,
        m.score,
        m.path.len()
    );

    let docs: Vec<FeatureMatrix> = (0..6)
        .map(|i| random_frames(&format!("noise_{i}"), 300, dims, &mut rng))
        .chain(std::iter::once(doc))
        .collect();
    let run = search_all_timed(std::slice::from_ref(&query), &docs, &cfg, 0)?;
    println!(
        "{} pairs in {:.2} ms on {} threads:",
        run.table.len(),
        run.elapsed.as_secs_f64() * 1e3,
        run.threads
    );
    print!("{}", run.table.to_tsv());
    Ok(())
}
