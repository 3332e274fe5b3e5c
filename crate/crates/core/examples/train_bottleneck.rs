//! Trains a small multilingual FFN with one head per language on the
//! synthetic corpus and extracts 32-dimensional bottleneck features.
//!
//!     cargo run --release --example train_bottleneck

use qbe::corpus::{synth_corpus, SyntheticCorpusConfig, Utterance};
use qbe::frontend::{add_deltas, FeatureMatrix, MeanVarNorm};
use qbe::models::{build_ffn, FfnConfig, LanguageData, LanguageSpec, TrainConfig};

fn main() -> qbe::Result<()> {
    let corpus = synth_corpus(&SyntheticCorpusConfig::default())?;
    let deltas = |u: &[Utterance]| -> qbe::Result<Vec<FeatureMatrix>> {
        u.iter().map(|u| add_deltas(&u.features, 2)).collect()
    };
    let train_feats: Vec<Vec<FeatureMatrix>> = corpus
        .train
        .iter()
        .map(|t| deltas(t))
        .collect::<qbe::Result<_>>()?;
    let norm = MeanVarNorm::fit(train_feats.iter().flatten())?;

    let data = |split: &[Vec<Utterance>]| -> qbe::Result<Vec<LanguageData>> {
        split
            .iter()
            .zip(&corpus.inventories)
            .map(|(utts, inv)| {
                let feats = deltas(utts)?
                    .iter()
                    .map(|f| norm.apply(f))
                    .collect::<qbe::Result<Vec<_>>>()?;
                let labels = utts
                    .iter()
                    .map(|u| inv.labels(&u.phones))
                    .collect::<qbe::Result<Vec<_>>>()?;
                LanguageData::new(inv.language.clone(), feats, labels)
            })
            .collect()
    };
    let (train, dev) = (data(&corpus.train)?, data(&corpus.dev)?);
    let specs: Vec<LanguageSpec> = corpus
        .inventories
        .iter()
        .map(|inv| LanguageSpec::new(inv.language.clone(), inv.classes()))
        .collect();

    let cfg = FfnConfig {
        hidden_width: 128,
        post_bottleneck_width: 128,
        base_dims: train[0].utterances[0].dims,
        ..FfnConfig::default()
    };
    let mut model = build_ffn(&specs, &cfg, 1)?;
    let params = model.count_params();
    println!("{} heads, {} parameters:", specs.len(), params.total);
    for item in &params.items {
        println!("  {:<40}{:>9}", item.name, item.count);
    }

    let report = model.train(
        &train,
        &dev,
        &TrainConfig {
            epochs: 8,
            seed: 1,
            ..TrainConfig::default()
        },
    )?;
    println!("epoch  train_loss  dev_loss  lr");
    for (e, ((t, d), lr)) in report
        .train_loss
        .iter()
        .zip(&report.dev_loss)
        .zip(&report.learning_rate)
        .enumerate()
    {
        println!("{e:5}  {t:10.4}  {d:8.4}  {lr:.1e}");
    }
    for d in &dev {
        let (mut ok, mut n) = (0, 0);
        for (u, l) in d.utterances.iter().zip(&d.labels) {
            ok += model
                .classify(&d.language, u)?
                .iter()
                .zip(l)
                .filter(|(p, c)| p == c)
                .count();
            n += l.len();
        }
        println!(
            "{} dev frame accuracy {:.3}",
            d.language,
            ok as f64 / n as f64
        );
    }

    let doc = norm.apply(&add_deltas(&corpus.documents[0].features, 2)?)?;
    let bn = model.extract_bottleneck(&doc)?;
    println!(
        "{}: {} x {} features -> {} x {} bottleneck",
        doc.utterance_id, doc.frames, doc.dims, bn.frames, bn.dims
    );
    Ok(())
}
