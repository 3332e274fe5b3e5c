//! Synthetic multilingual corpus with planted query occurrences.
//!
//! Every phone is a spherical Gaussian over a 13-dim static feature space
//! (deltas are added later by the frontend). A fraction of each language's
//! inventory comes from a pool shared by all languages. The search
//! collection speaks a language whose phones are drawn from the union of the
//! training inventories, so a recogniser trained on more languages has seen
//! more of the phones it must tell apart.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval::TrialLabels;
use crate::frontend::{read_archive, write_archive, FeatureMatrix};
use crate::sad::{PosteriorStream, StreamSet};

/// Global phone id of silence.
pub const SILENCE: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusConfig {
    pub languages: usize,
    pub phones_per_language: usize,
    pub shared_phone_fraction: f64,
    pub static_dims: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub documents: usize,
    pub queries: usize,
    pub plant_rate: f64,
    pub phones_per_utterance: (usize, usize),
    pub query_phones: (usize, usize),
    pub frames_per_phone: (usize, usize),
    pub emission_noise: f64,
    /// Per-utterance offset added to every frame.
    pub speaker_noise: f64,
    pub silence_rate: f64,
    pub posterior_streams: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            languages: 3,
            phones_per_language: 12,
            shared_phone_fraction: 0.5,
            static_dims: 13,
            train_utterances: 40,
            dev_utterances: 8,
            documents: 60,
            queries: 30,
            plant_rate: 0.1,
            phones_per_utterance: (12, 24),
            query_phones: (3, 8),
            frames_per_phone: (4, 9),
            emission_noise: 1.5,
            speaker_noise: 2.5,
            silence_rate: 0.15,
            posterior_streams: 3,
            seed: 1,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn feature_dims(&self) -> usize {
        3 * self.static_dims
    }

    pub fn shared_phones(&self) -> usize {
        (self.shared_phone_fraction * self.phones_per_language as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.languages == 0 {
            return bad("at least one language is required".into());
        }
        if self.phones_per_language < 3 {
            return bad(format!(
                "{} phones per language, need at least 3",
                self.phones_per_language
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_phone_fraction) {
            return bad(format!(
                "shared_phone_fraction {} outside [0, 1]",
                self.shared_phone_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.plant_rate) {
            return bad(format!("plant_rate {} outside [0, 1)", self.plant_rate));
        }
        if !(0.0..1.0).contains(&self.silence_rate) {
            return bad(format!("silence_rate {} outside [0, 1)", self.silence_rate));
        }
        for (name, (lo, hi)) in [
            ("phones_per_utterance", self.phones_per_utterance),
            ("query_phones", self.query_phones),
            ("frames_per_phone", self.frames_per_phone),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range {lo}..={hi} is empty"));
            }
        }
        if self.query_phones.1 > self.phones_per_utterance.0 {
            return bad(format!(
                "queries of up to {} phones do not fit documents of {} phones",
                self.query_phones.1, self.phones_per_utterance.0
            ));
        }
        if self.static_dims == 0 || self.train_utterances == 0 || self.dev_utterances == 0 {
            return bad("empty feature space or training split".into());
        }
        if self.documents == 0 || self.queries == 0 || self.posterior_streams == 0 {
            return bad("no documents, queries or posterior streams".into());
        }
        if !(self.emission_noise >= 0.0 && self.speaker_noise >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        Ok(())
    }
}

/// Static features plus the true global phone id of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: FeatureMatrix,
    pub phones: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inventory {
    pub language: String,
    /// Global phone ids; the training label of `phones[k]` is `k + 1`.
    pub phones: Vec<usize>,
}

impl Inventory {
    pub fn classes(&self) -> usize {
        self.phones.len() + 1
    }

    /// Frame labels for the language's own head: 0 is silence.
    pub fn labels(&self, phones: &[usize]) -> Result<Vec<usize>> {
        let local: HashMap<usize, usize> = self
            .phones
            .iter()
            .enumerate()
            .map(|(k, &p)| (p, k + 1))
            .collect();
        phones
            .iter()
            .map(|&p| {
                if p == SILENCE {
                    Ok(0)
                } else {
                    local.get(&p).copied().ok_or_else(|| {
                        Error::Shape(format!("phone {p} is not in {}", self.language))
                    })
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Planting {
    pub query: String,
    pub document: String,
    pub start_frame: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: SyntheticCorpusConfig,
    pub inventories: Vec<Inventory>,
    /// Row `p` is the mean of global phone `p`.
    pub phone_means: FeatureMatrix,
    pub train: Vec<Vec<Utterance>>,
    pub dev: Vec<Vec<Utterance>>,
    pub documents: Vec<Utterance>,
    pub queries: Vec<Utterance>,
    pub plantings: Vec<Planting>,
    pub labels: TrialLabels,
    pub document_streams: StreamSet,
    pub query_streams: StreamSet,
}

struct Renderer<'a> {
    cfg: &'a SyntheticCorpusConfig,
    means: &'a FeatureMatrix,
}

impl Renderer<'_> {
    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    /// Renders a phone sequence with fresh durations and noise for one speaker.
    fn render(
        &self,
        id: &str,
        seq: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Utterance, Vec<usize>)> {
        let d = self.cfg.static_dims;
        let speaker: Vec<f64> = (0..d)
            .map(|_| Self::gauss(rng) * self.cfg.speaker_noise)
            .collect();
        let (lo, hi) = self.cfg.frames_per_phone;
        let mut data = Vec::new();
        let mut phones = Vec::new();
        let mut starts = Vec::with_capacity(seq.len());
        for &p in seq {
            starts.push(phones.len());
            for _ in 0..rng.gen_range(lo..=hi) {
                for (k, &m) in self.means.row(p).iter().enumerate() {
                    data.push(
                        (f64::from(m) + speaker[k] + Self::gauss(rng) * self.cfg.emission_noise)
                            as f32,
                    );
                }
                phones.push(p);
            }
        }
        let features = FeatureMatrix::new(id, phones.len(), d, data)?;
        Ok((Utterance { features, phones }, starts))
    }

    /// A phone string from `pool` with silences sprinkled between phones and
    /// at both ends.
    fn sentence(&self, pool: &[usize], len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut seq = vec![SILENCE];
        for _ in 0..len {
            seq.push(*pool.choose(rng).expect("non-empty inventory"));
            if rng.gen::<f64>() < self.cfg.silence_rate {
                seq.push(SILENCE);
            }
        }
        if seq.last() != Some(&SILENCE) {
            seq.push(SILENCE);
        }
        seq
    }
}

fn posterior_streams(
    cfg: &SyntheticCorpusConfig,
    utts: &[Utterance],
    rng: &mut ChaCha8Rng,
) -> Result<StreamSet> {
    let mut streams = Vec::with_capacity(cfg.posterior_streams);
    for k in 0..cfg.posterior_streams {
        // each "recogniser" has its own phone set; classes 0 and 1 are silence and noise
        let speech = 6 + 2 * k;
        let classes = speech + 2;
        let mut map = HashMap::new();
        for u in utts {
            let mut probs = Vec::with_capacity(u.phones.len() * classes);
            for &p in &u.phones {
                let truth = if p == SILENCE {
                    0
                } else {
                    2 + (p * (k + 7)) % speech
                };
                let logits: Vec<f64> = (0..classes)
                    .map(|c| if c == truth { 3.0 } else { 0.0 } + Renderer::gauss(rng))
                    .collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                probs.extend(e.iter().map(|v| (v / z) as f32));
            }
            let id = u.features.utterance_id.clone();
            map.insert(
                id.clone(),
                PosteriorStream::new(id, classes, probs, vec![0, 1])?,
            );
        }
        streams.push(map);
    }
    Ok(StreamSet { streams })
}

pub fn language_name(l: usize) -> String {
    format!("L{l}")
}

pub fn synth_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.phones_per_language;
    let shared = cfg.shared_phones();
    let total = 1 + shared + cfg.languages * (k - shared);

    let d = cfg.static_dims;
    let mut means = Vec::with_capacity(total * d);
    // silence: low-energy frames around a fixed direction
    means.extend((0..d).map(|_| (Renderer::gauss(&mut rng) * 0.3) as f32));
    means.extend((d..total * d).map(|_| Renderer::gauss(&mut rng) as f32));
    let phone_means = FeatureMatrix::new("phone_means", total, d, means)?;

    let inventories: Vec<Inventory> = (0..cfg.languages)
        .map(|l| {
            let own = 1 + shared + l * (k - shared);
            Inventory {
                language: language_name(l),
                phones: (1..=shared).chain(own..own + k - shared).collect(),
            }
        })
        .collect();
    let union: Vec<usize> = (1..total).collect();
    let r = Renderer {
        cfg,
        means: &phone_means,
    };

    let (plo, phi) = cfg.phones_per_utterance;
    let split = |name: &str, count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Vec<Utterance>>> {
        inventories
            .iter()
            .map(|inv| {
                (0..count)
                    .map(|i| {
                        let len = rng.gen_range(plo..=phi);
                        let seq = r.sentence(&inv.phones, len, rng);
                        Ok(
                            r.render(&format!("{}_{name}_{i:04}", inv.language), &seq, rng)?
                                .0,
                        )
                    })
                    .collect()
            })
            .collect()
    };
    let train = split("train", cfg.train_utterances, &mut rng)?;
    let dev = split("dev", cfg.dev_utterances, &mut rng)?;

    // query phone strings come first so documents can plant them
    let (qlo, qhi) = cfg.query_phones;
    let query_seqs: Vec<Vec<usize>> = (0..cfg.queries)
        .map(|_| {
            let len = rng.gen_range(qlo..=qhi);
            (0..len)
                .map(|_| *union.choose(&mut rng).expect("phones"))
                .collect()
        })
        .collect();
    let targets_per_query = if cfg.plant_rate > 0.0 {
        ((cfg.plant_rate * cfg.documents as f64).round() as usize).clamp(1, cfg.documents)
    } else {
        0
    };
    let mut planted_in: Vec<Vec<usize>> = vec![Vec::new(); cfg.documents];
    for q in 0..cfg.queries {
        let docs: Vec<usize> = (0..cfg.documents).collect();
        for &doc in docs.choose_multiple(&mut rng, targets_per_query) {
            planted_in[doc].push(q);
        }
    }

    let query_id = |q: usize| format!("query_{q:04}");
    let mut documents = Vec::with_capacity(cfg.documents);
    let mut plantings = Vec::new();
    for (i, plants) in planted_in.iter().enumerate() {
        let len = rng.gen_range(plo..=phi);
        let mut seq = r.sentence(&union, len, &mut rng);
        let mut inserted: Vec<(usize, usize)> = Vec::new(); // (query, segment index)
        for &q in plants {
            let at = rng.gen_range(1..seq.len());
            for (_, pos) in inserted.iter_mut().filter(|(_, pos)| *pos >= at) {
                *pos += query_seqs[q].len() + 1;
            }
            let mut block = query_seqs[q].clone();
            block.push(SILENCE);
            seq.splice(at..at, block);
            inserted.push((q, at));
        }
        let id = format!("doc_{i:04}");
        let (utt, starts) = r.render(&id, &seq, &mut rng)?;
        for (q, pos) in inserted {
            plantings.push(Planting {
                query: query_id(q),
                document: id.clone(),
                start_frame: starts[pos],
            });
        }
        documents.push(utt);
    }

    let queries = query_seqs
        .iter()
        .enumerate()
        .map(|(q, s)| {
            let mut seq = vec![SILENCE];
            seq.extend_from_slice(s);
            seq.push(SILENCE);
            Ok(r.render(&query_id(q), &seq, &mut rng)?.0)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut labels = TrialLabels::default();
    for (q, query) in queries.iter().enumerate() {
        for (i, doc) in documents.iter().enumerate() {
            labels.insert(
                &query.features.utterance_id,
                &doc.features.utterance_id,
                planted_in[i].contains(&q),
            )?;
        }
    }
    let document_streams = posterior_streams(cfg, &documents, &mut rng)?;
    let query_streams = posterior_streams(cfg, &queries, &mut rng)?;
    Ok(Corpus {
        config: cfg.clone(),
        inventories,
        phone_means,
        train,
        dev,
        documents,
        queries,
        plantings,
        labels,
        document_streams,
        query_streams,
    })
}

/// Frame-label file: `utterance<TAB>space separated labels` per line.
pub fn write_alignments(path: &Path, rows: &[(String, Vec<usize>)]) -> Result<()> {
    let mut out = String::new();
    for (id, labels) in rows {
        let l: Vec<String> = labels.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{id}\t{}", l.join(" "));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_alignments(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.is_empty()) {
        let (id, labels) = line.split_once('\t').ok_or_else(|| {
            Error::Parse(format!("{}: alignment line without a tab", path.display()))
        })?;
        let labels = labels
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::Parse(format!("label `{v}`"))))
            .collect::<Result<Vec<usize>>>()?;
        if out.insert(id.to_string(), labels).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(out)
}

/// Corpus files written by [`Corpus::write`].
pub mod layout {
    pub const LANGUAGES: &str = "languages.txt";
    pub const MANIFEST: &str = "manifest.txt";
    pub const DOCUMENTS: &str = "documents.qbe";
    pub const QUERIES: &str = "queries.qbe";
    pub const DOCUMENT_STREAMS: &str = "documents.nonspeech.txt";
    pub const QUERY_STREAMS: &str = "queries.nonspeech.txt";
    pub const DOCUMENT_TRUTH: &str = "documents.ali";
    pub const QUERY_TRUTH: &str = "queries.ali";
    pub const PHONE_MEANS: &str = "phone_means.qbe";
    pub const TRIALS: &str = "trials.tsv";

    pub fn features(split: &str, language: &str) -> String {
        format!("{split}_{language}.qbe")
    }

    pub fn alignments(split: &str, language: &str) -> String {
        format!("{split}_{language}.ali")
    }
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut langs = String::new();
        let mut manifest = String::new();
        for (l, inv) in self.inventories.iter().enumerate() {
            let _ = writeln!(langs, "{}\t{}", inv.language, inv.classes());
            for (split, utts) in [("train", &self.train[l]), ("dev", &self.dev[l])] {
                let feats: Vec<FeatureMatrix> = utts.iter().map(|u| u.features.clone()).collect();
                write_archive(&feats, &dir.join(layout::features(split, &inv.language)))?;
                let ali = utts
                    .iter()
                    .map(|u| Ok((u.features.utterance_id.clone(), inv.labels(&u.phones)?)))
                    .collect::<Result<Vec<_>>>()?;
                write_alignments(&dir.join(layout::alignments(split, &inv.language)), &ali)?;
                for u in utts {
                    let _ = writeln!(
                        manifest,
                        "{split}\t{}\t{}",
                        u.features.utterance_id, inv.language
                    );
                }
            }
        }
        fs::write(dir.join(layout::LANGUAGES), langs)?;
        for (name, truth, utts, streams, sidecar, stem) in [
            (
                layout::DOCUMENTS,
                layout::DOCUMENT_TRUTH,
                &self.documents,
                &self.document_streams,
                layout::DOCUMENT_STREAMS,
                "documents",
            ),
            (
                layout::QUERIES,
                layout::QUERY_TRUTH,
                &self.queries,
                &self.query_streams,
                layout::QUERY_STREAMS,
                "queries",
            ),
        ] {
            let feats: Vec<FeatureMatrix> = utts.iter().map(|u| u.features.clone()).collect();
            write_archive(&feats, &dir.join(name))?;
            let ali: Vec<(String, Vec<usize>)> = utts
                .iter()
                .map(|u| (u.features.utterance_id.clone(), u.phones.clone()))
                .collect();
            write_alignments(&dir.join(truth), &ali)?;
            streams.save(&dir.join(sidecar), stem)?;
            for u in utts {
                let _ = writeln!(manifest, "{stem}\t{}\tsearch", u.features.utterance_id);
            }
        }
        for p in &self.plantings {
            let _ = writeln!(
                manifest,
                "planted\t{}\t{}\t{}",
                p.query, p.document, p.start_frame
            );
        }
        fs::write(dir.join(layout::MANIFEST), manifest)?;
        write_archive(
            std::slice::from_ref(&self.phone_means),
            &dir.join(layout::PHONE_MEANS),
        )?;
        self.labels.write(&dir.join(layout::TRIALS))?;
        Ok(())
    }
}

/// `(language, classes)` from a corpus directory.
pub fn read_languages(dir: &Path) -> Result<Vec<(String, usize)>> {
    fs::read_to_string(dir.join(layout::LANGUAGES))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (name, classes) = l
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("language line `{l}`")))?;
            let classes = classes
                .parse()
                .map_err(|_| Error::Parse(format!("class count `{classes}`")))?;
            Ok((name.to_string(), classes))
        })
        .collect()
}

/// Replaces every frame of `truth` with its phone mean: the noise-free
/// rendering an oracle matcher would see.
pub fn oracle_features(id: &str, phones: &[usize], means: &FeatureMatrix) -> Result<FeatureMatrix> {
    let data = phones
        .iter()
        .flat_map(|&p| means.row(p).iter().copied())
        .collect();
    FeatureMatrix::new(id, phones.len(), means.dims, data)
}

pub fn read_phone_means(dir: &Path) -> Result<FeatureMatrix> {
    read_archive(&dir.join(layout::PHONE_MEANS))?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Truncated("empty phone-mean archive".into()))
}
