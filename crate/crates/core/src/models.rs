//! Monolingual and multitask-multilingual bottleneck networks: feed-forward
//! and residual architectures sharing one trunk with a head per language.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::frontend::{image_frame, stack_frame, FeatureMatrix};
use crate::nn::checkpoint::{read_layers, write_layers};
use crate::nn::{
    softmax_xent_scaled, Adam, Layer, LayerSpec, LrSchedule, Mode, Param, ResidualBlockSpec, Rng,
    Tensor,
};

/// Width of the linear bottleneck layer in every architecture.
pub const BOTTLENECK_DIM: usize = 32;

/// Mono-phone class counts of the five training languages (FR, GE, PT, ES, RU).
pub fn reference_class_count(language: &str) -> Option<usize> {
    match language {
        "FR" => Some(124),
        "GE" => Some(133),
        "PT" => Some(145),
        "ES" => Some(130),
        "RU" => Some(151),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Ffn,
    ResNet,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Ffn => "ffn",
            Architecture::ResNet => "resnet",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffn" => Ok(Architecture::Ffn),
            "resnet" => Ok(Architecture::ResNet),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// How a network input is cut out of a feature matrix around one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLayout {
    /// Context frames concatenated into one vector.
    Stacked {
        left: usize,
        right: usize,
        base_dims: usize,
    },
    /// Single-channel `[base_dims x (left + right + 1)]` image.
    Image {
        left: usize,
        right: usize,
        base_dims: usize,
    },
}

impl InputLayout {
    pub fn base_dims(&self) -> usize {
        match *self {
            InputLayout::Stacked { base_dims, .. } | InputLayout::Image { base_dims, .. } => {
                base_dims
            }
        }
    }

    pub fn sample_len(&self) -> usize {
        match *self {
            InputLayout::Stacked {
                left,
                right,
                base_dims,
            }
            | InputLayout::Image {
                left,
                right,
                base_dims,
            } => base_dims * (left + right + 1),
        }
    }

    fn shape(&self, batch: usize) -> Vec<usize> {
        match *self {
            InputLayout::Stacked { .. } => vec![batch, self.sample_len()],
            InputLayout::Image {
                left,
                right,
                base_dims,
            } => vec![batch, 1, base_dims, left + right + 1],
        }
    }

    /// Builds the batch tensor for `(utterance, frame)` pairs.
    pub fn build(
        &self,
        samples: impl ExactSizeIterator<Item = (FrameRef, usize)>,
        utts: &[&FeatureMatrix],
    ) -> Result<Tensor<f32>> {
        let n = samples.len();
        let len = self.sample_len();
        let mut data = vec![0.0f32; n * len];
        for ((r, t), out) in samples.zip(data.chunks_exact_mut(len)) {
            let f = utts[r.0];
            if f.dims != self.base_dims() {
                return Err(Error::Shape(format!(
                    "{}: {} dims, model expects {}",
                    f.utterance_id,
                    f.dims,
                    self.base_dims()
                )));
            }
            match *self {
                InputLayout::Stacked { left, right, .. } => stack_frame(f, t, left, right, out),
                InputLayout::Image { left, right, .. } => image_frame(f, t, left, right, out),
            }
        }
        Tensor::from_vec(&self.shape(n), data)
    }
}

/// Index of an utterance inside a slice handed to [`InputLayout::build`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef(pub usize);

#[derive(Debug, Clone)]
pub struct LanguageTaskHead {
    pub language: String,
    pub classes: usize,
    pub layers: Vec<Layer<f32>>,
}

impl LanguageTaskHead {
    fn forward(&mut self, x: &Tensor<f32>, mode: &mut Mode) -> Result<Tensor<f32>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut d = dy.clone();
        for l in self.layers.iter_mut().rev() {
            d = l.backward(&d)?;
        }
        Ok(d)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub architecture: Architecture,
    pub input: InputLayout,
    pub trunk: Vec<Layer<f32>>,
    /// Position in `trunk` of the linear bottleneck layer.
    pub bottleneck_index: usize,
    pub heads: Vec<LanguageTaskHead>,
}

/// A language to train on with its class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageSpec {
    pub id: String,
    pub classes: usize,
}

impl LanguageSpec {
    pub fn new(id: impl Into<String>, classes: usize) -> Self {
        LanguageSpec {
            id: id.into(),
            classes,
        }
    }

    /// One of the five reference languages with its reference class count.
    pub fn reference(id: &str) -> Option<Self> {
        reference_class_count(id).map(|c| LanguageSpec::new(id, c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnConfig {
    pub hidden_width: usize,
    /// Hidden layers before the bottleneck; `None` picks 3, 4 or 5 from the
    /// number of languages.
    pub hidden_layers: Option<usize>,
    pub post_bottleneck_width: usize,
    pub dropout: f32,
    pub left: usize,
    pub right: usize,
    pub base_dims: usize,
}

impl Default for FfnConfig {
    fn default() -> Self {
        FfnConfig {
            hidden_width: 1024,
            hidden_layers: None,
            post_bottleneck_width: 1024,
            dropout: 0.1,
            left: 6,
            right: 6,
            base_dims: 39,
        }
    }
}

pub fn default_ffn_depth(languages: usize) -> usize {
    match languages {
        1 => 3,
        2 | 3 => 4,
        _ => 5,
    }
}

fn check_languages(languages: &[LanguageSpec]) -> Result<()> {
    if languages.is_empty() {
        return Err(Error::NoLanguages);
    }
    if languages.len() > 5 {
        return Err(Error::Config(format!(
            "at most 5 languages, got {}",
            languages.len()
        )));
    }
    for (i, l) in languages.iter().enumerate() {
        if l.classes < 2 {
            return Err(Error::Config(format!(
                "language {} needs at least 2 classes",
                l.id
            )));
        }
        if languages[..i].iter().any(|o| o.id == l.id) {
            return Err(Error::Config(format!("language {} listed twice", l.id)));
        }
    }
    Ok(())
}

fn build(specs: &[LayerSpec], rng: &mut Rng) -> Result<Vec<Layer<f32>>> {
    specs.iter().map(|s| Layer::from_spec(s, rng)).collect()
}

pub fn build_ffn(languages: &[LanguageSpec], cfg: &FfnConfig, seed: u64) -> Result<Model> {
    check_languages(languages)?;
    let mut rng = Rng::seed_from_u64(seed);
    let n = cfg.base_dims * (cfg.left + cfg.right + 1);
    let depth = cfg
        .hidden_layers
        .unwrap_or_else(|| default_ffn_depth(languages.len()));
    let mut specs = Vec::new();
    let mut width = n;
    let hidden = |specs: &mut Vec<LayerSpec>, inputs: usize, outputs: usize| {
        specs.push(LayerSpec::LayerNorm { dim: inputs });
        specs.push(LayerSpec::Dense { inputs, outputs });
        specs.push(LayerSpec::Relu);
        if cfg.dropout > 0.0 {
            specs.push(LayerSpec::Dropout { rate: cfg.dropout });
        }
    };
    for _ in 0..depth {
        hidden(&mut specs, width, cfg.hidden_width);
        width = cfg.hidden_width;
    }
    specs.push(LayerSpec::LayerNorm { dim: width });
    specs.push(LayerSpec::Dense {
        inputs: width,
        outputs: BOTTLENECK_DIM,
    });
    let bottleneck_index = specs.len() - 1;
    hidden(&mut specs, BOTTLENECK_DIM, cfg.post_bottleneck_width);
    let trunk = build(&specs, &mut rng)?;
    let heads = languages
        .iter()
        .map(|l| {
            let specs = [
                LayerSpec::LayerNorm {
                    dim: cfg.post_bottleneck_width,
                },
                LayerSpec::Dense {
                    inputs: cfg.post_bottleneck_width,
                    outputs: l.classes,
                },
            ];
            Ok(LanguageTaskHead {
                language: l.id.clone(),
                classes: l.classes,
                layers: build(&specs, &mut rng)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model {
        architecture: Architecture::Ffn,
        input: InputLayout::Stacked {
            left: cfg.left,
            right: cfg.right,
            base_dims: cfg.base_dims,
        },
        trunk,
        bottleneck_index,
        heads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub stem_channels: usize,
    /// Output channels of each stage; every stage after the first halves the
    /// feature map. The last entry is the pooled vector width.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub post_bottleneck_width: usize,
    pub dropout: f32,
    pub left: usize,
    pub right: usize,
    pub base_dims: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            stem_channels: 16,
            stage_channels: vec![16, 32, 64, 128, 256],
            blocks_per_stage: 1,
            post_bottleneck_width: 256,
            dropout: 0.05,
            left: 12,
            right: 12,
            base_dims: 39,
        }
    }
}

pub fn build_resnet(languages: &[LanguageSpec], cfg: &ResNetConfig, seed: u64) -> Result<Model> {
    check_languages(languages)?;
    if cfg.stage_channels.is_empty() || cfg.blocks_per_stage == 0 {
        return Err(Error::Config(
            "resnet needs at least one stage and one block per stage".into(),
        ));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut specs = vec![
        LayerSpec::conv3x3(1, cfg.stem_channels, 1),
        LayerSpec::BatchNorm {
            channels: cfg.stem_channels,
        },
        LayerSpec::Relu,
    ];
    let mut channels = cfg.stem_channels;
    for (stage, &out) in cfg.stage_channels.iter().enumerate() {
        for block in 0..cfg.blocks_per_stage {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            specs.push(LayerSpec::Residual(ResidualBlockSpec::new(
                channels, out, stride,
            )));
            if cfg.dropout > 0.0 {
                specs.push(LayerSpec::Dropout { rate: cfg.dropout });
            }
            channels = out;
        }
    }
    specs.push(LayerSpec::GlobalAvgPool);
    specs.push(LayerSpec::Dense {
        inputs: channels,
        outputs: BOTTLENECK_DIM,
    });
    let bottleneck_index = specs.len() - 1;
    specs.push(LayerSpec::Dense {
        inputs: BOTTLENECK_DIM,
        outputs: cfg.post_bottleneck_width,
    });
    specs.push(LayerSpec::Relu);
    let trunk = build(&specs, &mut rng)?;
    let heads = languages
        .iter()
        .map(|l| {
            Ok(LanguageTaskHead {
                language: l.id.clone(),
                classes: l.classes,
                layers: build(
                    &[LayerSpec::Dense {
                        inputs: cfg.post_bottleneck_width,
                        outputs: l.classes,
                    }],
                    &mut rng,
                )?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model {
        architecture: Architecture::ResNet,
        input: InputLayout::Image {
            left: cfg.left,
            right: cfg.right,
            base_dims: cfg.base_dims,
        },
        trunk,
        bottleneck_index,
        heads,
    })
}

/// One minibatch: inputs, class labels and the head each sample belongs to.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub head_of_sample: Vec<usize>,
}

/// Frame-labelled utterances of one language.
#[derive(Debug, Clone)]
pub struct LanguageData {
    pub language: String,
    pub utterances: Vec<FeatureMatrix>,
    pub labels: Vec<Vec<usize>>,
}

impl LanguageData {
    pub fn new(
        language: impl Into<String>,
        utterances: Vec<FeatureMatrix>,
        labels: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let language = language.into();
        if utterances.len() != labels.len() {
            return Err(Error::FrameMismatch(format!(
                "{language}: utterance/label list lengths differ"
            )));
        }
        for (u, l) in utterances.iter().zip(&labels) {
            if u.frames != l.len() {
                return Err(Error::FrameMismatch(format!(
                    "{}: {} frames, {} labels",
                    u.utterance_id,
                    u.frames,
                    l.len()
                )));
            }
        }
        Ok(LanguageData {
            language,
            utterances,
            labels,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.utterances.iter().map(|u| u.frames).sum()
    }

    /// Flat `(utterance, frame)` index of every labelled frame.
    fn samples(&self) -> Vec<(usize, usize)> {
        self.utterances
            .iter()
            .enumerate()
            .flat_map(|(u, f)| (0..f.frames).map(move |t| (u, t)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 255,
            epochs: 50,
            initial_lr: 1e-3,
            final_lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

/// Per-language sample counts for one batch: `batch / L` each, with any
/// remainder handed out round-robin starting at `rotation`.
pub fn per_language_quota(batch_size: usize, languages: usize, rotation: usize) -> Vec<usize> {
    let base = batch_size / languages;
    let extra = batch_size % languages;
    (0..languages)
        .map(|l| base + usize::from((l + languages - rotation % languages) % languages < extra))
        .collect()
}

/// Stratified batch plan for one epoch. Each language walks its own shuffled
/// permutation, reshuffling when it runs out, so every batch holds the same
/// number of samples per language. The epoch ends when the largest language
/// has been seen once.
pub fn plan_epoch(sizes: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<(usize, usize)>> {
    let l = sizes.len();
    let mut orders: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&n| {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(rng);
            v
        })
        .collect();
    let mut cursor = vec![0usize; l];
    let max = sizes.iter().copied().max().unwrap_or(0);
    let per_batch_min = (batch_size / l).max(1);
    let batches = max.div_ceil(per_batch_min);
    let mut plan = Vec::with_capacity(batches);
    for b in 0..batches {
        let quota = per_language_quota(batch_size, l, b);
        let mut batch = Vec::with_capacity(batch_size);
        for (lang, &q) in quota.iter().enumerate() {
            for _ in 0..q {
                if cursor[lang] == orders[lang].len() {
                    orders[lang].shuffle(rng);
                    cursor[lang] = 0;
                }
                batch.push((lang, orders[lang][cursor[lang]]));
                cursor[lang] += 1;
            }
        }
        plan.push(batch);
    }
    plan
}

/// Trainable-parameter count of one layer or head component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamItem {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub items: Vec<ParamItem>,
    pub total: usize,
}

fn layer_name(spec: &LayerSpec) -> String {
    match spec {
        LayerSpec::Dense { inputs, outputs } => format!("dense {inputs}x{outputs}"),
        LayerSpec::LayerNorm { dim } => format!("layernorm {dim}"),
        LayerSpec::BatchNorm { channels } => format!("batchnorm {channels}"),
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            format!("conv{kernel}x{kernel} {in_channels}->{out_channels} /{stride}")
        }
        LayerSpec::Residual(b) => format!(
            "residual {}->{} /{}{}",
            b.in_channels,
            b.out_channels,
            b.stride,
            if b.has_projection { " +proj" } else { "" }
        ),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::Dropout { rate } => format!("dropout {rate}"),
        LayerSpec::GlobalAvgPool => "global-avg-pool".into(),
    }
}

impl Model {
    pub fn languages(&self) -> Vec<&str> {
        self.heads.iter().map(|h| h.language.as_str()).collect()
    }

    pub fn head_index(&self, language: &str) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.language == language)
            .ok_or_else(|| Error::MissingHead(language.to_string()))
    }

    /// Width of the vector entering the bottleneck layer.
    pub fn pre_bottleneck_dim(&self) -> usize {
        match self.trunk[self.bottleneck_index].spec() {
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => unreachable!("bottleneck is a dense layer"),
        }
    }

    pub fn bottleneck_dim(&self) -> usize {
        match self.trunk[self.bottleneck_index].spec() {
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => unreachable!("bottleneck is a dense layer"),
        }
    }

    pub fn count_params(&self) -> ParamCount {
        let mut items: Vec<ParamItem> = self
            .trunk
            .iter()
            .enumerate()
            .filter(|(_, l)| l.param_count() > 0)
            .map(|(i, l)| ParamItem {
                name: format!("trunk.{i} {}", layer_name(&l.spec())),
                count: l.param_count(),
            })
            .collect();
        for h in &self.heads {
            for (i, l) in h.layers.iter().enumerate() {
                items.push(ParamItem {
                    name: format!("head.{}.{i} {}", h.language, layer_name(&l.spec())),
                    count: l.param_count(),
                });
            }
        }
        let total = items.iter().map(|i| i.count).sum();
        ParamCount { items, total }
    }

    fn all_params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut v: Vec<&mut Param<f32>> =
            self.trunk.iter_mut().flat_map(|l| l.params_mut()).collect();
        for h in &mut self.heads {
            v.extend(h.layers.iter_mut().flat_map(|l| l.params_mut()));
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.all_params_mut() {
            p.zero_grad();
        }
    }

    fn trunk_forward(
        &mut self,
        x: &Tensor<f32>,
        mode: &mut Mode,
        upto: usize,
    ) -> Result<Tensor<f32>> {
        let mut h = x.clone();
        for l in &mut self.trunk[..upto] {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Accumulates gradients of the batch loss into the parameters and
    /// returns the loss. Each sample is scored only at its own head; the loss
    /// is the sum of per-sample cross-entropies divided by `normalizer`
    /// (the batch size when `None`).
    pub fn accumulate_gradients(
        &mut self,
        batch: &TrainBatch,
        normalizer: Option<usize>,
        rng: &mut Rng,
    ) -> Result<f64> {
        let b = batch.inputs.batch();
        if batch.labels.len() != b || batch.head_of_sample.len() != b {
            return Err(Error::Shape("batch labels do not match inputs".into()));
        }
        if let Some(&h) = batch
            .head_of_sample
            .iter()
            .find(|&&h| h >= self.heads.len())
        {
            return Err(Error::MissingHead(format!("head #{h}")));
        }
        let normalizer = normalizer.unwrap_or(b);
        let mut mode = Mode::Train(rng);
        let n_trunk = self.trunk.len();
        let shared = self.trunk_forward(&batch.inputs, &mut mode, n_trunk)?;
        let width = shared.sample_len();
        let mut dshared = Tensor::zeros(&shared.shape);
        let mut loss = 0.0;
        for (hi, head) in self.heads.iter_mut().enumerate() {
            let rows: Vec<usize> = (0..b).filter(|&i| batch.head_of_sample[i] == hi).collect();
            if rows.is_empty() {
                continue;
            }
            let labels: Vec<usize> = rows.iter().map(|&i| batch.labels[i]).collect();
            let logits = head.forward(&shared.gather_rows(&rows), &mut mode)?;
            let (l, dlogits) = softmax_xent_scaled(&logits, &labels, normalizer)?;
            loss += f64::from(l);
            let dh = head.backward(&dlogits)?;
            for (k, &r) in rows.iter().enumerate() {
                dshared.data[r * width..(r + 1) * width]
                    .copy_from_slice(&dh.data[k * width..(k + 1) * width]);
            }
        }
        let mut d = dshared;
        for l in self.trunk.iter_mut().rev() {
            d = l.backward(&d)?;
        }
        Ok(loss)
    }

    fn batch_from(
        &self,
        data: &[&LanguageData],
        picks: &[(usize, usize)],
        samples: &[Vec<(usize, usize)>],
    ) -> Result<TrainBatch> {
        let heads: Vec<usize> = data
            .iter()
            .map(|d| self.head_index(&d.language))
            .collect::<Result<_>>()?;
        // One flat utterance table across languages.
        let mut offsets = Vec::with_capacity(data.len());
        let mut utts: Vec<&FeatureMatrix> = Vec::new();
        for d in data {
            offsets.push(utts.len());
            utts.extend(d.utterances.iter());
        }
        let frames = picks.iter().map(|&(lang, i)| {
            let (u, t) = samples[lang][i];
            (FrameRef(offsets[lang] + u), t)
        });
        let inputs = self.input.build(frames, &utts)?;
        let mut labels = Vec::with_capacity(picks.len());
        for &(lang, i) in picks {
            let (u, t) = samples[lang][i];
            let label = data[lang].labels[u][t];
            let classes = self.heads[heads[lang]].classes;
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            labels.push(label);
        }
        Ok(TrainBatch {
            inputs,
            labels,
            head_of_sample: picks.iter().map(|&(lang, _)| heads[lang]).collect(),
        })
    }

    /// Mean cross-entropy on one language's data, in inference mode.
    pub fn language_loss(&mut self, data: &LanguageData) -> Result<f64> {
        let head = self.head_index(&data.language)?;
        let samples = data.samples();
        if samples.is_empty() {
            return Err(Error::EmptySplit(data.language.clone()));
        }
        let utts: Vec<&FeatureMatrix> = data.utterances.iter().collect();
        let mut total = 0.0;
        for chunk in samples.chunks(1024) {
            let x = self
                .input
                .build(chunk.iter().map(|&(u, t)| (FrameRef(u), t)), &utts)?;
            let labels: Vec<usize> = chunk.iter().map(|&(u, t)| data.labels[u][t]).collect();
            let h = self.trunk_forward(&x, &mut Mode::Infer, self.trunk.len())?;
            let logits = self.heads[head].forward(&h, &mut Mode::Infer)?;
            let (l, _) = softmax_xent_scaled(&logits, &labels, 1)?;
            total += f64::from(l);
        }
        Ok(total / samples.len() as f64)
    }

    /// Arg-max class predictions from the given language's head.
    pub fn classify(&mut self, language: &str, f: &FeatureMatrix) -> Result<Vec<usize>> {
        let head = self.head_index(language)?;
        let mut out = Vec::with_capacity(f.frames);
        for start in (0..f.frames).step_by(1024) {
            let end = (start + 1024).min(f.frames);
            let x = self
                .input
                .build((start..end).map(|t| (FrameRef(0), t)), &[f])?;
            let h = self.trunk_forward(&x, &mut Mode::Infer, self.trunk.len())?;
            let logits = self.heads[head].forward(&h, &mut Mode::Infer)?;
            let c = logits.shape[1];
            out.extend(logits.data.chunks_exact(c).map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            }));
        }
        Ok(out)
    }

    /// Bottleneck activations, one 32-dim row per input frame. Heads are not
    /// evaluated.
    pub fn extract_bottleneck(&mut self, f: &FeatureMatrix) -> Result<FeatureMatrix> {
        let width = self.bottleneck_dim();
        let mut data = Vec::with_capacity(f.frames * width);
        for start in (0..f.frames).step_by(512) {
            let end = (start + 512).min(f.frames);
            let x = self
                .input
                .build((start..end).map(|t| (FrameRef(0), t)), &[f])?;
            let h = self.trunk_forward(&x, &mut Mode::Infer, self.bottleneck_index + 1)?;
            data.extend_from_slice(&h.data);
        }
        FeatureMatrix::new(f.utterance_id.clone(), f.frames, width, data)
    }

    pub fn train(
        &mut self,
        train: &[LanguageData],
        dev: &[LanguageData],
        cfg: &TrainConfig,
    ) -> Result<TrainReport> {
        train_model(self, train, dev, cfg)
    }

    pub fn save(&self, checkpoint: &Path, manifest: &Path) -> Result<()> {
        let layers = self
            .trunk
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.layers.iter()));
        write_layers(layers, BufWriter::new(File::create(checkpoint)?))?;
        let mut m = BufWriter::new(File::create(manifest)?);
        write!(m, "{}", self.manifest())?;
        m.flush()?;
        Ok(())
    }

    /// Text manifest describing how the checkpoint's flat layer list splits
    /// into trunk and heads.
    pub fn manifest(&self) -> String {
        let (kind, left, right, base) = match self.input {
            InputLayout::Stacked {
                left,
                right,
                base_dims,
            } => ("stacked", left, right, base_dims),
            InputLayout::Image {
                left,
                right,
                base_dims,
            } => ("image", left, right, base_dims),
        };
        let mut s = format!(
            "architecture = {}\ninput = {kind} {left} {right} {base}\nbottleneck_index = {}\ntrunk_layers = {}\n",
            self.architecture,
            self.bottleneck_index,
            self.trunk.len()
        );
        for h in &self.heads {
            s.push_str(&format!(
                "head = {} {} {}\n",
                h.language,
                h.classes,
                h.layers.len()
            ));
        }
        s
    }

    pub fn load(checkpoint: &Path, manifest: &Path) -> Result<Model> {
        let layers = read_layers(BufReader::new(File::open(checkpoint)?))?;
        let text = std::fs::read_to_string(manifest)?;
        Model::from_parts(layers, &text)
    }

    fn from_parts(mut layers: Vec<Layer<f32>>, manifest: &str) -> Result<Model> {
        let bad = |m: &str| Error::Parse(format!("model manifest: {m}"));
        let mut architecture = None;
        let mut input = None;
        let mut bottleneck_index = None;
        let mut trunk_layers = None;
        let mut heads_meta = Vec::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
            let fields: Vec<&str> = value.split_whitespace().collect();
            let num = |i: usize| -> Result<usize> {
                fields
                    .get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(line))
            };
            match key.trim() {
                "architecture" => architecture = Some(value.trim().parse::<Architecture>()?),
                "input" => {
                    let (l, r, b) = (num(1)?, num(2)?, num(3)?);
                    input = Some(match fields.first() {
                        Some(&"stacked") => InputLayout::Stacked {
                            left: l,
                            right: r,
                            base_dims: b,
                        },
                        Some(&"image") => InputLayout::Image {
                            left: l,
                            right: r,
                            base_dims: b,
                        },
                        _ => return Err(bad(line)),
                    });
                }
                "bottleneck_index" => bottleneck_index = Some(num(0)?),
                "trunk_layers" => trunk_layers = Some(num(0)?),
                "head" => heads_meta.push((
                    fields.first().ok_or_else(|| bad(line))?.to_string(),
                    num(1)?,
                    num(2)?,
                )),
                _ => return Err(bad(line)),
            }
        }
        let trunk_layers = trunk_layers.ok_or_else(|| bad("missing trunk_layers"))?;
        let expected = trunk_layers + heads_meta.iter().map(|h| h.2).sum::<usize>();
        if layers.len() != expected {
            return Err(bad(&format!(
                "{} layers in checkpoint, manifest implies {expected}",
                layers.len()
            )));
        }
        let mut rest = layers.split_off(trunk_layers);
        let trunk = layers;
        let mut heads = Vec::new();
        for (language, classes, n) in heads_meta {
            let tail = rest.split_off(n);
            heads.push(LanguageTaskHead {
                language,
                classes,
                layers: std::mem::replace(&mut rest, tail),
            });
        }
        let model = Model {
            architecture: architecture.ok_or_else(|| bad("missing architecture"))?,
            input: input.ok_or_else(|| bad("missing input"))?,
            bottleneck_index: bottleneck_index.ok_or_else(|| bad("missing bottleneck_index"))?,
            trunk,
            heads,
        };
        if !matches!(
            model.trunk.get(model.bottleneck_index).map(Layer::spec),
            Some(LayerSpec::Dense { .. })
        ) {
            return Err(bad("bottleneck index does not point at a dense layer"));
        }
        Ok(model)
    }
}

fn train_model(
    model: &mut Model,
    train: &[LanguageData],
    dev: &[LanguageData],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptySplit("training set".into()));
    }
    if dev.is_empty() {
        return Err(Error::EmptySplit("development set".into()));
    }
    for d in train.iter().chain(dev) {
        model.head_index(&d.language)?;
        if d.frame_count() == 0 {
            return Err(Error::EmptySplit(format!("{} has no frames", d.language)));
        }
    }
    if cfg.batch_size < train.len() {
        return Err(Error::Config(format!(
            "batch of {} cannot hold one sample from each of {} languages",
            cfg.batch_size,
            train.len()
        )));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let samples: Vec<Vec<(usize, usize)>> = train.iter().map(LanguageData::samples).collect();
    let sizes: Vec<usize> = samples.iter().map(Vec::len).collect();
    let data: Vec<&LanguageData> = train.iter().collect();
    let mut adam = Adam::<f32>::new(cfg.initial_lr);
    let mut schedule = LrSchedule::new(cfg.initial_lr, cfg.final_lr);
    let mut report = TrainReport::default();
    for _epoch in 0..cfg.epochs {
        let plan = plan_epoch(&sizes, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        for picks in &plan {
            let batch = model.batch_from(&data, picks, &samples)?;
            model.zero_grad();
            epoch_loss += model.accumulate_gradients(&batch, None, &mut rng)?;
            adam.step(&mut model.all_params_mut());
        }
        let train_loss = epoch_loss / plan.len() as f64;
        let dev_loss = dev
            .iter()
            .map(|d| model.language_loss(d))
            .sum::<Result<f64>>()?
            / dev.len() as f64;
        if !train_loss.is_finite() || !dev_loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        report.train_loss.push(train_loss);
        report.dev_loss.push(dev_loss);
        report.learning_rate.push(adam.lr);
        adam.lr = schedule.update(dev_loss);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn toy_ffn(languages: &[LanguageSpec], dims: usize, dropout: f32) -> Model {
        let cfg = FfnConfig {
            hidden_width: 24,
            hidden_layers: Some(2),
            post_bottleneck_width: 16,
            dropout,
            left: 1,
            right: 1,
            base_dims: dims,
        };
        build_ffn(languages, &cfg, 11).unwrap()
    }

    #[test]
    fn ffn_layout_matches_language_count() {
        let cfg = FfnConfig::default();
        let es = build_ffn(&[LanguageSpec::reference("ES").unwrap()], &cfg, 0).unwrap();
        assert_eq!(es.heads.len(), 1);
        assert_eq!(es.heads[0].classes, 130);
        assert_eq!(es.input.sample_len(), 507);
        let dense_widths = |m: &Model| -> Vec<usize> {
            m.trunk
                .iter()
                .filter_map(|l| match l.spec() {
                    LayerSpec::Dense { outputs, .. } => Some(outputs),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(dense_widths(&es), vec![1024, 1024, 1024, 32, 1024]);
        assert!(matches!(
            es.trunk[es.bottleneck_index + 1].spec(),
            LayerSpec::LayerNorm { dim: 32 }
        ));

        let tri: Vec<_> = ["PT", "ES", "RU"]
            .iter()
            .map(|l| LanguageSpec::reference(l).unwrap())
            .collect();
        let m3 = build_ffn(&tri, &cfg, 0).unwrap();
        assert_eq!(m3.heads.len(), 3);
        assert_eq!(dense_widths(&m3), vec![1024, 1024, 1024, 1024, 32, 1024]);
        let five: Vec<_> = ["PT", "ES", "RU", "FR", "GE"]
            .iter()
            .map(|l| LanguageSpec::reference(l).unwrap())
            .collect();
        let m5 = build_ffn(&five, &cfg, 0).unwrap();
        assert_eq!(
            dense_widths(&m5),
            vec![1024, 1024, 1024, 1024, 1024, 32, 1024]
        );
        assert!(m5.count_params().total > m3.count_params().total);
        assert!(m3.count_params().total > es.count_params().total);

        assert!(matches!(build_ffn(&[], &cfg, 0), Err(Error::NoLanguages)));
    }

    #[test]
    fn resnet_shapes() {
        let langs = [LanguageSpec::new("A", 5)];
        let mut m = build_resnet(&langs, &ResNetConfig::default(), 0).unwrap();
        assert_eq!(m.pre_bottleneck_dim(), 256);
        assert_eq!(m.bottleneck_dim(), BOTTLENECK_DIM);
        let f = FeatureMatrix::new(
            "u",
            3,
            39,
            (0..117).map(|i| (i as f32 * 0.1).sin()).collect(),
        )
        .unwrap();
        let b = m.extract_bottleneck(&f).unwrap();
        assert_eq!((b.frames, b.dims), (3, 32));
        assert!(matches!(
            build_resnet(&[], &ResNetConfig::default(), 0),
            Err(Error::NoLanguages)
        ));
    }

    #[test]
    fn quota_and_plan() {
        assert_eq!(per_language_quota(255, 3, 0), vec![85, 85, 85]);
        assert_eq!(per_language_quota(10, 3, 0), vec![4, 3, 3]);
        assert_eq!(per_language_quota(10, 3, 1), vec![3, 4, 3]);
        let mut rng = Rng::seed_from_u64(1);
        let plan = plan_epoch(&[1000, 400, 700], 255, &mut rng);
        assert_eq!(plan.len(), 12);
        for batch in &plan {
            assert_eq!(batch.len(), 255);
            for lang in 0..3 {
                assert_eq!(batch.iter().filter(|p| p.0 == lang).count(), 85);
            }
        }
        // without replacement within a pass over the largest language
        let mut seen: Vec<usize> = plan
            .iter()
            .flatten()
            .filter(|p| p.0 == 0)
            .map(|p| p.1)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 1000);
    }

    fn blob_language(name: &str, n: usize, dims: usize, seed: u64) -> LanguageData {
        let mut rng = Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let mut utts = Vec::new();
        let mut labels = Vec::new();
        for u in 0..n / 10 {
            let class = u % 2;
            // alternating-sign centres so per-row normalisation keeps the class
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let data = (0..10 * dims)
                .map(|i| sign * if i % 2 == 0 { 2.0 } else { -2.0 } + noise.sample(&mut rng))
                .collect();
            utts.push(FeatureMatrix::new(format!("{name}{u}"), 10, dims, data).unwrap());
            labels.push(vec![class; 10]);
        }
        LanguageData::new(name, utts, labels).unwrap()
    }

    #[test]
    fn separable_blobs_learned_in_one_epoch() {
        let dims = 4;
        let train = blob_language("A", 2000, dims, 1);
        let dev = blob_language("A", 400, dims, 2);
        // nearest-centroid baseline on the same split
        let centroid = |class: usize| -> Vec<f32> {
            let mut acc = vec![0.0; dims];
            let mut n = 0.0;
            for (u, l) in train.utterances.iter().zip(&train.labels) {
                for (row, &c) in u.rows().zip(l) {
                    if c == class {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        n += 1.0;
                    }
                }
            }
            acc.iter().map(|a| a / n).collect()
        };
        let (c0, c1) = (centroid(0), centroid(1));
        let dist =
            |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>();
        let mut baseline_ok = 0;
        let mut total = 0;
        for (u, l) in dev.utterances.iter().zip(&dev.labels) {
            for (row, &c) in u.rows().zip(l) {
                let pred = usize::from(dist(row, &c1) < dist(row, &c0));
                baseline_ok += usize::from(pred == c);
                total += 1;
            }
        }
        assert!(baseline_ok as f64 / total as f64 > 0.9);

        let mut m = toy_ffn(&[LanguageSpec::new("A", 2)], dims, 0.1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 32,
            ..TrainConfig::default()
        };
        m.train(&[train], &[dev.clone()], &cfg).unwrap();
        let mut ok = 0;
        for (u, l) in dev.utterances.iter().zip(&dev.labels) {
            ok += m
                .classify("A", u)
                .unwrap()
                .iter()
                .zip(l)
                .filter(|(p, c)| p == c)
                .count();
        }
        assert!(ok as f64 / total as f64 > 0.9, "{ok}/{total}");
    }

    fn random_batch(model: &Model, heads: &[usize], rng: &mut Rng) -> TrainBatch {
        let n = heads.len();
        let len = model.input.sample_len();
        let inputs = Tensor::from_vec(
            &[n, len],
            (0..n * len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels = heads
            .iter()
            .map(|&h| rng.gen_range(0..model.heads[h].classes))
            .collect();
        TrainBatch {
            inputs,
            labels,
            head_of_sample: heads.to_vec(),
        }
    }

    #[test]
    fn other_heads_receive_no_gradient() {
        let langs = [
            LanguageSpec::new("A", 3),
            LanguageSpec::new("B", 4),
            LanguageSpec::new("C", 5),
        ];
        let mut m = toy_ffn(&langs, 3, 0.1);
        let mut rng = Rng::seed_from_u64(5);
        let batch = random_batch(&m, &[1; 9], &mut rng);
        m.zero_grad();
        m.accumulate_gradients(&batch, None, &mut rng).unwrap();
        for (hi, h) in m.heads.iter().enumerate() {
            let nonzero = h
                .layers
                .iter()
                .flat_map(|l| l.params())
                .any(|p| p.grad.iter().any(|&g| g != 0.0));
            assert_eq!(nonzero, hi == 1);
        }
    }

    #[test]
    fn trunk_gradient_is_sum_over_languages() {
        let langs = [LanguageSpec::new("A", 3), LanguageSpec::new("B", 4)];
        let mut m = toy_ffn(&langs, 3, 0.0);
        let mut rng = Rng::seed_from_u64(9);
        let heads = [0, 1, 1, 0, 1, 0, 0];
        let mixed = random_batch(&m, &heads, &mut rng);
        let trunk_grads = |m: &Model| -> Vec<f32> {
            m.trunk
                .iter()
                .flat_map(|l| l.params())
                .flat_map(|p| p.grad.clone())
                .collect()
        };
        m.zero_grad();
        m.accumulate_gradients(&mixed, None, &mut rng).unwrap();
        let joint = trunk_grads(&m);
        let mut summed = vec![0.0f32; joint.len()];
        for lang in 0..2 {
            let rows: Vec<usize> = (0..heads.len()).filter(|&i| heads[i] == lang).collect();
            let sub = TrainBatch {
                inputs: mixed.inputs.gather_rows(&rows),
                labels: rows.iter().map(|&i| mixed.labels[i]).collect(),
                head_of_sample: vec![lang; rows.len()],
            };
            m.zero_grad();
            m.accumulate_gradients(&sub, Some(heads.len()), &mut rng)
                .unwrap();
            summed
                .iter_mut()
                .zip(trunk_grads(&m))
                .for_each(|(s, g)| *s += g);
        }
        for (a, b) in joint.iter().zip(&summed) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn memorises_small_set() {
        let dims = 6;
        let mut rng = Rng::seed_from_u64(21);
        let mut utts = Vec::new();
        let mut labels = Vec::new();
        for u in 0..10 {
            let data = (0..10 * dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
            utts.push(FeatureMatrix::new(format!("m{u}"), 10, dims, data).unwrap());
            labels.push((0..10).map(|_| rng.gen_range(0..4)).collect());
        }
        let data = LanguageData::new("A", utts, labels).unwrap();
        let cfg = FfnConfig {
            hidden_width: 64,
            hidden_layers: Some(2),
            post_bottleneck_width: 64,
            dropout: 0.0,
            left: 1,
            right: 1,
            base_dims: dims,
        };
        let mut m = build_ffn(&[LanguageSpec::new("A", 4)], &cfg, 3).unwrap();
        let tc = TrainConfig {
            epochs: 200,
            batch_size: 25,
            initial_lr: 1e-3,
            ..TrainConfig::default()
        };
        let report = m
            .train(
                std::slice::from_ref(&data),
                std::slice::from_ref(&data),
                &tc,
            )
            .unwrap();
        let last = *report.train_loss.last().unwrap();
        assert!(last < 0.05, "final loss {last}");
        assert!(report
            .learning_rate
            .iter()
            .all(|&lr| (1e-4..=1e-3).contains(&lr)));
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let train = blob_language("A", 300, 3, 4);
        let dev = blob_language("A", 100, 3, 5);
        let run = || {
            let mut m = toy_ffn(&[LanguageSpec::new("A", 2)], 3, 0.1);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 16,
                seed: 77,
                ..TrainConfig::default()
            };
            m.train(
                std::slice::from_ref(&train),
                std::slice::from_ref(&dev),
                &cfg,
            )
            .unwrap();
            m
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (run(), run());
        let paths = |tag: &str| {
            (
                dir.path().join(format!("{tag}.ckpt")),
                dir.path().join(format!("{tag}.manifest")),
            )
        };
        let (ca, ma) = paths("a");
        let (cb, mb) = paths("b");
        a.save(&ca, &ma).unwrap();
        b.save(&cb, &mb).unwrap();
        assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());

        let mut loaded = Model::load(&ca, &ma).unwrap();
        let mut orig = a.clone();
        let f = &dev.utterances[0];
        assert_eq!(
            loaded.extract_bottleneck(f).unwrap(),
            orig.extract_bottleneck(f).unwrap()
        );
        assert_eq!(loaded.manifest(), a.manifest());
    }

    #[test]
    fn extraction_ignores_heads_and_is_framewise_pure() {
        let mut m = toy_ffn(
            &[LanguageSpec::new("A", 3), LanguageSpec::new("B", 3)],
            2,
            0.1,
        );
        let f = FeatureMatrix::new("same", 5, 2, [0.3, -1.2].repeat(5)).unwrap();
        let out = m.extract_bottleneck(&f).unwrap();
        assert_eq!((out.frames, out.dims), (5, 32));
        assert!(out.rows().all(|r| r == out.row(0)));
        let g =
            FeatureMatrix::new("g", 4, 2, vec![0.1, 0.2, 0.9, -0.4, 0.0, 1.0, -1.0, 0.5]).unwrap();
        let before = m.extract_bottleneck(&g).unwrap();
        m.heads.clear();
        assert_eq!(m.extract_bottleneck(&g).unwrap(), before);
        assert!(m
            .extract_bottleneck(&FeatureMatrix::new("x", 1, 3, vec![0.0; 3]).unwrap())
            .is_err());
    }

    #[test]
    fn train_rejects_unknown_language_and_empty_split() {
        let mut m = toy_ffn(&[LanguageSpec::new("A", 2)], 3, 0.0);
        let b = blob_language("B", 20, 3, 1);
        let a = blob_language("A", 20, 3, 1);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            m.train(&[b], &[a.clone()], &cfg),
            Err(Error::MissingHead(_))
        ));
        assert!(matches!(
            m.train(&[], &[a], &cfg),
            Err(Error::EmptySplit(_))
        ));
    }
}
