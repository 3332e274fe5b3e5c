use rand::Rng as _;

use super::tensor::{lit, Param, Real, Tensor};
use crate::error::{Error, Result};

pub type Rng = rand_chacha::ChaCha8Rng;

/// Forward-pass mode. Training carries the generator that drives dropout.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Shape-level description of a residual block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub has_projection: bool,
}

impl ResidualBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ResidualBlockSpec {
            in_channels,
            out_channels,
            stride,
            has_projection: in_channels != out_channels || stride != 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    LayerNorm {
        dim: usize,
    },
    BatchNorm {
        channels: usize,
    },
    /// `kernel` is 3 for ordinary convolutions and 1 for shortcut projections.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Dropout {
        rate: f32,
    },
    GlobalAvgPool,
    Residual(ResidualBlockSpec),
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv { kernel, stride, .. }
                if !(kernel == 1 || kernel == 3) || !(stride == 1 || stride == 2) =>
            {
                Err(Error::Shape(format!("unsupported convolution {self:?}")))
            }
            LayerSpec::Residual(b) if b.stride != 1 && b.stride != 2 => {
                Err(Error::Shape(format!("bad stride {}", b.stride)))
            }
            LayerSpec::Residual(b)
                if b.has_projection != (b.in_channels != b.out_channels || b.stride != 1) =>
            {
                Err(Error::Shape(
                    "projection flag inconsistent with block shape".into(),
                ))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(Error::Shape(format!("dropout rate {rate}")))
            }
            _ => Ok(()),
        }
    }
}

fn he_uniform<T: Real>(fan_in: usize, n: usize, rng: &mut Rng) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| lit(rng.gen_range(-bound..bound))).collect()
}

fn expect_rank(x: &Tensor<impl Real>, rank: usize, what: &str) -> Result<()> {
    if x.shape.len() != rank {
        return Err(Error::Shape(format!(
            "{what} expects rank {rank}, got {:?}",
            x.shape
        )));
    }
    Ok(())
}

fn missing_cache() -> Error {
    Error::Shape("backward called before forward".into())
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[inputs x outputs]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    x: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Dense {
            inputs,
            outputs,
            weight: Param::new(
                &[inputs, outputs],
                he_uniform(inputs, inputs * outputs, rng),
            ),
            bias: Param::filled(&[outputs], T::zero()),
            x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        expect_rank(x, 2, "dense")?;
        if x.shape[1] != self.inputs {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got {}",
                self.inputs, x.shape[1]
            )));
        }
        let b = x.shape[0];
        let mut y = Tensor::zeros(&[b, self.outputs]);
        for row in y.data.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        T::matmul(
            b,
            self.inputs,
            self.outputs,
            &x.data,
            false,
            &self.weight.value,
            false,
            &mut y.data,
            true,
        );
        self.x = mode.is_train().then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.x.as_ref().ok_or_else(missing_cache)?;
        let b = x.shape[0];
        T::matmul(
            self.inputs,
            b,
            self.outputs,
            &x.data,
            true,
            &dy.data,
            false,
            &mut self.weight.grad,
            true,
        );
        for row in dy.data.chunks_exact(self.outputs) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        let mut dx = Tensor::zeros(&[b, self.inputs]);
        T::matmul(
            b,
            self.outputs,
            self.inputs,
            &dy.data,
            false,
            &self.weight.value,
            true,
            &mut dx.data,
            false,
        );
        Ok(dx)
    }
}

/// Per-sample normalisation over the feature axis.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub dim: usize,
    pub gain: Param<T>,
    pub bias: Param<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            dim,
            gain: Param::filled(&[dim], T::one()),
            bias: Param::filled(&[dim], T::zero()),
            xhat: Vec::new(),
            inv_std: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: &Mode) -> Result<Tensor<T>> {
        expect_rank(x, 2, "layer norm")?;
        if x.shape[1] != self.dim || self.dim < 2 {
            return Err(Error::Shape(format!(
                "layer norm over {} features, got {:?}",
                self.dim, x.shape
            )));
        }
        let d = self.dim;
        let n = lit::<T>(d as f64);
        let eps = lit::<T>(NORM_EPS);
        let mut y = x.clone();
        self.xhat = vec![T::zero(); x.len()];
        self.inv_std = Vec::with_capacity(x.batch());
        for (row, xh) in y
            .data
            .chunks_exact_mut(d)
            .zip(self.xhat.chunks_exact_mut(d))
        {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            for k in 0..d {
                xh[k] = (row[k] - mean) * inv;
                row[k] = self.gain.value[k] * xh[k] + self.bias.value[k];
            }
            self.inv_std.push(inv);
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if self.xhat.len() != dy.len() {
            return Err(missing_cache());
        }
        let d = self.dim;
        let n = lit::<T>(d as f64);
        let mut dx = Tensor::zeros(&dy.shape);
        for (r, (dyr, xh)) in dy
            .data
            .chunks_exact(d)
            .zip(self.xhat.chunks_exact(d))
            .enumerate()
        {
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for k in 0..d {
                self.gain.grad[k] = self.gain.grad[k] + dyr[k] * xh[k];
                self.bias.grad[k] = self.bias.grad[k] + dyr[k];
                let dxh = dyr[k] * self.gain.value[k];
                mean_dxh = mean_dxh + dxh;
                mean_dxh_xh = mean_dxh_xh + dxh * xh[k];
            }
            mean_dxh = mean_dxh / n;
            mean_dxh_xh = mean_dxh_xh / n;
            let inv = self.inv_std[r];
            for k in 0..d {
                let dxh = dyr[k] * self.gain.value[k];
                dx.data[r * d + k] = inv * (dxh - mean_dxh - xh[k] * mean_dxh_xh);
            }
        }
        Ok(dx)
    }
}

/// Per-channel normalisation over batch and spatial axes.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::filled(&[channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: lit(0.9),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: Vec::new(),
        }
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.shape.len() < 2 || x.shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "batch norm over {} channels, got {:?}",
                self.channels, x.shape
            )));
        }
        Ok((x.shape[0], x.shape[2..].iter().product()))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        let (b, s) = self.geometry(x)?;
        let c = self.channels;
        let eps = lit::<T>(NORM_EPS);
        let mut y = x.clone();
        if !mode.is_train() {
            for bi in 0..b {
                for ci in 0..c {
                    let inv = (self.running_var[ci] + eps).sqrt().recip();
                    let (g, be, m) = (
                        self.gamma.value[ci],
                        self.beta.value[ci],
                        self.running_mean[ci],
                    );
                    for v in &mut y.data[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                        *v = g * (*v - m) * inv + be;
                    }
                }
            }
            return Ok(y);
        }
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let count = b * s;
        let nf = lit::<T>(count as f64);
        self.xhat = vec![T::zero(); x.len()];
        self.inv_std = vec![T::zero(); c];
        self.shape = x.shape.clone();
        for ci in 0..c {
            let block = |bi: usize| (bi * c + ci) * s..(bi * c + ci + 1) * s;
            let mean = (0..b)
                .flat_map(|bi| x.data[block(bi)].iter().copied())
                .sum::<T>()
                / nf;
            let var = (0..b)
                .flat_map(|bi| {
                    x.data[block(bi)]
                        .iter()
                        .map(move |&v| (v - mean) * (v - mean))
                })
                .sum::<T>()
                / nf;
            let inv = (var + eps).sqrt().recip();
            self.inv_std[ci] = inv;
            for bi in 0..b {
                for i in block(bi) {
                    let xh = (x.data[i] - mean) * inv;
                    self.xhat[i] = xh;
                    y.data[i] = self.gamma.value[ci] * xh + self.beta.value[ci];
                }
            }
            let unbiased = var * nf / lit(count.max(2) as f64 - 1.0);
            let mom = self.momentum;
            self.running_mean[ci] = mom * self.running_mean[ci] + (T::one() - mom) * mean;
            self.running_var[ci] = mom * self.running_var[ci] + (T::one() - mom) * unbiased;
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != dy.shape {
            return Err(missing_cache());
        }
        let (b, s) = self.geometry(dy)?;
        let c = self.channels;
        let nf = lit::<T>((b * s) as f64);
        let mut dx = Tensor::zeros(&dy.shape);
        for ci in 0..c {
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            let mut dgamma = T::zero();
            let mut dbeta = T::zero();
            for bi in 0..b {
                for i in (bi * c + ci) * s..(bi * c + ci + 1) * s {
                    dgamma = dgamma + dy.data[i] * self.xhat[i];
                    dbeta = dbeta + dy.data[i];
                    let dxh = dy.data[i] * self.gamma.value[ci];
                    sum_dxh = sum_dxh + dxh;
                    sum_dxh_xh = sum_dxh_xh + dxh * self.xhat[i];
                }
            }
            self.gamma.grad[ci] = self.gamma.grad[ci] + dgamma;
            self.beta.grad[ci] = self.beta.grad[ci] + dbeta;
            let (m1, m2) = (sum_dxh / nf, sum_dxh_xh / nf);
            let inv = self.inv_std[ci];
            for bi in 0..b {
                for i in (bi * c + ci) * s..(bi * c + ci + 1) * s {
                    let dxh = dy.data[i] * self.gamma.value[ci];
                    dx.data[i] = inv * (dxh - m1 - self.xhat[i] * m2);
                }
            }
        }
        Ok(dx)
    }
}

/// Bias-free 2-D cross-correlation with `kernel / 2` zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out x in x kernel x kernel]`
    pub weight: Param<T>,
    x: Option<Tensor<T>>,
}

struct ConvGeom {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::new(
                &[out_channels, in_channels, kernel, kernel],
                he_uniform(fan_in, out_channels * fan_in, rng),
            ),
            x: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.kernel / 2;
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<ConvGeom> {
        expect_rank(x, 4, "convolution")?;
        if x.shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, x.shape[1]
            )));
        }
        let (h, w) = (x.shape[2], x.shape[3]);
        let (ho, wo) = self.output_hw(h, w);
        Ok(ConvGeom { h, w, ho, wo })
    }

    fn im2col(&self, x: &[T], g: &ConvGeom, cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.kernel / 2);
        let hw = g.ho * g.wo;
        for ci in 0..self.in_channels {
            let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * hw..][..hw];
                    for oy in 0..g.ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        for ox in 0..g.wo {
                            let ix = (ox * s + kj) as isize - p as isize;
                            row[oy * g.wo + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    plane[iy as usize * g.w + ix as usize]
                                } else {
                                    T::zero()
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], g: &ConvGeom, dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.kernel / 2);
        let hw = g.ho * g.wo;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * hw..][..hw];
                    for oy in 0..g.ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                let dst = &mut plane[iy as usize * g.w + ix as usize];
                                *dst = *dst + row[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: &Mode) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        let b = x.shape[0];
        let ckk = self.in_channels * self.kernel * self.kernel;
        let hw = g.ho * g.wo;
        let in_len = self.in_channels * g.h * g.w;
        let mut y = Tensor::zeros(&[b, self.out_channels, g.ho, g.wo]);
        let mut cols = vec![T::zero(); ckk * hw];
        for bi in 0..b {
            self.im2col(&x.data[bi * in_len..(bi + 1) * in_len], &g, &mut cols);
            let out = &mut y.data[bi * self.out_channels * hw..(bi + 1) * self.out_channels * hw];
            T::matmul(
                self.out_channels,
                ckk,
                hw,
                &self.weight.value,
                false,
                &cols,
                false,
                out,
                false,
            );
        }
        self.x = mode.is_train().then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.x.take().ok_or_else(missing_cache)?;
        let g = self.geometry(&x)?;
        let b = x.shape[0];
        let ckk = self.in_channels * self.kernel * self.kernel;
        let hw = g.ho * g.wo;
        let in_len = self.in_channels * g.h * g.w;
        let mut dx = Tensor::zeros(&x.shape);
        let mut cols = vec![T::zero(); ckk * hw];
        let mut dcols = vec![T::zero(); ckk * hw];
        for bi in 0..b {
            let dout = &dy.data[bi * self.out_channels * hw..(bi + 1) * self.out_channels * hw];
            self.im2col(&x.data[bi * in_len..(bi + 1) * in_len], &g, &mut cols);
            T::matmul(
                self.out_channels,
                hw,
                ckk,
                dout,
                false,
                &cols,
                true,
                &mut self.weight.grad,
                true,
            );
            T::matmul(
                ckk,
                self.out_channels,
                hw,
                &self.weight.value,
                true,
                dout,
                false,
                &mut dcols,
                false,
            );
            self.col2im(&dcols, &g, &mut dx.data[bi * in_len..(bi + 1) * in_len]);
        }
        self.x = Some(x);
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, _mode: &Mode) -> Result<Tensor<T>> {
        let mut y = x.clone();
        self.mask = x.data.iter().map(|&v| v > T::zero()).collect();
        for v in &mut y.data {
            *v = v.max(T::zero());
        }
        Ok(y)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if self.mask.len() != dy.len() {
            return Err(missing_cache());
        }
        let mut dx = dy.clone();
        for (v, &m) in dx.data.iter_mut().zip(&self.mask) {
            if !m {
                *v = T::zero();
            }
        }
        Ok(dx)
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` at training time.
#[derive(Debug, Clone, Default)]
pub struct Dropout {
    pub rate: f32,
    scale: Vec<f32>,
}

impl Dropout {
    pub fn new(rate: f32) -> Self {
        Dropout {
            rate,
            scale: Vec::new(),
        }
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        let rng = match mode {
            Mode::Train(rng) if self.rate > 0.0 => rng,
            _ => {
                self.scale.clear();
                return Ok(x.clone());
            }
        };
        let keep = 1.0 / (1.0 - self.rate);
        self.scale = (0..x.len())
            .map(|_| {
                if rng.gen::<f32>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mut y = x.clone();
        for (v, &s) in y.data.iter_mut().zip(&self.scale) {
            *v = *v * lit(f64::from(s));
        }
        Ok(y)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if self.scale.is_empty() {
            return Ok(dy.clone());
        }
        let mut dx = dy.clone();
        for (v, &s) in dx.data.iter_mut().zip(&self.scale) {
            *v = *v * lit(f64::from(s));
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Vec<usize>,
}

impl GlobalAvgPool {
    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, _mode: &Mode) -> Result<Tensor<T>> {
        expect_rank(x, 4, "global average pool")?;
        let (b, c) = (x.shape[0], x.shape[1]);
        let s = x.shape[2] * x.shape[3];
        let n = lit::<T>(s as f64);
        let data = x
            .data
            .chunks_exact(s)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        self.shape = x.shape.clone();
        Tensor::from_vec(&[b, c], data)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.is_empty() {
            return Err(missing_cache());
        }
        let s = self.shape[2] * self.shape[3];
        let n = lit::<T>(s as f64);
        let data = dy
            .data
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / n, s))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }
}

/// `relu(f(x) + shortcut(x))` with `f = bn(conv(relu(bn(conv(x)))))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub spec: ResidualBlockSpec,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    relu1: Relu,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub projection: Option<(Conv2d<T>, BatchNorm<T>)>,
    out_relu: Relu,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(spec: ResidualBlockSpec, rng: &mut Rng) -> Self {
        let conv1 = Conv2d::new(spec.in_channels, spec.out_channels, 3, spec.stride, rng);
        let conv2 = Conv2d::new(spec.out_channels, spec.out_channels, 3, 1, rng);
        let mut bn2 = BatchNorm::new(spec.out_channels);
        // f(x) starts at exactly zero, so a fresh block passes its shortcut through.
        bn2.gamma.value.iter_mut().for_each(|g| *g = T::zero());
        let projection = spec.has_projection.then(|| {
            (
                Conv2d::new(spec.in_channels, spec.out_channels, 1, spec.stride, rng),
                BatchNorm::new(spec.out_channels),
            )
        });
        ResidualBlock {
            spec,
            conv1,
            bn1: BatchNorm::new(spec.out_channels),
            relu1: Relu::default(),
            conv2,
            bn2,
            projection,
            out_relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(&h, mode)?;
        let h = self.conv2.forward(&h, mode)?;
        let mut sum = self.bn2.forward(&h, mode)?;
        let shortcut = match &mut self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(x, mode)?;
                bn.forward(&s, mode)?
            }
            None => x.clone(),
        };
        if shortcut.shape != sum.shape {
            return Err(Error::Shape(format!(
                "residual shapes {:?} vs {:?}",
                sum.shape, shortcut.shape
            )));
        }
        for (a, b) in sum.data.iter_mut().zip(&shortcut.data) {
            *a = *a + *b;
        }
        self.out_relu.forward(&sum, mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dsum = self.out_relu.backward(dy)?;
        let d = self.bn2.backward(&dsum)?;
        let d = self.conv2.backward(&d)?;
        let d = self.relu1.backward(&d)?;
        let d = self.bn1.backward(&d)?;
        let mut dx = self.conv1.backward(&d)?;
        let dshort = match &mut self.projection {
            Some((conv, bn)) => {
                let d = bn.backward(&dsum)?;
                conv.backward(&d)?
            }
            None => dsum,
        };
        for (a, b) in dx.data.iter_mut().zip(&dshort.data) {
            *a = *a + *b;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Dense(Dense<T>),
    LayerNorm(LayerNorm<T>),
    BatchNorm(BatchNorm<T>),
    Conv(Conv2d<T>),
    Relu(Relu),
    Dropout(Dropout),
    GlobalAvgPool(GlobalAvgPool),
    Residual(Box<ResidualBlock<T>>),
}

impl<T: Real> Layer<T> {
    pub fn from_spec(spec: &LayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            LayerSpec::Dense { inputs, outputs } => Layer::Dense(Dense::new(inputs, outputs, rng)),
            LayerSpec::LayerNorm { dim } => Layer::LayerNorm(LayerNorm::new(dim)),
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::new(channels)),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => Layer::Conv(Conv2d::new(in_channels, out_channels, kernel, stride, rng)),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            LayerSpec::Residual(b) => Layer::Residual(Box::new(ResidualBlock::new(b, rng))),
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(l) => LayerSpec::Dense {
                inputs: l.inputs,
                outputs: l.outputs,
            },
            Layer::LayerNorm(l) => LayerSpec::LayerNorm { dim: l.dim },
            Layer::BatchNorm(l) => LayerSpec::BatchNorm {
                channels: l.channels,
            },
            Layer::Conv(l) => LayerSpec::Conv {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
            },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Dropout(l) => LayerSpec::Dropout { rate: l.rate },
            Layer::GlobalAvgPool(_) => LayerSpec::GlobalAvgPool,
            Layer::Residual(b) => LayerSpec::Residual(b.spec),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: &mut Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(l) => l.forward(x, mode),
            Layer::LayerNorm(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Conv(l) => l.forward(x, mode),
            Layer::Relu(l) => l.forward(x, mode),
            Layer::Dropout(l) => l.forward(x, mode),
            Layer::GlobalAvgPool(l) => l.forward(x, mode),
            Layer::Residual(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(l) => l.backward(dy),
            Layer::LayerNorm(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Conv(l) => l.backward(dy),
            Layer::Relu(l) => l.backward(dy),
            Layer::Dropout(l) => l.backward(dy),
            Layer::GlobalAvgPool(l) => l.backward(dy),
            Layer::Residual(l) => l.backward(dy),
        }
    }

    /// Trainable parameters in declaration order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::LayerNorm(l) => vec![&mut l.gain, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Conv(l) => vec![&mut l.weight],
            Layer::Residual(b) => {
                let b = &mut **b;
                let mut v = vec![
                    &mut b.conv1.weight,
                    &mut b.bn1.gamma,
                    &mut b.bn1.beta,
                    &mut b.conv2.weight,
                    &mut b.bn2.gamma,
                    &mut b.bn2.beta,
                ];
                if let Some((conv, bn)) = &mut b.projection {
                    v.extend([&mut conv.weight, &mut bn.gamma, &mut bn.beta]);
                }
                v
            }
            Layer::Relu(_) | Layer::Dropout(_) | Layer::GlobalAvgPool(_) => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::LayerNorm(l) => vec![&l.gain, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Conv(l) => vec![&l.weight],
            Layer::Residual(b) => {
                let mut v = vec![
                    &b.conv1.weight,
                    &b.bn1.gamma,
                    &b.bn1.beta,
                    &b.conv2.weight,
                    &b.bn2.gamma,
                    &b.bn2.beta,
                ];
                if let Some((conv, bn)) = &b.projection {
                    v.extend([&conv.weight, &bn.gamma, &bn.beta]);
                }
                v
            }
            Layer::Relu(_) | Layer::Dropout(_) | Layer::GlobalAvgPool(_) => Vec::new(),
        }
    }

    /// Non-trainable state (batch-norm running statistics) in declaration order.
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            Layer::Residual(b) => {
                let b = &mut **b;
                let mut v = vec![
                    &mut b.bn1.running_mean,
                    &mut b.bn1.running_var,
                    &mut b.bn2.running_mean,
                    &mut b.bn2.running_var,
                ];
                if let Some((_, bn)) = &mut b.projection {
                    v.extend([&mut bn.running_mean, &mut bn.running_var]);
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(7)
    }

    #[test]
    fn dense_identity_and_constant() {
        let mut d = Dense::<f64>::new(3, 3, &mut rng());
        d.weight.value = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        assert_eq!(d.forward(&x, &Mode::Infer).unwrap(), x);

        d.weight.value = vec![0.0; 9];
        d.bias.value = vec![4.0, 5.0, 6.0];
        let y = d.forward(&x, &Mode::Infer).unwrap();
        assert_eq!(y.data, vec![4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);

        assert!(d.forward(&Tensor::zeros(&[2, 4]), &Mode::Infer).is_err());
    }

    #[test]
    fn layer_norm_rows_standardised() {
        let mut ln = LayerNorm::<f64>::new(5);
        let x = Tensor::from_vec(
            &[2, 5],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, -3.0, 0.1, 0.2, 7.0, 2.0],
        )
        .unwrap();
        let y = ln.forward(&x, &Mode::Infer).unwrap();
        for row in y.data.chunks(5) {
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
        ln.bias.value = vec![0.5; 5];
        let c = ln
            .forward(
                &Tensor::from_vec(&[1, 5], vec![3.0; 5]).unwrap(),
                &Mode::Infer,
            )
            .unwrap();
        assert_eq!(c.data, vec![0.5; 5]);
    }

    #[test]
    fn batch_norm_train_and_infer() {
        let mut bn = BatchNorm::<f64>::new(2);
        let mut r = rng();
        let x = Tensor::from_vec(
            &[3, 2, 2, 2],
            (0..24).map(|i| ((i * 7) % 11) as f64 - 3.0).collect(),
        )
        .unwrap();
        let y = bn.forward(&x, &Mode::Train(&mut r)).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data[(b * 2 + c) * 4..(b * 2 + c + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let one = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            bn.forward(&one, &Mode::Train(&mut r)),
            Err(Error::BatchTooSmall(1))
        ));

        bn.running_mean = vec![2.0, -1.0];
        bn.running_var = vec![4.0, 0.25];
        bn.beta.value = vec![0.3, -0.7];
        let mean_in = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
        let out = bn.forward(&mean_in, &Mode::Infer).unwrap();
        assert!((out.data[0] - 0.3).abs() < 1e-12 && (out.data[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn conv_delta_kernel_and_shapes() {
        let mut conv = Conv2d::<f64>::new(2, 1, 3, 1, &mut rng());
        conv.weight.value = vec![0.0; 18];
        conv.weight.value[4] = 1.0; // centre of channel 0
        conv.weight.value[13] = 1.0; // centre of channel 1
        let x = Tensor::from_vec(&[1, 2, 4, 5], (0..40).map(f64::from).collect()).unwrap();
        let y = conv.forward(&x, &Mode::Infer).unwrap();
        assert_eq!(y.shape, vec![1, 1, 4, 5]);
        for i in 0..20 {
            assert_eq!(y.data[i], x.data[i] + x.data[20 + i]);
        }

        let mut s2 = Conv2d::<f32>::new(3, 4, 3, 2, &mut rng());
        let y = s2
            .forward(&Tensor::zeros(&[2, 3, 24, 24]), &Mode::Infer)
            .unwrap();
        assert_eq!(y.shape, vec![2, 4, 12, 12]);
        assert_eq!(s2.output_hw(39, 25), (20, 13));
        let p = Conv2d::<f32>::new(3, 4, 1, 2, &mut rng());
        assert_eq!(p.output_hw(39, 25), (20, 13));
        assert!(s2
            .forward(&Tensor::zeros(&[2, 2, 8, 8]), &Mode::Infer)
            .is_err());
    }

    #[test]
    fn relu_nonnegative_and_idempotent() {
        let mut r = Relu::default();
        let x = Tensor::from_vec(&[1, 6], vec![-2.0, -0.0, 0.0, 1.5, -1e-9, 3.0]).unwrap();
        let y = r.forward(&x, &Mode::Infer).unwrap();
        assert!(y.data.iter().all(|&v| v >= 0.0));
        assert_eq!(r.forward(&y, &Mode::Infer).unwrap(), y);
    }

    #[test]
    fn dropout_rates() {
        let mut d = Dropout::new(0.3);
        let x = Tensor::<f64>::from_vec(&[100, 100], vec![1.0; 10_000]).unwrap();
        assert_eq!(d.forward(&x, &mut Mode::Infer).unwrap(), x);
        let mut r = rng();
        let y = d.forward(&x, &mut Mode::Train(&mut r)).unwrap();
        let dropped = y.data.iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
        assert!((dropped - 0.3).abs() < 0.05, "{dropped}");
        let mean = y.data.iter().sum::<f64>() / 1e4;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_initialised_block_passes_shortcut() {
        let mut r = rng();
        let x = Tensor::from_vec(
            &[2, 4, 5, 3],
            (0..120).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let mut same = ResidualBlock::<f64>::new(ResidualBlockSpec::new(4, 4, 1), &mut r);
        let y = same.forward(&x, &mut Mode::Train(&mut r)).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b.max(0.0)).abs() < 1e-12);
        }

        let mut proj = ResidualBlock::<f64>::new(ResidualBlockSpec::new(4, 8, 2), &mut r);
        assert!(proj.spec.has_projection);
        let y = proj.forward(&x, &mut Mode::Train(&mut r)).unwrap();
        assert_eq!(y.shape, vec![2, 8, 3, 2]);
        let (conv, bn) = proj.projection.as_mut().unwrap();
        let s = conv.forward(&x, &Mode::Infer).unwrap();
        let s = bn.forward(&s, &Mode::Train(&mut r)).unwrap();
        for (a, b) in y.data.iter().zip(&s.data) {
            assert!((a - b.max(0.0)).abs() < 1e-12);
        }
    }
}
