//! Finite-difference verification of the analytic layer gradients.

use rand::{Rng as _, SeedableRng};

use super::layers::{Layer, LayerSpec, Mode, Rng};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// Below this magnitude errors are measured absolutely rather than relative
/// to the gradient.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Builds a layer and nudges every parameter away from its initial value so
/// that zero or unit initialisations do not hide gradient terms.
fn randomised_layer<T: Real>(spec: &LayerSpec, seed: u64) -> Result<Layer<T>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut layer = Layer::<T>::from_spec(spec, &mut rng)?;
    for p in layer.params_mut() {
        for v in &mut p.value {
            *v = *v + T::from_f64(rng.gen_range(-0.5..0.5)).unwrap();
        }
    }
    Ok(layer)
}

fn copy_params<A: Real, B: Real>(from: &Layer<A>, to: &mut Layer<B>) {
    for (src, dst) in from.params().into_iter().zip(to.params_mut()) {
        for (d, s) in dst.value.iter_mut().zip(&src.value) {
            *d = B::from_f64(s.to_f64().unwrap()).unwrap();
        }
    }
}

const DROPOUT_SEED: u64 = 0x5eed;

/// Loss `sum(weights * layer(x))`, evaluated in training mode with a fixed
/// dropout stream.
fn probe<T: Real>(layer: &mut Layer<T>, x: &Tensor<T>, weights: &[T]) -> Result<T> {
    let mut rng = Rng::seed_from_u64(DROPOUT_SEED);
    let y = layer.forward(x, &mut Mode::Train(&mut rng))?;
    Ok(y.data.iter().zip(weights).map(|(&a, &b)| a * b).sum())
}

struct Analytic<T> {
    input: Vec<T>,
    params: Vec<Vec<T>>,
}

fn analytic<T: Real>(layer: &mut Layer<T>, x: &Tensor<T>, weights: &[T]) -> Result<Analytic<T>> {
    let mut rng = Rng::seed_from_u64(DROPOUT_SEED);
    layer.zero_grad();
    let y = layer.forward(x, &mut Mode::Train(&mut rng))?;
    let dy = Tensor::from_vec(&y.shape, weights.to_vec())?;
    let dx = layer.backward(&dy)?;
    Ok(Analytic {
        input: dx.data,
        params: layer.params().iter().map(|p| p.grad.clone()).collect(),
    })
}

/// Richardson-extrapolated central difference starting from step `eps`:
/// two extrapolations (from steps h, h/2 and h/2, h/4) must agree. When they
/// do not, a ReLU kink lies inside the stencil and the step shrinks tenfold.
fn central(mut at: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let mut d = |h: f64| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
    let mut h = eps;
    loop {
        let (d1, d2, d4) = (d(h)?, d(h / 2.0)?, d(h / 4.0)?);
        let (r1, r2) = ((4.0 * d2 - d1) / 3.0, (4.0 * d4 - d2) / 3.0);
        if (r1 - r2).abs() <= 1e-7 * r1.abs().max(r2.abs()) + 1e-10 || h < 1e-8 {
            return Ok(r2);
        }
        h /= 10.0;
    }
}

/// Central differences in 64-bit for every input element and parameter.
fn numeric(
    layer: &mut Layer<f64>,
    x: &Tensor<f64>,
    weights: &[f64],
    eps: f64,
) -> Result<Analytic<f64>> {
    let mut x = x.clone();
    let mut input = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data[i];
        let g = central(
            |h| {
                x.data[i] = orig + h;
                probe(layer, &x, weights)
            },
            eps,
        )?;
        x.data[i] = orig;
        input.push(g);
    }
    let n_params = layer.params().len();
    let mut params = Vec::with_capacity(n_params);
    for pi in 0..n_params {
        let len = layer.params()[pi].len();
        let mut g = Vec::with_capacity(len);
        for j in 0..len {
            let orig = layer.params()[pi].value[j];
            let d = central(
                |h| {
                    layer.params_mut()[pi].value[j] = orig + h;
                    probe(layer, &x, weights)
                },
                eps,
            )?;
            layer.params_mut()[pi].value[j] = orig;
            g.push(d);
        }
        params.push(g);
    }
    Ok(Analytic { input, params })
}

fn max_error<T: Real>(a: &Analytic<T>, n: &Analytic<f64>) -> f64 {
    let pairs = a.input.iter().zip(&n.input).chain(
        a.params
            .iter()
            .zip(&n.params)
            .flat_map(|(x, y)| x.iter().zip(y)),
    );
    pairs
        .map(|(&a, &n)| relative_error(a.to_f64().unwrap(), n))
        .fold(0.0, f64::max)
}

/// Per-tensor `max|a - n| / max|n|`. Single precision accumulates absolute
/// rounding error on the scale of the largest terms, so tiny individual
/// entries are judged against their tensor's scale.
fn max_tensor_error<T: Real>(a: &Analytic<T>, n: &Analytic<f64>) -> f64 {
    let tensors = std::iter::once((&a.input, &n.input)).chain(a.params.iter().zip(&n.params));
    tensors
        .map(|(a, n)| {
            let diff = a
                .iter()
                .zip(n)
                .map(|(x, &y)| (x.to_f64().unwrap() - y).abs())
                .fold(0.0, f64::max);
            let scale = n.iter().map(|y| y.abs()).fold(RELATIVE_FLOOR, f64::max);
            diff / scale
        })
        .fold(0.0, f64::max)
}

fn probe_weights(x: &Tensor<f64>, layer: &mut Layer<f64>, seed: u64) -> Result<Vec<f64>> {
    let mut rng = Rng::seed_from_u64(seed.wrapping_add(1));
    let out = layer.forward(x, &mut Mode::Train(&mut Rng::seed_from_u64(DROPOUT_SEED)))?;
    Ok((0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Maximum relative error between the analytic 64-bit gradient and central
/// differences over every input element and parameter.
pub fn grad_check(spec: &LayerSpec, x: &Tensor<f64>, eps: f64, seed: u64) -> Result<f64> {
    let mut layer = randomised_layer::<f64>(spec, seed)?;
    let weights = probe_weights(x, &mut layer, seed)?;
    let a = analytic(&mut layer, x, &weights)?;
    let n = numeric(&mut layer, x, &weights, eps)?;
    Ok(max_error(&a, &n))
}

/// 64-bit check with both error measures: `(elementwise, per_tensor)`.
/// Elementwise errors on gradients below about 1e-5 are limited by the
/// rounding of the finite differences themselves; the per-tensor measure
/// judges every entry against the scale of its tensor.
pub fn grad_check_both(
    spec: &LayerSpec,
    x: &Tensor<f64>,
    eps: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut layer = randomised_layer::<f64>(spec, seed)?;
    let weights = probe_weights(x, &mut layer, seed)?;
    let a = analytic(&mut layer, x, &weights)?;
    let n = numeric(&mut layer, x, &weights, eps)?;
    Ok((max_error(&a, &n), max_tensor_error(&a, &n)))
}

/// Checks the 32-bit analytic gradient against 64-bit central differences
/// taken at the same (f32-representable) point, as a per-tensor relative
/// error.
pub fn grad_check_f32(spec: &LayerSpec, x: &Tensor<f64>, eps: f64, seed: u64) -> Result<f64> {
    let mut wide = randomised_layer::<f64>(spec, seed)?;
    let mut narrow = randomised_layer::<f32>(spec, seed)?;
    copy_params(&wide, &mut narrow);
    copy_params(&narrow, &mut wide);
    let x32: Tensor<f32> = x.cast();
    let x64: Tensor<f64> = x32.cast();
    let weights = probe_weights(&x64, &mut wide, seed)?;
    let w32: Vec<f32> = weights.iter().map(|&w| w as f32).collect();
    let weights: Vec<f64> = w32.iter().map(|&w| f64::from(w)).collect();
    let a = analytic(&mut narrow, &x32, &w32)?;
    let n = numeric(&mut wide, &x64, &weights, eps)?;
    Ok(max_tensor_error(&a, &n))
}
