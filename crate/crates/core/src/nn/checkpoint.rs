//! Binary checkpoint: magic `QBEM`, a format version, the layer specs, then
//! every parameter tensor (and batch-norm running statistics) in
//! declaration order as little-endian `f32`.

use std::io::{Read, Write};

use rand::SeedableRng;

use super::layers::{Layer, LayerSpec, ResidualBlockSpec, Rng};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"QBEM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Shape(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b[0])
}

fn truncated(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated("checkpoint".into()),
        _ => Error::Io(e),
    }
}

fn put_floats<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_floats<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(truncated)?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn write_spec<W: Write>(w: &mut W, spec: &LayerSpec) -> Result<()> {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            w.write_all(&[0])?;
            put_u32(w, inputs)?;
            put_u32(w, outputs)
        }
        LayerSpec::LayerNorm { dim } => {
            w.write_all(&[1])?;
            put_u32(w, dim)
        }
        LayerSpec::BatchNorm { channels } => {
            w.write_all(&[2])?;
            put_u32(w, channels)
        }
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            w.write_all(&[3])?;
            for v in [in_channels, out_channels, kernel, stride] {
                put_u32(w, v)?;
            }
            Ok(())
        }
        LayerSpec::Relu => Ok(w.write_all(&[4])?),
        LayerSpec::Dropout { rate } => {
            w.write_all(&[5])?;
            Ok(w.write_all(&rate.to_le_bytes())?)
        }
        LayerSpec::GlobalAvgPool => Ok(w.write_all(&[6])?),
        LayerSpec::Residual(b) => {
            w.write_all(&[7])?;
            for v in [b.in_channels, b.out_channels, b.stride] {
                put_u32(w, v)?;
            }
            Ok(w.write_all(&[u8::from(b.has_projection)])?)
        }
    }
}

fn read_spec<R: Read>(r: &mut R) -> Result<LayerSpec> {
    let spec = match get_u8(r)? {
        0 => LayerSpec::Dense {
            inputs: get_u32(r)?,
            outputs: get_u32(r)?,
        },
        1 => LayerSpec::LayerNorm { dim: get_u32(r)? },
        2 => LayerSpec::BatchNorm {
            channels: get_u32(r)?,
        },
        3 => LayerSpec::Conv {
            in_channels: get_u32(r)?,
            out_channels: get_u32(r)?,
            kernel: get_u32(r)?,
            stride: get_u32(r)?,
        },
        4 => LayerSpec::Relu,
        5 => LayerSpec::Dropout {
            rate: get_floats(r, 1)?[0],
        },
        6 => LayerSpec::GlobalAvgPool,
        7 => LayerSpec::Residual(ResidualBlockSpec {
            in_channels: get_u32(r)?,
            out_channels: get_u32(r)?,
            stride: get_u32(r)?,
            has_projection: get_u8(r)? != 0,
        }),
        tag => return Err(Error::Parse(format!("unknown layer tag {tag}"))),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn write_layers<'a, W: Write>(
    layers: impl IntoIterator<Item = &'a Layer<f32>>,
    mut w: W,
) -> Result<()> {
    let layers: Vec<&Layer<f32>> = layers.into_iter().collect();
    w.write_all(&CHECKPOINT_MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut w, layers.len())?;
    for l in &layers {
        write_spec(&mut w, &l.spec())?;
    }
    for l in &layers {
        for p in l.params() {
            put_u32(&mut w, p.shape.len())?;
            for &d in &p.shape {
                put_u32(&mut w, d)?;
            }
            put_floats(&mut w, &p.value)?;
        }
        let mut l = (*l).clone();
        for b in l.buffers_mut() {
            put_u32(&mut w, b.len())?;
            put_floats(&mut w, b)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_layers<R: Read>(mut r: R) -> Result<Vec<Layer<f32>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = get_u32(&mut r)? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(version));
    }
    let n = get_u32(&mut r)?;
    let specs = (0..n)
        .map(|_| read_spec(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = Rng::seed_from_u64(0);
    let mut layers = Vec::with_capacity(n);
    for spec in &specs {
        let mut layer = Layer::<f32>::from_spec(spec, &mut rng)?;
        for p in layer.params_mut() {
            let rank = get_u32(&mut r)?;
            let shape = (0..rank)
                .map(|_| get_u32(&mut r))
                .collect::<Result<Vec<_>>>()?;
            if shape != p.shape {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {shape:?}, layer expects {:?}",
                    p.shape
                )));
            }
            p.value = get_floats(&mut r, p.len())?;
        }
        for b in layer.buffers_mut() {
            let len = get_u32(&mut r)?;
            if len != b.len() {
                return Err(Error::Shape(format!(
                    "checkpoint buffer of {len}, layer expects {}",
                    b.len()
                )));
            }
            *b = get_floats(&mut r, len)?;
        }
        layers.push(layer);
    }
    Ok(layers)
}
