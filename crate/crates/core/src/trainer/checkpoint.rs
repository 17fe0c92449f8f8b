//! Binary checkpoint format. All integers little-endian:
//!
//! ```text
//! "LSNM"  u32 version=1  u8 task
//! u32 len, descriptor (UTF-8)   e.g. "conv(8),relu,maxpool,fc(1);input=32;seed=7;epochs=30"
//! 3 × f32 channel means
//! per parameter tensor, layer order, weights then bias:
//!     u32 rank, rank × u32 extents, f32 payload
//! ```

use thiserror::Error;

use super::{ModelCheckpoint, Task};
use crate::neuralnet::{Architecture, LayerParams, Parameters, Tensor};

pub const MAGIC: &[u8; 4] = b"LSNM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint")]
    NotCheckpoint,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected end of checkpoint")]
    UnexpectedEnd,
    #[error("invalid task tag {0}")]
    BadTask(u8),
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
    #[error("tensor {index} has shape {found:?}, descriptor implies {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
}

fn descriptor(m: &ModelCheckpoint) -> String {
    format!(
        "{};input={};seed={};epochs={}",
        m.architecture, m.input_size, m.seed, m.epochs
    )
}

struct Descriptor {
    architecture: Architecture,
    input_size: usize,
    seed: u64,
    epochs: usize,
}

fn parse_descriptor(text: &str) -> Result<Descriptor, CheckpointError> {
    let bad = |msg: String| CheckpointError::Descriptor(msg);
    let mut parts = text.split(';');
    let architecture: Architecture = parts
        .next()
        .unwrap_or_default()
        .parse()
        .map_err(|e| bad(format!("{e}")))?;
    let (mut input_size, mut seed, mut epochs) = (None, None, None);
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("field {part:?} is not key=value")))?;
        let num = || {
            value
                .parse::<u64>()
                .map_err(|_| bad(format!("{key} has non-integer value {value:?}")))
        };
        match key {
            "input" => input_size = Some(num()? as usize),
            "seed" => seed = Some(num()?),
            "epochs" => epochs = Some(num()? as usize),
            _ => return Err(bad(format!("unknown field {key:?}"))),
        }
    }
    Ok(Descriptor {
        architecture,
        input_size: input_size.ok_or_else(|| bad("missing input".into()))?,
        seed: seed.ok_or_else(|| bad("missing seed".into()))?,
        epochs: epochs.ok_or_else(|| bad("missing epochs".into()))?,
    })
}

pub fn save_checkpoint(m: &ModelCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(m.task.tag());
    let desc = descriptor(m);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    for mean in m.channel_means {
        out.extend_from_slice(&mean.to_le_bytes());
    }
    for t in m.params.tensors() {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::UnexpectedEnd)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::UnexpectedEnd)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::NotCheckpoint);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let tag = r.take(1)?[0];
    let task = Task::from_tag(tag).ok_or(CheckpointError::BadTask(tag))?;
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| CheckpointError::Descriptor("not UTF-8".into()))?;
    let desc = parse_descriptor(text)?;
    let channel_means = [r.f32()?, r.f32()?, r.f32()?];

    let shapes = desc
        .architecture
        .param_shapes(desc.input_size)
        .map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    let mut index = 0;
    let mut read_tensor = |r: &mut Reader, expected: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                index,
                expected: expected.to_vec(),
                found: shape,
            });
        }
        index += 1;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::UnexpectedEnd)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data).expect("extents checked"))
    };
    let mut layers = Vec::with_capacity(shapes.len());
    for s in &shapes {
        layers.push(match s {
            None => None,
            Some((ws, bs)) => Some(LayerParams {
                weights: read_tensor(&mut r, ws)?,
                bias: read_tensor(&mut r, bs)?,
            }),
        });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(ModelCheckpoint {
        task,
        architecture: desc.architecture,
        input_size: desc.input_size,
        channel_means,
        params: Parameters::from_layers(layers),
        seed: desc.seed,
        epochs: desc.epochs,
    })
}
