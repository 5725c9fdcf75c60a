use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DualTalker, ModelConfig, ModelError};
use crate::diffcore::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DTCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub precision: Precision,
    /// Free-form training settings (loss weights and the like).
    #[serde(default)]
    pub training: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes every parameter of `model`, in registration order.
pub fn write_checkpoint(
    model: &DualTalker,
    precision: Precision,
    training: serde_json::Value,
    out: &mut impl Write,
) -> Result<(), ModelError> {
    let meta = CheckpointMeta {
        model: model.config().clone(),
        precision,
        training,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| bad(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, json.len())?;
    buf.extend_from_slice(&json);
    put_u32(&mut buf, model.params().len())?;
    for (_, p) in model.params().iter() {
        put_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut buf, d)?;
        }
        for &x in p.value.data() {
            match precision {
                Precision::F64 => buf.extend_from_slice(&x.to_le_bytes()),
                Precision::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    out.write_all(&buf).map_err(|e| bad(e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            bad(format!("truncated: needed {} more bytes at offset {}", n, self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a checkpoint and rebuilds the model it describes.
pub fn read_checkpoint(input: &mut impl Read) -> Result<(DualTalker, CheckpointMeta), ModelError> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| bad(e.to_string()))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let json_len = c.u32()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(c.take(json_len)?).map_err(|e| bad(e.to_string()))?;
    let mut model = DualTalker::with_seed(meta.model.clone(), 0)?;
    let count = c.u32()?;
    if count != model.params().len() {
        return Err(bad(format!(
            "{count} parameters stored, model has {}",
            model.params().len()
        )));
    }
    let width = match meta.precision {
        Precision::F64 => 8,
        Precision::F32 => 4,
    };
    for _ in 0..count {
        let name_len = c.u32()?;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(width).ok_or_else(|| bad("size overflow"))?)?;
        let data: Vec<f64> = match meta.precision {
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        let expected = model.params().value(id).shape().to_vec();
        if expected != shape {
            return Err(bad(format!(
                "{name}: stored shape {shape:?}, model expects {expected:?}"
            )));
        }
        let value = Tensor::new(shape, data)?;
        if !value.is_finite() {
            return Err(bad(format!("{name} holds non-finite values")));
        }
        model.params_mut().get_mut(id).value = value;
    }
    if c.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(
    model: &DualTalker,
    precision: Precision,
    training: serde_json::Value,
    path: &Path,
) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(model, precision, training, &mut buf)?;
    std::fs::write(path, buf).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(DualTalker, CheckpointMeta), ModelError> {
    let file = std::fs::File::open(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}
