//! Little-endian binary containers for motion, template and feature data.
//!
//! ```text
//! motion    "DTMO" u32 version u32 T u32 V f32 fps  T*V*3 x f32
//! template  "DTPL" u32 version u32 V                V*3   x f32
//! features  "DTFT" u32 version u32 frames u32 dim   frames*dim x f32
//! ```

use std::fs;
use std::path::Path;

use super::{DataError, FeatureSequence, MotionSequence, NeutralTemplate};
use crate::diffcore::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const MOTION_MAGIC: &[u8; 4] = b"DTMO";
const TEMPLATE_MAGIC: &[u8; 4] = b"DTPL";
const FEATURE_MAGIC: &[u8; 4] = b"DTFT";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(DataError::Truncated {
                needed: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), DataError> {
        let found = self.take(4)?;
        if found != expected {
            return Err(DataError::BadMagic {
                expected: String::from_utf8_lossy(expected).into(),
                found: String::from_utf8_lossy(found).into(),
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn version(&mut self) -> Result<(), DataError> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(DataError::VersionMismatch {
                expected: FORMAT_VERSION,
                found: v,
            });
        }
        Ok(())
    }

    fn f32_values(&mut self, count: usize, what: &str) -> Result<Vec<f64>, DataError> {
        let bytes = self.take(count * 4)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(what.into()));
        }
        Ok(values)
    }

    fn finish(&self) -> Result<(), DataError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DataError::TrailingBytes(n)),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32, DataError> {
    u32::try_from(v).map_err(|_| DataError::Invalid(format!("{what} {v} exceeds u32")))
}

pub fn write_motion(m: &MotionSequence) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(20 + m.displacements().len() * 4);
    out.extend_from_slice(MOTION_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(m.frames(), "frame count")?);
    put_u32(&mut out, dim_u32(m.vertices(), "vertex count")?);
    out.extend_from_slice(&(m.fps() as f32).to_le_bytes());
    put_f32s(&mut out, m.displacements().data());
    Ok(out)
}

pub fn read_motion(bytes: &[u8]) -> Result<MotionSequence, DataError> {
    let mut r = Reader::new(bytes);
    r.magic(MOTION_MAGIC)?;
    r.version()?;
    let t = r.u32()? as usize;
    let v = r.u32()? as usize;
    let fps = r.f32()? as f64;
    if t == 0 || v == 0 {
        return Err(DataError::Invalid(format!("empty motion ({t} frames, {v} vertices)")));
    }
    let values = r.f32_values(t * v * 3, "motion")?;
    r.finish()?;
    MotionSequence::new(Tensor::new(vec![t, v, 3], values).expect("sized"), fps)
}

pub fn write_template(t: &NeutralTemplate) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(12 + t.positions().len() * 4);
    out.extend_from_slice(TEMPLATE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(t.vertex_count(), "vertex count")?);
    put_f32s(&mut out, t.positions().data());
    Ok(out)
}

pub fn read_template(bytes: &[u8]) -> Result<NeutralTemplate, DataError> {
    let mut r = Reader::new(bytes);
    r.magic(TEMPLATE_MAGIC)?;
    r.version()?;
    let v = r.u32()? as usize;
    if v == 0 {
        return Err(DataError::Invalid("template with no vertices".into()));
    }
    let values = r.f32_values(v * 3, "template")?;
    r.finish()?;
    NeutralTemplate::new(Tensor::new(vec![v, 3], values).expect("sized"))
}

pub fn write_features(f: &FeatureSequence) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(16 + f.values().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, dim_u32(f.frames(), "frame count")?);
    put_u32(&mut out, dim_u32(f.dim(), "feature dim")?);
    put_f32s(&mut out, f.values().data());
    Ok(out)
}

pub fn read_features(bytes: &[u8]) -> Result<FeatureSequence, DataError> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version()?;
    let frames = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if frames == 0 || dim == 0 {
        return Err(DataError::Invalid(format!("empty features ({frames}x{dim})")));
    }
    let values = r.f32_values(frames * dim, "features")?;
    r.finish()?;
    FeatureSequence::new(Tensor::new(vec![frames, dim], values).expect("sized"))
}

fn save(path: &Path, bytes: Vec<u8>) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

fn load(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::io(path, e))
}

pub fn save_motion(path: impl AsRef<Path>, m: &MotionSequence) -> Result<(), DataError> {
    save(path.as_ref(), write_motion(m)?)
}

pub fn load_motion(path: impl AsRef<Path>) -> Result<MotionSequence, DataError> {
    read_motion(&load(path.as_ref())?)
}

pub fn save_template(path: impl AsRef<Path>, t: &NeutralTemplate) -> Result<(), DataError> {
    save(path.as_ref(), write_template(t)?)
}

pub fn load_template(path: impl AsRef<Path>) -> Result<NeutralTemplate, DataError> {
    read_template(&load(path.as_ref())?)
}

pub fn save_features(path: impl AsRef<Path>, f: &FeatureSequence) -> Result<(), DataError> {
    save(path.as_ref(), write_features(f)?)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence, DataError> {
    read_features(&load(path.as_ref())?)
}
