//! Sequences, templates, file formats and the synthetic dataset generator.

mod audio;
mod dataset;
mod format;
mod obj;
mod resample;
mod synth;

pub use audio::{extract_features, AudioClip, FeatureOptions};
pub use dataset::{Dataset, DatasetManifest, ManifestEntry, RegionSet, Sample, Split};
pub use format::{
    load_features, load_motion, load_template, read_features, read_motion, read_template,
    save_features, save_motion, save_template, write_features, write_motion, write_template,
    FORMAT_VERSION,
};
pub use obj::export_obj;
pub use resample::resample_features;
pub use synth::{
    generate_synthetic, latent_path, render_pair, speaker_bases, SpeakerBasis, SyntheticDataset,
    SyntheticSpec,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::diffcore::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("clip has {samples} samples, one analysis frame needs {frame}")]
    ClipTooShort { samples: usize, frame: usize },
    #[error("{bands} bands requested but a frame only has {bins} frequency bins")]
    TooManyBands { bands: usize, bins: usize },
    #[error("invalid audio clip: {0}")]
    InvalidClip(String),
    #[error("resampling needs at least 2 source and target frames (got {from} -> {to})")]
    DegenerateLength { from: usize, to: usize },
    #[error("vertex count mismatch: template has {template}, motion has {motion}")]
    VertexMismatch { template: usize, motion: usize },
    #[error("frame {frame} out of range for a {frames}-frame sequence")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, DataError::Io { .. })
    }
}

/// Rest-pose vertex positions, `V x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeutralTemplate {
    positions: Tensor,
}

impl NeutralTemplate {
    pub fn new(positions: Tensor) -> Result<Self, DataError> {
        match positions.shape() {
            &[v, 3] if v >= 4 => {}
            s => return Err(DataError::Invalid(format!("template shape {s:?}, need [V>=4, 3]"))),
        }
        if !positions.is_finite() {
            return Err(DataError::NonFinite("template".into()));
        }
        Ok(Self { positions })
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.rows()
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }
}

/// Per-frame vertex displacements over a template, `T x V x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    displacements: Tensor,
    fps: f64,
}

impl MotionSequence {
    pub fn new(displacements: Tensor, fps: f64) -> Result<Self, DataError> {
        match displacements.shape() {
            &[_, _, 3] => {}
            s => return Err(DataError::Invalid(format!("motion shape {s:?}, need [T, V, 3]"))),
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(DataError::Invalid(format!("fps must be positive, got {fps}")));
        }
        if !displacements.is_finite() {
            return Err(DataError::NonFinite("motion".into()));
        }
        Ok(Self { displacements, fps })
    }

    /// Builds from a `T x (V*3)` matrix of flattened frames.
    pub fn from_flat(flat: &Tensor, fps: f64) -> Result<Self, DataError> {
        let (t, w) = flat
            .dims2()
            .ok_or_else(|| DataError::Invalid("flat motion must be a matrix".into()))?;
        if w % 3 != 0 {
            return Err(DataError::Invalid(format!("row width {w} is not a multiple of 3")));
        }
        let d = flat
            .clone()
            .reshape(vec![t, w / 3, 3])
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        Self::new(d, fps)
    }

    pub fn zeros(frames: usize, vertices: usize, fps: f64) -> Self {
        Self::new(Tensor::zeros(&[frames, vertices, 3]), fps).expect("valid zero motion")
    }

    pub fn frames(&self) -> usize {
        self.displacements.shape()[0]
    }

    pub fn vertices(&self) -> usize {
        self.displacements.shape()[1]
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn displacements(&self) -> &Tensor {
        &self.displacements
    }

    /// Displacement of vertex `v` at frame `t`.
    pub fn vertex(&self, t: usize, v: usize) -> [f64; 3] {
        let i = (t * self.vertices() + v) * 3;
        let d = self.displacements.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    /// `T x (V*3)` view used by the encoders and decoders.
    pub fn to_flat(&self) -> Tensor {
        self.displacements
            .clone()
            .reshape(vec![self.frames(), self.vertices() * 3])
            .expect("same element count")
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self, DataError> {
        if len == 0 || start + len > self.frames() {
            return Err(DataError::FrameOutOfRange {
                frame: start + len,
                frames: self.frames(),
            });
        }
        let w = self.vertices() * 3;
        let data = self.displacements.data()[start * w..(start + len) * w].to_vec();
        Self::new(
            Tensor::new(vec![len, self.vertices(), 3], data).expect("consistent"),
            self.fps,
        )
    }
}

/// Framewise feature vectors, `frames x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    values: Tensor,
}

impl FeatureSequence {
    pub fn new(values: Tensor) -> Result<Self, DataError> {
        if values.dims2().is_none() {
            return Err(DataError::Invalid(format!(
                "feature shape {:?}, need [frames, dim]",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(DataError::NonFinite("features".into()));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self, DataError> {
        if len == 0 || start + len > self.frames() {
            return Err(DataError::FrameOutOfRange {
                frame: start + len,
                frames: self.frames(),
            });
        }
        let d = self.dim();
        let data = self.values.data()[start * d..(start + len) * d].to_vec();
        Self::new(Tensor::new(vec![len, d], data).expect("consistent"))
    }
}

/// Absolute vertex positions `template + displacement`, `T x V x 3`.
pub fn motion_to_positions(
    template: &NeutralTemplate,
    motion: &MotionSequence,
) -> Result<Tensor, DataError> {
    let v = template.vertex_count();
    if motion.vertices() != v {
        return Err(DataError::VertexMismatch {
            template: v,
            motion: motion.vertices(),
        });
    }
    let base = template.positions().data();
    let data = motion
        .displacements()
        .data()
        .chunks(v * 3)
        .flat_map(|frame| frame.iter().zip(base).map(|(d, p)| p + d))
        .collect();
    Ok(Tensor::new(vec![motion.frames(), v, 3], data).expect("same shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn template(v: usize) -> NeutralTemplate {
        let data = (0..v * 3).map(|i| i as f64 * 0.5 - 1.0).collect();
        NeutralTemplate::new(Tensor::new(vec![v, 3], data).unwrap()).unwrap()
    }

    #[test]
    fn zero_displacement_repeats_template() {
        let tpl = template(5);
        let pos = motion_to_positions(&tpl, &MotionSequence::zeros(3, 5, 30.0)).unwrap();
        for frame in pos.data().chunks(15) {
            assert_eq!(frame, tpl.positions().data());
        }
    }

    #[test]
    fn single_vertex_shift() {
        let tpl = template(4);
        let mut d = Tensor::zeros(&[2, 4, 3]);
        d.data_mut()[0] = 1.0;
        d.data_mut()[12] = 1.0;
        let pos = motion_to_positions(&tpl, &MotionSequence::new(d, 25.0).unwrap()).unwrap();
        for t in 0..2 {
            for i in 0..12 {
                let expected = tpl.positions().data()[i] + if i == 0 { 1.0 } else { 0.0 };
                assert_eq!(pos.data()[t * 12 + i], expected);
            }
        }
    }

    #[test]
    fn random_positions_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, v) = (4, 6);
        let tpl_data: Vec<f64> = (0..v * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let disp: Vec<f64> = (0..t * v * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tpl = NeutralTemplate::new(Tensor::new(vec![v, 3], tpl_data.clone()).unwrap()).unwrap();
        let m = MotionSequence::new(Tensor::new(vec![t, v, 3], disp.clone()).unwrap(), 30.0).unwrap();
        let pos = motion_to_positions(&tpl, &m).unwrap();
        for ti in 0..t {
            for vi in 0..v {
                for c in 0..3 {
                    let want = tpl_data[vi * 3 + c] + disp[(ti * v + vi) * 3 + c];
                    assert!((pos.data()[(ti * v + vi) * 3 + c] - want).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn vertex_mismatch() {
        let err = motion_to_positions(&template(5), &MotionSequence::zeros(2, 6, 30.0)).unwrap_err();
        assert!(matches!(err, DataError::VertexMismatch { template: 5, motion: 6 }));
    }

    #[test]
    fn template_needs_four_vertices() {
        assert!(NeutralTemplate::new(Tensor::zeros(&[3, 3])).is_err());
    }
}
