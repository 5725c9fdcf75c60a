//! Deterministic paired audio-feature / motion data.
//!
//! Every sequence is driven by a smooth latent path `z` (`T x P`). Each
//! speaker owns a feature mixing matrix `U` (`P x B`) and a blendshape basis
//! `D` (`P x V*3`); features are `softplus(z U) + noise` and displacements
//! are `z D * scale`, with lip vertices' basis columns amplified.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    save_features, save_motion, save_template, DataError, DatasetManifest, FeatureSequence,
    ManifestEntry, MotionSequence, NeutralTemplate, Split,
};
use crate::diffcore::Tensor;

const LIP_GAIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub speakers: usize,
    pub sequences: usize,
    pub frames: usize,
    pub vertices: usize,
    pub bands: usize,
    /// Per-speaker latent rank. Keep `speakers * latent_dim <= d` so a
    /// linear motion decoder can span every speaker's motion subspace.
    pub latent_dim: usize,
    /// Moving-average window of the latent path; odd.
    pub window: usize,
    pub noise: f64,
    pub seed: u64,
    pub fps: f64,
    pub motion_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            speakers: 8,
            sequences: 40,
            frames: 60,
            vertices: 120,
            bands: 32,
            latent_dim: 4,
            window: 5,
            noise: 0.01,
            seed: 0,
            fps: 30.0,
            motion_scale: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let counts = [
            ("speakers", self.speakers),
            ("sequences", self.sequences),
            ("frames", self.frames),
            ("bands", self.bands),
            ("latent_dim", self.latent_dim),
            ("window", self.window),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::Invalid(format!("{name} must be positive")));
        }
        if self.window % 2 == 0 {
            return Err(DataError::Invalid(format!("window {} must be odd", self.window)));
        }
        if self.vertices < 4 {
            return Err(DataError::Invalid("at least 4 vertices required".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(DataError::Invalid(format!("noise {} must be >= 0", self.noise)));
        }
        if !(self.fps > 0.0 && self.motion_scale > 0.0) {
            return Err(DataError::Invalid("fps and motion_scale must be positive".into()));
        }
        Ok(())
    }

    /// Lip vertices: the first quarter of the index range.
    pub fn lip_indices(&self) -> Vec<usize> {
        (0..self.vertices / 4).collect()
    }

    /// Upper-face vertices: the second half of the index range.
    pub fn upper_indices(&self) -> Vec<usize> {
        (self.vertices / 2..self.vertices).collect()
    }

    fn split_of(&self, index: usize) -> Split {
        let train = (self.sequences * 8 / 10).max(1);
        let val = self.sequences / 10;
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Per-speaker generative matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerBasis {
    pub mixing: Tensor,
    pub blend: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

impl SpeakerBasis {
    fn sample(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Self {
        let p = spec.latent_dim;
        let s = 1.0 / (p as f64).sqrt();
        let mixing = gaussian(rng, &[p, spec.bands], s);
        let mut blend = gaussian(rng, &[p, spec.vertices * 3], s);
        let lips = spec.vertices / 4;
        let w = spec.vertices * 3;
        for row in blend.data_mut().chunks_mut(w) {
            for v in &mut row[..lips * 3] {
                *v *= LIP_GAIN;
            }
        }
        Self { mixing, blend }
    }
}

/// Moving average (window `w`) of unit Gaussian noise, `frames x dim`.
pub fn latent_path(rng: &mut ChaCha8Rng, frames: usize, dim: usize, window: usize) -> Tensor {
    let raw = gaussian(rng, &[frames + window - 1, dim], 1.0);
    let mut out = vec![0.0; frames * dim];
    for t in 0..frames {
        for k in 0..window {
            for (o, r) in out[t * dim..(t + 1) * dim].iter_mut().zip(raw.row(t + k)) {
                *o += r;
            }
        }
    }
    for v in &mut out {
        *v /= window as f64;
    }
    Tensor::new(vec![frames, dim], out).expect("sized")
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().expect("matrix");
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.get2(i, p);
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("sized")
}

/// Renders one latent path through a speaker's matrices. `noise` is
/// `T x B` unit noise scaled by the spec's noise level.
pub fn render_pair(
    z: &Tensor,
    basis: &SpeakerBasis,
    noise: &Tensor,
    spec: &SyntheticSpec,
) -> (FeatureSequence, MotionSequence) {
    let feats = matmul(z, &basis.mixing).zip_map(noise, |x, n| softplus(x) + spec.noise * n);
    let motion = matmul(z, &basis.blend).map(|v| v * spec.motion_scale);
    let frames = z.rows();
    (
        FeatureSequence::new(feats).expect("finite features"),
        MotionSequence::new(
            motion.reshape(vec![frames, spec.vertices, 3]).expect("sized"),
            spec.fps,
        )
        .expect("finite motion"),
    )
}

/// Generated dataset location.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
}

/// Writes template, per-sequence feature/motion files and `manifest.json`
/// into `out`. Output bytes are a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<SyntheticDataset, DataError> {
    spec.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut tpl = gaussian(&mut rng, &[spec.vertices, 3], 1.0);
    for p in tpl.data_mut().chunks_mut(3) {
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-12);
        p.iter_mut().for_each(|c| *c /= norm);
    }
    let template = NeutralTemplate::new(tpl)?;
    save_template(out.join("template.dtpl"), &template)?;

    let bases: Vec<SpeakerBasis> = (0..spec.speakers)
        .map(|_| SpeakerBasis::sample(&mut rng, spec))
        .collect();

    let mut entries = Vec::with_capacity(spec.sequences);
    for i in 0..spec.sequences {
        let speaker = i % spec.speakers;
        let z = latent_path(&mut rng, spec.frames, spec.latent_dim, spec.window);
        let noise = gaussian(&mut rng, &[spec.frames, spec.bands], 1.0);
        let (features, motion) = render_pair(&z, &bases[speaker], &noise, spec);
        let fname = format!("seq_{i:03}.dtft");
        let mname = format!("seq_{i:03}.dtmo");
        save_features(out.join(&fname), &features)?;
        save_motion(out.join(&mname), &motion)?;
        entries.push(ManifestEntry {
            speaker,
            features: fname,
            motion: mname,
            split: spec.split_of(i),
        });
    }

    let lips = spec.lip_indices();
    let half = lips.len() / 2;
    let manifest = DatasetManifest {
        template: "template.dtpl".into(),
        speakers: spec.speakers,
        entries,
        upper_lip_indices: lips[..half].to_vec(),
        lower_lip_indices: lips[half..].to_vec(),
        lip_indices: lips,
        upper_indices: spec.upper_indices(),
    };
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(SyntheticDataset {
        manifest,
        manifest_path,
    })
}

/// Draws the speaker bases exactly as [`generate_synthetic`] does.
pub fn speaker_bases(spec: &SyntheticSpec) -> Vec<SpeakerBasis> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    gaussian(&mut rng, &[spec.vertices, 3], 1.0);
    (0..spec.speakers)
        .map(|_| SpeakerBasis::sample(&mut rng, spec))
        .collect()
}
