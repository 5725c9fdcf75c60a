//! Optimizer, joint training loop, evaluation and ablations.

mod ablate;
mod adam;

pub use ablate::{ablate, AblationReport, AblationRow, Variant};
pub use adam::{adam_step, clip_gradients, grad_norm, AdamConfig, AdamState};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{resample_features, DataError, Dataset, FeatureSequence, MotionSequence, Split};
use crate::diffcore::{DiffError, Tape, Tensor};
use crate::losses::{total_loss, CCRLConfig, DualTerms, LossBundle, LossError, LossWeights, StepTerms};
use crate::metrics::{MetricError, MetricReport};
use crate::model::{save_checkpoint, DualTalker, ModelConfig, ModelError, Precision};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("non-finite {term} at step {step}: {detail}")]
    NonFinite {
        step: u64,
        term: String,
        detail: String,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Train the primal task alone (no dual pass, no duality or consistency terms).
    pub disable_dual: bool,
    pub disable_ccrl: bool,
    pub disable_dr: bool,
    pub share_transpose_codec: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub ccrl: CCRLConfig,
    pub ablation: Ablation,
    /// Global gradient-norm cap; off unless set.
    pub grad_clip: Option<f64>,
    /// Score the validation split after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            epochs: 100,
            max_steps: None,
            seed: 0,
            loss_weights: LossWeights::default(),
            ccrl: CCRLConfig::default(),
            ablation: Ablation::default(),
            grad_clip: None,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Loss weights after the ablation switches are applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights;
        let a = self.ablation;
        if a.disable_dual {
            w.dual = 0.0;
            w.duality = 0.0;
            w.ccrl = 0.0;
        }
        if a.disable_ccrl {
            w.ccrl = 0.0;
        }
        if a.disable_dr {
            w.duality = 0.0;
        }
        w
    }

    /// Model config with the codec-sharing switch applied.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            share_transpose_codec: base.share_transpose_codec || self.ablation.share_transpose_codec,
            ..base.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::Config("eps must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config("grad_clip must be positive".into()));
            }
        }
        self.loss_weights.validate()?;
        self.ccrl.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_primal: f64,
    pub l_dual: f64,
    pub l_dr: f64,
    pub l_ccrl: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: u64, b: &LossBundle) -> Self {
        Self {
            step,
            l_primal: b.l_primal,
            l_dual: b.l_dual,
            l_dr: b.l_dr,
            l_ccrl: b.l_ccrl,
            total: b.total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_total: f64,
    pub val_lve: Option<f64>,
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub best_val_lve: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation LVE (the final ones when
    /// validation is off or the split is empty).
    pub best: DualTalker,
    pub last: DualTalker,
    pub initial_val_lve: Option<f64>,
    pub best_val_lve: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    /// Mean `l_primal` over the last `n` steps.
    pub fn primal_tail(&self, n: usize) -> f64 {
        let k = n.clamp(1, self.steps.len().max(1));
        let tail = &self.steps[self.steps.len().saturating_sub(k)..];
        tail.iter().map(|s| s.l_primal).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Brings a sample's features to its motion's frame count.
pub fn aligned_features(features: &FeatureSequence, motion: &MotionSequence) -> Result<FeatureSequence, DataError> {
    if features.frames() == motion.frames() {
        Ok(features.clone())
    } else {
        resample_features(features, motion.frames())
    }
}

/// Checks that a dataset fits a model configuration.
pub fn check_compatible(cfg: &ModelConfig, dataset: &Dataset) -> Result<(), TrainError> {
    if dataset.vertices() != cfg.vertices {
        return Err(TrainError::Config(format!(
            "model expects {} vertices, dataset has {}",
            cfg.vertices,
            dataset.vertices()
        )));
    }
    if let Some(b) = dataset.feature_dim().filter(|&b| b != cfg.audio_dim) {
        return Err(TrainError::Config(format!(
            "model expects {}-wide features, dataset has {b}",
            cfg.audio_dim
        )));
    }
    if dataset.manifest.speakers > cfg.speakers {
        return Err(TrainError::Config(format!(
            "model has {} speaker slots, dataset has {}",
            cfg.speakers, dataset.manifest.speakers
        )));
    }
    if dataset.max_frames() > cfg.max_frames {
        return Err(TrainError::Config(format!(
            "longest sequence has {} frames, model max_frames is {}",
            dataset.max_frames(),
            cfg.max_frames
        )));
    }
    Ok(())
}

/// One joint step on a single sequence: both teacher-forced passes, the
/// weighted loss, one backward sweep and one Adam update.
pub fn train_step(
    model: &mut DualTalker,
    state: &mut TrainState,
    features: &FeatureSequence,
    motion: &MotionSequence,
    speaker: usize,
    cfg: &TrainConfig,
) -> Result<LossBundle, TrainError> {
    let weights = cfg.effective_weights();
    let mut tape = Tape::unchecked();
    let (x, y) = model.encode_pair(&mut tape, features, motion)?;
    let primal = model.primal_from_latents(&mut tape, x, y, speaker)?;
    let dual = if cfg.ablation.disable_dual {
        None
    } else {
        let d = model.dual_from_latents(&mut tape, y, x, speaker)?;
        Some(DualTerms {
            predicted_audio: d.predicted,
            gt_audio: tape.constant(features.values().clone()),
            fused: d.fused,
        })
    };
    let gt_motion = tape.constant(motion.to_flat());
    let terms = StepTerms {
        predicted_motion: primal.predicted,
        gt_motion,
        gt_motion_seq: motion,
        audio_latent: x,
        motion_latent: y,
        primal_fused: primal.fused,
        dual,
    };
    let (nodes, bundle) = total_loss(&mut tape, &terms, &weights, &cfg.ccrl)?;
    let step = state.step;
    if let Some(term) = bundle.non_finite_term() {
        return Err(TrainError::NonFinite {
            step,
            term: term.into(),
            detail: format!("{bundle:?}"),
        });
    }
    tape.backward(nodes.total, &Tensor::scalar(1.0), model.params_mut())?;
    if let Some((_, p)) = model.params().iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(TrainError::NonFinite {
            step,
            term: format!("gradient of {}", p.name),
            detail: "try lowering learning_rate or setting grad_clip".into(),
        });
    }
    if let Some(c) = cfg.grad_clip {
        clip_gradients(model.params_mut(), c);
    }
    adam_step(model.params_mut(), &mut state.adam, &cfg.adam());
    state.step += 1;
    Ok(bundle)
}

/// Scores primal generation on `split`. With `predict_gt` the ground truth
/// stands in for the prediction.
pub fn evaluate(
    model: &DualTalker,
    dataset: &Dataset,
    split: Split,
    predict_gt: bool,
) -> Result<MetricReport, TrainError> {
    check_compatible(model.config(), dataset)?;
    let (lips, upper) = (dataset.lip_region(), dataset.upper_region());
    let mut rows = Vec::new();
    for s in dataset.split(split) {
        let pred = if predict_gt {
            s.motion.clone()
        } else {
            let f = aligned_features(&s.features, &s.motion)?;
            model.generate_motion(&f, s.speaker)?
        };
        rows.push(MetricReport::score(s.index, s.speaker, &pred, &s.motion, &lips, &upper)?);
    }
    if rows.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    Ok(MetricReport::from_sequences(rows))
}

fn val_lve(model: &DualTalker, dataset: &Dataset) -> Result<Option<f64>, TrainError> {
    if dataset.split(Split::Val).next().is_none() {
        return Ok(None);
    }
    Ok(Some(evaluate(model, dataset, Split::Val, false)?.lve))
}

struct Logs {
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
    dir: PathBuf,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| TrainError::io(&p, e))
        };
        Ok(Self {
            steps: open("train_log.jsonl")?,
            epochs: open("val_log.jsonl")?,
            dir: dir.to_path_buf(),
        })
    }

    fn line(w: &mut BufWriter<File>, dir: &Path, value: &impl Serialize) -> Result<(), TrainError> {
        let s = serde_json::to_string(value).expect("record serializes");
        writeln!(w, "{s}").map_err(|e| TrainError::io(dir, e))
    }
}

/// Trains a fresh model. Initialization and the per-epoch shuffles all draw
/// from one generator seeded with `cfg.seed`.
///
/// With `out`, writes `train_log.jsonl`, `val_log.jsonl`, `best.dtck` and
/// `last.dtck` there.
pub fn train(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(model_cfg);
    check_compatible(&model_cfg, dataset)?;
    let order: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if order.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let prepared: Vec<FeatureSequence> = dataset
        .samples
        .iter()
        .map(|s| aligned_features(&s.features, &s.motion))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DualTalker::new(model_cfg, &mut rng)?;
    let mut state = TrainState {
        step: 0,
        adam: AdamState::new(model.params()),
        rng,
        best_val_lve: None,
        best_checkpoint: None,
    };
    let mut logs = out.map(Logs::create).transpose()?;
    let meta = serde_json::to_value(cfg).expect("config serializes");

    let initial_val_lve = if cfg.validate { val_lve(&model, dataset)? } else { None };
    let mut best = model.clone();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut order = order;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut state.rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for &i in &order {
            if cfg.max_steps.is_some_and(|m| state.step as usize >= m) {
                break;
            }
            let s = &dataset.samples[i];
            let step = state.step;
            let bundle = train_step(&mut model, &mut state, &prepared[i], &s.motion, s.speaker, cfg)?;
            let rec = StepRecord::new(step, &bundle);
            if let Some(l) = logs.as_mut() {
                Logs::line(&mut l.steps, &l.dir, &rec)?;
            }
            steps.push(rec);
            sum += bundle.total;
            count += 1;
        }
        if count == 0 {
            break 'outer;
        }
        let val = if cfg.validate { val_lve(&model, dataset)? } else { None };
        let improved = match (val, state.best_val_lve) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            state.best_val_lve = val;
            best = model.clone();
            if let Some(l) = logs.as_ref() {
                let p = l.dir.join("best.dtck");
                save_checkpoint(&best, Precision::F64, meta.clone(), &p)?;
                state.best_checkpoint = Some(p);
            }
        }
        let rec = EpochRecord {
            epoch,
            step: state.step,
            mean_total: sum / count as f64,
            val_lve: val,
        };
        log::info!(
            "epoch {epoch}: step {} mean total {:.6e} val lve {}",
            state.step,
            rec.mean_total,
            val.map_or("-".to_string(), |v| format!("{v:.6e}"))
        );
        if let Some(l) = logs.as_mut() {
            Logs::line(&mut l.epochs, &l.dir, &rec)?;
        }
        epochs.push(rec);
    }
    if let Some(l) = logs.as_mut() {
        l.steps.flush().map_err(|e| TrainError::io(&l.dir, e))?;
        l.epochs.flush().map_err(|e| TrainError::io(&l.dir, e))?;
        save_checkpoint(&model, Precision::F64, meta, &l.dir.join("last.dtck"))?;
    }
    Ok(TrainOutcome {
        best,
        last: model,
        initial_val_lve,
        best_val_lve: state.best_val_lve,
        steps,
        epochs,
        best_checkpoint: state.best_checkpoint,
    })
}
