//! Regression, duality and cross-modal consistency losses.
//!
//! Every loss is recorded on a [`Tape`] so its gradient comes from the same
//! reverse sweep as the network.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MotionSequence;
use crate::diffcore::{DiffError, NodeId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{what}: shapes {a:?} and {b:?} differ")]
    ShapeMismatch {
        what: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("consistency loss needs at least 2 frames, got {0}")]
    DegenerateLength(usize),
    #[error("invalid loss config: {0}")]
    Config(String),
}

/// Coefficients of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub primal: f64,
    pub dual: f64,
    pub duality: f64,
    pub ccrl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::biwi()
    }
}

impl LossWeights {
    pub fn biwi() -> Self {
        Self {
            primal: 1.0,
            dual: 1e-8,
            duality: 1e-9,
            ccrl: 1e-6,
        }
    }

    /// VOCASET settings. Only three weights are published for this set, so
    /// the consistency weight is carried over from BIWI.
    pub fn voca() -> Self {
        Self {
            primal: 1.0,
            dual: 1e-8,
            duality: 1e-6,
            ccrl: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, w) in [
            ("primal", self.primal),
            ("dual", self.dual),
            ("duality", self.duality),
            ("ccrl", self.ccrl),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(LossError::Config(format!(
                    "weight {name}={w} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// How per-anchor consistency losses are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorWeighting {
    /// Plain mean over anchors.
    #[default]
    Uniform,
    /// Anchor `k` weighted by its mean kernel value `mean_t w_t^(k)`.
    Kernel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CCRLConfig {
    /// Kernel bandwidth. `None` uses the median pairwise frame distance of
    /// the sequence.
    pub sigma: Option<f64>,
    pub anchor_weighting: AnchorWeighting,
}

impl CCRLConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        match self.sigma {
            Some(s) if !(s.is_finite() && s > 0.0) => {
                Err(LossError::Config(format!("sigma must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_primal: f64,
    pub l_dual: f64,
    pub l_dr: f64,
    pub l_ccrl: f64,
    pub total: f64,
}

impl LossBundle {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_primal", self.l_primal),
            ("l_dual", self.l_dual),
            ("l_dr", self.l_dr),
            ("l_ccrl", self.l_ccrl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn same_shape(tape: &Tape, what: &'static str, a: NodeId, b: NodeId) -> Result<(), LossError> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(LossError::ShapeMismatch {
            what,
            a: sa.to_vec(),
            b: sb.to_vec(),
        });
    }
    Ok(())
}

/// Mean squared difference.
pub fn mse(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId, LossError> {
    same_shape(tape, "mse", pred, target)?;
    let e = tape.sub(pred, target)?;
    let sq = tape.mul(e, e)?;
    Ok(tape.mean(sq)?)
}

/// Mean Huber loss with threshold 1.
pub fn smooth_l1(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId, LossError> {
    same_shape(tape, "smooth_l1", a, b)?;
    let x = tape.sub(a, b)?;
    let neg = tape.scale(x, -1.0)?;
    let (p, n) = (tape.relu(x)?, tape.relu(neg)?);
    let u = tape.add(p, n)?;
    // h(u) = 0.5 min(u,1)^2 + max(u-1, 0)
    let ones = tape.constant(Tensor::filled(tape.value(u).shape(), 1.0));
    let shifted = tape.sub(u, ones)?;
    let excess = tape.relu(shifted)?;
    let clipped = tape.sub(u, excess)?;
    let sq = tape.mul(clipped, clipped)?;
    let half = tape.scale(sq, 0.5)?;
    let h = tape.add(half, excess)?;
    Ok(tape.mean(h)?)
}

/// `smooth_l1(x, x_fused) + smooth_l1(y, y_fused)`.
pub fn duality_regularizer(
    tape: &mut Tape,
    x: NodeId,
    x_fused: NodeId,
    y: NodeId,
    y_fused: NodeId,
) -> Result<NodeId, LossError> {
    let a = smooth_l1(tape, x, x_fused)?;
    let b = smooth_l1(tape, y, y_fused)?;
    Ok(tape.add(a, b)?)
}

/// Frobenius distance between frames `a` and `b` of `m`.
fn frame_distance(m: &MotionSequence, a: usize, b: usize) -> f64 {
    let w = m.vertices() * 3;
    let d = m.displacements().data();
    d[a * w..(a + 1) * w]
        .iter()
        .zip(&d[b * w..(b + 1) * w])
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Median of the pairwise frame distances, or 1 when all frames coincide.
pub fn median_bandwidth(m: &MotionSequence) -> f64 {
    let t = m.frames();
    let mut d: Vec<f64> = (0..t)
        .flat_map(|a| ((a + 1)..t).map(move |b| (a, b)))
        .map(|(a, b)| frame_distance(m, a, b))
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// `T x T` Gaussian kernel over ground-truth frames:
/// `w[k][t] = exp(-|m_k - m_t|^2 / (2 sigma^2))`.
pub fn kernel_weights(m: &MotionSequence, sigma: f64) -> Tensor {
    let t = m.frames();
    let mut w = Tensor::zeros(&[t, t]);
    for k in 0..t {
        for j in 0..t {
            let d = frame_distance(m, k, j);
            w.data_mut()[k * t + j] = (-d * d / (2.0 * sigma * sigma)).exp();
        }
    }
    w
}

/// Rows of `x` scaled to unit length (norms floored at 1e-12).
fn normalize_rows(tape: &mut Tape, x: NodeId) -> Result<NodeId, LossError> {
    let (t, d) = (tape.value(x).rows(), tape.value(x).cols());
    let sq = tape.mul(x, x)?;
    let ones_d = tape.constant(Tensor::ones(&[d, 1]));
    let ss = tape.matmul(sq, ones_d)?;
    // max(ss, 1e-24) = 1e-24 + relu(ss - 1e-24)
    let floor = tape.constant(Tensor::filled(&[t, 1], 1e-24));
    let above = tape.sub(ss, floor)?;
    let above = tape.relu(above)?;
    let ss = tape.add(above, floor)?;
    let log = tape.log(ss)?;
    let half = tape.scale(log, -0.5)?;
    let inv = tape.exp(half)?;
    let ones_row = tape.constant(Tensor::ones(&[1, d]));
    let inv = tape.matmul(inv, ones_row)?;
    Ok(tape.mul(x, inv)?)
}

/// Kernel-weighted contrastive loss with anchors in `p` and positives at the
/// same frame of `q`.
pub fn ccrl_direction(
    tape: &mut Tape,
    p: NodeId,
    q: NodeId,
    gt_motion: &MotionSequence,
    cfg: &CCRLConfig,
) -> Result<NodeId, LossError> {
    same_shape(tape, "ccrl", p, q)?;
    let t = tape.value(p).rows();
    if t < 2 {
        return Err(LossError::DegenerateLength(t));
    }
    if gt_motion.frames() != t {
        return Err(LossError::ShapeMismatch {
            what: "ccrl motion frames",
            a: vec![t],
            b: vec![gt_motion.frames()],
        });
    }
    cfg.validate()?;
    let sigma = cfg.sigma.unwrap_or_else(|| median_bandwidth(gt_motion));
    let w = kernel_weights(gt_motion, sigma);

    let pn = normalize_rows(tape, p)?;
    let qn = normalize_rows(tape, q)?;
    let qt = tape.transpose(qn)?;
    let pt = tape.transpose(pn)?;
    let inter = tape.matmul(pn, qt)?;
    let intra = tape.matmul(pn, pt)?;

    let temper = tape.constant(w.map(|x| 1.0 - x));
    let mut off = Tensor::ones(&[t, t]);
    for k in 0..t {
        off.data_mut()[k * t + k] = 0.0;
    }
    let off = tape.constant(off);
    let a = tape.mul(inter, temper)?;
    let a = tape.exp(a)?;
    let b = tape.mul(intra, temper)?;
    let b = tape.exp(b)?;
    let terms = tape.add(a, b)?;
    let terms = tape.mul(terms, off)?;
    let ones_t = tape.constant(Tensor::ones(&[t, 1]));
    let denom = tape.matmul(terms, ones_t)?;
    let log_denom = tape.log(denom)?;

    let eye = tape.constant(Tensor::identity(t));
    let diag = tape.mul(inter, eye)?;
    let positive = tape.matmul(diag, ones_t)?;
    let per_anchor = tape.sub(log_denom, positive)?;

    Ok(match cfg.anchor_weighting {
        AnchorWeighting::Uniform => tape.mean(per_anchor)?,
        AnchorWeighting::Kernel => {
            let mean_w: Vec<f64> = (0..t).map(|k| w.row(k).iter().sum::<f64>() / t as f64).collect();
            let total: f64 = mean_w.iter().sum();
            let coef = tape.constant(Tensor::new(
                vec![t, 1],
                mean_w.iter().map(|x| x / total).collect(),
            )?);
            let weighted = tape.mul(per_anchor, coef)?;
            tape.sum(weighted)?
        }
    })
}

/// Consistency loss on the encoder pair plus the fused pair.
pub fn ccrl_total(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    x_fused: NodeId,
    y_fused: NodeId,
    gt_motion: &MotionSequence,
    cfg: &CCRLConfig,
) -> Result<NodeId, LossError> {
    let a = ccrl_direction(tape, x, y, gt_motion, cfg)?;
    let b = ccrl_direction(tape, x_fused, y_fused, gt_motion, cfg)?;
    Ok(tape.add(a, b)?)
}

/// Nodes from the dual pass of a training step.
#[derive(Clone, Copy, Debug)]
pub struct DualTerms {
    pub predicted_audio: NodeId,
    pub gt_audio: NodeId,
    /// Fused latent of the dual pass, the motion-side estimate of `X`.
    pub fused: NodeId,
}

/// Everything [`total_loss`] needs from one training step.
#[derive(Clone, Copy, Debug)]
pub struct StepTerms<'a> {
    pub predicted_motion: NodeId,
    pub gt_motion: NodeId,
    pub gt_motion_seq: &'a MotionSequence,
    pub audio_latent: NodeId,
    pub motion_latent: NodeId,
    /// Fused latent of the primal pass, the audio-side estimate of `Y`.
    pub primal_fused: NodeId,
    /// Absent when the dual task is switched off.
    pub dual: Option<DualTerms>,
}

/// Loss nodes; terms that could not be formed are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_primal: NodeId,
    pub l_dual: Option<NodeId>,
    pub l_dr: Option<NodeId>,
    pub l_ccrl: Option<NodeId>,
    pub total: NodeId,
}

/// Builds every available term and their weighted sum. Terms with a zero
/// weight are still evaluated for logging but left out of `total`.
pub fn total_loss(
    tape: &mut Tape,
    terms: &StepTerms<'_>,
    weights: &LossWeights,
    ccrl: &CCRLConfig,
) -> Result<(LossNodes, LossBundle), LossError> {
    weights.validate()?;
    let l_primal = mse(tape, terms.predicted_motion, terms.gt_motion)?;
    let (mut l_dual, mut l_dr, mut l_ccrl) = (None, None, None);
    if let Some(d) = terms.dual {
        l_dual = Some(mse(tape, d.predicted_audio, d.gt_audio)?);
        l_dr = Some(duality_regularizer(
            tape,
            terms.audio_latent,
            d.fused,
            terms.motion_latent,
            terms.primal_fused,
        )?);
        if tape.value(terms.audio_latent).rows() >= 2 {
            l_ccrl = Some(ccrl_total(
                tape,
                terms.audio_latent,
                terms.motion_latent,
                d.fused,
                terms.primal_fused,
                terms.gt_motion_seq,
                ccrl,
            )?);
        }
    }
    let mut total = tape.scale(l_primal, weights.primal)?;
    for (node, w) in [(l_dual, weights.dual), (l_dr, weights.duality), (l_ccrl, weights.ccrl)] {
        if let (Some(n), true) = (node, w != 0.0) {
            let s = tape.scale(n, w)?;
            total = tape.add(total, s)?;
        }
    }
    let value = |n: Option<NodeId>| n.map(|n| tape.scalar(n)).unwrap_or(0.0);
    let bundle = LossBundle {
        l_primal: tape.scalar(l_primal),
        l_dual: value(l_dual),
        l_dr: value(l_dr),
        l_ccrl: value(l_ccrl),
        total: tape.scalar(total),
    };
    Ok((
        LossNodes {
            l_primal,
            l_dual,
            l_dr,
            l_ccrl,
            total,
        },
        bundle,
    ))
}

/// `λ1 l_primal + λ2 l_dual + λ3 l_dr + λ4 l_ccrl` on plain numbers.
pub fn combine(weights: &LossWeights, l_primal: f64, l_dual: f64, l_dr: f64, l_ccrl: f64) -> f64 {
    weights.primal * l_primal + weights.dual * l_dual + weights.duality * l_dr + weights.ccrl * l_ccrl
}
