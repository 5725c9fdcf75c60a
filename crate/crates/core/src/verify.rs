//! Finite-difference verification suites for primitives, model blocks,
//! losses and the end-to-end training objective.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{FeatureSequence, MotionSequence};
use crate::diffcore::{
    check_gradients, DiffError, GradCheckOptions, GradReport, NodeId, ParamId, ParamStore, Primitive, Stencil, Tape,
    Tensor,
};
use crate::losses::{
    ccrl_direction, ccrl_total, duality_regularizer, mse, smooth_l1, total_loss, AnchorWeighting, CCRLConfig,
    DualTerms, LossError, LossWeights, StepTerms,
};
use crate::model::{attention_head, multi_head, Direction, DualTalker, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("no primitive case {0}")]
    UnknownCase(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    /// Every primitive.
    Op,
    /// Primitives plus every model block.
    Block,
    /// Everything, including losses and the joint objective.
    Full,
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "full" => Ok(Scope::Full),
            other => Err(format!("unknown scope {other:?} (expected op, block or full)")),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Block => "block",
            Scope::Full => "full",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: String,
    pub report: GradReport,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.report.passed())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.report.max_rel_error()))
    }

    pub fn entries_checked(&self) -> usize {
        self.checks.iter().map(|c| c.report.entries_checked()).sum()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<6} {:<32} {:>6} entries  max rel err {:.3e}  {}",
                c.group,
                c.name,
                c.report.entries_checked(),
                c.report.max_rel_error(),
                if c.report.passed() { "ok" } else { "FAIL" }
            )?;
        }
        for c in self.failures() {
            writeln!(f, "--- {} {}", c.group, c.name)?;
            write!(f, "{}", c.report)?;
        }
        writeln!(
            f,
            "{} checks, {} entries, max rel err {:.3e}: {}",
            self.checks.len(),
            self.entries_checked(),
            self.max_rel_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values in `[-hi, -lo] U [lo, hi]`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    uniform(rng, shape, lo, hi).zip_map(&uniform(rng, shape, -1.0, 1.0), |x, s| x * s.signum())
}

/// Rows with standard deviation at least 0.5; normalization is close to a
/// step function on rows of nearly equal entries.
fn spread_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let row: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
        if var >= 0.25 {
            data.extend(row);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Random-weighted scalar reduction `sum(out * r)`, so every output entry
/// carries a distinct cotangent.
fn project(tape: &mut Tape, out: NodeId, rng_seed: u64) -> Result<NodeId, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = uniform(&mut rng, tape.value(out).shape(), -1.0, 1.0);
    let r = tape.constant(r);
    let w = tape.mul(out, r)?;
    tape.sum(w)
}

/// [`check_gradients`] for builders that can fail with model or loss errors.
fn guarded_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, build: F) -> Result<GradReport, VerifyError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId, VerifyError>,
{
    let stash = RefCell::new(None);
    let result = check_gradients(
        store,
        |tape, s| {
            build(tape, s).map_err(|e| match e {
                VerifyError::Diff(d) => d,
                other => {
                    let placeholder = DiffError::NonFinite {
                        context: other.to_string(),
                    };
                    stash.borrow_mut().get_or_insert(other);
                    placeholder
                }
            })
        },
        opts,
    );
    match (result, stash.into_inner()) {
        (Err(_), Some(e)) => Err(e),
        (r, _) => Ok(r?),
    }
}

fn check_inputs<F>(inputs: Vec<Tensor>, opts: &GradCheckOptions, build: F) -> Result<GradReport, VerifyError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, VerifyError>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("input{i}"), t))
        .collect();
    guarded_check(&mut store, opts, |tape, s| {
        let nodes: Vec<NodeId> = ids.iter().map(|&id| tape.param(s, id)).collect();
        build(tape, &nodes)
    })
}

/// One primitive at random shapes (dims up to 5) with inputs kept away from
/// kinks and domain boundaries.
pub fn check_primitive(
    kind_index: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<(String, GradReport), VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize| rng.random_range(lo..=5);
    let (m, k, n) = (dim(1), dim(1), dim(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -2.0, 2.0);
    let (kind, inputs): (Primitive, Vec<Tensor>) = match kind_index {
        0 => (Primitive::MatMul, vec![u(&mut rng, &[m, k]), u(&mut rng, &[k, n])]),
        1 => (Primitive::Add, vec![u(&mut rng, &[m, n]), u(&mut rng, &[m, n])]),
        2 => (Primitive::Sub, vec![u(&mut rng, &[m, n]), u(&mut rng, &[m, n])]),
        3 => (Primitive::Mul, vec![u(&mut rng, &[m, n]), u(&mut rng, &[m, n])]),
        4 => (Primitive::Scale(rng.random_range(-3.0..3.0)), vec![u(&mut rng, &[m, n])]),
        5 => (Primitive::Relu, vec![away_from_zero(&mut rng, &[m, n], 0.1, 2.0)]),
        6 => (Primitive::Sigmoid, vec![u(&mut rng, &[m, n])]),
        7 => (Primitive::Tanh, vec![u(&mut rng, &[m, n])]),
        8 => (Primitive::Exp, vec![u(&mut rng, &[m, n])]),
        9 => (Primitive::Log, vec![uniform(&mut rng, &[m, n], 0.5, 3.0)]),
        10 => (Primitive::SoftmaxRows, vec![u(&mut rng, &[m, n])]),
        11 => (Primitive::Concat { axis: 0 }, vec![u(&mut rng, &[m, n]), u(&mut rng, &[k, n])]),
        12 => (Primitive::Concat { axis: 1 }, vec![u(&mut rng, &[m, n]), u(&mut rng, &[m, k])]),
        13 => {
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            (Primitive::Slice { axis: 1, start, len }, vec![u(&mut rng, &[m, n])])
        }
        14 => {
            let start = rng.random_range(0..m);
            let len = rng.random_range(1..=m - start);
            (Primitive::Slice { axis: 0, start, len }, vec![u(&mut rng, &[m, n])])
        }
        15 => (Primitive::Transpose, vec![u(&mut rng, &[m, n])]),
        16 => (Primitive::Sum, vec![u(&mut rng, &[m, n])]),
        17 => (Primitive::Mean, vec![u(&mut rng, &[m, n])]),
        18 => (Primitive::BroadcastRows { rows: m }, vec![u(&mut rng, &[1, n])]),
        // Two-entry rows normalize to +-1 whatever the input, leaving only an
        // eps-sized gradient for the difference quotient to resolve.
        19 => (Primitive::LayerNormRows { eps: 1e-5 }, vec![spread_rows(&mut rng, m, n.max(3))]),
        _ => return Err(VerifyError::UnknownCase(kind_index)),
    };
    let report = check_inputs(inputs, opts, |tape, nodes| {
        let out = tape.apply(kind, nodes)?;
        Ok(project(tape, out, seed)?)
    })?;
    Ok((kind.name().to_string(), report))
}

/// Number of cases in [`check_primitive`].
pub const PRIMITIVE_CASES: usize = 20;

fn block_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        audio_dim: 6,
        heads: 2,
        self_heads: 2,
        squeeze_ratio: 4,
        ff_dim: 16,
        vertices: 4,
        speakers: 2,
        max_frames: 8,
        share_transpose_codec: false,
    }
}

const T: usize = 4;

/// Gradient check of a model sub-computation over the model's parameters
/// (restricted to those named with one of `prefixes`) plus extra inputs.
fn check_model_block<F>(
    model: &DualTalker,
    prefixes: &[&str],
    inputs: Vec<Tensor>,
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradReport, VerifyError>
where
    F: Fn(&DualTalker, &mut Tape, &[NodeId]) -> Result<NodeId, ModelError>,
{
    let mut work = model.clone();
    let input_ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| work.params_mut().register(format!("input{i}"), t))
        .collect();
    let mut selected: Vec<ParamId> = work
        .params()
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect();
    selected.extend(&input_ids);
    let opts = GradCheckOptions {
        params: Some(selected),
        ..opts.clone()
    };
    let snapshot = work.clone();
    let mut store = work.params().clone();
    guarded_check(&mut store, &opts, |tape, s| {
        let mut view = snapshot.clone();
        *view.params_mut() = s.clone();
        let nodes: Vec<NodeId> = input_ids.iter().map(|&id| tape.param(s, id)).collect();
        let out = build(&view, tape, &nodes)?;
        Ok(project(tape, out, 7)?)
    })
}

fn block_checks(seed: u64, opts: &GradCheckOptions, out: &mut Vec<CheckResult>) -> Result<(), VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut push = |name: &str, report: GradReport| {
        out.push(CheckResult {
            group: "block",
            name: name.to_string(),
            report,
        })
    };
    let qkv: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[T, 3], -1.0, 1.0)).collect();
    push(
        "attention (masked)",
        check_inputs(qkv.clone(), opts, |tape, n| {
            let (o, _) = attention_head(tape, n[0], n[1], n[2], Some(0))?;
            Ok(project(tape, o, 1)?)
        })?,
    );
    push(
        "attention (unmasked)",
        check_inputs(qkv, opts, |tape, n| {
            let (o, _) = attention_head(tape, n[0], n[1], n[2], None)?;
            Ok(project(tape, o, 2)?)
        })?,
    );
    let mh: Vec<Tensor> = vec![
        uniform(&mut rng, &[T, 4], -1.0, 1.0),
        uniform(&mut rng, &[T, 4], -1.0, 1.0),
        uniform(&mut rng, &[4, 4], -1.0, 1.0),
        uniform(&mut rng, &[4, 4], -1.0, 1.0),
        uniform(&mut rng, &[4, 4], -1.0, 1.0),
    ];
    push(
        "multi-head attention",
        check_inputs(mh, opts, |tape, n| {
            let o = multi_head(tape, n[0], n[1], n[2], n[3], n[4], 2, Some(0))?;
            Ok(project(tape, o, 3)?)
        })?,
    );

    let cfg = block_config();
    let model = DualTalker::new(cfg.clone(), &mut rng)?;
    let d = cfg.d;
    let stream = || uniform(&mut ChaCha8Rng::seed_from_u64(seed + 11), &[T, d], -1.0, 1.0);
    let other = || uniform(&mut ChaCha8Rng::seed_from_u64(seed + 12), &[T, d], -1.0, 1.0);
    for dir in [Direction::Primal, Direction::Dual] {
        let prefix = dir.to_string();
        let sa = format!("{prefix}.self_attention");
        push(
            &format!("{prefix} self-attention"),
            check_model_block(&model, &[sa.as_str()], vec![stream()], opts, |m, tape, n| {
                m.self_attend(tape, n[0], dir)
            })?,
        );
        let gate = format!("{prefix}.speaker_gate");
        push(
            &format!("{prefix} speaker gate"),
            check_model_block(&model, &[gate.as_str(), "style_table"], vec![stream()], opts, |m, tape, n| {
                let s = m.style_embed(tape, 1)?;
                m.speaker_modulate(tape, n[0], s, dir)
            })?,
        );
        let cross = format!("{prefix}.cross_attention");
        let ff = format!("{prefix}.feed_forward");
        push(
            &format!("{prefix} cross-attention + ff"),
            check_model_block(
                &model,
                &[cross.as_str(), ff.as_str(), "fusion."],
                vec![stream(), other()],
                opts,
                |m, tape, n| m.cross_attend(tape, n[0], n[1], dir),
            )?,
        );
    }
    let (f, mo) = sample_pair(&cfg, seed + 13);
    push(
        "encoders",
        check_model_block(
            &model,
            &["audio_encoder", "motion_encoder", "positional_table"],
            vec![],
            opts,
            |m, tape, _| {
                let (x, y) = m.encode_pair(tape, &f, &mo)?;
                Ok(tape.concat_cols(x, y)?)
            },
        )?,
    );
    Ok(())
}

fn sample_pair(cfg: &ModelConfig, seed: u64) -> (FeatureSequence, MotionSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = FeatureSequence::new(uniform(&mut rng, &[T, cfg.audio_dim], -1.0, 1.0)).expect("finite");
    let m = MotionSequence::from_flat(&uniform(&mut rng, &[T, cfg.motion_dim()], -0.5, 0.5), 30.0).expect("finite");
    (f, m)
}

fn loss_checks(seed: u64, opts: &GradCheckOptions, out: &mut Vec<CheckResult>) -> Result<(), VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut push = |name: &str, report: GradReport| {
        out.push(CheckResult {
            group: "loss",
            name: name.to_string(),
            report,
        })
    };
    let a = uniform(&mut rng, &[T, 5], -1.0, 1.0);
    let b = uniform(&mut rng, &[T, 5], -1.0, 1.0);
    // Differences spread over both branches of the Huber loss, away from |x| = 1.
    let wide = away_from_zero(&mut rng, &[T, 5], 0.1, 0.8).zip_map(
        &away_from_zero(&mut rng, &[T, 5], 1.2, 2.5),
        |x, y| if x.abs() < 0.45 { x } else { y },
    );
    let c = a.zip_map(&wide, |x, w| x - w);
    push("mse", check_inputs(vec![a.clone(), b.clone()], opts, |t, n| Ok(mse(t, n[0], n[1])?))?);
    push(
        "smooth l1",
        check_inputs(vec![a.clone(), c.clone()], opts, |t, n| Ok(smooth_l1(t, n[0], n[1])?))?,
    );
    let d = uniform(&mut rng, &[T, 5], -1.0, 1.0);
    push(
        "duality regularizer",
        check_inputs(vec![a.clone(), c.clone(), b.clone(), d.clone()], opts, |t, n| {
            Ok(duality_regularizer(t, n[0], n[1], n[2], n[3])?)
        })?,
    );
    let motion = MotionSequence::from_flat(&uniform(&mut rng, &[T, 12], -1.0, 1.0), 30.0).expect("finite");
    for weighting in [AnchorWeighting::Uniform, AnchorWeighting::Kernel] {
        let cfg = CCRLConfig {
            sigma: None,
            anchor_weighting: weighting,
        };
        push(
            &format!("ccrl direction ({weighting:?})").to_lowercase(),
            check_inputs(vec![a.clone(), b.clone()], opts, |t, n| {
                Ok(ccrl_direction(t, n[0], n[1], &motion, &cfg)?)
            })?,
        );
    }
    let cfg = CCRLConfig::default();
    push(
        "ccrl total",
        check_inputs(vec![a, b, c, d], opts, |t, n| {
            Ok(ccrl_total(t, n[0], n[1], n[2], n[3], &motion, &cfg)?)
        })?,
    );
    Ok(())
}

/// Weights large enough that every term moves the gradient.
fn visible_weights() -> LossWeights {
    LossWeights {
        primal: 1.0,
        dual: 0.5,
        duality: 0.3,
        ccrl: 0.2,
    }
}

fn joint_check(seed: u64, share: bool, opts: &GradCheckOptions) -> Result<GradReport, VerifyError> {
    let cfg = ModelConfig {
        share_transpose_codec: share,
        ..block_config()
    };
    let model = DualTalker::with_seed(cfg.clone(), seed)?;
    let (f, m) = sample_pair(&cfg, seed + 1);
    let weights = visible_weights();
    let ccrl = CCRLConfig::default();
    let snapshot = model.clone();
    let mut store = model.params().clone();
    guarded_check(
        &mut store,
        opts,
        |tape, s| {
            let mut view = snapshot.clone();
            *view.params_mut() = s.clone();
            let (x, y) = view.encode_pair(tape, &f, &m)?;
            let p = view.primal_from_latents(tape, x, y, 1)?;
            let d = view.dual_from_latents(tape, y, x, 1)?;
            let gt_audio = tape.constant(f.values().clone());
            let gt_motion = tape.constant(m.to_flat());
            let terms = StepTerms {
                predicted_motion: p.predicted,
                gt_motion,
                gt_motion_seq: &m,
                audio_latent: x,
                motion_latent: y,
                primal_fused: p.fused,
                dual: Some(DualTerms {
                    predicted_audio: d.predicted,
                    gt_audio,
                    fused: d.fused,
                }),
            };
            let (nodes, _) = total_loss(tape, &terms, &weights, &ccrl)?;
            Ok(nodes.total)
        },
    )
}

/// Default suite step for the fourth-order stencil. The two-point stencil
/// at 1e-4 cannot resolve joint-objective entries near 1e-8.
pub const SUITE_STEP: f64 = 1e-3;

pub fn suite_options(tolerance: f64) -> GradCheckOptions {
    GradCheckOptions {
        step: SUITE_STEP,
        stencil: Stencil::CentralFourthOrder,
        ..GradCheckOptions::with_tolerance(tolerance)
    }
}

/// Runs every check up to `scope`.
pub fn run(scope: Scope, opts: &GradCheckOptions, seed: u64) -> Result<VerifyReport, VerifyError> {
    let mut checks = Vec::new();
    for i in 0..PRIMITIVE_CASES {
        let (name, report) = check_primitive(i, seed.wrapping_add(i as u64), &opts)?;
        checks.push(CheckResult {
            group: "op",
            name,
            report,
        });
    }
    if scope >= Scope::Block {
        block_checks(seed, &opts, &mut checks)?;
    }
    if scope >= Scope::Full {
        loss_checks(seed, &opts, &mut checks)?;
        for share in [false, true] {
            checks.push(CheckResult {
                group: "joint",
                name: if share { "total loss, tied codec" } else { "total loss" }.to_string(),
                report: joint_check(seed, share, &opts)?,
            });
        }
    }
    Ok(VerifyReport { checks })
}
