//! Command-line front end: config resolution, subcommands, exit codes and
//! run manifests.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    export_obj, generate_synthetic, load_features, load_motion, load_template, resample_features,
    save_features, save_motion, DataError, Dataset, Split, SyntheticSpec,
};
use crate::diffcore::{DiffError, GradCheckOptions};
use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::model::{load_checkpoint, ModelConfig, ModelError};
use crate::train::{ablate, evaluate, train, TrainConfig, TrainError};
use crate::verify::{self, Scope, VerifyError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Name of the manifest written under every `--out` directory.
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 config, 3 I/O, 4 numeric failure, 5 verification failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Data(e) => data_code(e),
            CliError::Model(e) => model_code(e),
            CliError::Train(e) => match e {
                TrainError::NonFinite { .. } => 4,
                TrainError::Io { .. } => 3,
                TrainError::Data(d) => data_code(d),
                TrainError::Model(m) => model_code(m),
                TrainError::Diff(d) | TrainError::Loss(LossError::Diff(d)) => diff_code(d),
                TrainError::Metric(MetricError::Data(d)) => data_code(d),
                _ => 2,
            },
            CliError::Verify(e) => match e {
                VerifyError::Diff(d) => diff_code(d),
                VerifyError::Model(m) => model_code(m),
                _ => 2,
            },
            CliError::Metric(MetricError::Data(d)) => data_code(d),
            CliError::Metric(_) => 2,
            CliError::VerificationFailed(_) => 5,
        }
    }
}

fn diff_code(e: &DiffError) -> u8 {
    match e {
        DiffError::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::NonFinite(_) => 4,
        DataError::Io { .. }
        | DataError::Json { .. }
        | DataError::BadMagic { .. }
        | DataError::VersionMismatch { .. }
        | DataError::Truncated { .. }
        | DataError::TrailingBytes(_) => 3,
        _ => 2,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Io { .. } | ModelError::Checkpoint(_) => 3,
        ModelError::Data(d) => data_code(d),
        ModelError::Diff(d) => diff_code(d),
        _ => 2,
    }
}

/// Vertex index sets that replace the manifest's when given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub lip_indices: Option<Vec<usize>>,
    pub upper_indices: Option<Vec<usize>>,
    pub upper_lip_indices: Option<Vec<usize>>,
    pub lower_lip_indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    /// Dataset manifest.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// The JSON config file. Every section is optional; flags override it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regions: RegionConfig,
    pub paths: PathConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Debug, Parser)]
#[command(name = "dualtalker", version, about = "Joint speech-to-facial-motion and lip-reading models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Generate motion from a feature file.
    Animate(AnimateArgs),
    /// Generate speech features from a motion file.
    Lipread(LipreadArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train every ablation variant and compare them.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Synthetic spec JSON (overrides the config's `synthetic` section).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub predict_gt: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub speaker: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Resample the features to this many frames first.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Export every N-th frame as OBJ (needs --template).
    #[arg(long)]
    pub obj_every: Option<usize>,
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LipreadArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub motion: PathBuf,
    #[arg(long)]
    pub speaker: usize,
    /// Output feature file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "full")]
    pub scope: String,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Finite-difference step of the fourth-order stencil.
    #[arg(long, default_value_t = verify::SUITE_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of seeds, counting up from the config seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

/// What a command produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    /// The main artifact (manifest, checkpoint, report, ...).
    pub primary: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<Outcome, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli)
}

/// Process entry point: parses the real arguments and maps errors to exit codes.
pub fn main_with_args() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(outcome) => {
            if let Some(p) = outcome.primary {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Animate(a) => cmd_animate(&a),
        Command::Lipread(a) => cmd_lipread(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    args: &'a A,
    config: Option<&'a CliConfig>,
}

impl<A: Serialize> Resolved<'_, A> {
    fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn announce(&self) {
        println!("dualtalker {VERSION}");
        println!("resolved config: {}", self.json());
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub files: Vec<FileEntry>,
}

/// Every file under `dir` (recursively, sorted), excluding the run manifest.
pub fn inventory(dir: &Path) -> Result<Vec<FileEntry>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<(), CliError> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            if rel == RUN_MANIFEST {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            out.push(FileEntry {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn finish<A: Serialize>(resolved: &Resolved<'_, A>, seed: Option<u64>, out: &Path, started: Instant) -> Result<(), CliError> {
    write_file(&out.join("resolved_config.json"), resolved.json())?;
    let manifest = RunManifest {
        tool: resolved.tool.to_string(),
        version: VERSION.to_string(),
        command: resolved.command.to_string(),
        config_hash: resolved.hash(),
        seed,
        files: inventory(out)?,
    };
    log::info!("{} finished in {:.1} s", resolved.command, started.elapsed().as_secs_f64());
    write_file(
        &out.join(RUN_MANIFEST),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

fn required<'a>(flag: Option<&'a PathBuf>, file: Option<&'a PathBuf>, name: &str) -> Result<&'a PathBuf, CliError> {
    flag.or(file)
        .ok_or_else(|| CliError::Config(format!("--{name} is required (flag or paths.{name} in the config)")))
}

/// Loads a dataset and applies the config's region overrides.
fn load_dataset(path: &Path, regions: &RegionConfig) -> Result<Dataset, CliError> {
    let mut ds = Dataset::load(path)?;
    let m = &mut ds.manifest;
    for (src, dst) in [
        (&regions.lip_indices, &mut m.lip_indices),
        (&regions.upper_indices, &mut m.upper_indices),
        (&regions.upper_lip_indices, &mut m.upper_lip_indices),
        (&regions.lower_lip_indices, &mut m.lower_lip_indices),
    ] {
        if let Some(v) = src {
            dst.clone_from(v);
        }
    }
    let vertices = ds.vertices();
    ds.manifest.validate(vertices)?;
    Ok(ds)
}

/// Fills the data-determined model fields from the dataset.
fn fit_model_to(model: &mut ModelConfig, ds: &Dataset) {
    model.vertices = ds.vertices();
    if let Some(b) = ds.feature_dim() {
        model.audio_dim = b;
    }
    model.speakers = ds.manifest.speakers;
    model.max_frames = model.max_frames.max(ds.max_frames());
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!("unknown split {other:?}"))),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
    if let Some(p) = &a.spec {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        cfg.synthetic = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    }
    if let Some(s) = a.seed {
        cfg.synthetic.seed = s;
    }
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?.clone();
    cfg.synthetic.validate()?;
    let resolved = Resolved {
        tool: "dualtalker",
        version: VERSION,
        command: "synth",
        args: a,
        config: Some(&cfg),
    };
    resolved.announce();
    create_dir(&out)?;
    let synth = generate_synthetic(&cfg.synthetic, &out)?;
    let m = &synth.manifest;
    let count = |s: Split| m.entries.iter().filter(|e| e.split == s).count();
    println!(
        "manifest {}: {} sequences ({} train / {} val / {} test), {} frames each, {} speakers, {} vertices",
        synth.manifest_path.display(),
        m.entries.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        cfg.synthetic.frames,
        m.speakers,
        cfg.synthetic.vertices
    );
    finish(&resolved, Some(cfg.synthetic.seed), &out, started)?;
    Ok(Outcome {
        primary: Some(synth.manifest_path),
        out_dir: Some(out),
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.max_steps {
        cfg.train.max_steps = Some(s);
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    let data = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?.clone();
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?.clone();
    cfg.train.validate()?;
    let ds = load_dataset(&data, &cfg.regions)?;
    fit_model_to(&mut cfg.model, &ds);
    let resolved = Resolved {
        tool: "dualtalker",
        version: VERSION,
        command: "train",
        args: a,
        config: Some(&cfg),
    };
    resolved.announce();
    create_dir(&out)?;
    let outcome = train(&cfg.model, &ds, &cfg.train, Some(&out))?;
    if let Some(l) = outcome.best_val_lve {
        println!("best val LVE {l:.6e}");
    }
    finish(&resolved, Some(cfg.train.seed), &out, started)?;
    Ok(Outcome {
        primary: outcome.best_checkpoint,
        out_dir: Some(out),
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let cfg = CliConfig::load_or_default(a.config.as_deref())?;
    let split = parse_split(&a.split)?;
    let data = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?.clone();
    let resolved = Resolved {
        tool: "dualtalker",
        version: VERSION,
        command: "eval",
        args: a,
        config: Some(&cfg),
    };
    resolved.announce();
    let ds = load_dataset(&data, &cfg.regions)?;
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let report = evaluate(&model, &ds, split, a.predict_gt)?;
    print!("{}", report.to_text());
    let Some(out) = a.out.clone().or(cfg.paths.out.clone()) else {
        return Ok(Outcome::default());
    };
    create_dir(&out)?;
    let json = out.join("report.json");
    write_file(&json, report.to_json())?;
    write_file(&out.join("report.txt"), report.to_text())?;
    finish(&resolved, None, &out, started)?;
    Ok(Outcome {
        primary: Some(json),
        out_dir: Some(out),
    })
}

pub fn cmd_animate(a: &AnimateArgs) -> Result<Outcome, CliError> {
    let started = Instant::now();
    if a.obj_every == Some(0) {
        return Err(CliError::Config("--obj-every must be at least 1".into()));
    }
    if a.obj_every.is_some() && a.template.is_none() {
        return Err(CliError::Config("--obj-every needs --template".into()));
    }
    let resolved = Resolved::<AnimateArgs> {
        tool: "dualtalker",
        version: VERSION,
        command: "animate",
        args: a,
        config: None,
    };
    resolved.announce();
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let mut features = load_features(&a.features)?;
    if let Some(n) = a.frames {
        features = resample_features(&features, n)?;
    }
    let motion = model.generate_motion(&features, a.speaker)?;
    create_dir(&a.out)?;
    let path = a.out.join("motion.dtmo");
    save_motion(&path, &motion)?;
    if let (Some(every), Some(t)) = (a.obj_every, &a.template) {
        let template = load_template(t)?;
        let dir = a.out.join("obj");
        create_dir(&dir)?;
        for frame in (0..motion.frames()).step_by(every) {
            export_obj(&template, &motion, frame, None, dir.join(format!("frame_{frame:05}.obj")))?;
        }
    }
    println!("{} frames x {} vertices", motion.frames(), motion.vertices());
    finish(&resolved, None, &a.out, started)?;
    Ok(Outcome {
        primary: Some(path),
        out_dir: Some(a.out.clone()),
    })
}

pub fn cmd_lipread(a: &LipreadArgs) -> Result<Outcome, CliError> {
    let resolved = Resolved::<LipreadArgs> {
        tool: "dualtalker",
        version: VERSION,
        command: "lipread",
        args: a,
        config: None,
    };
    resolved.announce();
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let motion = load_motion(&a.motion)?;
    let features = model.generate_audio(&motion, a.speaker)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_features(&a.out, &features)?;
    println!("{} frames x {} bands", features.frames(), features.dim());
    Ok(Outcome {
        primary: Some(a.out.clone()),
        out_dir: None,
    })
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let scope: Scope = a.scope.parse().map_err(CliError::Config)?;
    if !(a.tolerance > 0.0 && a.step > 0.0) {
        return Err(CliError::Config("--tolerance and --step must be positive".into()));
    }
    let resolved = Resolved::<GradcheckArgs> {
        tool: "dualtalker",
        version: VERSION,
        command: "gradcheck",
        args: a,
        config: None,
    };
    resolved.announce();
    let opts = GradCheckOptions {
        step: a.step,
        ..verify::suite_options(a.tolerance)
    };
    let report = verify::run(scope, &opts, a.seed)?;
    let text = report.to_string();
    print!("{text}");
    println!("{:.1} s", started.elapsed().as_secs_f64());
    let mut outcome = Outcome::default();
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("gradcheck.txt");
        write_file(&path, &text)?;
        finish(&resolved, Some(a.seed), out, started)?;
        outcome = Outcome {
            primary: Some(path),
            out_dir: Some(out.clone()),
        };
    }
    if !report.passed() {
        let worst = report
            .failures()
            .map(|c| format!("{} {} ({:.3e})", c.group, c.name, c.report.max_rel_error()))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(CliError::VerificationFailed(worst));
    }
    Ok(outcome)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let mut cfg = CliConfig::load_or_default(a.config.as_deref())?;
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let data = required(a.data.as_ref(), cfg.paths.data.as_ref(), "data")?.clone();
    let out = required(a.out.as_ref(), cfg.paths.out.as_ref(), "out")?.clone();
    cfg.train.validate()?;
    let ds = load_dataset(&data, &cfg.regions)?;
    fit_model_to(&mut cfg.model, &ds);
    let resolved = Resolved {
        tool: "dualtalker",
        version: VERSION,
        command: "ablate",
        args: a,
        config: Some(&cfg),
    };
    resolved.announce();
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.train.seed + i).collect();
    let report = ablate(&cfg.model, &ds, &cfg.train, &seeds)?;
    print!("{}", report.to_text());
    create_dir(&out)?;
    let table = out.join("ablation.txt");
    write_file(&table, report.to_text())?;
    write_file(
        &out.join("ablation.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    if let Some(csv) = &report.lip_csv {
        write_file(&out.join("lip_distance.csv"), csv)?;
    }
    finish(&resolved, Some(cfg.train.seed), &out, started)?;
    Ok(Outcome {
        primary: Some(table),
        out_dir: Some(out),
    })
}
