use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::{aligned_features, evaluate, train, Ablation, TrainConfig, TrainError};
use crate::data::{Dataset, RegionSet, Split};
use crate::metrics::{lip_distance, lip_distance_csv};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoDual,
    NoCcrl,
    SharedCodec,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoDual, Variant::NoCcrl, Variant::SharedCodec];

    pub fn ablation(self, base: Ablation) -> Ablation {
        match self {
            Variant::Full => base,
            Variant::NoDual => Ablation {
                disable_dual: true,
                ..base
            },
            Variant::NoCcrl => Ablation {
                disable_ccrl: true,
                ..base
            },
            Variant::SharedCodec => Ablation {
                share_transpose_codec: true,
                ..base
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoDual => "w/o dual training",
            Variant::NoCcrl => "w/o ccrl",
            Variant::SharedCodec => "transposed codec",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub val_lve: f64,
    pub val_fdd: f64,
    /// Validation LVE of the initial parameters.
    pub initial_val_lve: f64,
    pub l_primal_first: f64,
    /// Mean `l_primal` over the last epoch-worth of steps.
    pub l_primal_tail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Seeds where the dual-free variant has a higher val LVE than the full model.
    pub dual_helps: usize,
    pub seeds: usize,
    /// Per-frame lip distance on the first validation sequence (first seed),
    /// absent when the manifest has no upper/lower lip sets.
    #[serde(skip)]
    pub lip_csv: Option<String>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<20} {:>6} {:>14} {:>14}", "variant", "seed", "val_lve", "val_fdd").unwrap();
        for r in &self.rows {
            writeln!(s, "{:<20} {:>6} {:>14.6e} {:>14.6e}", r.variant.to_string(), r.seed, r.val_lve, r.val_fdd).unwrap();
        }
        writeln!(
            s,
            "dual training lowers val LVE in {}/{} seeds",
            self.dual_helps, self.seeds
        )
        .unwrap();
        s
    }
}

/// Trains every variant for every seed and scores the validation split.
pub fn ablate(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport, TrainError> {
    if dataset.split(Split::Val).next().is_none() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let lip_regions = lip_pair(dataset);
    let first_val = dataset.split(Split::Val).next().expect("checked above");
    let mut traces: Vec<(String, Vec<f64>)> = Vec::new();
    if let Some((up, low)) = &lip_regions {
        traces.push(("ground_truth".into(), lip_distance(&dataset.template, &first_val.motion, up, low)?));
    }
    let mut rows = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for variant in Variant::ALL {
            let cfg = TrainConfig {
                seed,
                ablation: variant.ablation(base.ablation),
                ..base.clone()
            };
            let outcome = train(model_cfg, dataset, &cfg, None)?;
            let report = evaluate(&outcome.best, dataset, Split::Val, false)?;
            log::info!("ablation {variant} seed {seed}: val lve {:.6e}", report.lve);
            let epoch_len = dataset.split(Split::Train).count();
            rows.push(AblationRow {
                variant,
                seed,
                val_lve: report.lve,
                val_fdd: report.fdd,
                initial_val_lve: outcome.initial_val_lve.unwrap_or(f64::NAN),
                l_primal_first: outcome.steps.first().map_or(f64::NAN, |s| s.l_primal),
                l_primal_tail: outcome.primal_tail(epoch_len),
            });
            if let (0, Some((up, low))) = (si, &lip_regions) {
                let f = aligned_features(&first_val.features, &first_val.motion)?;
                let pred = outcome.best.generate_motion(&f, first_val.speaker)?;
                let name = format!("{variant:?}").to_lowercase();
                traces.push((name, lip_distance(&dataset.template, &pred, up, low)?));
            }
        }
    }
    let lve = |v: Variant, s: u64| rows.iter().find(|r| r.variant == v && r.seed == s).map(|r| r.val_lve);
    let dual_helps = seeds
        .iter()
        .filter(|&&s| lve(Variant::NoDual, s) > lve(Variant::Full, s))
        .count();
    let lip_csv = lip_regions.map(|_| {
        let refs: Vec<(&str, &[f64])> = traces.iter().map(|(n, t)| (n.as_str(), t.as_slice())).collect();
        lip_distance_csv(&refs)
    });
    Ok(AblationReport {
        rows,
        dual_helps,
        seeds: seeds.len(),
        lip_csv,
    })
}

fn lip_pair(dataset: &Dataset) -> Option<(RegionSet, RegionSet)> {
    let m = &dataset.manifest;
    if m.upper_lip_indices.is_empty() || m.lower_lip_indices.is_empty() {
        return None;
    }
    let v = dataset.vertices();
    Some((
        RegionSet::new("upper_lip", &m.upper_lip_indices, v).ok()?,
        RegionSet::new("lower_lip", &m.lower_lip_indices, v).ok()?,
    ))
}
