//! Lip vertex error, upper-face dynamics deviation and lip-distance traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{motion_to_positions, DataError, MotionSequence, NeutralTemplate, RegionSet};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {a} frames x {av} vertices vs {b} frames x {bv} vertices")]
    ShapeMismatch {
        a: usize,
        av: usize,
        b: usize,
        bv: usize,
    },
    #[error("region {0} is empty")]
    EmptyRegion(String),
    #[error("region {region} references vertex {index} of a {vertices}-vertex mesh")]
    RegionOutOfRange {
        region: String,
        index: usize,
        vertices: usize,
    },
    #[error("dynamics need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn check_region(region: &RegionSet, vertices: usize) -> Result<(), MetricError> {
    if region.is_empty() {
        return Err(MetricError::EmptyRegion(region.name().to_string()));
    }
    if let Some(&index) = region.indices().last().filter(|&&i| i >= vertices) {
        return Err(MetricError::RegionOutOfRange {
            region: region.name().to_string(),
            index,
            vertices,
        });
    }
    Ok(())
}

fn check_pair(a: &MotionSequence, b: &MotionSequence) -> Result<(), MetricError> {
    if a.frames() != b.frames() || a.vertices() != b.vertices() {
        return Err(MetricError::ShapeMismatch {
            a: a.frames(),
            av: a.vertices(),
            b: b.frames(),
            bv: b.vertices(),
        });
    }
    Ok(())
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Mean over frames of the largest lip-vertex L2 error.
pub fn lip_vertex_error(
    pred: &MotionSequence,
    gt: &MotionSequence,
    lips: &RegionSet,
) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    check_region(lips, gt.vertices())?;
    let t = gt.frames();
    if t == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..t)
        .map(|f| {
            lips.indices()
                .iter()
                .map(|&v| {
                    let (a, b) = (pred.vertex(f, v), gt.vertex(f, v));
                    norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
                })
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / t as f64)
}

/// Population standard deviation over time of each region vertex's
/// displacement magnitude.
pub fn dynamics(m: &MotionSequence, region: &RegionSet) -> Result<Vec<f64>, MetricError> {
    check_region(region, m.vertices())?;
    let t = m.frames();
    if t < 2 {
        return Err(MetricError::TooShort(t));
    }
    Ok(region
        .indices()
        .iter()
        .map(|&v| {
            let mags: Vec<f64> = (0..t).map(|f| norm3(m.vertex(f, v))).collect();
            let mean = mags.iter().sum::<f64>() / t as f64;
            (mags.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t as f64).sqrt()
        })
        .collect())
}

fn dynamics_gap(
    gt: &MotionSequence,
    pred: &MotionSequence,
    upper: &RegionSet,
) -> Result<Vec<f64>, MetricError> {
    check_pair(gt, pred)?;
    let (a, b) = (dynamics(gt, upper)?, dynamics(pred, upper)?);
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// Signed mean of `dyn(gt) - dyn(pred)` over the upper-face region.
pub fn fdd(gt: &MotionSequence, pred: &MotionSequence, upper: &RegionSet) -> Result<f64, MetricError> {
    let gap = dynamics_gap(gt, pred, upper)?;
    Ok(gap.iter().sum::<f64>() / gap.len() as f64)
}

/// Mean of `|dyn(gt) - dyn(pred)|` over the upper-face region.
pub fn fdd_abs(gt: &MotionSequence, pred: &MotionSequence, upper: &RegionSet) -> Result<f64, MetricError> {
    let gap = dynamics_gap(gt, pred, upper)?;
    Ok(gap.iter().map(|x| x.abs()).sum::<f64>() / gap.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub index: usize,
    pub speaker: usize,
    pub frames: usize,
    pub lve: f64,
    pub fdd: f64,
    pub fdd_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lve: f64,
    pub fdd: f64,
    pub fdd_abs: f64,
    pub per_sequence: Vec<SequenceMetrics>,
}

impl MetricReport {
    /// Averages the per-sequence entries.
    pub fn from_sequences(per_sequence: Vec<SequenceMetrics>) -> Self {
        let n = per_sequence.len().max(1) as f64;
        let mean = |f: fn(&SequenceMetrics) -> f64| per_sequence.iter().map(f).sum::<f64>() / n;
        Self {
            lve: mean(|s| s.lve),
            fdd: mean(|s| s.fdd),
            fdd_abs: mean(|s| s.fdd_abs),
            per_sequence,
        }
    }

    /// Scores one prediction against its ground truth.
    pub fn score(
        index: usize,
        speaker: usize,
        pred: &MotionSequence,
        gt: &MotionSequence,
        lips: &RegionSet,
        upper: &RegionSet,
    ) -> Result<SequenceMetrics, MetricError> {
        Ok(SequenceMetrics {
            index,
            speaker,
            frames: gt.frames(),
            lve: lip_vertex_error(pred, gt, lips)?,
            fdd: fdd(gt, pred, upper)?,
            fdd_abs: fdd_abs(gt, pred, upper)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>8} {:>8} {:>7} {:>14} {:>14} {:>14}", "sequence", "speaker", "frames", "lve", "fdd", "fdd_abs").unwrap();
        for m in &self.per_sequence {
            writeln!(
                s,
                "{:>8} {:>8} {:>7} {:>14.6e} {:>14.6e} {:>14.6e}",
                m.index, m.speaker, m.frames, m.lve, m.fdd, m.fdd_abs
            )
            .unwrap();
        }
        writeln!(
            s,
            "{:>8} {:>8} {:>7} {:>14.6e} {:>14.6e} {:>14.6e}",
            "mean", "", "", self.lve, self.fdd, self.fdd_abs
        )
        .unwrap();
        s
    }
}

fn centroid(positions: &[f64], v_count: usize, frame: usize, region: &RegionSet) -> [f64; 3] {
    let mut c = [0.0; 3];
    for &v in region.indices() {
        let i = (frame * v_count + v) * 3;
        for k in 0..3 {
            c[k] += positions[i + k];
        }
    }
    c.map(|x| x / region.len() as f64)
}

/// Per-frame distance between the upper-lip and lower-lip centroids of the
/// animated mesh.
pub fn lip_distance(
    template: &NeutralTemplate,
    motion: &MotionSequence,
    upper_lip: &RegionSet,
    lower_lip: &RegionSet,
) -> Result<Vec<f64>, MetricError> {
    let v = motion.vertices();
    check_region(upper_lip, v)?;
    check_region(lower_lip, v)?;
    let pos = motion_to_positions(template, motion)?;
    Ok((0..motion.frames())
        .map(|f| {
            let (a, b) = (centroid(pos.data(), v, f, upper_lip), centroid(pos.data(), v, f, lower_lip));
            norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
        })
        .collect())
}

/// CSV with a `frame` column and one column per named trace.
pub fn lip_distance_csv(traces: &[(&str, &[f64])]) -> String {
    let mut s = String::from("frame");
    for (name, _) in traces {
        write!(s, ",{name}").unwrap();
    }
    s.push('\n');
    let frames = traces.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    for f in 0..frames {
        write!(s, "{f}").unwrap();
        for (_, t) in traces {
            match t.get(f) {
                Some(x) => write!(s, ",{x:.9}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_motion(rng: &mut ChaCha8Rng, t: usize, v: usize) -> MotionSequence {
        let data = (0..t * v * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        MotionSequence::new(Tensor::new(vec![t, v, 3], data).unwrap(), 30.0).unwrap()
    }

    fn region(idx: &[usize], v: usize) -> RegionSet {
        RegionSet::new("r", idx, v).unwrap()
    }

    pub(crate) fn naive_lve(pred: &MotionSequence, gt: &MotionSequence, lips: &[usize]) -> f64 {
        let (p, g) = (pred.displacements().data(), gt.displacements().data());
        let v = gt.vertices();
        let mut total = 0.0;
        for t in 0..gt.frames() {
            let mut worst = 0.0f64;
            for &l in lips {
                let mut sq = 0.0;
                for c in 0..3 {
                    let i = (t * v + l) * 3 + c;
                    sq += (p[i] - g[i]).powi(2);
                }
                worst = worst.max(sq.sqrt());
            }
            total += worst;
        }
        total / gt.frames() as f64
    }

    pub(crate) fn naive_dyn(m: &MotionSequence, v: usize) -> f64 {
        let t = m.frames();
        let mags: Vec<f64> = (0..t)
            .map(|f| {
                let x = m.vertex(f, v);
                (x[0].powi(2) + x[1].powi(2) + x[2].powi(2)).sqrt()
            })
            .collect();
        let mean: f64 = mags.iter().sum::<f64>() / t as f64;
        let var: f64 = mags.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64;
        var.sqrt()
    }

    #[test]
    fn lve_identity_and_345() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_motion(&mut rng, 5, 6);
        let lips = region(&[1, 3], 6);
        assert_eq!(lip_vertex_error(&gt, &gt, &lips).unwrap(), 0.0);
        let mut d = gt.displacements().clone();
        for t in 0..5 {
            d.data_mut()[(t * 6 + 3) * 3] += 3.0;
            d.data_mut()[(t * 6 + 3) * 3 + 1] += 4.0;
        }
        let pred = MotionSequence::new(d, 30.0).unwrap();
        assert_eq!(lip_vertex_error(&pred, &gt, &lips).unwrap(), 5.0);
    }

    #[test]
    fn lve_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, g) = (random_motion(&mut rng, 5, 10), random_motion(&mut rng, 5, 10));
        let lips = [0, 2, 5, 9];
        let got = lip_vertex_error(&p, &g, &region(&lips, 10)).unwrap();
        assert!((got - naive_lve(&p, &g, &lips)).abs() < 1e-12);
    }

    #[test]
    fn dyn_cases() {
        let c = MotionSequence::new(Tensor::filled(&[4, 2, 3], 0.3), 30.0).unwrap();
        assert_eq!(dynamics(&c, &region(&[0, 1], 2)).unwrap(), vec![0.0, 0.0]);
        let mut d = Tensor::zeros(&[2, 1, 3]);
        d.data_mut()[3] = 2.0;
        let m = MotionSequence::new(d, 30.0).unwrap();
        assert_eq!(dynamics(&m, &region(&[0], 1)).unwrap(), vec![1.0]);
        assert!(matches!(
            dynamics(&MotionSequence::zeros(1, 2, 30.0), &region(&[0], 2)),
            Err(MetricError::TooShort(1))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_motion(&mut rng, 7, 4);
        let got = dynamics(&r, &region(&[1, 3], 4)).unwrap();
        assert!((got[0] - naive_dyn(&r, 1)).abs() < 1e-12);
        assert!((got[1] - naive_dyn(&r, 3)).abs() < 1e-12);
    }

    #[test]
    fn fdd_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_motion(&mut rng, 6, 4);
        let upper = region(&[2, 3], 4);
        assert_eq!(fdd(&gt, &gt, &upper).unwrap(), 0.0);
        // dyn values 1 and 3 against a constant prediction.
        let mut d = Tensor::zeros(&[2, 2, 3]);
        d.data_mut()[6] = 2.0;
        d.data_mut()[9] = 6.0;
        let g = MotionSequence::new(d, 30.0).unwrap();
        let flat = MotionSequence::zeros(2, 2, 30.0);
        let up = region(&[0, 1], 2);
        assert_eq!(fdd(&g, &flat, &up).unwrap(), 2.0);
        assert_eq!(fdd(&flat, &g, &up).unwrap(), -2.0);
        assert_eq!(fdd_abs(&flat, &g, &up).unwrap(), 2.0);
        let pred = random_motion(&mut rng, 6, 4);
        let want = ((naive_dyn(&gt, 2) - naive_dyn(&pred, 2)) + (naive_dyn(&gt, 3) - naive_dyn(&pred, 3))) / 2.0;
        assert!((fdd(&gt, &pred, &upper).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn region_and_shape_errors() {
        let m = MotionSequence::zeros(3, 4, 30.0);
        let big = RegionSet::new("lip", &[7], 8).unwrap();
        assert!(matches!(lip_vertex_error(&m, &m, &big), Err(MetricError::RegionOutOfRange { .. })));
        let empty = RegionSet::new("lip", &[], 4).unwrap();
        assert!(matches!(lip_vertex_error(&m, &m, &empty), Err(MetricError::EmptyRegion(_))));
        let other = MotionSequence::zeros(2, 4, 30.0);
        assert!(matches!(fdd(&m, &other, &region(&[0], 4)), Err(MetricError::ShapeMismatch { .. })));
    }

    #[test]
    fn report_averages_entries() {
        let seqs = vec![
            SequenceMetrics { index: 0, speaker: 0, frames: 3, lve: 1.0, fdd: -1.0, fdd_abs: 1.0 },
            SequenceMetrics { index: 1, speaker: 1, frames: 3, lve: 3.0, fdd: 2.0, fdd_abs: 2.0 },
        ];
        let r = MetricReport::from_sequences(seqs);
        assert_eq!((r.lve, r.fdd, r.fdd_abs), (2.0, 0.5, 1.5));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["per_sequence"].as_array().unwrap().len(), 2);
        assert_eq!(r.to_text().lines().count(), 4);
    }

    #[test]
    fn lip_distance_on_open_mouth() {
        let tpl = NeutralTemplate::new(Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 2.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, -1.0, 2.0],
        ]))
        .unwrap();
        let mut d = Tensor::zeros(&[2, 4, 3]);
        // Frame 1: lower lip drops by 0.5.
        d.data_mut()[12 + 2 * 3 + 1] = -0.5;
        d.data_mut()[12 + 3 * 3 + 1] = -0.5;
        let m = MotionSequence::new(d, 30.0).unwrap();
        let trace = lip_distance(&tpl, &m, &region(&[0, 1], 4), &region(&[2, 3], 4)).unwrap();
        assert_eq!(trace, vec![2.0, 2.5]);
        let csv = lip_distance_csv(&[("gt", &trace), ("pred", &trace[..1])]);
        assert_eq!(csv, "frame,gt,pred\n0,2.000000000,2.000000000\n1,2.500000000,\n");
    }

    proptest! {
        #[test]
        fn lve_translation_invariant_and_dyn_permutation_invariant(seed in 0u64..500, shift in prop::array::uniform3(-5.0f64..5.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = (random_motion(&mut rng, 4, 5), random_motion(&mut rng, 4, 5));
            let lips = region(&[0, 4], 5);
            let base = lip_vertex_error(&p, &g, &lips).unwrap();
            let moved = |m: &MotionSequence| {
                let d = m.displacements().data().chunks(3).flat_map(|x| [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]]).collect();
                MotionSequence::new(Tensor::new(vec![4, 5, 3], d).unwrap(), 30.0).unwrap()
            };
            prop_assert!((lip_vertex_error(&moved(&p), &moved(&g), &lips).unwrap() - base).abs() < 1e-12);
            prop_assert!(base >= 0.0);

            let order = [2usize, 0, 3, 1];
            let permuted = {
                let flat = p.to_flat();
                let rows: Vec<Vec<f64>> = order.iter().map(|&i| flat.row(i).to_vec()).collect();
                MotionSequence::from_flat(&Tensor::from_rows(&rows), 30.0).unwrap()
            };
            let all = region(&[0, 1, 2, 3, 4], 5);
            let a = dynamics(&p, &all).unwrap();
            let b = dynamics(&permuted, &all).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
