use super::{DataError, FeatureSequence};
use crate::diffcore::Tensor;

/// Linear interpolation of every feature dimension onto `target` frames
/// spread evenly over the same normalized time span. Endpoints are copied.
pub fn resample_features(f: &FeatureSequence, target: usize) -> Result<FeatureSequence, DataError> {
    let src = f.frames();
    if src < 2 || target < 2 {
        return Err(DataError::DegenerateLength { from: src, to: target });
    }
    let dim = f.dim();
    let values = f.values();
    let denom = target - 1;
    let mut out = Vec::with_capacity(target * dim);
    for i in 0..target {
        // Source position i * (src - 1) / (target - 1), split exactly.
        let num = i * (src - 1);
        let (lo, rem) = (num / denom, num % denom);
        if rem == 0 {
            out.extend_from_slice(values.row(lo));
        } else {
            let frac = rem as f64 / denom as f64;
            let (a, b) = (values.row(lo), values.row(lo + 1));
            out.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
        }
    }
    FeatureSequence::new(Tensor::new(vec![target, dim], out).expect("sized"))
}
