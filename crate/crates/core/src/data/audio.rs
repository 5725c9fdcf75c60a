//! Log band-energy features from a mono waveform.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{DataError, FeatureSequence};
use crate::diffcore::Tensor;

/// Mono samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DataError> {
        if sample_rate == 0 {
            return Err(DataError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(s) = samples.iter().find(|s| !(s.is_finite() && s.abs() <= 1.0)) {
            return Err(DataError::InvalidClip(format!("sample {s} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureOptions {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub bands: usize,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 1000.0 / 30.0,
            bands: 64,
        }
    }
}

fn ms_to_samples(ms: f64, rate: u32) -> usize {
    (ms * rate as f64 / 1000.0).round() as usize
}

/// Hann-windowed DFT magnitudes pooled (mean) into `bands` equal-width bands
/// over bins `0..=N/2`, compressed with `ln(1 + x)`.
///
/// Frame count is `floor((len - frame) / hop) + 1`.
pub fn extract_features(clip: &AudioClip, opts: &FeatureOptions) -> Result<FeatureSequence, DataError> {
    let frame = ms_to_samples(opts.frame_ms, clip.sample_rate);
    let hop = ms_to_samples(opts.hop_ms, clip.sample_rate);
    if frame == 0 || hop == 0 || opts.bands == 0 {
        return Err(DataError::InvalidClip(format!(
            "frame {frame} samples, hop {hop} samples, {} bands",
            opts.bands
        )));
    }
    let len = clip.samples.len();
    if len < frame {
        return Err(DataError::ClipTooShort {
            samples: len,
            frame,
        });
    }
    let bins = frame / 2 + 1;
    if opts.bands > bins {
        return Err(DataError::TooManyBands {
            bands: opts.bands,
            bins,
        });
    }
    let frames = (len - frame) / hop + 1;
    let window: Vec<f64> = (0..frame)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame as f64).cos())
        .collect();
    let band_of: Vec<usize> = (0..bins).map(|k| k * opts.bands / bins).collect();
    let mut band_width = vec![0usize; opts.bands];
    for &b in &band_of {
        band_width[b] += 1;
    }

    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame);
    let mut buf = vec![Complex::new(0.0, 0.0); frame];
    let mut out = Vec::with_capacity(frames * opts.bands);
    for f in 0..frames {
        let start = f * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(clip.samples[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        let mut pooled = vec![0.0; opts.bands];
        for (k, c) in buf.iter().take(bins).enumerate() {
            pooled[band_of[k]] += c.norm();
        }
        out.extend(
            pooled
                .iter()
                .zip(&band_width)
                .map(|(s, &w)| (s / w as f64).ln_1p()),
        );
    }
    FeatureSequence::new(Tensor::new(vec![frames, opts.bands], out).expect("sized"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 16_000).unwrap()
    }

    fn opts(bands: usize) -> FeatureOptions {
        FeatureOptions {
            frame_ms: 16.0,
            hop_ms: 8.0,
            bands,
        }
    }

    /// Direct O(N^2) DFT magnitude of a windowed frame.
    fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn silence_gives_zero_features() {
        let f = extract_features(&clip(vec![0.0; 1600]), &opts(8)).unwrap();
        assert!(f.values().data().iter().all(|&v| v == 0.0));
        assert_eq!(f.frames(), (1600 - 256) / 128 + 1);
    }

    #[test]
    fn too_short() {
        let err = extract_features(&clip(vec![0.0; 100]), &opts(8)).unwrap_err();
        assert!(matches!(err, DataError::ClipTooShort { samples: 100, frame: 256 }));
    }

    #[test]
    fn sine_at_band_center_dominates() {
        // 256-sample frames give 129 bins; 8 bands hold bins [16b, 16b+16)
        // (the last one also bin 128). Band 3 centre sits at bin 56.
        let frame = 256;
        let bin = 56.0;
        let freq = bin * 16_000.0 / frame as f64;
        let samples: Vec<f64> = (0..2048)
            .map(|n| 0.8 * (2.0 * PI * freq * n as f64 / 16_000.0).sin())
            .collect();
        let feats = extract_features(&clip(samples.clone()), &opts(8)).unwrap();

        // Oracle: direct DFT of the first windowed frame, pooled the same way.
        let windowed: Vec<f64> = (0..frame)
            .map(|n| samples[n] * (0.5 - 0.5 * (2.0 * PI * n as f64 / frame as f64).cos()))
            .collect();
        let mags = dft_magnitudes(&windowed);
        let mut oracle = vec![0.0; 8];
        let mut width = vec![0.0; 8];
        for (k, m) in mags.iter().enumerate() {
            oracle[k * 8 / 129] += m;
            width[k * 8 / 129] += 1.0;
        }
        let oracle: Vec<f64> = oracle.iter().zip(&width).map(|(s, w)| (s / w).ln_1p()).collect();
        for (a, b) in feats.values().row(0).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }

        for t in 0..feats.frames() {
            let row = feats.values().row(t);
            let peak = row[3];
            for (b, &v) in row.iter().enumerate() {
                if b != 3 {
                    assert!(peak > 10.0 * v, "frame {t}: band {b} = {v}, peak {peak}");
                }
            }
        }
    }

    #[test]
    fn bands_cannot_exceed_bins() {
        let err = extract_features(&clip(vec![0.0; 400]), &opts(200)).unwrap_err();
        assert!(matches!(err, DataError::TooManyBands { .. }));
    }

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(AudioClip::new(vec![1.5], 16_000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn doubling_amplitude_never_decreases_features(
            samples in prop::collection::vec(-0.5f64..0.5, 256..900),
        ) {
            let a = extract_features(&clip(samples.clone()), &opts(8)).unwrap();
            let doubled: Vec<f64> = samples.iter().map(|s| 2.0 * s).collect();
            let b = extract_features(&clip(doubled), &opts(8)).unwrap();
            for (x, y) in a.values().data().iter().zip(b.values().data()) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn trailing_samples_short_of_a_frame_are_ignored(
            samples in prop::collection::vec(-1f64..1.0, 256..900),
            extra in prop::collection::vec(-1f64..1.0, 0..128),
        ) {
            let base = extract_features(&clip(samples.clone()), &opts(8)).unwrap();
            // Only append what still leaves the next frame incomplete.
            let room = 128 - 1 - (samples.len() - 256) % 128;
            let mut longer = samples;
            longer.extend(extra.into_iter().take(room));
            let other = extract_features(&clip(longer), &opts(8)).unwrap();
            prop_assert_eq!(base, other);
        }
    }
}
