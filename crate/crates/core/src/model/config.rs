use serde::{Deserialize, Serialize};

use super::ModelError;

/// Network shape.
///
/// `Default` is a desk-scale configuration; [`ModelConfig::biwi`] and
/// [`ModelConfig::voca`] carry the full-size settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent width `d`.
    pub d: usize,
    /// Audio feature width `B`.
    pub audio_dim: usize,
    /// Heads of the cross-modal attention.
    pub heads: usize,
    /// Heads of the motion-/audio-attentive self-attention.
    pub self_heads: usize,
    /// Channel compression ratio of the speaker-aware gate.
    pub squeeze_ratio: usize,
    pub ff_dim: usize,
    pub vertices: usize,
    pub speakers: usize,
    pub max_frames: usize,
    /// Tie each decoder's output weight to its encoder's transpose.
    pub share_transpose_codec: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            audio_dim: 32,
            heads: 4,
            self_heads: 4,
            squeeze_ratio: 16,
            ff_dim: 128,
            vertices: 120,
            speakers: 8,
            max_frames: 600,
            share_transpose_codec: false,
        }
    }
}

impl ModelConfig {
    /// Full-size settings used for BIWI (768-wide audio features).
    pub fn biwi() -> Self {
        Self {
            d: 256,
            audio_dim: 768,
            heads: 4,
            self_heads: 4,
            squeeze_ratio: 16,
            ff_dim: 2048,
            vertices: 23370,
            speakers: 6,
            max_frames: 600,
            share_transpose_codec: false,
        }
    }

    /// Full-size settings used for VOCASET.
    pub fn voca() -> Self {
        Self {
            d: 128,
            vertices: 5023,
            speakers: 8,
            ..Self::biwi()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d", self.d),
            ("audio_dim", self.audio_dim),
            ("heads", self.heads),
            ("self_heads", self.self_heads),
            ("squeeze_ratio", self.squeeze_ratio),
            ("ff_dim", self.ff_dim),
            ("vertices", self.vertices),
            ("speakers", self.speakers),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d % self.heads != 0 || self.d % self.self_heads != 0 {
            return Err(ModelError::Config(format!(
                "d={} must be divisible by heads={} and self_heads={}",
                self.d, self.heads, self.self_heads
            )));
        }
        if (2 * self.d) % self.squeeze_ratio != 0 {
            return Err(ModelError::Config(format!(
                "squeeze_ratio={} must divide 2d={}",
                self.squeeze_ratio,
                2 * self.d
            )));
        }
        Ok(())
    }

    /// Hidden width of the speaker-aware gate, `2d / r`.
    pub fn gate_hidden(&self) -> usize {
        2 * self.d / self.squeeze_ratio
    }

    pub fn motion_dim(&self) -> usize {
        self.vertices * 3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sizes() {
        let b = ModelConfig::biwi();
        assert_eq!((b.d, b.ff_dim, b.squeeze_ratio, b.heads), (256, 2048, 16, 4));
        assert_eq!(b.vertices * 3, 70110);
        let v = ModelConfig::voca();
        assert_eq!(v.d, 128);
        assert_eq!(v.vertices * 3, 15069);
        assert!(b.validate().is_ok() && v.validate().is_ok());
    }

    #[test]
    fn divisibility_rules() {
        let bad_heads = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err());
        let bad_ratio = ModelConfig { squeeze_ratio: 5, ..ModelConfig::default() };
        assert!(bad_ratio.validate().is_err());
        assert_eq!(ModelConfig::default().gate_hidden(), 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"d": 8, "depth": 3}"#).is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"d": 8, "heads": 2, "self_heads": 2}"#).unwrap();
        assert_eq!(c.ff_dim, 128);
    }
}
