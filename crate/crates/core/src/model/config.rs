use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Capacity of the learned positional tables.
pub const POSITIONAL_CAPACITY: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width H.
    pub feature_dim: usize,
    /// Latent slots per second of audio.
    pub token_rate: f64,
    /// Training chunk length in seconds.
    pub chunk_duration: f64,
    /// Feature frames per second.
    pub frame_rate: f64,
    /// Rows in the frame positional tables.
    pub max_frames: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of the block width.
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            token_rate: 50.0,
            chunk_duration: 5.0,
            frame_rate: 50.0,
            max_frames: POSITIONAL_CAPACITY,
            enc_layers: 2,
            dec_layers: 2,
            enc_width: 32,
            dec_width: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// 8 features, 6 slots, 20-frame chunks.
    pub fn toy() -> Self {
        Self {
            feature_dim: 8,
            token_rate: 15.0,
            chunk_duration: 0.4,
            frame_rate: 50.0,
            max_frames: 20,
            enc_layers: 1,
            dec_layers: 2,
            enc_width: 16,
            dec_width: 32,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    /// L = round(r·τ).
    pub fn num_slots(&self) -> usize {
        (self.token_rate * self.chunk_duration).round() as usize
    }

    /// Frames per training chunk.
    pub fn chunk_frames(&self) -> usize {
        (self.frame_rate * self.chunk_duration).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("enc_width", self.enc_width),
            ("dec_width", self.dec_width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("max_frames", self.max_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        for (name, v) in [("token_rate", self.token_rate), ("chunk_duration", self.chunk_duration), ("frame_rate", self.frame_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.num_slots() == 0 {
            return Err(Error::config("model.token_rate * model.chunk_duration rounds to zero slots"));
        }
        if self.max_frames > POSITIONAL_CAPACITY {
            return Err(Error::config(format!("model.max_frames exceeds positional capacity {POSITIONAL_CAPACITY}")));
        }
        let chunk = self.chunk_frames();
        if chunk == 0 || chunk > self.max_frames {
            return Err(Error::config(format!("chunk of {chunk} frames does not fit max_frames {}", self.max_frames)));
        }
        if !self.enc_width.is_multiple_of(self.heads) || !self.dec_width.is_multiple_of(self.heads) {
            return Err(Error::config("model widths must be divisible by heads"));
        }
        Ok(())
    }
}
