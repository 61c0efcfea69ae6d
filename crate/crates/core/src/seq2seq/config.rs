use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Transformer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Filled in from the corpus vocabulary when left at zero.
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            d_model: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 0,
            max_positions: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_encoder_layers == 0 || self.num_decoder_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config(
                "vocab_size, ffn_dim and max_positions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Key/value pairs stored in checkpoint headers.
    pub(crate) fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("num_encoder_layers".into(), self.num_encoder_layers.to_string()),
            ("num_decoder_layers".into(), self.num_decoder_layers.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("ffn_dim".into(), self.ffn_dim.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_positions".into(), self.max_positions.to_string()),
            // bit-exact round trip of the float
            ("dropout".into(), format!("{:?}", self.dropout)),
        ]
    }

    pub(crate) fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint header lacks `{k}`")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint header `{k}` is not an integer")))
        };
        let cfg = ModelConfig {
            num_encoder_layers: int("num_encoder_layers")?,
            num_decoder_layers: int("num_decoder_layers")?,
            d_model: int("d_model")?,
            num_heads: int("num_heads")?,
            ffn_dim: int("ffn_dim")?,
            vocab_size: int("vocab_size")?,
            max_positions: int("max_positions")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::Data("checkpoint header `dropout` is not a float".into()))?,
        };
        cfg.validate().map_err(|e| Error::Data(e.to_string()))?;
        Ok(cfg)
    }
}
