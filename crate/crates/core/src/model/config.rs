use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Encoder stack, global average pooling, classification head.
    Teo,
    /// Encoder stack whose queries are mean-pooled between layers.
    Tep,
    /// Encoder-decoder trained jointly on crossing label and future boxes.
    Ted,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Teo => "teo",
            Architecture::Tep => "tep",
            Architecture::Ted => "ted",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "teo" => Ok(Architecture::Teo),
            "tep" => Ok(Architecture::Tep),
            "ted" => Ok(Architecture::Ted),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub d_model: usize,
    pub n_heads: usize,
    /// Encoder layers; TED uses the same count of decoder layers.
    pub n_layers: usize,
    pub d_ffn: usize,
    /// Hidden width of the classification head; `None` means `d_model`.
    pub d_cls: Option<usize>,
    pub obs_len: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub min_pooled_len: usize,
    pub dropout: f64,
    /// Decoder reuses the encoder's box embedding.
    pub share_decoder_embedding: bool,
    pub layer_norm_eps: f64,
    /// Length of the sinusoidal table; bounds encoder and decoder sequence length.
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Teo,
            d_model: 128,
            n_heads: 8,
            n_layers: 4,
            d_ffn: 256,
            d_cls: None,
            obs_len: 16,
            pool_window: 2,
            pool_stride: 2,
            min_pooled_len: 2,
            dropout: 0.0,
            share_decoder_embedding: true,
            layer_norm_eps: 1e-5,
            max_positions: 128,
        }
    }
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn cls_dim(&self) -> usize {
        self.d_cls.unwrap_or(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ffn", self.d_ffn),
            ("d_cls", self.cls_dim()),
            ("obs_len", self.obs_len),
            ("pool_window", self.pool_window),
            ("pool_stride", self.pool_stride),
            ("min_pooled_len", self.min_pooled_len),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be >= 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        if self.obs_len > self.max_positions {
            return Err(Error::Config(format!(
                "obs_len {} exceeds max_positions {}",
                self.obs_len, self.max_positions
            )));
        }
        Ok(())
    }

    /// Sequence length after each encoder layer.
    pub fn encoder_lengths(&self) -> Vec<usize> {
        let mut len = self.obs_len;
        (0..self.n_layers)
            .map(|_| {
                if self.architecture == Architecture::Tep {
                    if let Some(next) = self.pooled_len(len) {
                        len = next;
                    }
                }
                len
            })
            .collect()
    }

    /// Query length after pooling a sequence of `len`, or `None` when the
    /// pooling step is skipped.
    pub fn pooled_len(&self, len: usize) -> Option<usize> {
        if len < self.pool_window {
            return None;
        }
        let out = (len - self.pool_window) / self.pool_stride + 1;
        (out >= self.min_pooled_len).then_some(out)
    }
}
