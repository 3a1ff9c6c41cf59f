//! Model configuration and the parameter container tying encoder and decoder together.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::ParamStore;
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};

const INIT_STREAM: u64 = 1 << 32;

/// How a noisy span is turned into a decoder feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanRepr {
    /// Pooled segment features plus a location embedding.
    Add,
    /// Pooled segment features only.
    Feature,
    /// Concatenate pooled features and location embedding, then project.
    CatFn,
}

impl FromStr for SpanRepr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(SpanRepr::Add),
            "feature" => Ok(SpanRepr::Feature),
            "cat-fn" => Ok(SpanRepr::CatFn),
            other => Err(Error::Config(format!(
                "span representation must be add, feature or cat-fn (got {other})"
            ))),
        }
    }
}

impl fmt::Display for SpanRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpanRepr::Add => "add",
            SpanRepr::Feature => "feature",
            SpanRepr::CatFn => "cat-fn",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Clips per video after resampling.
    pub clips: usize,
    pub video_dim: usize,
    pub query_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    /// Rows of the learnable query position table.
    pub max_words: usize,
    pub span_repr: SpanRepr,
    /// Re-add the time embedding before every decoder layer, not just the first.
    pub time_every_layer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            clips: 64,
            video_dim: 32,
            query_dim: 32,
            hidden: 256,
            heads: 8,
            ffn: 1024,
            encoder_layers: 4,
            decoder_layers: 2,
            dropout: 0.1,
            max_words: 32,
            span_repr: SpanRepr::Add,
            time_every_layer: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clips", self.clips),
            ("video_dim", self.video_dim),
            ("query_dim", self.query_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_words", self.max_words),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Smallest span width: one clip.
    pub fn min_width(&self) -> f64 {
        1.0 / self.clips as f64
    }
}

/// Encoder, decoder and the parameters they read.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Freshly initialized model; initialization is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, &mut rng);
        let decoder = Decoder::new(&mut params, &config, &mut rng);
        Ok(Model {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn min_width(&self) -> f64 {
        self.config.min_width()
    }
}
