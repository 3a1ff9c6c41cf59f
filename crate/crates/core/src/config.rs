//! Flat `key = value` run configuration.
//!
//! One file configures data generation, the model, training and inference.
//! Lines starting with `#` and blank lines are ignored. Every key can also
//! be set from the command line under the same name.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpanRepr};
use crate::pipeline::{InferConfig, TrainConfig};

/// `(name, type, description)` of every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data", "path", "directory holding the split manifests"),
    ("seed", "u64", "seed for data generation, initialization and training"),
    ("examples", "usize", "corpus size for gen-data (split 70/15/15)"),
    ("noise", "f64", "feature noise sigma for gen-data"),
    ("pattern_dim", "usize", "latent code size for gen-data"),
    ("tokens_min", "usize", "fewest query tokens for gen-data"),
    ("tokens_max", "usize", "most query tokens for gen-data"),
    ("width_min", "f64", "narrowest target span for gen-data"),
    ("width_max", "f64", "widest target span for gen-data"),
    ("clips", "usize", "clips per video (K)"),
    ("video_dim", "usize", "clip feature size"),
    ("query_dim", "usize", "token feature size"),
    ("hidden", "usize", "model width"),
    ("heads", "usize", "attention heads"),
    ("ffn", "usize", "feed-forward width"),
    ("encoder_layers", "usize", "encoder depth"),
    ("decoder_layers", "usize", "decoder depth"),
    ("dropout", "f64", "dropout probability during training"),
    ("max_words", "usize", "longest supported query"),
    ("span_repr", "add|feature|cat-fn", "decoder span representation"),
    ("time_every_layer", "bool", "re-add the time embedding before every decoder layer"),
    ("train_queries", "usize", "noisy copies of the target per training example"),
    ("timesteps", "usize", "diffusion length T"),
    ("scale", "f64", "signal scale"),
    ("l1_weight", "f64", "weight of the boundary L1 term"),
    ("giou_weight", "f64", "weight of the GIoU term"),
    ("lr", "f64", "learning rate"),
    ("weight_decay", "f64", "decoupled weight decay"),
    ("batch_size", "usize", "examples per optimizer step"),
    ("epochs", "usize", "passes over the training split"),
    ("grad_clip", "f64", "gradient-norm ceiling, 0 disables"),
    ("cosine_decay", "bool", "decay the learning rate to zero along a cosine"),
    ("queries", "usize", "spans sampled per example at inference"),
    ("steps", "usize", "reverse sampling steps at inference"),
    ("infer_seed", "u64", "seed for inference noise and random-candidate picks"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: String,
    pub examples: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            data: "data".into(),
            examples: 1000,
            model: ModelConfig {
                clips: synth.clips,
                video_dim: synth.video_dim,
                query_dim: synth.query_dim,
                hidden: 64,
                heads: 8,
                ffn: 256,
                encoder_layers: 2,
                decoder_layers: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                epochs: 120,
                cosine_decay: true,
                ..TrainConfig::default()
            },
            infer: InferConfig::default(),
            synth,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "data" => self.data = v.trim().to_string(),
            "seed" => {
                let s = parse(key, v)?;
                self.train.seed = s;
                self.synth.seed = s;
            }
            "examples" => self.examples = parse(key, v)?,
            "noise" => self.synth.noise = parse(key, v)?,
            "pattern_dim" => self.synth.pattern_dim = parse(key, v)?,
            "tokens_min" => self.synth.tokens.0 = parse(key, v)?,
            "tokens_max" => self.synth.tokens.1 = parse(key, v)?,
            "width_min" => self.synth.width.0 = parse(key, v)?,
            "width_max" => self.synth.width.1 = parse(key, v)?,
            "clips" => {
                let k = parse(key, v)?;
                self.model.clips = k;
                self.synth.clips = k;
            }
            "video_dim" => {
                let d = parse(key, v)?;
                self.model.video_dim = d;
                self.synth.video_dim = d;
            }
            "query_dim" => {
                let d = parse(key, v)?;
                self.model.query_dim = d;
                self.synth.query_dim = d;
            }
            "hidden" => self.model.hidden = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "ffn" => self.model.ffn = parse(key, v)?,
            "encoder_layers" => self.model.encoder_layers = parse(key, v)?,
            "decoder_layers" => self.model.decoder_layers = parse(key, v)?,
            "dropout" => self.model.dropout = parse(key, v)?,
            "max_words" => self.model.max_words = parse(key, v)?,
            "span_repr" => self.model.span_repr = parse::<SpanRepr>(key, v)?,
            "time_every_layer" => self.model.time_every_layer = parse(key, v)?,
            "train_queries" => self.train.queries = parse(key, v)?,
            "timesteps" => self.train.timesteps = parse(key, v)?,
            "scale" => self.train.scale = parse(key, v)?,
            "l1_weight" => self.train.l1_weight = parse(key, v)?,
            "giou_weight" => self.train.giou_weight = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "grad_clip" => self.train.grad_clip = parse(key, v)?,
            "cosine_decay" => self.train.cosine_decay = parse(key, v)?,
            "queries" => self.infer.queries = parse(key, v)?,
            "steps" => self.infer.steps = parse(key, v)?,
            "infer_seed" => self.infer.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "data" => self.data.clone(),
            "seed" => self.train.seed.to_string(),
            "examples" => self.examples.to_string(),
            "noise" => self.synth.noise.to_string(),
            "pattern_dim" => self.synth.pattern_dim.to_string(),
            "tokens_min" => self.synth.tokens.0.to_string(),
            "tokens_max" => self.synth.tokens.1.to_string(),
            "width_min" => self.synth.width.0.to_string(),
            "width_max" => self.synth.width.1.to_string(),
            "clips" => self.model.clips.to_string(),
            "video_dim" => self.model.video_dim.to_string(),
            "query_dim" => self.model.query_dim.to_string(),
            "hidden" => self.model.hidden.to_string(),
            "heads" => self.model.heads.to_string(),
            "ffn" => self.model.ffn.to_string(),
            "encoder_layers" => self.model.encoder_layers.to_string(),
            "decoder_layers" => self.model.decoder_layers.to_string(),
            "dropout" => self.model.dropout.to_string(),
            "max_words" => self.model.max_words.to_string(),
            "span_repr" => self.model.span_repr.to_string(),
            "time_every_layer" => self.model.time_every_layer.to_string(),
            "train_queries" => self.train.queries.to_string(),
            "timesteps" => self.train.timesteps.to_string(),
            "scale" => self.train.scale.to_string(),
            "l1_weight" => self.train.l1_weight.to_string(),
            "giou_weight" => self.train.giou_weight.to_string(),
            "lr" => self.train.lr.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "grad_clip" => self.train.grad_clip.to_string(),
            "cosine_decay" => self.train.cosine_decay.to_string(),
            "queries" => self.infer.queries.to_string(),
            "steps" => self.infer.steps.to_string(),
            "infer_seed" => self.infer.seed.to_string(),
            _ => return None,
        };
        Some(s)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _, _)| (k.to_string(), self.get(k).expect("every listed key is readable")))
            .collect()
    }

    /// Defaults overridden by every entry of `map`.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                path: path.to_path_buf(),
            },
            _ => Error::Io(e),
        })?;
        self.apply_text(&text)
    }

    /// The file form of [`to_map`](Self::to_map).
    pub fn to_text(&self) -> String {
        self.to_map()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate(self.train.timesteps)?;
        Ok(())
    }
}
