//! Checkpoint directories: `index.json` plus one little-endian `f32` blob per
//! parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamStore};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha key, hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal, since it may exceed `u64`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format_version: u32,
    pub config: BTreeMap<String, String>,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub params: Vec<(String, Mat)>,
}

pub fn save(
    dir: &Path,
    params: &ParamStore,
    config: &BTreeMap<String, String>,
    step: u64,
    rng: &ChaCha8Rng,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, m) in params.iter() {
        let file = format!("{name}.f32");
        let mut bytes = Vec::with_capacity(m.len() * 4);
        for &v in m.iter() {
            let f = v as f32;
            if f as f64 != v {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} holds {v}, which is not representable as f32"
                )));
            }
            bytes.extend_from_slice(&f.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(ParamEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            file,
        });
    }
    let index = CheckpointIndex {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        step,
        rng: RngState::capture(rng),
        params: entries,
    };
    let tmp = dir.join("index.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&index)?)?;
    fs::rename(tmp, dir.join("index.json"))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let index_path = dir.join("index.json");
    let text = fs::read(&index_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: index_path.clone() },
        _ => Error::Io(e),
    })?;
    let index: CheckpointIndex = serde_json::from_slice(&text)?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            index.format_version
        )));
    }
    let mut params = Vec::with_capacity(index.params.len());
    for p in &index.params {
        let path = dir.join(&p.file);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: path.clone() },
            _ => Error::Io(e),
        })?;
        if bytes.len() != p.rows * p.cols * 4 {
            return Err(Error::Checkpoint(format!(
                "{} has {} bytes, expected {}x{} floats",
                path.display(),
                bytes.len(),
                p.rows,
                p.cols
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Mat::from_shape_vec((p.rows, p.cols), vals).expect("length checked");
        params.push((p.name.clone(), m));
    }
    Ok(Checkpoint {
        config: index.config,
        step: index.step,
        rng: index.rng.restore()?,
        params,
    })
}

impl Checkpoint {
    /// Overwrites every parameter of `store`; names and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, m) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {name}")))?;
            let dst = store.get_mut(id);
            if dst.dim() != m.dim() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    m.dim(),
                    dst.dim()
                )));
            }
            dst.assign(m);
        }
        Ok(())
    }

    /// Rebuilds the run configuration and model stored in the checkpoint.
    pub fn into_model(&self) -> Result<(RunConfig, Model)> {
        let cfg = RunConfig::from_map(&self.config)?;
        let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
        self.restore_into(&mut model.params)?;
        Ok((cfg, model))
    }
}

/// Saves `model` under `dir` with its run configuration.
pub fn save_model(
    dir: &Path,
    model: &Model,
    cfg: &RunConfig,
    step: u64,
    rng: &ChaCha8Rng,
) -> Result<()> {
    save(dir, &model.params, &cfg.to_map(), step, rng)
}
