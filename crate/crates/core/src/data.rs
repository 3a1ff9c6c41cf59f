//! Synthetic grounding corpora and the on-disk feature manifest format.
//!
//! A synthetic example hides a random pattern code inside a span of the
//! video: clips covered by the span carry `A·p`, the rest carry a per-example
//! background `B·q`, and every query token carries `C·p`. Clips that the span
//! only partly covers receive the coverage-weighted mixture, so boundaries
//! are recoverable below clip resolution. `A` and `B` span orthogonal
//! subspaces; all three maps are fixed per corpus seed.
//!
//! On disk a split is a JSON-lines manifest plus headerless little-endian
//! `f32` payloads, row-major.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::encoder::{SentenceFeatures, VideoFeatures};
use crate::error::{invalid, Error, Result};
use crate::nn::round_f32;
use crate::span_math::{clamp_span, Span};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingExample {
    pub id: String,
    pub video: VideoFeatures,
    pub query: SentenceFeatures,
    pub target: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub clips: usize,
    pub video_dim: usize,
    pub query_dim: usize,
    /// Inclusive token-count range.
    pub tokens: (usize, usize),
    /// Target width range (normalized).
    pub width: (f64, f64),
    pub noise: f64,
    pub pattern_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips: 32,
            video_dim: 32,
            query_dim: 32,
            tokens: (4, 12),
            width: (0.1, 0.5),
            noise: 0.5,
            pattern_dim: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.pattern_dim == 0 {
            return Err(invalid("clips and pattern_dim must be positive"));
        }
        if self.video_dim < 2 * self.pattern_dim {
            return Err(invalid(format!(
                "video_dim {} must be at least twice pattern_dim {}",
                self.video_dim, self.pattern_dim
            )));
        }
        if self.query_dim < self.pattern_dim {
            return Err(invalid(format!(
                "query_dim {} must be at least pattern_dim {}",
                self.query_dim, self.pattern_dim
            )));
        }
        let (lo, hi) = self.tokens;
        if lo == 0 || lo > hi {
            return Err(invalid(format!("token range ({lo}, {hi}) is empty")));
        }
        let w_min = 1.0 / self.clips as f64;
        let (wl, wh) = self.width;
        if !(wl >= w_min && wl <= wh && wh <= 1.0) {
            return Err(invalid(format!(
                "width range ({wl}, {wh}) is infeasible; need {w_min} <= min <= max <= 1"
            )));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(invalid(format!("noise sigma {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// The fixed mixing maps of one corpus plus its generator settings.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    cfg: SynthConfig,
    /// `[d_v × p]`, in-span map.
    pub signal_map: Mat,
    /// `[d_v × p]`, background map, orthogonal to `signal_map`.
    pub background_map: Mat,
    /// `[d_q × p]`, query map.
    pub query_map: Mat,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `[rows × cols]` matrix with orthonormal columns.
fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| gaussian(rng));
    let q = g.qr().q();
    Mat::from_shape_fn((rows, cols), |(r, c)| q[(r, c)])
}

impl SynthCorpus {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.pattern_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // unit variance per feature coordinate
        let video_gain = (cfg.video_dim as f64 / p as f64).sqrt();
        let query_gain = (cfg.query_dim as f64 / p as f64).sqrt();
        let both = orthonormal(cfg.video_dim, 2 * p, &mut rng) * video_gain;
        let signal_map = both.slice(ndarray::s![.., ..p]).to_owned();
        let background_map = both.slice(ndarray::s![.., p..]).to_owned();
        let query_map = orthonormal(cfg.query_dim, p, &mut rng) * query_gain;
        Ok(SynthCorpus {
            cfg,
            signal_map,
            background_map,
            query_map,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Independent substream for example `index`.
    fn example_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }

    /// Draws one example from `rng`.
    pub fn generate_example(&self, id: String, rng: &mut ChaCha8Rng) -> GroundingExample {
        let cfg = &self.cfg;
        let p = cfg.pattern_dim;
        let code: Vec<f64> = (0..p).map(|_| gaussian(rng)).collect();
        let background: Vec<f64> = (0..p).map(|_| gaussian(rng)).collect();
        let code = ndarray::Array1::from(code);
        let background = ndarray::Array1::from(background);
        let sig = self.signal_map.dot(&code);
        let bg = self.background_map.dot(&background);
        let qsig = self.query_map.dot(&code);

        let width = rng.gen_range(cfg.width.0..=cfg.width.1);
        let start = rng.gen_range(0.0..=(1.0 - width));
        let target = Span {
            start,
            end: (start + width).min(1.0),
        };

        let k = cfg.clips as f64;
        let mut video = Mat::zeros((cfg.clips, cfg.video_dim));
        for (i, mut row) in video.outer_iter_mut().enumerate() {
            let lo = i as f64 / k;
            let hi = (i + 1) as f64 / k;
            let cover = ((target.end.min(hi) - target.start.max(lo)).max(0.0) * k).min(1.0);
            for (j, o) in row.iter_mut().enumerate() {
                let clean = cover * sig[j] + (1.0 - cover) * bg[j];
                *o = round_f32(clean + cfg.noise * gaussian(rng));
            }
        }

        let n = rng.gen_range(cfg.tokens.0..=cfg.tokens.1);
        let mut query = Mat::zeros((n, cfg.query_dim));
        for mut row in query.outer_iter_mut() {
            for (j, o) in row.iter_mut().enumerate() {
                *o = round_f32(qsig[j] + cfg.noise * gaussian(rng));
            }
        }

        GroundingExample {
            id,
            video: VideoFeatures::new(video).expect("finite synthetic video"),
            query: SentenceFeatures::unmasked(query).expect("finite synthetic query"),
            target,
        }
    }

    pub fn example(&self, index: usize) -> GroundingExample {
        let mut rng = self.example_rng(index);
        self.generate_example(format!("syn-{}-{index:06}", self.cfg.seed), &mut rng)
    }

    pub fn examples(&self, range: Range<usize>) -> Vec<GroundingExample> {
        range.map(|i| self.example(i)).collect()
    }
}

/// Train/val/test partition of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<GroundingExample>,
    pub val: Vec<GroundingExample>,
    pub test: Vec<GroundingExample>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[GroundingExample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Sizes of a 70/15/15 split of `n` examples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

/// `n` examples, deterministic in the seed, split 70/15/15.
pub fn generate_corpus(cfg: &SynthConfig, n: usize) -> Result<Splits> {
    if n < 10 {
        return Err(invalid(format!("corpus needs at least 10 examples (got {n})")));
    }
    let corpus = SynthCorpus::new(cfg.clone())?;
    let (tr, va, _) = split_sizes(n);
    Ok(Splits {
        train: corpus.examples(0..tr),
        val: corpus.examples(tr..tr + va),
        test: corpus.examples(tr + va..n),
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub feature_file: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub duration_sec: f64,
    pub query_file: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub dq: usize,
}

fn write_f32(path: &Path, m: &Mat) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for &v in m.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: path.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{} holds {} bytes, expected {rows}x{cols} f32 = {}",
            path.display(),
            bytes.len(),
            rows * cols * 4
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("feature payload"));
    }
    Ok(Mat::from_shape_vec((rows, cols), vals).expect("length checked"))
}

/// Writes `examples` as `<dir>/<split>.jsonl` with payloads under `<dir>/features/`.
/// Durations are expressed as one second per clip.
pub fn write_split(dir: &Path, split: &str, examples: &[GroundingExample]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let manifest = dir.join(format!("{split}.jsonl"));
    let mut out = std::io::BufWriter::new(fs::File::create(&manifest)?);
    for ex in examples {
        let video_rel = format!("features/{}.video.f32", ex.id);
        let query_rel = format!("features/{}.query.f32", ex.id);
        write_f32(&dir.join(&video_rel), ex.video.data())?;
        write_f32(&dir.join(&query_rel), ex.query.data())?;
        let (k, d) = ex.video.data().dim();
        let (n, dq) = ex.query.data().dim();
        let duration = k as f64;
        let rec = ManifestRecord {
            id: ex.id.clone(),
            feature_file: video_rel,
            k,
            d,
            start_sec: ex.target.start * duration,
            end_sec: ex.target.end * duration,
            duration_sec: duration,
            query_file: query_rel,
            n,
            dq,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    write_split(dir, "train", &splits.train)?;
    write_split(dir, "val", &splits.val)?;
    write_split(dir, "test", &splits.test)?;
    Ok(())
}

/// Linear interpolation along the time axis to `len` rows (endpoints aligned).
pub fn resample_rows(m: &Mat, len: usize) -> Mat {
    let (k, d) = m.dim();
    if k == len {
        return m.clone();
    }
    let mut out = Mat::zeros((len, d));
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        let x = if len == 1 {
            (k - 1) as f64 / 2.0
        } else {
            j as f64 * (k - 1) as f64 / (len - 1) as f64
        };
        let i0 = (x.floor() as usize).min(k - 1);
        let i1 = (i0 + 1).min(k - 1);
        let f = x - i0 as f64;
        for (c, o) in row.iter_mut().enumerate() {
            *o = (1.0 - f) * m[[i0, c]] + f * m[[i1, c]];
        }
    }
    out
}

/// Normalizes a seconds annotation into a valid [`Span`], clamping (with a
/// warning) rather than rejecting out-of-range records.
pub fn normalize_annotation(
    id: &str,
    start_sec: f64,
    end_sec: f64,
    duration_sec: f64,
    w_min: f64,
) -> Result<Span> {
    if duration_sec <= 0.0 || !duration_sec.is_finite() {
        return Err(invalid(format!("{id}: duration {duration_sec} must be positive")));
    }
    let (s, e) = (start_sec / duration_sec, end_sec / duration_sec);
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&e) || s > e {
        log::warn!("{id}: annotation [{start_sec}, {end_sec}] of {duration_sec}s clamped");
    }
    clamp_span(s, e, w_min)
}

/// Loads every record of a manifest, resampling videos to `clips` rows.
pub fn load_feature_dataset(manifest: &Path, clips: usize) -> Result<Vec<GroundingExample>> {
    if clips == 0 {
        return Err(invalid("target clip count must be positive"));
    }
    let file = fs::File::open(manifest).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: manifest.to_path_buf(),
        },
        _ => Error::Io(e),
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: manifest.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.k == 0 || rec.d == 0 || rec.n == 0 || rec.dq == 0 {
            return Err(Error::Manifest {
                path: manifest.to_path_buf(),
                line: i + 1,
                msg: "zero-sized dimension".into(),
            });
        }
        let video = read_f32(&base.join(&rec.feature_file), rec.k, rec.d)?;
        let query = read_f32(&base.join(&rec.query_file), rec.n, rec.dq)?;
        let video = resample_rows(&video, clips);
        let target = normalize_annotation(
            &rec.id,
            rec.start_sec,
            rec.end_sec,
            rec.duration_sec,
            1.0 / clips as f64,
        )?;
        out.push(GroundingExample {
            id: rec.id,
            video: VideoFeatures::new(video)?,
            query: SentenceFeatures::unmasked(query)?,
            target,
        });
    }
    Ok(out)
}
