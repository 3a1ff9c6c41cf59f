//! Span refining decoder.
//!
//! Each noisy span crops its segment of the memory, soft-pools it into one
//! feature row and adds a location embedding. Every layer refines the query
//! features (self-attention in the first layer, cross-attention against the
//! span features of the previous layer's spans afterwards), then a linear
//! head predicts `(Δcenter, Δwidth)` which is added to the spans and clamped.
//!
//! Crop boundaries are computed from span *values*; gradients reach the
//! spans only through the location embedding and the delta heads, never
//! through the discrete crop indices.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, ParamStore, Tape, Var};
use crate::encoder::Memory;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SpanRepr};
use crate::nn::{sine_encoding, FeedForward, ForwardCtx, LayerNorm, Linear, MultiHeadAttention};
use crate::span_math::CwSpan;

/// `N_q` normalized spans plus their timesteps (one per row).
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySpanBatch {
    pub spans: Vec<CwSpan>,
    pub timesteps: Vec<usize>,
}

impl NoisySpanBatch {
    pub fn new(spans: Vec<CwSpan>, timesteps: Vec<usize>) -> Result<Self> {
        if spans.is_empty() {
            return Err(Error::InvalidArgument("at least one query span is required".into()));
        }
        if timesteps.len() != spans.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} timesteps for {} spans",
                timesteps.len(),
                spans.len()
            )));
        }
        Ok(NoisySpanBatch { spans, timesteps })
    }

    /// All rows share timestep `t`.
    pub fn at(spans: Vec<CwSpan>, t: usize) -> Result<Self> {
        let n = spans.len();
        Self::new(spans, vec![t; n])
    }

    pub fn as_matrix(&self) -> Mat {
        Mat::from_shape_fn((self.spans.len(), 2), |(r, c)| {
            if c == 0 {
                self.spans[r].center
            } else {
                self.spans[r].width
            }
        })
    }
}

/// Span predictions after every decoder layer, each `[N_q × 2]` (center, width).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub per_layer: Vec<Mat>,
}

impl DecoderOutput {
    pub fn final_spans(&self) -> Vec<CwSpan> {
        let last = self.per_layer.last().expect("decoder has at least one layer");
        last.outer_iter().map(|r| CwSpan::new(r[0], r[1])).collect()
    }
}

/// Segment `[i0, i1)` of a `K`-clip memory covered by a span; never empty.
pub fn crop_indices(span: &CwSpan, clips: usize) -> (usize, usize) {
    const TOL: f64 = 1e-9;
    let k = clips as f64;
    let start = span.center - 0.5 * span.width;
    let end = span.center + 0.5 * span.width;
    let i0 = ((start * k + TOL).floor().max(0.0) as usize).min(clips);
    let mut i1 = ((end * k - TOL).ceil().max(0.0) as usize).min(clips);
    let mut i0 = i0;
    if i1 <= i0 {
        if i0 < clips {
            i1 = i0 + 1;
        } else {
            i0 = clips - 1;
            i1 = clips;
        }
    }
    (i0, i1)
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub attn: MultiHeadAttention,
    pub norm_attn: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
    pub delta: Linear,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Per-clip scoring map used by soft pooling.
    pub pool: Linear,
    /// Location embedding of a span.
    pub location: Linear,
    /// Projection used by the `cat-fn` span representation.
    pub fuse: Option<Linear>,
    pub time: Linear,
    pub layers: Vec<DecoderLayer>,
    repr: SpanRepr,
    hidden: usize,
    clips: usize,
    time_every_layer: bool,
    dropout: f64,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let pool = Linear::new(store, "dec.pool", d, 1, rng);
        let location = Linear::new(store, "dec.location", 2, d, rng);
        let fuse = (cfg.span_repr == SpanRepr::CatFn)
            .then(|| Linear::new(store, "dec.fuse", 2 * d, d, rng));
        let time = Linear::new(store, "dec.time", d, d, rng);
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads, rng),
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), d),
                    delta: Linear::new(store, &format!("{p}.delta"), d, 2, rng),
                }
            })
            .collect();
        Decoder {
            pool,
            location,
            fuse,
            time,
            layers,
            repr: cfg.span_repr,
            hidden: d,
            clips: cfg.clips,
            time_every_layer: cfg.time_every_layer,
            dropout: cfg.dropout,
        }
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Softmax-weighted sum of the rows of `segment` (`[n × d]` → `[1 × d]`).
    pub fn soft_pool(&self, tape: &mut Tape, segment: Var) -> Var {
        let logits = self.pool.forward(tape, segment);
        let logits = tape.transpose(logits);
        let w = tape.softmax_rows(logits, None);
        tape.matmul(w, segment)
    }

    /// Span features for every row of `spans` (`[N_q × 2]` center/width).
    pub fn span_features(&self, tape: &mut Tape, memory: Var, spans: Var) -> Var {
        let (k, _) = tape.shape(memory);
        let rows: Vec<(usize, usize)> = tape
            .value(spans)
            .outer_iter()
            .map(|r| crop_indices(&CwSpan::new(r[0], r[1]), k))
            .collect();
        let pooled: Vec<Var> = rows
            .into_iter()
            .map(|(i0, i1)| {
                let seg = tape.slice_rows(memory, i0, i1 - i0);
                self.soft_pool(tape, seg)
            })
            .collect();
        let pooled = tape.concat_rows(&pooled);
        match self.repr {
            SpanRepr::Feature => pooled,
            SpanRepr::Add => {
                let emb = self.location.forward(tape, spans);
                tape.add(pooled, emb)
            }
            SpanRepr::CatFn => {
                let emb = self.location.forward(tape, spans);
                let cat = tape.concat_cols(&[pooled, emb]);
                self.fuse
                    .as_ref()
                    .expect("cat-fn decoder has a fuse projection")
                    .forward(tape, cat)
            }
        }
    }

    fn time_embedding(&self, tape: &mut Tape, timesteps: &[usize]) -> Var {
        let mut table = Mat::zeros((timesteps.len(), self.hidden));
        for (mut row, &t) in table.outer_iter_mut().zip(timesteps) {
            for (o, v) in row.iter_mut().zip(sine_encoding(t as f64, self.hidden)) {
                *o = v;
            }
        }
        let c = tape.constant(table);
        self.time.forward(tape, c)
    }

    /// Records the decoder on `tape`; returns each layer's `[N_q × 2]` spans.
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        memory: Var,
        batch: &NoisySpanBatch,
        ctx: &mut ForwardCtx,
    ) -> Vec<Var> {
        let w_min = 1.0 / tape.shape(memory).0 as f64;
        let mut spans = tape.constant(batch.as_matrix());
        let temb = self.time_embedding(tape, &batch.timesteps);
        let feats = self.span_features(tape, memory, spans);
        let mut query = tape.add(feats, temb);
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 && self.time_every_layer {
                query = tape.add(query, temb);
            }
            let att = if l == 0 {
                layer.attn.forward(tape, query, query, None, ctx)
            } else {
                let keys = self.span_features(tape, memory, spans);
                layer.attn.forward(tape, query, keys, None, ctx)
            };
            let r = tape.add(query, att.output);
            query = layer.norm_attn.forward(tape, r);
            let f = layer.ffn.forward(tape, query, ctx);
            let r = tape.add(query, f);
            query = layer.norm_ffn.forward(tape, r);

            let delta = layer.delta.forward(tape, query);
            let moved = tape.add(spans, delta);
            spans = clamp_cw(tape, moved, w_min);
            out.push(spans);
        }
        out
    }

    /// Evaluation-mode decode of a batch against a fixed memory.
    pub fn decode(
        &self,
        params: &ParamStore,
        memory: &Memory,
        batch: &NoisySpanBatch,
    ) -> Result<DecoderOutput> {
        if memory.data.nrows() != self.clips {
            return Err(Error::ShapeMismatch(format!(
                "memory has {} clips, decoder expects {}",
                memory.data.nrows(),
                self.clips
            )));
        }
        let mut tape = Tape::new(params);
        let h = tape.constant(memory.data.clone());
        let layers = self.decode_graph(&mut tape, h, batch, &mut ForwardCtx::eval());
        Ok(DecoderOutput {
            per_layer: layers.iter().map(|&v| tape.value(v).to_owned()).collect(),
        })
    }
}

/// Span clamping on `[N × 2]` center/width rows, recorded on the tape so the
/// gradient follows the same piecewise-linear map as
/// [`clamp_span`](crate::span_math::clamp_span).
pub fn clamp_cw(tape: &mut Tape, spans: Var, w_min: f64) -> Var {
    let c = tape.slice_cols(spans, 0, 1);
    let w = tape.slice_cols(spans, 1, 1);
    let half = tape.scale(w, 0.5);
    let s = tape.sub(c, half);
    let e = tape.add(c, half);
    let s = tape.clip(s, 0.0, 1.0);
    let e = tape.clip(e, 0.0, 1.0);
    let lo = tape.min(s, e);
    let hi = tape.max(s, e);
    let sum = tape.add(lo, hi);
    let center = tape.scale(sum, 0.5);
    let width = tape.sub(hi, lo);
    let width = tape.max_scalar(width, w_min);
    let half = tape.scale(width, 0.5);
    let upper = tape.scale(half, -1.0);
    let upper = tape.add_scalar(upper, 1.0);
    let center = tape.max(center, half);
    let center = tape.min(center, upper);
    tape.concat_cols(&[center, width])
}
