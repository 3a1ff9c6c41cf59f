//! Video-centered multi-modal encoder.
//!
//! Video clips attend to each other, then to the sentence tokens; only the
//! video stream is updated. Sentence features pass through untouched. All
//! sub-layers use residual connections with post-normalization.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{init_uniform, sine_table, FeedForward, ForwardCtx, LayerNorm, Linear, MultiHeadAttention};

/// Clip-level video features `[K × d_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    data: Mat,
}

/// Token-level sentence features `[N × d_q]` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceFeatures {
    data: Mat,
    mask: Vec<bool>,
}

/// Text-enhanced video features `[K × d]`, the condition for span generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    pub data: Mat,
}

impl VideoFeatures {
    pub fn new(data: Mat) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::ShapeMismatch("video features are empty".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("video features"));
        }
        Ok(VideoFeatures { data })
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn clips(&self) -> usize {
        self.data.nrows()
    }
}

impl SentenceFeatures {
    pub fn new(data: Mat, mask: Vec<bool>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::ShapeMismatch("sentence features are empty".into()));
        }
        if mask.len() != data.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries for {} tokens",
                mask.len(),
                data.nrows()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sentence features"));
        }
        Ok(SentenceFeatures { data, mask })
    }

    /// All tokens valid.
    pub fn unmasked(data: Mat) -> Result<Self> {
        let n = data.nrows();
        Self::new(data, vec![true; n])
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn tokens(&self) -> usize {
        self.data.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub video_proj: Linear,
    pub text_proj: Linear,
    /// Learnable `[max_words × d]` query position table.
    pub text_pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    video_pos: Mat,
    video_dim: usize,
    query_dim: usize,
    dropout: f64,
}

/// Graph nodes produced by one encoder pass.
pub struct Encoded {
    pub memory: Var,
    pub text: Var,
    /// Per layer, per head: `[K × N]` text-to-video attention weights.
    pub cross_weights: Vec<Vec<Var>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let video_proj = Linear::new(store, "enc.video_proj", cfg.video_dim, d, rng);
        let text_proj = Linear::new(store, "enc.text_proj", cfg.query_dim, d, rng);
        let text_pos = store.add("enc.text_pos", init_uniform(rng, cfg.max_words, d, d));
        let layers = (0..cfg.encoder_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, cfg.heads, rng),
                    norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), d),
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross"), d, cfg.heads, rng),
                    norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), d),
                }
            })
            .collect();
        Encoder {
            video_proj,
            text_proj,
            text_pos,
            layers,
            video_pos: sine_table(cfg.clips, d),
            video_dim: cfg.video_dim,
            query_dim: cfg.query_dim,
            dropout: cfg.dropout,
        }
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Projects both modalities to the hidden size and adds positions
    /// (fixed sine table for clips, learned table for tokens).
    pub fn project_and_position(
        &self,
        tape: &mut Tape,
        video: &VideoFeatures,
        query: &SentenceFeatures,
    ) -> Result<(Var, Var)> {
        let (k, dv) = video.data.dim();
        if dv != self.video_dim {
            return Err(Error::ShapeMismatch(format!(
                "video feature dim {dv}, model expects {}",
                self.video_dim
            )));
        }
        if k != self.video_pos.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "video has {k} clips, model expects {}",
                self.video_pos.nrows()
            )));
        }
        let (n, dq) = query.data.dim();
        if dq != self.query_dim {
            return Err(Error::ShapeMismatch(format!(
                "query feature dim {dq}, model expects {}",
                self.query_dim
            )));
        }
        let max_words = tape.params().get(self.text_pos).nrows();
        if n > max_words {
            return Err(Error::ShapeMismatch(format!(
                "query has {n} tokens, model supports at most {max_words}"
            )));
        }
        let v_in = tape.constant(video.data.clone());
        let v = self.video_proj.forward(tape, v_in);
        let v_pos = tape.constant(self.video_pos.clone());
        let v = tape.add(v, v_pos);

        let q_in = tape.constant(query.data.clone());
        let q = self.text_proj.forward(tape, q_in);
        let table = tape.param(self.text_pos);
        let q_pos = tape.slice_rows(table, 0, n);
        let q = tape.add(q, q_pos);
        Ok((v, q))
    }

    /// Runs the layer stack on projected inputs.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        video: Var,
        text: Var,
        mask: &[bool],
        ctx: &mut ForwardCtx,
    ) -> Result<Encoded> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllPadding);
        }
        if mask.len() != tape.shape(text).0 {
            return Err(Error::ShapeMismatch("mask length differs from token count".into()));
        }
        let mut x = video;
        let mut cross_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let sa = layer.self_attn.forward(tape, x, x, None, ctx);
            let r = tape.add(x, sa.output);
            x = layer.norm_self.forward(tape, r);

            let ca = layer.cross_attn.forward(tape, x, text, Some(mask), ctx);
            let r = tape.add(x, ca.output);
            x = layer.norm_cross.forward(tape, r);
            cross_weights.push(ca.weights);

            let f = layer.ffn.forward(tape, x, ctx);
            let r = tape.add(x, f);
            x = layer.norm_ffn.forward(tape, r);
        }
        Ok(Encoded {
            memory: x,
            text,
            cross_weights,
        })
    }

    /// Full encoder pass in evaluation mode.
    pub fn encode(
        &self,
        params: &ParamStore,
        video: &VideoFeatures,
        query: &SentenceFeatures,
    ) -> Result<Memory> {
        let mut tape = Tape::new(params);
        let (v, q) = self.project_and_position(&mut tape, video, query)?;
        let enc = self.encode_graph(&mut tape, v, q, query.mask(), &mut ForwardCtx::eval())?;
        Ok(Memory {
            data: tape.value(enc.memory).to_owned(),
        })
    }

    /// Text-to-video attention weights `[layers × heads × K × N]`.
    pub fn attention_weights(
        &self,
        params: &ParamStore,
        video: &VideoFeatures,
        query: &SentenceFeatures,
    ) -> Result<Array4<f64>> {
        let mut tape = Tape::new(params);
        let (v, q) = self.project_and_position(&mut tape, video, query)?;
        let enc = self.encode_graph(&mut tape, v, q, query.mask(), &mut ForwardCtx::eval())?;
        let heads = enc.cross_weights.first().map_or(0, Vec::len);
        let (k, n) = (video.clips(), query.tokens());
        let mut out = Array4::zeros((self.layers.len(), heads, k, n));
        for (l, layer) in enc.cross_weights.iter().enumerate() {
            for (h, &w) in layer.iter().enumerate() {
                out.slice_mut(ndarray::s![l, h, .., ..]).assign(&tape.value(w));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::{Rng, SeedableRng};

    fn small() -> ModelConfig {
        ModelConfig {
            clips: 8,
            video_dim: 6,
            query_dim: 5,
            hidden: 16,
            heads: 4,
            ffn: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.1,
            max_words: 10,
            ..ModelConfig::default()
        }
    }

    fn rand_mat(seed: u64, r: usize, c: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn projection_shapes_and_linearity() {
        let m = Model::new(small(), 1).unwrap();
        let enc = &m.encoder;
        let video = VideoFeatures::new(Mat::zeros((8, 6))).unwrap();
        let query = SentenceFeatures::unmasked(Mat::zeros((4, 5))).unwrap();
        let mut tape = Tape::new(&m.params);
        let (v, q) = enc.project_and_position(&mut tape, &video, &query).unwrap();
        assert_eq!(tape.shape(v), (8, 16));
        assert_eq!(tape.shape(q), (4, 16));
        // zero input -> bias + position
        let bias = m.params.get(enc.video_proj.bias);
        let expected = &sine_table(8, 16) + bias;
        assert_eq!(tape.value(v), expected.view());
        let qb = m.params.get(enc.text_proj.bias);
        let qpos = m.params.get(enc.text_pos).slice(ndarray::s![0..4, ..]).to_owned();
        assert_eq!(tape.value(q), (&qpos + qb).view());
    }

    #[test]
    fn projection_is_row_local() {
        let m = Model::new(small(), 1).unwrap();
        let a = rand_mat(3, 8, 6);
        let mut b = a.clone();
        b[[5, 2]] += 1.0;
        let query = SentenceFeatures::unmasked(rand_mat(4, 3, 5)).unwrap();
        let proj = |x: &Mat| {
            let mut tape = Tape::new(&m.params);
            let (v, _) = m
                .encoder
                .project_and_position(&mut tape, &VideoFeatures::new(x.clone()).unwrap(), &query)
                .unwrap();
            tape.value(v).to_owned()
        };
        let (pa, pb) = (proj(&a), proj(&b));
        for r in 0..8 {
            assert_eq!(pa.row(r) == pb.row(r), r != 5);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = Model::new(small(), 1).unwrap();
        let video = VideoFeatures::new(Mat::zeros((8, 7))).unwrap();
        let query = SentenceFeatures::unmasked(Mat::zeros((4, 5))).unwrap();
        assert!(matches!(
            m.encoder.encode(&m.params, &video, &query),
            Err(Error::ShapeMismatch(_))
        ));
        let video = VideoFeatures::new(Mat::zeros((8, 6))).unwrap();
        let long = SentenceFeatures::unmasked(Mat::zeros((11, 5))).unwrap();
        assert!(m.encoder.encode(&m.params, &video, &long).is_err());
    }

    #[test]
    fn text_stream_is_untouched_and_memory_shaped() {
        let m = Model::new(small(), 2).unwrap();
        let video = VideoFeatures::new(rand_mat(5, 8, 6)).unwrap();
        let query = SentenceFeatures::unmasked(rand_mat(6, 4, 5)).unwrap();
        let mut tape = Tape::new(&m.params);
        let (v, q) = m.encoder.project_and_position(&mut tape, &video, &query).unwrap();
        let before = tape.value(q).to_owned();
        let enc = m
            .encoder
            .encode_graph(&mut tape, v, q, query.mask(), &mut ForwardCtx::eval())
            .unwrap();
        assert_eq!(enc.text, q);
        assert_eq!(tape.value(enc.text), before.view());
        assert_eq!(tape.shape(enc.memory), (8, 16));
    }

    #[test]
    fn masked_tokens_do_not_influence_memory() {
        let m = Model::new(small(), 3).unwrap();
        let video = VideoFeatures::new(rand_mat(7, 8, 6)).unwrap();
        let q1 = rand_mat(8, 5, 5);
        let mut q2 = q1.clone();
        q2.row_mut(3).mapv_inplace(|x| x * 5.0 - 2.0);
        let mask = vec![true, true, true, false, true];
        let a = m
            .encoder
            .encode(&m.params, &video, &SentenceFeatures::new(q1, mask.clone()).unwrap())
            .unwrap();
        let b = m
            .encoder
            .encode(&m.params, &video, &SentenceFeatures::new(q2, mask).unwrap())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_padding_is_an_error() {
        let m = Model::new(small(), 3).unwrap();
        let video = VideoFeatures::new(rand_mat(7, 8, 6)).unwrap();
        let q = SentenceFeatures::new(rand_mat(8, 3, 5), vec![false; 3]).unwrap();
        assert!(matches!(
            m.encoder.encode(&m.params, &video, &q),
            Err(Error::AllPadding)
        ));
    }

    #[test]
    fn encoding_is_bit_stable() {
        let m = Model::new(small(), 4).unwrap();
        let video = VideoFeatures::new(rand_mat(9, 8, 6)).unwrap();
        let q = SentenceFeatures::unmasked(rand_mat(10, 6, 5)).unwrap();
        let a = m.encoder.encode(&m.params, &video, &q).unwrap();
        let b = m.encoder.encode(&m.params, &video, &q).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn attention_weights_are_normalized() {
        let m = Model::new(small(), 5).unwrap();
        let video = VideoFeatures::new(rand_mat(11, 8, 6)).unwrap();
        let mask = vec![true, false, true, true, false, true];
        let q = SentenceFeatures::new(rand_mat(12, 6, 5), mask.clone()).unwrap();
        let w = m.encoder.attention_weights(&m.params, &video, &q).unwrap();
        assert_eq!(w.dim(), (2, 4, 8, 6));
        for l in 0..2 {
            for h in 0..4 {
                for k in 0..8 {
                    let row = w.slice(ndarray::s![l, h, k, ..]);
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    for (j, &keep) in mask.iter().enumerate() {
                        if !keep {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_cross_projections_attend_uniformly() {
        let mut m = Model::new(small(), 6).unwrap();
        for layer in m.encoder.layers.clone() {
            for id in [
                layer.cross_attn.query.weight,
                layer.cross_attn.query.bias,
                layer.cross_attn.key.weight,
                layer.cross_attn.key.bias,
            ] {
                m.params.get_mut(id).fill(0.0);
            }
        }
        let video = VideoFeatures::new(Mat::from_elem((8, 6), 0.3)).unwrap();
        let mask = vec![true, true, false, true];
        let q = SentenceFeatures::new(Mat::from_elem((4, 5), 0.3), mask).unwrap();
        let w = m.encoder.attention_weights(&m.params, &video, &q).unwrap();
        for v in w.slice(ndarray::s![.., .., .., 0]).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
