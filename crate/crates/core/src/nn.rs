//! Transformer building blocks recorded on an [`autograd::Tape`](crate::autograd::Tape).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, ParamId, ParamStore, Tape, Var};

/// Rounds to the nearest `f32`. Parameters are kept `f32`-representable so
/// checkpoints written as 32-bit floats reload bit-exactly.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| round_f32(rng.gen_range(-bound..bound)))
}

/// Forward-pass context: dropout is active only when an rng is supplied.
pub struct ForwardCtx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        ForwardCtx {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Var {
        let p = self.dropout;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Mat::from_shape_fn(tape.shape(x), |_| {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

/// Affine map `x·W + b` with `W: [in × out]`, `b: [1 × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                init_uniform(rng, input, output, input),
            ),
            bias: store.add(format!("{name}.bias"), init_uniform(rng, 1, output, input)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head `[queries × keys]` weight nodes.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "heads must divide dim");
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `mask[j] == false` removes key `j` from every query's softmax.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        mask: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Attended {
        let q = self.query.forward(tape, queries);
        let k = self.key.forward(tape, keys);
        let v = self.value.forward(tape, keys);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let w = tape.softmax_rows(scores, mask);
            weights.push(w);
            outs.push(tape.matmul(w, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let o = self.out.forward(tape, cat);
        let output = ctx.dropout(tape, o);
        Attended { output, weights }
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, ctx: &mut ForwardCtx) -> Var {
        let h = self.inner.forward(tape, x);
        let h = tape.relu(h);
        let h = ctx.dropout(tape, h);
        let o = self.outer.forward(tape, h);
        ctx.dropout(tape, o)
    }
}

/// Interleaved sine/cosine encoding of a scalar position into `dim` values.
pub fn sine_encoding(position: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            if i % 2 == 0 {
                (position * freq).sin()
            } else {
                (position * freq).cos()
            }
        })
        .collect()
}

/// `[len × dim]` table of [`sine_encoding`] rows for positions `0..len`.
pub fn sine_table(len: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros((len, dim));
    for (p, mut row) in m.outer_iter_mut().enumerate() {
        for (o, v) in row.iter_mut().zip(sine_encoding(p as f64, dim)) {
            *o = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sine_table_first_row() {
        let t = sine_table(4, 6);
        assert_eq!(t.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((t[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng);
        let mut tape = Tape::new(&store);
        let q = tape.constant(init_uniform(&mut rng, 3, 8, 1));
        let kv = tape.constant(init_uniform(&mut rng, 5, 8, 1));
        let mask = [true, true, false, true, false];
        let att = mha.forward(&mut tape, q, kv, Some(&mask), &mut ForwardCtx::eval());
        assert_eq!(tape.shape(att.output), (3, 8));
        for w in att.weights {
            let v = tape.value(w);
            for row in v.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert_eq!(row[2], 0.0);
                assert_eq!(row[4], 0.0);
            }
        }
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Mat::ones((2, 2)));
        let y = ForwardCtx::eval().dropout(&mut tape, x);
        assert_eq!(x, y);
    }
}
