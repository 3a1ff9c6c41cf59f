#![allow(dead_code)]

use diffspan::autograd::{ParamId, Tape};
use diffspan::data::{GroundingExample, SynthConfig, SynthCorpus};
use diffspan::model::{Model, ModelConfig};
use diffspan::nn::ForwardCtx;
use diffspan::pipeline::{loss_graph, LossWeights, ReplicaNoise};
use diffspan::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-6;

/// d=8, K=8, one encoder and one decoder layer, no dropout.
pub fn micro_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        clips: 8,
        video_dim: 8,
        query_dim: 8,
        hidden: 8,
        heads: 2,
        ffn: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        dropout: 0.0,
        max_words: 12,
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

pub fn micro_example(seed: u64) -> GroundingExample {
    let cfg = SynthConfig {
        clips: 8,
        video_dim: 8,
        query_dim: 8,
        pattern_dim: 4,
        width: (0.2, 0.5),
        seed,
        ..SynthConfig::default()
    };
    SynthCorpus::new(cfg).unwrap().example(0)
}

pub struct Setup {
    pub model: Model,
    pub example: GroundingExample,
    pub schedule: NoiseSchedule,
    pub noise: ReplicaNoise,
    pub weights: LossWeights,
}

impl Setup {
    pub fn micro(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Setup {
            model: micro_model(seed),
            example: micro_example(seed),
            schedule: NoiseSchedule::cosine(1000, 2.0).unwrap(),
            noise: ReplicaNoise::draw(5, 1000, &mut rng),
            weights: LossWeights { l1: 1.5, giou: 1.0 },
        }
    }

    pub fn loss(&self, model: &Model) -> f64 {
        let mut tape = Tape::new(&model.params);
        let g = loss_graph(
            &mut tape,
            model,
            &self.schedule,
            &self.weights,
            &self.example,
            &self.noise,
            &mut ForwardCtx::eval(),
        )
        .unwrap();
        tape.scalar(g.loss)
    }
}

pub struct Comparison {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

pub struct GradCheck {
    pub compared: Vec<Comparison>,
    /// Coordinates where the one-sided differences disagree (loss not smooth there).
    pub kinks: usize,
}

impl GradCheck {
    /// Comparisons where either side is nonzero. Zero on both sides means the
    /// point sits where clamping flattens the loss, which proves nothing.
    pub fn nontrivial(&self) -> usize {
        self.compared
            .iter()
            .filter(|c| c.analytic.abs().max(c.numeric.abs()) > 1e-8)
            .count()
    }

    pub fn worst(&self) -> f64 {
        self.compared.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

/// Central differences against the backward pass on `samples` random
/// scalars, plus every scalar named in `forced` (param name, row, col).
pub fn gradient_check(setup: &Setup, samples: usize, seed: u64, forced: &[(&str, usize, usize)]) -> GradCheck {
    let mut tape = Tape::new(&setup.model.params);
    let g = loss_graph(
        &mut tape,
        &setup.model,
        &setup.schedule,
        &setup.weights,
        &setup.example,
        &setup.noise,
        &mut ForwardCtx::eval(),
    )
    .unwrap();
    let grads = tape.backward(g.loss);
    let base = tape.scalar(g.loss);
    drop(tape);

    let ids: Vec<ParamId> = setup.model.params.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<(ParamId, usize, usize)> = forced
        .iter()
        .map(|&(n, r, c)| (setup.model.params.id(n).expect("known parameter"), r, c))
        .collect();
    let mut out = GradCheck { compared: Vec::new(), kinks: 0 };
    let mut work = setup.model.clone();
    let mut attempts = 0;
    while out.compared.len() < forced.len() + samples && attempts < 10 * (samples + forced.len()) {
        attempts += 1;
        let (id, r, c) = if let Some(t) = targets.pop() {
            t
        } else {
            let id = ids[rng.gen_range(0..ids.len())];
            let (rows, cols) = setup.model.params.get(id).dim();
            (id, rng.gen_range(0..rows), rng.gen_range(0..cols))
        };
        let x = setup.model.params.get(id)[[r, c]];
        work.params.get_mut(id)[[r, c]] = x + STEP;
        let up = setup.loss(&work);
        work.params.get_mut(id)[[r, c]] = x - STEP;
        let down = setup.loss(&work);
        work.params.get_mut(id)[[r, c]] = x;
        let fwd = (up - base) / STEP;
        let bwd = (base - down) / STEP;
        if (fwd - bwd).abs() > 1e-5 && (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()) {
            out.kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        out.compared.push(Comparison {
            name: format!("{}[{r},{c}]", setup.model.params.name(id)),
            analytic,
            numeric,
            rel_err,
        });
    }
    out
}
