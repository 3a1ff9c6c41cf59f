//! Training on noised copies of the target span, and sampling by repeated
//! denoise-then-DDIM steps from pure noise.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Mat, Tape, Var};
use crate::data::GroundingExample;
use crate::decoder::NoisySpanBatch;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::nn::ForwardCtx;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::schedule::{checked_scale, sample_timesteps, sampling_sequence, DiffusionPoint, NoiseSchedule};
use crate::span_math::{cw_to_se, giou, se_to_cw, vote, CwSpan, Span};

const TRAIN_STREAM: u64 = 2 << 32;
const INFER_STREAM: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Noisy copies of the target per example.
    pub queries: usize,
    /// Diffusion length `T`.
    pub timesteps: usize,
    /// Signal scale `λ`.
    pub scale: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            queries: 5,
            timesteps: 1000,
            scale: 2.0,
            l1_weight: 1.5,
            giou_weight: 1.0,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            grad_clip: 1.0,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.timesteps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "queries, timesteps and batch_size must be positive".into(),
            ));
        }
        checked_scale(self.scale)?;
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        for (name, v) in [
            ("l1_weight", self.l1_weight),
            ("giou_weight", self.giou_weight),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        if self.l1_weight == 0.0 && self.giou_weight == 0.0 {
            return Err(Error::Config("l1_weight and giou_weight are both zero".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            l1: self.l1_weight,
            giou: self.giou_weight,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.timesteps, self.scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    pub queries: usize,
    /// Reverse steps `N_s`.
    pub steps: usize,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            queries: 5,
            steps: 5,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.queries == 0 {
            return Err(Error::Config("inference needs at least one query".into()));
        }
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::Config(format!(
                "sampling steps {} must lie in 1..={timesteps}",
                self.steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
}

/// Weighted loss with its unweighted components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanLoss {
    pub total: f64,
    /// `|Δstart| + |Δend|`
    pub l1: f64,
    /// `1 - giou`
    pub giou: f64,
}

pub fn span_loss(pred: &Span, gt: &Span, w: &LossWeights) -> SpanLoss {
    let l1 = (pred.start - gt.start).abs() + (pred.end - gt.end).abs();
    let g = 1.0 - giou(pred, gt);
    SpanLoss {
        total: w.l1 * l1 + w.giou * g,
        l1,
        giou: g,
    }
}

/// `½‖x̂0 − x0‖²` in diffusion coordinates. Logged, never optimized.
pub fn eq2_diagnostic(x0_hat: &DiffusionPoint, x0: &DiffusionPoint) -> f64 {
    let a = x0_hat.0[0] - x0.0[0];
    let b = x0_hat.0[1] - x0.0[1];
    0.5 * (a * a + b * b)
}

/// Timesteps and unit-Gaussian draws for every replica of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaNoise {
    pub timesteps: Vec<usize>,
    pub eps: Vec<[f64; 2]>,
}

impl ReplicaNoise {
    pub fn draw<R: Rng + ?Sized>(replicas: usize, steps: usize, rng: &mut R) -> Self {
        let timesteps = sample_timesteps(replicas, steps, rng);
        let eps = (0..replicas)
            .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        ReplicaNoise { timesteps, eps }
    }
}

/// Scalar loss node plus value-only diagnostics for one example.
pub struct LossGraph {
    pub loss: Var,
    pub l1: f64,
    pub giou: f64,
    pub eq2: f64,
    /// Loss of each replica, averaged over layers.
    pub per_replica: Vec<f64>,
}

/// `[N × 2]` center/width rows to weighted per-row loss against `gt`.
fn row_losses(tape: &mut Tape, spans: Var, gt: &Span, w: &LossWeights) -> (Var, Var, Var) {
    let n = tape.shape(spans).0;
    let c = tape.slice_cols(spans, 0, 1);
    let wd = tape.slice_cols(spans, 1, 1);
    let half = tape.scale(wd, 0.5);
    let s = tape.sub(c, half);
    let e = tape.add(c, half);
    let gs = tape.constant(Mat::from_elem((n, 1), gt.start));
    let ge = tape.constant(Mat::from_elem((n, 1), gt.end));

    let ds = tape.sub(s, gs);
    let de = tape.sub(e, ge);
    let ds = tape.abs(ds);
    let de = tape.abs(de);
    let l1 = tape.add(ds, de);

    let lo = tape.max(s, gs);
    let hi = tape.min(e, ge);
    let inter = tape.sub(hi, lo);
    let inter = tape.relu(inter);
    let len = tape.sub(e, s);
    let union = tape.add_scalar(len, gt.width());
    let union = tape.sub(union, inter);
    let hull_hi = tape.max(e, ge);
    let hull_lo = tape.min(s, gs);
    let hull = tape.sub(hull_hi, hull_lo);
    let iou = tape.div(inter, union);
    let gap = tape.sub(hull, union);
    let gap = tape.div(gap, hull);
    let g = tape.sub(iou, gap);
    let one_minus = tape.scale(g, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);

    let a = tape.scale(l1, w.l1);
    let b = tape.scale(one_minus, w.giou);
    (tape.add(a, b), l1, one_minus)
}

/// Records the training loss of one example: encode, noise every replica of
/// the target, decode, and average the span loss over replicas and layers.
pub fn loss_graph(
    tape: &mut Tape,
    model: &Model,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    example: &GroundingExample,
    noise: &ReplicaNoise,
    ctx: &mut ForwardCtx,
) -> Result<LossGraph> {
    let w_min = model.min_width();
    let (v, q) = model
        .encoder
        .project_and_position(tape, &example.video, &example.query)?;
    let enc = model
        .encoder
        .encode_graph(tape, v, q, example.query.mask(), ctx)?;

    let x0 = schedule.to_diffusion(&se_to_cw(&example.target));
    let mut spans = Vec::with_capacity(noise.eps.len());
    for (&t, &eps) in noise.timesteps.iter().zip(&noise.eps) {
        let xt = schedule.q_sample(x0, t, eps)?;
        spans.push(schedule.from_diffusion(&xt, w_min));
    }
    let batch = NoisySpanBatch::new(spans, noise.timesteps.clone())?;
    let layers = model.decoder.decode_graph(tape, enc.memory, &batch, ctx);

    let n = batch.spans.len();
    let nl = layers.len() as f64;
    let mut total: Option<Var> = None;
    let mut l1_sum = 0.0;
    let mut giou_sum = 0.0;
    let mut per_replica = vec![0.0; n];
    for &layer in &layers {
        let (rows, l1, g) = row_losses(tape, layer, &example.target, weights);
        l1_sum += tape.value(l1).sum();
        giou_sum += tape.value(g).sum();
        for (acc, v) in per_replica.iter_mut().zip(tape.value(rows).iter()) {
            *acc += v / nl;
        }
        let s = tape.sum_all(rows);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let count = n as f64 * nl;
    let total = total.ok_or_else(|| invalid("decoder produced no layers"))?;
    let loss = tape.scale(total, 1.0 / count);

    let last = layers[layers.len() - 1];
    let eq2 = tape
        .value(last)
        .outer_iter()
        .map(|r| eq2_diagnostic(&schedule.to_diffusion(&CwSpan::new(r[0], r[1])), &x0))
        .sum::<f64>()
        / n as f64;

    Ok(LossGraph {
        loss,
        l1: l1_sum / count,
        giou: giou_sum / count,
        eq2,
        per_replica,
    })
}

/// Per-step training record, one JSON line each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub l1: f64,
    pub giou: f64,
    pub eq2: f64,
}

struct ExampleResult {
    loss: f64,
    l1: f64,
    giou: f64,
    eq2: f64,
    grads: Gradients,
}

fn example_step(
    model: &Model,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    example: &GroundingExample,
    seed: u64,
) -> Result<ExampleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = ReplicaNoise::draw(cfg.queries, cfg.timesteps, &mut rng);
    let mut tape = Tape::new(&model.params);
    let mut ctx = ForwardCtx::train(model.config.dropout, &mut rng);
    let g = loss_graph(
        &mut tape,
        model,
        schedule,
        &cfg.weights(),
        example,
        &noise,
        &mut ctx,
    )?;
    let loss = tape.scalar(g.loss);
    let grads = tape.backward(g.loss);
    Ok(ExampleResult {
        loss,
        l1: g.l1,
        giou: g.giou,
        eq2: g.eq2,
        grads,
    })
}

/// Model, schedule, optimizer and the training rng.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    step: u64,
    /// Horizon of the cosine decay, when enabled.
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let optimizer = AdamW::new(
            AdamWConfig::new(config.lr, config.weight_decay),
            &model.params,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            model,
            schedule,
            config,
            optimizer,
            rng,
            step: 0,
            total_steps: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn current_lr(&self) -> f64 {
        if self.config.cosine_decay {
            cosine_lr(self.config.lr, self.step, self.total_steps)
        } else {
            self.config.lr
        }
    }

    /// One optimizer update on `batch`. Per-example gradients are computed in
    /// parallel and summed in batch order, so the result does not depend on
    /// the thread count.
    pub fn train_step(&mut self, batch: &[&GroundingExample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(invalid("empty training batch"));
        }
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.next_u64()).collect();
        let (model, schedule, cfg) = (&self.model, &self.schedule, &self.config);
        let results: Vec<Result<ExampleResult>> = batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(ex, &seed)| example_step(model, schedule, cfg, ex, seed))
            .collect();

        let next = self.step + 1;
        let mut grads = Gradients::zeros_like(&self.model.params);
        let (mut loss, mut l1, mut gl, mut eq2) = (0.0, 0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            if !r.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: next });
            }
            loss += r.loss;
            l1 += r.l1;
            gl += r.giou;
            eq2 += r.eq2;
            grads.add_assign(&r.grads);
        }
        let b = batch.len() as f64;
        grads.scale(1.0 / b);
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step: next });
        }
        let norm = grads.global_norm();
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            grads.scale(self.config.grad_clip / norm);
        }
        let lr = self.current_lr();
        self.optimizer.step(&mut self.model.params, &grads, lr);
        self.step = next;
        Ok(StepStats {
            step: next,
            loss: loss / b,
            l1: l1 / b,
            giou: gl / b,
            eq2: eq2 / b,
        })
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn run_epoch(
        &mut self,
        data: &[GroundingExample],
        on_step: &mut dyn FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(data.len().div_ceil(self.config.batch_size));
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&GroundingExample> = chunk.iter().map(|&i| &data[i]).collect();
            let stats = self.train_step(&batch)?;
            on_step(&stats);
            out.push(stats);
        }
        Ok(out)
    }

    /// `config.epochs` passes over `data`.
    pub fn fit(
        &mut self,
        data: &[GroundingExample],
        on_step: &mut dyn FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let per_epoch = data.len().div_ceil(self.config.batch_size) as u64;
        self.total_steps = self.step + per_epoch * self.config.epochs as u64;
        let mut all = Vec::new();
        for _ in 0..self.config.epochs {
            all.extend(self.run_epoch(data, on_step)?);
        }
        Ok(all)
    }
}

/// Output of one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub final_span: Span,
    pub candidates: Vec<Span>,
    /// Clean-span estimates after every reverse step.
    pub per_step: Vec<Vec<Span>>,
    /// Decoder passes executed.
    pub decodes: usize,
}

/// Inference rng for the `index`-th example of a split.
pub fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INFER_STREAM + index as u64);
    rng
}

/// Samples `cfg.queries` candidates with `cfg.steps` reverse steps and
/// picks the final span by voting.
pub fn infer(
    model: &Model,
    schedule: &NoiseSchedule,
    example: &GroundingExample,
    cfg: &InferConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Inference> {
    cfg.validate(schedule.steps())?;
    let w_min = model.min_width();
    let memory = model
        .encoder
        .encode(&model.params, &example.video, &example.query)?;
    let l = schedule.scale();
    let mut z: Vec<DiffusionPoint> = (0..cfg.queries)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            DiffusionPoint([a.clamp(-l, l), b.clamp(-l, l)])
        })
        .collect();
    let seq = sampling_sequence(cfg.steps, schedule.steps())?;
    let mut per_step = Vec::with_capacity(seq.len());
    let mut estimate: Vec<CwSpan> = Vec::new();
    for (i, &t) in seq.iter().enumerate() {
        let t_prev = seq.get(i + 1).copied().unwrap_or(0);
        let spans = z.iter().map(|x| schedule.from_diffusion(x, w_min)).collect();
        let batch = NoisySpanBatch::at(spans, t)?;
        let out = model.decoder.decode(&model.params, &memory, &batch)?;
        estimate = out.final_spans();
        per_step.push(estimate.iter().map(|c| cw_to_se(c, w_min)).collect());
        for (x, c) in z.iter_mut().zip(&estimate) {
            *x = schedule.ddim_step(*x, schedule.to_diffusion(c), t, t_prev)?;
        }
    }
    let candidates: Vec<Span> = estimate.iter().map(|c| cw_to_se(c, w_min)).collect();
    let v = vote(&candidates)?;
    Ok(Inference {
        final_span: candidates[v.winner],
        candidates,
        per_step,
        decodes: seq.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SynthConfig, SynthCorpus};
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    fn tiny() -> (Model, SynthCorpus) {
        let mcfg = ModelConfig {
            clips: 8,
            video_dim: 8,
            query_dim: 8,
            hidden: 16,
            heads: 2,
            ffn: 32,
            encoder_layers: 1,
            decoder_layers: 2,
            dropout: 0.0,
            max_words: 12,
            ..ModelConfig::default()
        };
        let scfg = SynthConfig {
            clips: 8,
            video_dim: 8,
            query_dim: 8,
            pattern_dim: 4,
            width: (0.2, 0.5),
            ..SynthConfig::default()
        };
        (Model::new(mcfg, 1).unwrap(), SynthCorpus::new(scfg).unwrap())
    }

    #[test]
    fn disjoint_loss_example() {
        let w = TrainConfig::default().weights();
        let l = span_loss(&Span::new(0.0, 0.2).unwrap(), &Span::new(0.8, 1.0).unwrap(), &w);
        assert_abs_diff_eq!(l.total, 4.0, epsilon = 1e-12);
        let s = Span::new(0.3, 0.6).unwrap();
        assert_eq!(span_loss(&s, &s, &w).total, 0.0);
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let (model, corpus) = tiny();
        let ex = corpus.example(0);
        let sched = NoiseSchedule::cosine(100, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = ReplicaNoise::draw(3, 100, &mut rng);
        let w = TrainConfig::default().weights();
        let mut tape = Tape::new(&model.params);
        let g = loss_graph(&mut tape, &model, &sched, &w, &ex, &noise, &mut ForwardCtx::eval())
            .unwrap();

        // recompute through the evaluation-mode decoder and scalar losses
        let mem = model.encoder.encode(&model.params, &ex.video, &ex.query).unwrap();
        let x0 = sched.to_diffusion(&se_to_cw(&ex.target));
        let spans = noise
            .timesteps
            .iter()
            .zip(&noise.eps)
            .map(|(&t, &e)| sched.from_diffusion(&sched.q_sample(x0, t, e).unwrap(), 0.125))
            .collect();
        let batch = NoisySpanBatch::new(spans, noise.timesteps.clone()).unwrap();
        let out = model.decoder.decode(&model.params, &mem, &batch).unwrap();
        let mut sum = 0.0;
        for layer in &out.per_layer {
            for r in layer.outer_iter() {
                let p = cw_to_se(&CwSpan::new(r[0], r[1]), 0.125);
                sum += span_loss(&p, &ex.target, &w).total;
            }
        }
        assert_abs_diff_eq!(tape.scalar(g.loss), sum / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_replicas_have_identical_losses() {
        let (model, corpus) = tiny();
        let ex = corpus.example(2);
        let sched = NoiseSchedule::cosine(100, 2.0).unwrap();
        let noise = ReplicaNoise {
            timesteps: vec![37, 37],
            eps: vec![[0.4, -1.1], [0.4, -1.1]],
        };
        let mut tape = Tape::new(&model.params);
        let w = TrainConfig::default().weights();
        let g = loss_graph(&mut tape, &model, &sched, &w, &ex, &noise, &mut ForwardCtx::eval())
            .unwrap();
        assert_eq!(g.per_replica.len(), 2);
        assert_eq!(g.per_replica[0], g.per_replica[1]);
    }

    #[test]
    fn eq2_definition() {
        let a = DiffusionPoint([0.3, -0.2]);
        assert_eq!(eq2_diagnostic(&a, &a), 0.0);
        assert_eq!(eq2_diagnostic(&DiffusionPoint([1.0, 0.0]), &DiffusionPoint([0.0, 0.0])), 0.5);
        let b = DiffusionPoint([-0.7, 1.3]);
        assert_eq!(eq2_diagnostic(&a, &b), eq2_diagnostic(&b, &a));
    }

    #[test]
    fn first_step_is_finite_and_single_replica_works() {
        let (model, corpus) = tiny();
        let data = corpus.examples(0..4);
        let batch: Vec<&GroundingExample> = data.iter().collect();
        for queries in [1, 5] {
            let cfg = TrainConfig {
                queries,
                timesteps: 100,
                ..TrainConfig::default()
            };
            let mut tr = Trainer::new(model.clone(), cfg).unwrap();
            let s = tr.train_step(&batch).unwrap();
            assert!(s.loss.is_finite() && s.loss > 0.0);
            assert_eq!(s.step, 1);
        }
    }

    #[test]
    fn inference_shapes_and_determinism() {
        let (model, corpus) = tiny();
        let ex = corpus.example(1);
        let sched = NoiseSchedule::cosine(100, 2.0).unwrap();
        for (q, s) in [(1, 1), (5, 5), (10, 50), (3, 100)] {
            let cfg = InferConfig {
                queries: q,
                steps: s,
                seed: 4,
            };
            let a = infer(&model, &sched, &ex, &cfg, &mut example_rng(4, 0)).unwrap();
            let b = infer(&model, &sched, &ex, &cfg, &mut example_rng(4, 0)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.candidates.len(), q);
            assert_eq!(a.decodes, s);
            assert_eq!(a.per_step.len(), s);
            assert!(a.candidates.contains(&a.final_span));
        }
        let bad = InferConfig {
            queries: 1,
            steps: 101,
            seed: 0,
        };
        assert!(infer(&model, &sched, &ex, &bad, &mut example_rng(0, 0)).is_err());
    }

    #[test]
    fn invalid_train_config() {
        let zero = TrainConfig {
            l1_weight: 0.0,
            giou_weight: 0.0,
            ..TrainConfig::default()
        };
        assert!(zero.validate().is_err());
        let neg = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
