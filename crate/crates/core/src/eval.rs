//! Recall at IoU thresholds, split evaluation and prediction records.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::GroundingExample;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::pipeline::{example_rng, infer, InferConfig, Inference};
use crate::schedule::NoiseSchedule;
use crate::span_math::{iou, Span};

/// Percentage of predictions whose IoU with the target is strictly above `m`.
pub fn recall_at(preds: &[Span], gts: &[Span], m: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(invalid("recall over an empty prediction set"));
    }
    if preds.len() != gts.len() {
        return Err(invalid(format!(
            "{} predictions for {} targets",
            preds.len(),
            gts.len()
        )));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| iou(p, g) > m)
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1_03: f64,
    pub r1_05: f64,
    pub r1_07: f64,
    pub mean_iou: f64,
    pub n_examples: usize,
    pub config_echo: BTreeMap<String, String>,
}

impl EvalReport {
    /// Aggregates final predictions. Independent of example order.
    pub fn from_predictions(
        preds: &[Span],
        gts: &[Span],
        config_echo: BTreeMap<String, String>,
    ) -> Result<Self> {
        let r1_03 = recall_at(preds, gts, 0.3)?;
        let r1_05 = recall_at(preds, gts, 0.5)?;
        let r1_07 = recall_at(preds, gts, 0.7)?;
        let mut ious: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).collect();
        ious.sort_by(f64::total_cmp);
        let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
        Ok(EvalReport {
            r1_03,
            r1_05,
            r1_07,
            mean_iou,
            n_examples: preds.len(),
            config_echo,
        })
    }
}

/// How the final span is picked from the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    Vote,
    /// Uniformly random candidate, drawn from the example's seeded rng.
    Random,
}

impl Selector {
    pub fn name(self) -> &'static str {
        match self {
            Selector::Vote => "vote",
            Selector::Random => "random",
        }
    }
}

/// Inference result for one example plus the random-mode pick.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamplePrediction {
    pub id: String,
    pub inference: Inference,
    pub random_pick: Span,
}

impl ExamplePrediction {
    pub fn selected(&self, selector: Selector) -> Span {
        match selector {
            Selector::Vote => self.inference.final_span,
            Selector::Random => self.random_pick,
        }
    }

    pub fn record(&self, cfg: &InferConfig) -> PredictionRecord {
        PredictionRecord {
            id: self.id.clone(),
            start: self.inference.final_span.start,
            end: self.inference.final_span.end,
            candidates: self
                .inference
                .candidates
                .iter()
                .map(|s| [s.start, s.end])
                .collect(),
            steps: cfg.steps,
            queries: cfg.queries,
        }
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub start: f64,
    pub end: f64,
    pub candidates: Vec<[f64; 2]>,
    pub steps: usize,
    pub queries: usize,
}

/// Runs inference on every example. Example `i` uses its own rng stream, so
/// results do not depend on scheduling.
pub fn predict(
    model: &Model,
    schedule: &NoiseSchedule,
    examples: &[GroundingExample],
    cfg: &InferConfig,
) -> Result<Vec<ExamplePrediction>> {
    cfg.validate(schedule.steps())?;
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = example_rng(cfg.seed, i);
            let inference = infer(model, schedule, ex, cfg, &mut rng)?;
            let random_pick = inference.candidates[rng.gen_range(0..inference.candidates.len())];
            Ok(ExamplePrediction {
                id: ex.id.clone(),
                inference,
                random_pick,
            })
        })
        .collect()
}

pub fn config_echo(cfg: &InferConfig, selector: Selector) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("queries".to_string(), cfg.queries.to_string()),
        ("steps".to_string(), cfg.steps.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("selector".to_string(), selector.name().to_string()),
    ])
}

pub fn report(
    examples: &[GroundingExample],
    preds: &[ExamplePrediction],
    cfg: &InferConfig,
    selector: Selector,
) -> Result<EvalReport> {
    let chosen: Vec<Span> = preds.iter().map(|p| p.selected(selector)).collect();
    let gts: Vec<Span> = examples.iter().map(|e| e.target).collect();
    EvalReport::from_predictions(&chosen, &gts, config_echo(cfg, selector))
}

pub fn evaluate(
    model: &Model,
    schedule: &NoiseSchedule,
    examples: &[GroundingExample],
    cfg: &InferConfig,
    selector: Selector,
) -> Result<EvalReport> {
    let preds = predict(model, schedule, examples, cfg)?;
    report(examples, &preds, cfg, selector)
}

/// Voting and random-candidate reports over the same sampled candidates.
pub fn evaluate_ablation(
    model: &Model,
    schedule: &NoiseSchedule,
    examples: &[GroundingExample],
    cfg: &InferConfig,
) -> Result<(EvalReport, EvalReport)> {
    let preds = predict(model, schedule, examples, cfg)?;
    Ok((
        report(examples, &preds, cfg, Selector::Vote)?,
        report(examples, &preds, cfg, Selector::Random)?,
    ))
}
