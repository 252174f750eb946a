//! Symmetric contrastive training with AdamW, warmup plus cosine decay,
//! global-norm clipping and a clamped learnable temperature.

mod loss;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{image_tower, is_decayed, text_tower, validate_sequences, EncoderError, Model, IMAGE_INPUT};
use crate::numerics::{Bindings, DenseArray, Graph, NodeId, NumericsError};
use crate::tokenizer::{TokenId, TokenSeq};

pub use loss::{contrastive_loss, contrastive_loss_node, UNIT_NORM_TOL};
pub use optim::{clip_gradients, effective_warmup, global_norm, lr_schedule, AdamW};

pub const LOG_SCALE: &str = "log_scale";
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("non-finite value{}: {detail}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { step: Option<usize>, detail: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Optimization settings. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub context_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub short_run_warmup_steps: usize,
    pub max_epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub log_scale_init: f64,
    pub log_scale_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            context_length: 77,
            batch_size: 32,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.2,
            warmup_steps: 1000,
            short_run_warmup_steps: 50,
            max_epochs: 20,
            grad_clip_norm: 1.0,
            seed: 0,
            log_scale_init: (1.0f64 / 0.07).ln(),
            log_scale_max: 100f64.ln(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return fail(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive".into());
        }
        if self.context_length < 3 {
            return fail(format!("context_length {} < 3", self.context_length));
        }
        if !(self.log_scale_max >= 0.0) || !(0.0..=self.log_scale_max).contains(&self.log_scale_init) {
            return fail(format!(
                "log_scale_init {} must lie in [0, log_scale_max {}]",
                self.log_scale_init, self.log_scale_max
            ));
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    pub const CSV_HEADER: &'static str = "step,loss,lr,seconds";

    pub fn push(&mut self, record: LossRecord) -> Result<(), TrainError> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(TrainError::Usage(format!(
                    "loss curve steps must increase: {} after {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!("{},{},{},{:.6}\n", r.step, r.loss, r.lr, r.seconds));
        }
        out
    }

    /// The CSV without the wall-clock column; equal strings mean
    /// bit-identical losses and learning rates.
    pub fn deterministic_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
        }
        out
    }

    /// First step whose loss is at or below `threshold`.
    pub fn first_step_at_or_below(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.loss <= threshold).map(|r| r.step)
    }

    /// Mean loss of each consecutive group of `steps_per_epoch` records.
    pub fn epoch_means(&self, steps_per_epoch: usize) -> Vec<f64> {
        self.records
            .chunks(steps_per_epoch.max(1))
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// The full forward graph of one batch: both towers and the loss.
pub struct StepGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub sim: NodeId,
    images: DenseArray,
    log_scale: DenseArray,
}

impl StepGraph {
    pub fn build(model: &Model, texts: &[&[TokenId]], images: &[&[f64]]) -> Result<Self, TrainError> {
        if texts.len() != images.len() {
            return Err(TrainError::Usage(format!(
                "{} texts but {} images in batch",
                texts.len(),
                images.len()
            )));
        }
        validate_sequences(&model.text, texts)?;
        let mut graph = Graph::new();
        let nodes = model.params.declare(&mut graph)?;
        let image_rows: Vec<Vec<f64>> = images.iter().map(|r| r.to_vec()).collect();
        let images = DenseArray::from_rows(&image_rows)?;
        let image_in = graph.input(IMAGE_INPUT, images.shape())?;
        let ls = graph.input(LOG_SCALE, &[1])?;
        let z_img = image_tower(&mut graph, &model.image, &nodes, image_in)?;
        let z_txt = text_tower(&mut graph, &model.text, &nodes, texts)?;
        let (loss, sim) = contrastive_loss_node(&mut graph, z_img, z_txt, ls)?;
        Ok(Self {
            graph,
            loss,
            sim,
            images,
            log_scale: DenseArray::scalar(model.log_scale),
        })
    }

    pub fn bindings<'a>(&'a self, model: &'a Model) -> Bindings<'a, f64> {
        let mut b = Bindings::new();
        b.extend(model.params.map());
        b.insert(IMAGE_INPUT, &self.images);
        b.insert(LOG_SCALE, &self.log_scale);
        b
    }

    /// Loss and gradients for every parameter plus `log_scale`.
    pub fn loss_and_grads(&self, model: &Model) -> Result<(f64, BTreeMap<String, DenseArray>), NumericsError> {
        let bindings = self.bindings(model);
        let eval = self.graph.evaluate(&bindings)?;
        let grads = self.graph.backward(&eval, self.loss, None)?;
        let mut named = grads.into_named();
        named.remove(IMAGE_INPUT);
        Ok((eval.scalar(self.loss), named))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: LossCurve,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

/// Trains `model` on paired `(texts[i], images[i])` examples.
///
/// Each epoch shuffles with a seeded generator and drops the last partial
/// batch. Step `k` (0-based) uses `lr_schedule(k)`; the curve logs it as step
/// `k + 1` together with the loss before the update.
pub fn train(cfg: &TrainConfig, mut model: Model, texts: &[TokenSeq], images: &[Vec<f64>]) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.context_length != model.text.context_length {
        return Err(TrainError::Config(format!(
            "train context_length {} differs from the text tower's {}",
            cfg.context_length, model.text.context_length
        )));
    }
    if texts.len() != images.len() {
        return Err(TrainError::Usage(format!(
            "{} captions but {} images",
            texts.len(),
            images.len()
        )));
    }
    if texts.len() < cfg.batch_size {
        return Err(TrainError::Usage(format!(
            "corpus of {} pairs is smaller than batch_size {}",
            texts.len(),
            cfg.batch_size
        )));
    }
    let steps_per_epoch = texts.len() / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut optimizer = AdamW::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    let mut curve = LossCurve::default();
    let start = Instant::now();
    let mut step = 0usize;
    let mut ls_param = BTreeMap::from([(LOG_SCALE.to_string(), DenseArray::scalar(model.log_scale))]);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(cfg.batch_size) {
            let batch_texts: Vec<&[TokenId]> = batch.iter().map(|&i| texts[i].visible_ids()).collect();
            let batch_images: Vec<&[f64]> = batch.iter().map(|&i| images[i].as_slice()).collect();
            let sg = StepGraph::build(&model, &batch_texts, &batch_images)?;
            let (loss, mut grads) = sg.loss_and_grads(&model).map_err(|e| match e {
                NumericsError::NonFinite { .. } => TrainError::NonFinite {
                    step: Some(step + 1),
                    detail: e.to_string(),
                },
                other => other.into(),
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step: Some(step + 1),
                    detail: format!("loss is {loss}"),
                });
            }
            clip_gradients(&mut grads, cfg.grad_clip_norm).map_err(|e| match e {
                TrainError::NonFinite { detail, .. } => TrainError::NonFinite {
                    step: Some(step + 1),
                    detail,
                },
                other => other,
            })?;
            let lr = lr_schedule(step, cfg, total_steps);
            let combined = model.params.iter_mut().chain(ls_param.iter_mut());
            optimizer.update(combined, &grads, lr, |_, a| is_decayed(a))?;
            let ls = &mut ls_param.get_mut(LOG_SCALE).expect("log_scale").data_mut()[0];
            *ls = ls.clamp(0.0, cfg.log_scale_max);
            model.log_scale = *ls;
            step += 1;
            curve.push(LossRecord {
                step,
                loss,
                lr,
                seconds: start.elapsed().as_secs_f64(),
            })?;
        }
        if let Some(last) = curve.epoch_means(steps_per_epoch).last() {
            log::info!("epoch {}/{}: mean loss {last:.4}", epoch + 1, cfg.max_epochs);
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        steps_per_epoch,
        total_steps,
    })
}
