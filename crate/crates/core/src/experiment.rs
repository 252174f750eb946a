//! Context-length ablation on the synthetic corpus: one tokenizer and one
//! initialization per seed, then train and evaluate once per context length.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, SyntheticSpec, SyntheticWorld};
use crate::encoders::{EncoderError, ImageEncoderConfig, Model, TextEncoderConfig};
use crate::eval::{recall_pair, EvalError, RetrievalResult};
use crate::tokenizer::{corpus_token_stats, train_bpe, TokenSeq, TokenizerError, Vocab};
use crate::trainer::{train, LossCurve, TrainConfig, TrainError};

pub const DEFAULT_CONTEXTS: [usize; 3] = [77, 154, 512];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Tower sizes shared by every context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub output_dim: usize,
    pub image_hidden_dim: usize,
    pub image_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            output_dim: 32,
            image_hidden_dim: 64,
            image_layers: 2,
        }
    }
}

impl ArchConfig {
    /// Single-block text tower; fast enough for a nine-run ablation on a CPU.
    pub fn compact() -> Self {
        Self {
            embed_dim: 32,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 64,
            output_dim: 32,
            image_hidden_dim: 64,
            image_layers: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ExperimentError> {
        match name {
            "default" => Ok(Self::default()),
            "compact" => Ok(Self::compact()),
            other => Err(ExperimentError::Config(format!(
                "unknown architecture preset '{other}' (expected default or compact)"
            ))),
        }
    }

    pub fn text_config(&self, vocab_size: usize, context_length: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            context_length,
            vocab_size,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            output_dim: self.output_dim,
        }
    }

    pub fn image_config(&self, input_dim: usize) -> ImageEncoderConfig {
        ImageEncoderConfig {
            input_dim,
            hidden_dim: self.image_hidden_dim,
            num_layers: self.image_layers,
            output_dim: self.output_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub contexts: Vec<usize>,
    /// Seeds the corpus, tokenizer sampling, initialization and shuffling.
    pub seed: u64,
    pub synthetic: SyntheticSpec,
    /// `context_length` and `seed` are overridden per run.
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub vocab_size: usize,
    pub ks: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            contexts: DEFAULT_CONTEXTS.to_vec(),
            seed: 0,
            synthetic: SyntheticSpec::default(),
            train: TrainConfig {
                learning_rate: 2e-3,
                max_epochs: 6,
                ..TrainConfig::default()
            },
            arch: ArchConfig::compact(),
            vocab_size: 8192,
            ks: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextResult {
    pub context_length: usize,
    pub t2i: RetrievalResult,
    pub i2t: RetrievalResult,
    /// First logged step whose loss is at or below the threshold.
    pub steps_to_threshold: Option<usize>,
    pub final_epoch_loss: f64,
    /// Fraction of training-caption tokens dropped at this context length.
    pub waste_fraction: f64,
    pub curve: LossCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seed: u64,
    /// `ln(batch_size) / 2`.
    pub loss_threshold: f64,
    pub results: Vec<ContextResult>,
}

impl AblationReport {
    pub fn result(&self, context_length: usize) -> Option<&ContextResult> {
        self.results.iter().find(|r| r.context_length == context_length)
    }

    pub fn t2i_recall_at_1(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.t2i.recall(1).unwrap_or(f64::NAN)).collect()
    }

    pub fn table_header(ks: &[usize]) -> String {
        let mut h = String::from("context_length");
        for dir in ["t2i", "i2t"] {
            for k in ks {
                let _ = write!(h, ",{dir}_r{k}");
            }
        }
        h.push_str(",steps_to_threshold,final_epoch_loss,waste_fraction");
        h
    }

    /// One row per context length; recalls in percent.
    pub fn table_csv(&self) -> String {
        let ks: Vec<usize> = self
            .results
            .first()
            .map(|r| r.t2i.recalls.keys().copied().collect())
            .unwrap_or_default();
        let mut out = Self::table_header(&ks);
        out.push('\n');
        for r in &self.results {
            let _ = write!(out, "{}", r.context_length);
            for res in [&r.t2i, &r.i2t] {
                for k in &ks {
                    let _ = write!(out, ",{:.1}", 100.0 * res.recall(*k).unwrap_or(f64::NAN));
                }
            }
            let steps = r.steps_to_threshold.map_or_else(|| "never".to_string(), |s| s.to_string());
            let _ = writeln!(out, ",{steps},{:.6},{:.6}", r.final_epoch_loss, r.waste_fraction);
        }
        out
    }

    pub const CURVES_HEADER: &'static str = "context_length,step,loss,lr";

    /// Loss curves of every run, without wall-clock time.
    pub fn curves_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CURVES_HEADER);
        for r in &self.results {
            for rec in &r.curve.records {
                let _ = writeln!(out, "{},{},{},{}", r.context_length, rec.step, rec.loss, rec.lr);
            }
        }
        out
    }
}

fn encode_all(vocab: &Vocab, captions: &[String], context_length: usize) -> Result<Vec<TokenSeq>, TokenizerError> {
    captions.iter().map(|c| vocab.encode(c, context_length)).collect()
}

/// Trains a tokenizer on the synthetic captions and checks that every
/// planted word is a single token.
const INVENTORY_REPEATS: usize = 8;

pub fn synthetic_vocab(world: &SyntheticWorld, vocab_size: usize, seed: u64) -> Result<Vocab, ExperimentError> {
    let train_split = world.training_corpus()?;
    // The word inventory is appended so that small corpora still merge
    // every word into a single token.
    let mut text = train_split.corpus.captions();
    let inventory = world.words().join(" ");
    text.extend(std::iter::repeat_n(inventory, INVENTORY_REPEATS));
    let vocab = train_bpe(&text, vocab_size, seed)?;
    world.verify_positions(&vocab, &train_split)?;
    world.verify_positions(&vocab, &world.eval_corpus()?)?;
    Ok(vocab)
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport, ExperimentError> {
    if cfg.contexts.is_empty() {
        return Err(ExperimentError::Config("no context lengths given".into()));
    }
    let spec = SyntheticSpec {
        seed: cfg.seed,
        ..cfg.synthetic.clone()
    };
    let world = SyntheticWorld::new(spec)?;
    let train_split = world.training_corpus()?;
    let eval_split = world.eval_corpus()?;
    let vocab = synthetic_vocab(&world, cfg.vocab_size, cfg.seed)?;
    let train_captions = train_split.corpus.captions();
    let train_images = train_split.corpus.images();
    let eval_captions = eval_split.corpus.captions();
    let eval_images = eval_split.corpus.images();
    let loss_threshold = (cfg.train.batch_size as f64).ln() / 2.0;
    let waste = |ctx: usize| {
        let cutoff = ctx.saturating_sub(2);
        corpus_token_stats(&vocab, &train_captions, cutoff).waste_fraction
    };

    let mut results = Vec::with_capacity(cfg.contexts.len());
    for &ctx in &cfg.contexts {
        let train_cfg = TrainConfig {
            context_length: ctx,
            seed: cfg.seed,
            ..cfg.train.clone()
        };
        let model = Model::init(
            cfg.arch.text_config(vocab.len(), ctx),
            cfg.arch.image_config(world.spec.image_dim),
            cfg.seed,
            train_cfg.log_scale_init,
        )?;
        let texts = encode_all(&vocab, &train_captions, ctx)?;
        log::info!("ablation seed {}: training context {ctx}", cfg.seed);
        let outcome = train(&train_cfg, model, &texts, &train_images)?;
        let eval_texts = encode_all(&vocab, &eval_captions, ctx)?;
        let z_txt = outcome.model.encode_texts(&eval_texts)?;
        let z_img = outcome.model.encode_images(&eval_images)?;
        let (t2i, i2t) = recall_pair(&z_img, &z_txt, &cfg.ks)?;
        let final_epoch_loss = outcome
            .curve
            .epoch_means(outcome.steps_per_epoch)
            .last()
            .copied()
            .unwrap_or(f64::NAN);
        results.push(ContextResult {
            context_length: ctx,
            steps_to_threshold: outcome.curve.first_step_at_or_below(loss_threshold),
            final_epoch_loss,
            waste_fraction: waste(ctx),
            t2i,
            i2t,
            curve: outcome.curve,
        });
    }
    Ok(AblationReport {
        seed: cfg.seed,
        loss_threshold,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> AblationConfig {
        AblationConfig {
            contexts: vec![77, 512],
            seed,
            synthetic: SyntheticSpec {
                samples_per_class: 8,
                ..SyntheticSpec::default()
            },
            train: TrainConfig {
                batch_size: 8,
                max_epochs: 2,
                ..AblationConfig::default().train
            },
            ..AblationConfig::default()
        }
    }

    #[test]
    fn presets() {
        assert_eq!(ArchConfig::preset("compact").unwrap().num_layers, 1);
        assert_eq!(ArchConfig::preset("default").unwrap(), ArchConfig::default());
        assert!(ArchConfig::preset("huge").is_err());
        let t = ArchConfig::default().text_config(300, 77);
        t.validate().unwrap();
        assert_eq!(t, TextEncoderConfig::new(300, 77));
    }

    #[test]
    fn tiny_ablation_is_deterministic_and_tabulated() {
        let a = run_ablation(&tiny(3)).unwrap();
        let b = run_ablation(&tiny(3)).unwrap();
        assert_eq!(a.table_csv(), b.table_csv());
        assert_eq!(a.curves_csv(), b.curves_csv());
        let table = a.table_csv();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "context_length,t2i_r1,t2i_r5,t2i_r10,i2t_r1,i2t_r5,i2t_r10,steps_to_threshold,final_epoch_loss,waste_fraction");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("77,") && lines[2].starts_with("512,"));
        // 80 samples / batch 8 = 10 steps per epoch, 2 epochs, 2 contexts
        assert_eq!(a.curves_csv().lines().count(), 1 + 2 * 20);
        assert!((a.loss_threshold - 8f64.ln() / 2.0).abs() < 1e-15);
        // 168 content tokens, 75 visible at context 77
        assert!((a.result(77).unwrap().waste_fraction - 93.0 / 168.0).abs() < 1e-12);
        assert_eq!(a.result(512).unwrap().waste_fraction, 0.0);
    }

    #[test]
    fn empty_context_list_rejected() {
        let cfg = AblationConfig {
            contexts: vec![],
            ..tiny(0)
        };
        assert!(matches!(run_ablation(&cfg), Err(ExperimentError::Config(_))));
    }
}
