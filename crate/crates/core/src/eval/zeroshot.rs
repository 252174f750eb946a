use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::encoders::Model;
use crate::numerics::kernels::dot;
use crate::numerics::DenseArray;
use crate::tokenizer::{TokenSeq, Vocab};

/// One multiple-choice question about an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotItem {
    /// Id of the image in the accompanying corpus.
    pub image: String,
    pub options: Vec<String>,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ZeroShotTask {
    pub items: Vec<ZeroShotItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotOutcome {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

impl ZeroShotTask {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (i, item) in self.items.iter().enumerate() {
            if item.options.is_empty() {
                return Err(EvalError::Usage(format!("item {i} has no options")));
            }
            if item.correct >= item.options.len() {
                return Err(EvalError::Usage(format!(
                    "item {i}: correct index {} out of {} options",
                    item.correct,
                    item.options.len()
                )));
            }
            if item.options.iter().any(|o| o.trim().is_empty()) {
                return Err(EvalError::Usage(format!("item {i} has an empty option string")));
            }
        }
        Ok(())
    }
}

/// Reads line-delimited `{image, options, correct}` records.
pub fn load_zero_shot_tasks(path: &Path) -> Result<ZeroShotTask, EvalError> {
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: ZeroShotItem = serde_json::from_str(line).map_err(|e| EvalError::Format {
            source_name: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        items.push(item);
    }
    let task = ZeroShotTask { items };
    task.validate()?;
    Ok(task)
}

/// Argmax over option embeddings; ties go to the lowest option index.
pub fn classify_embeddings(
    image_embs: &DenseArray,
    option_embs: &[DenseArray],
    correct: &[usize],
) -> Result<ZeroShotOutcome, EvalError> {
    if image_embs.rows() != option_embs.len() || option_embs.len() != correct.len() {
        return Err(EvalError::Usage(format!(
            "{} images, {} option sets, {} answers",
            image_embs.rows(),
            option_embs.len(),
            correct.len()
        )));
    }
    let mut predictions = Vec::with_capacity(correct.len());
    for (i, options) in option_embs.iter().enumerate() {
        if options.rows() == 0 {
            return Err(EvalError::Usage(format!("item {i} has no options")));
        }
        let image = image_embs.row(i);
        let mut best = 0;
        let mut best_score = dot(image, options.row(0));
        for j in 1..options.rows() {
            let s = dot(image, options.row(j));
            if s > best_score {
                best = j;
                best_score = s;
            }
        }
        predictions.push(best);
    }
    let hits = predictions.iter().zip(correct).filter(|(p, c)| p == c).count();
    let accuracy = if correct.is_empty() {
        0.0
    } else {
        hits as f64 / correct.len() as f64
    };
    Ok(ZeroShotOutcome { accuracy, predictions })
}

/// Encodes every option with the text tower and classifies each image
/// (given as raw features, one per item).
pub fn zero_shot_classify(
    task: &ZeroShotTask,
    images: &[Vec<f64>],
    model: &Model,
    vocab: &Vocab,
) -> Result<ZeroShotOutcome, EvalError> {
    task.validate()?;
    if images.len() != task.items.len() {
        return Err(EvalError::Usage(format!(
            "{} images for {} items",
            images.len(),
            task.items.len()
        )));
    }
    let image_embs = model.encode_images(images)?;
    let mut option_embs = Vec::with_capacity(task.items.len());
    for item in &task.items {
        let seqs = item
            .options
            .iter()
            .map(|o| vocab.encode(o, model.text.context_length))
            .collect::<Result<Vec<TokenSeq>, _>>()
            .map_err(|e| EvalError::Usage(e.to_string()))?;
        option_embs.push(model.encode_texts(&seqs)?);
    }
    let correct: Vec<usize> = task.items.iter().map(|i| i.correct).collect();
    classify_embeddings(&image_embs, &option_embs, &correct)
}

/// Shuffles each item's options with one seeded generator, tracking the
/// correct answer.
pub fn permute_options(task: &ZeroShotTask, seed: u64) -> ZeroShotTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = task
        .items
        .iter()
        .map(|item| {
            let mut order: Vec<usize> = (0..item.options.len()).collect();
            order.shuffle(&mut rng);
            ZeroShotItem {
                image: item.image.clone(),
                options: order.iter().map(|&i| item.options[i].clone()).collect(),
                correct: order.iter().position(|&i| i == item.correct).expect("permutation"),
            }
        })
        .collect();
    ZeroShotTask { items }
}
