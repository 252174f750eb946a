use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, PairRecord, PairedCorpus};
use crate::tokenizer::Vocab;

const COMMON_WORDS: &str = include_str!("../../data/common_words.txt");
const RARE_WORDS: &str = include_str!("../../data/rare_words.txt");

const PROTOTYPE_STREAM: u64 = 1;
const WORD_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;
const MAX_COSINE: f64 = 0.5;
const MAX_DRAWS: usize = 10_000;

/// The 1,000-word class-independent filler pool.
pub fn common_words() -> Vec<&'static str> {
    COMMON_WORDS.lines().filter(|l| !l.is_empty()).collect()
}

/// Candidate class and detail words, disjoint from [`common_words`].
pub fn rare_words() -> Vec<&'static str> {
    RARE_WORDS.lines().filter(|l| !l.is_empty()).collect()
}

/// Layout of the synthetic corpus. Positions are 0-based content-token
/// indices (BOS excluded).
///
/// Every caption has `caption_length` words; all are filler except the
/// class word at `class_token_position` and, when `num_details > 0`, a
/// detail word at `detail_token_position`. The image is the class prototype
/// plus `detail_weight` times the detail prototype plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_dim: usize,
    pub distractor_prefix_tokens: usize,
    pub class_token_position: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub num_details: usize,
    pub detail_token_position: usize,
    pub detail_weight: f64,
    pub caption_length: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 200,
            image_dim: 64,
            distractor_prefix_tokens: 100,
            class_token_position: 110,
            noise_std: 0.05,
            seed: 0,
            num_details: 5,
            detail_token_position: 160,
            detail_weight: 1.0,
            caption_length: 168,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Usage(m));
        if self.num_classes < 2 || self.samples_per_class == 0 || self.image_dim == 0 {
            return fail("need at least 2 classes, 1 sample per class and a positive image_dim".into());
        }
        if self.class_token_position <= self.distractor_prefix_tokens {
            return fail(format!(
                "class_token_position {} must exceed distractor_prefix_tokens {}",
                self.class_token_position, self.distractor_prefix_tokens
            ));
        }
        if self.class_token_position >= self.caption_length {
            return fail(format!(
                "class_token_position {} lies outside caption_length {}",
                self.class_token_position, self.caption_length
            ));
        }
        if self.num_details > 0
            && (self.detail_token_position <= self.class_token_position
                || self.detail_token_position >= self.caption_length)
        {
            return fail(format!(
                "detail_token_position {} must lie after the class word and inside caption_length {}",
                self.detail_token_position, self.caption_length
            ));
        }
        let capacity = rare_words().len();
        if self.num_classes + self.num_details > capacity {
            return fail(format!(
                "{} classes + {} details exceed the {capacity} available rare words",
                self.num_classes, self.num_details
            ));
        }
        if !(self.noise_std >= 0.0) || !self.detail_weight.is_finite() {
            return fail("noise_std must be non-negative and detail_weight finite".into());
        }
        Ok(())
    }
}

/// Prototypes and word assignments shared by every split of one spec.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub class_words: Vec<String>,
    pub detail_words: Vec<String>,
    pub class_prototypes: Vec<Vec<f64>>,
    pub detail_prototypes: Vec<Vec<f64>>,
    pool: Vec<&'static str>,
}

/// A generated split with its labels.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: PairedCorpus,
    pub labels: Vec<usize>,
    pub details: Vec<Option<usize>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Unit vectors with pairwise cosine below [`MAX_COSINE`], redrawing any
/// candidate that violates the bound.
fn prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>, DataError> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = false;
        for _ in 0..MAX_DRAWS {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || out.iter().any(|p| cosine(p, &v) >= MAX_COSINE) {
                continue;
            }
            out.push(v.iter().map(|x| x / norm).collect());
            accepted = true;
            break;
        }
        if !accepted {
            return Err(DataError::Usage(format!(
                "cannot place {count} prototypes with pairwise cosine < {MAX_COSINE} in {dim} dimensions"
            )));
        }
    }
    Ok(out)
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(PROTOTYPE_STREAM);
        let class_prototypes = prototypes(&mut rng, spec.num_classes, spec.image_dim)?;
        let detail_prototypes = prototypes(&mut rng, spec.num_details, spec.image_dim)?;
        let mut words = rare_words();
        let mut word_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        word_rng.set_stream(WORD_STREAM);
        words.shuffle(&mut word_rng);
        let class_words = words[..spec.num_classes].iter().map(|w| w.to_string()).collect();
        let detail_words = words[spec.num_classes..spec.num_classes + spec.num_details]
            .iter()
            .map(|w| w.to_string())
            .collect();
        Ok(Self {
            spec,
            class_words,
            detail_words,
            class_prototypes,
            detail_prototypes,
            pool: common_words(),
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng, id: String, class: usize, detail: Option<usize>) -> PairRecord {
        let s = &self.spec;
        let mut words: Vec<&str> = (0..s.caption_length)
            .map(|_| self.pool[rng.random_range(0..self.pool.len())])
            .collect();
        words[s.class_token_position] = &self.class_words[class];
        let mut image = self.class_prototypes[class].clone();
        let mut context = BTreeMap::from([("class".to_string(), self.class_words[class].clone())]);
        if let Some(d) = detail {
            words[s.detail_token_position] = &self.detail_words[d];
            for (x, p) in image.iter_mut().zip(&self.detail_prototypes[d]) {
                *x += s.detail_weight * p;
            }
            context.insert("detail".into(), self.detail_words[d].clone());
        }
        if s.noise_std > 0.0 {
            let noise = Normal::new(0.0, s.noise_std).expect("valid noise");
            for x in &mut image {
                *x += noise.sample(rng);
            }
        }
        PairRecord {
            id,
            image,
            caption: words.join(" "),
            context,
        }
    }

    fn detail_for(&self, i: usize) -> Option<usize> {
        (self.spec.num_details > 0).then(|| i % self.spec.num_details)
    }

    /// `samples_per_class` samples per class, details balanced within each
    /// class.
    pub fn training_corpus(&self) -> Result<SyntheticCorpus, DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(TRAIN_STREAM);
        let mut records = Vec::new();
        let (mut labels, mut details) = (Vec::new(), Vec::new());
        for class in 0..self.spec.num_classes {
            for i in 0..self.spec.samples_per_class {
                let detail = self.detail_for(i);
                let id = format!("syn-{class:03}-{i:05}");
                records.push(self.sample(&mut rng, id, class, detail));
                labels.push(class);
                details.push(detail);
            }
        }
        Ok(SyntheticCorpus {
            corpus: PairedCorpus::new(records)?,
            labels,
            details,
        })
    }

    /// Held-out split: one fresh sample per (class, detail) combination.
    pub fn eval_corpus(&self) -> Result<SyntheticCorpus, DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(EVAL_STREAM);
        let per_class = self.spec.num_details.max(1);
        let mut records = Vec::new();
        let (mut labels, mut details) = (Vec::new(), Vec::new());
        for class in 0..self.spec.num_classes {
            for i in 0..per_class {
                let detail = self.detail_for(i);
                let id = format!("syn-eval-{class:03}-{i:03}");
                records.push(self.sample(&mut rng, id, class, detail));
                labels.push(class);
                details.push(detail);
            }
        }
        Ok(SyntheticCorpus {
            corpus: PairedCorpus::new(records)?,
            labels,
            details,
        })
    }

    /// Checks that every word is a single token under `vocab`, so that word
    /// index equals content-token position in every caption of `split`.
    /// Every word a caption can contain.
    pub fn words(&self) -> Vec<&str> {
        self.pool
            .iter()
            .copied()
            .chain(self.class_words.iter().map(String::as_str))
            .chain(self.detail_words.iter().map(String::as_str))
            .collect()
    }

    pub fn verify_positions(&self, vocab: &Vocab, split: &SyntheticCorpus) -> Result<(), DataError> {
        for word in self.words() {
            let n = vocab.tokenize(word).len();
            if n != 1 {
                return Err(DataError::Invalid(format!(
                    "word '{word}' is {n} tokens under the vocabulary; positions would shift"
                )));
            }
        }
        for (r, &class) in split.corpus.records().iter().zip(&split.labels) {
            let ids = vocab.tokenize(&r.caption);
            let expected = vocab.tokenize(&self.class_words[class])[0];
            if ids.len() != self.spec.caption_length || ids[self.spec.class_token_position] != expected {
                return Err(DataError::Invalid(format!(
                    "caption '{}' does not place its class word at content position {}",
                    r.id, self.spec.class_token_position
                )));
            }
        }
        Ok(())
    }
}

/// Training split of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, DataError> {
    SyntheticWorld::new(spec.clone())?.training_corpus()
}
