//! Recall@K retrieval in both directions and zero-shot multiple choice.
//!
//! Rank convention: gallery items are ordered by descending cosine
//! similarity with ties broken by ascending gallery index, so the rank of the
//! ground truth is `1 + #{j : s_j > s_gt} + #{j < gt : s_j == s_gt}`.

mod zeroshot;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::EncoderError;
use crate::numerics::kernels::dot;
use crate::numerics::DenseArray;

pub use zeroshot::{
    classify_embeddings, load_zero_shot_tasks, permute_options, zero_shot_classify, ZeroShotItem, ZeroShotOutcome,
    ZeroShotTask,
};

/// Queries scored per block; bounds the live similarity buffer.
pub const QUERY_BLOCK: usize = 256;
const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Usage(String),
    #[error("{source_name}:{line}: {detail}")]
    Format {
        source_name: String,
        line: usize,
        detail: String,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    TextToImage,
    ImageToText,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::TextToImage => "t2i",
            Direction::ImageToText => "i2t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    /// Keyed by the requested K.
    pub recalls: BTreeMap<usize, f64>,
    /// 1-based rank of each query's ground truth.
    pub ranks: Vec<usize>,
    /// Set when some requested K exceeded the gallery size and was capped.
    pub k_capped: bool,
}

impl RetrievalResult {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.get(&k).copied()
    }
}

fn check_unit(name: &str, m: &DenseArray) -> Result<(), EvalError> {
    for i in 0..m.rows() {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(EvalError::Usage(format!("{name} row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// Rank of `gt` for one query, by linear scan.
fn rank_of(query: &[f64], gallery: &DenseArray, gt: usize, scores: &mut [f64]) -> usize {
    for (j, s) in scores.iter_mut().enumerate() {
        *s = dot(query, gallery.row(j));
    }
    let target = scores[gt];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < gt))
        .count()
}

/// Ranks every query against the gallery and reports Recall@K.
pub fn retrieve(
    queries: &DenseArray,
    gallery: &DenseArray,
    ground_truth: &[usize],
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalResult, EvalError> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.cols() != gallery.cols() {
        return Err(EvalError::Usage(format!(
            "queries {:?} and gallery {:?} must be matrices of equal width",
            queries.shape(),
            gallery.shape()
        )));
    }
    if queries.rows() != ground_truth.len() {
        return Err(EvalError::Usage(format!(
            "{} queries but {} ground-truth indices",
            queries.rows(),
            ground_truth.len()
        )));
    }
    let n_gallery = gallery.rows();
    if let Some(bad) = ground_truth.iter().find(|&&g| g >= n_gallery) {
        return Err(EvalError::Usage(format!(
            "ground-truth index {bad} outside gallery of {n_gallery}"
        )));
    }
    if ks.contains(&0) {
        return Err(EvalError::Usage("K must be positive".into()));
    }
    check_unit("query", queries)?;
    check_unit("gallery", gallery)?;

    let mut ranks = Vec::with_capacity(queries.rows());
    let mut scores = vec![0.0; n_gallery];
    for block_start in (0..queries.rows()).step_by(QUERY_BLOCK) {
        let block_end = (block_start + QUERY_BLOCK).min(queries.rows());
        for q in block_start..block_end {
            ranks.push(rank_of(queries.row(q), gallery, ground_truth[q], &mut scores));
        }
    }
    let mut k_capped = false;
    let mut recalls = BTreeMap::new();
    for &k in ks {
        let effective = if k > n_gallery {
            k_capped = true;
            log::warn!("K={k} exceeds gallery size {n_gallery}; capped");
            n_gallery
        } else {
            k
        };
        let hits = ranks.iter().filter(|&&r| r <= effective).count();
        let recall = if ranks.is_empty() {
            0.0
        } else {
            hits as f64 / ranks.len() as f64
        };
        recalls.insert(k, recall);
    }
    Ok(RetrievalResult {
        direction,
        recalls,
        ranks,
        k_capped,
    })
}

/// Text→image and image→text retrieval over one-to-one pairs.
pub fn recall_pair(
    image_embs: &DenseArray,
    text_embs: &DenseArray,
    ks: &[usize],
) -> Result<(RetrievalResult, RetrievalResult), EvalError> {
    if image_embs.rows() != text_embs.rows() {
        return Err(EvalError::Usage(format!(
            "{} images but {} texts; retrieval needs one-to-one pairs",
            image_embs.rows(),
            text_embs.rows()
        )));
    }
    let identity: Vec<usize> = (0..image_embs.rows()).collect();
    let t2i = retrieve(text_embs, image_embs, &identity, ks, Direction::TextToImage)?;
    let i2t = retrieve(image_embs, text_embs, &identity, ks, Direction::ImageToText)?;
    Ok((t2i, i2t))
}

pub const RESULTS_CSV_HEADER: &str = "benchmark,direction,K,recall";

pub fn results_csv_rows(benchmark: &str, results: &[&RetrievalResult]) -> String {
    let mut out = String::new();
    for r in results {
        for (k, recall) in &r.recalls {
            let _ = writeln!(out, "{benchmark},{},{k},{recall}", r.direction.label());
        }
    }
    out
}

pub fn results_summary(benchmark: &str, results: &[&RetrievalResult]) -> String {
    let mut out = String::new();
    for r in results {
        for (k, recall) in &r.recalls {
            let _ = writeln!(out, "{benchmark}.{}.recall@{k} = {recall}", r.direction.label());
        }
        let mean_rank = r.ranks.iter().sum::<usize>() as f64 / r.ranks.len().max(1) as f64;
        let _ = writeln!(out, "{benchmark}.{}.mean_rank = {mean_rank}", r.direction.label());
        if r.k_capped {
            let _ = writeln!(out, "{benchmark}.{}.warning = K capped at gallery size", r.direction.label());
        }
    }
    out
}
