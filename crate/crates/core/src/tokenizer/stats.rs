use std::fmt::Write;

use super::Vocab;

/// Aggregate truncation statistics over a caption corpus.
///
/// Lengths are content-token counts; `cutoff` is the number of content
/// tokens a caption may keep.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWasteReport {
    pub captions: usize,
    pub total_tokens: u64,
    pub wasted_tokens: u64,
    pub waste_fraction: f64,
    pub mean_length: f64,
    pub median_length: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub cutoff: usize,
}

impl TokenWasteReport {
    pub fn from_lengths(lengths: &[usize], cutoff: usize) -> Self {
        let total: u64 = lengths.iter().map(|&l| l as u64).sum();
        let wasted: u64 = lengths
            .iter()
            .map(|&l| l.saturating_sub(cutoff) as u64)
            .sum();
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2] as f64,
            _ => (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0,
        };
        Self {
            captions: n,
            total_tokens: total,
            wasted_tokens: wasted,
            waste_fraction: if total == 0 {
                0.0
            } else {
                wasted as f64 / total as f64
            },
            mean_length: if n == 0 { 0.0 } else { total as f64 / n as f64 },
            median_length: median,
            min_length: sorted.first().copied().unwrap_or(0),
            max_length: sorted.last().copied().unwrap_or(0),
            cutoff,
        }
    }

    pub fn visible_tokens(&self) -> u64 {
        self.total_tokens - self.wasted_tokens
    }

    /// Flat `key = value` report.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cutoff = {}", self.cutoff);
        let _ = writeln!(out, "captions = {}", self.captions);
        let _ = writeln!(out, "total_tokens = {}", self.total_tokens);
        let _ = writeln!(out, "visible_tokens = {}", self.visible_tokens());
        let _ = writeln!(out, "wasted_tokens = {}", self.wasted_tokens);
        let _ = writeln!(out, "waste_fraction = {}", self.waste_fraction);
        let _ = writeln!(out, "mean_length = {}", self.mean_length);
        let _ = writeln!(out, "median_length = {}", self.median_length);
        let _ = writeln!(out, "min_length = {}", self.min_length);
        let _ = writeln!(out, "max_length = {}", self.max_length);
        let _ = writeln!(
            out,
            "length_unit = content tokens (BOS/EOS excluded; cutoff is the content budget)"
        );
        out
    }

    pub const CSV_HEADER: &'static str =
        "cutoff,captions,total_tokens,wasted_tokens,waste_fraction,mean_length,median_length,min_length,max_length";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.cutoff,
            self.captions,
            self.total_tokens,
            self.wasted_tokens,
            self.waste_fraction,
            self.mean_length,
            self.median_length,
            self.min_length,
            self.max_length
        )
    }
}

/// Exact waste statistics of `corpus` at a content-token `cutoff`.
pub fn corpus_token_stats(vocab: &Vocab, corpus: &[String], cutoff: usize) -> TokenWasteReport {
    let lengths: Vec<usize> = corpus.iter().map(|t| vocab.tokenize(t).len()).collect();
    TokenWasteReport::from_lengths(&lengths, cutoff)
}
