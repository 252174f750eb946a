//! Paired image/caption corpora: line-delimited record files, tar shards,
//! the long-caption benchmark builder and the synthetic ablation corpus.

mod benchmark;
mod shards;
mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use benchmark::{
    build_long_caption_benchmark, parse_article_xml, Article, BenchmarkOptions, BenchmarkOutput, Figure,
    ManifestRow,
};
pub use shards::{load_shards, save_shards, FEATURE_EXT, META_EXT, TEXT_EXT};
pub use synthetic::{
    common_words, generate_synthetic, rare_words, SyntheticCorpus, SyntheticSpec, SyntheticWorld,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Usage(String),
    #[error("{source_name}:{line}: {detail}")]
    Record {
        source_name: String,
        line: usize,
        detail: String,
    },
    #[error("shard {shard}: member '{member}': {detail}")]
    Shard {
        shard: String,
        member: String,
        detail: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One image/caption pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    /// Precomputed image feature vector.
    pub image: Vec<f64>,
    pub caption: String,
    /// Optional context fields (image reference, article id, …).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<String, String>,
}

/// Validated corpus: unique ids and a single feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCorpus {
    records: Vec<PairRecord>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Records,
    Shards,
}

impl std::str::FromStr for CorpusFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "records" => Ok(Self::Records),
            "shards" => Ok(Self::Shards),
            other => Err(DataError::Usage(format!(
                "unknown corpus format '{other}' (expected records or shards)"
            ))),
        }
    }
}

impl PairedCorpus {
    pub fn new(records: Vec<PairRecord>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(records.len());
        let dim = records.first().map(|r| r.image.len());
        for (i, r) in records.iter().enumerate() {
            if r.id.is_empty() {
                return Err(DataError::Invalid(format!("record {i} has an empty id")));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(DataError::Invalid(format!("duplicate id '{}'", r.id)));
            }
            if Some(r.image.len()) != dim {
                return Err(DataError::Invalid(format!(
                    "record '{}' has {} image features, expected {}",
                    r.id,
                    r.image.len(),
                    dim.unwrap_or(0)
                )));
            }
            if let Some(bad) = r.image.iter().position(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!(
                    "record '{}' image feature {bad} is not finite",
                    r.id
                )));
            }
        }
        Ok(Self { records, index })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PairRecord> {
        self.records
    }

    pub fn get(&self, id: &str) -> Option<&PairRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn image_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.image.len())
    }

    pub fn captions(&self) -> Vec<String> {
        self.records.iter().map(|r| r.caption.clone()).collect()
    }

    pub fn images(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.image.clone()).collect()
    }
}

/// Parses a line-delimited record stream; blank lines are skipped.
pub fn read_records(reader: impl BufRead, source_name: &str) -> Result<PairedCorpus, DataError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| DataError::Record {
            source_name: source_name.to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        records.push(record);
    }
    PairedCorpus::new(records)
}

pub fn load_records(path: &Path) -> Result<PairedCorpus, DataError> {
    let file = fs::File::open(path)
        .map_err(|e| DataError::Usage(format!("cannot open {}: {e}", path.display())))?;
    read_records(BufReader::new(file), &path.display().to_string())
}

pub fn save_records(corpus: &PairedCorpus, path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in corpus.records() {
        serde_json::to_writer(&mut out, r).map_err(|e| DataError::Invalid(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<PairedCorpus, DataError> {
    match format {
        CorpusFormat::Records => load_records(path),
        CorpusFormat::Shards => load_shards(path),
    }
}


#[cfg(test)]
pub(crate) use tests::fixture;
