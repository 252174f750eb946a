use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderError, Model};
use crate::tokenizer::Vocab;

pub const CHECKPOINT_FORMAT: &str = "longclip-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing JSON container: configs, every parameter array, the
/// temperature exponent, the tokenizer merges and free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: Model,
    pub vocab: Vocab,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocab) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
            vocab,
            metadata: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let json = serde_json::to_string(self).map_err(|e| EncoderError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let fail = |detail: String| EncoderError::Checkpoint {
            path: path.display().to_string(),
            detail,
        };
        let text = fs::read_to_string(path)?;
        let header: serde_json::Value = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        if header.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(fail(format!("not a {CHECKPOINT_FORMAT} file")));
        }
        let version = header.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(fail(format!(
                "unsupported version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let ckpt: Checkpoint = serde_json::from_value(header).map_err(|e| fail(e.to_string()))?;
        ckpt.model
            .params
            .check(&ckpt.model.text, &ckpt.model.image)
            .map_err(|e| fail(e.to_string()))?;
        if ckpt.vocab.len() > ckpt.model.text.vocab_size {
            return Err(fail(format!(
                "tokenizer has {} ids but the text tower only {}",
                ckpt.vocab.len(),
                ckpt.model.text.vocab_size
            )));
        }
        Ok(ckpt)
    }
}
