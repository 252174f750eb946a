//! Byte-level BPE tokenizer with a fixed context window and token-waste
//! accounting.
//!
//! Text is split into chunks (an optional single leading space followed by a
//! run of letters, digits, or other symbols; whitespace runs stand alone).
//! Nonempty texts get one leading space prepended before chunking so that
//! the first word tokenizes like every other word; [`Vocab::decode`] strips
//! it again.
//!
//! Content-token convention: `full_length` and every waste statistic count
//! content tokens only. BOS and EOS occupy two of the `context_length` slots
//! and are counted in `visible_length` but never in waste.

mod stats;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stats::{corpus_token_stats, TokenWasteReport};

pub type TokenId = u32;

pub const NUM_BYTES: u32 = 256;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const NUM_SPECIALS: u32 = 3;
const FIRST_MERGE_ID: u32 = NUM_BYTES + NUM_SPECIALS;

/// Upper bound on texts used for merge learning; larger corpora are
/// subsampled with the training seed.
pub const MAX_TRAINING_TEXTS: usize = 200_000;

const MERGES_FILE: &str = "merges.txt";
const TOKENS_FILE: &str = "tokens.txt";
const MERGES_HEADER: &str = "#longclip-bpe merges v1";
const TOKENS_HEADER: &str = "#longclip-bpe tokens v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("{0}")]
    Usage(String),
    #[error("{file}:{line}: {detail}")]
    Format {
        file: String,
        line: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Learned byte-pair vocabulary.
///
/// Ids `0..256` are raw bytes, `256..259` are BOS/EOS/PAD, and merge `k`
/// creates id `259 + k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    merges: Vec<(TokenId, TokenId)>,
    tokens: Vec<Vec<u8>>,
    ranks: HashMap<(TokenId, TokenId), u32>,
    lookup: HashMap<Vec<u8>, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    merges: Vec<(TokenId, TokenId)>,
}

impl From<VocabRepr> for Vocab {
    fn from(repr: VocabRepr) -> Self {
        Vocab::from_merges(repr.merges)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { merges: v.merges }
    }
}

/// Token ids for one text, padded to the context window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    /// Content tokens before truncation.
    pub full_length: usize,
    /// Non-PAD slots, BOS and EOS included.
    pub visible_length: usize,
    pub truncated: bool,
}

impl TokenSeq {
    pub fn context_length(&self) -> usize {
        self.ids.len()
    }

    /// Content tokens that made it into the window.
    pub fn visible_content(&self) -> &[TokenId] {
        &self.ids[1..self.visible_length - 1]
    }

    pub fn visible_ids(&self) -> &[TokenId] {
        &self.ids[..self.visible_length]
    }

    /// Content tokens dropped by truncation.
    pub fn wasted(&self) -> usize {
        self.full_length - (self.visible_length - 2)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Letter,
    Digit,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Splits text into BPE chunks. Merges never cross chunk boundaries.
pub fn pretokenize(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let prefixed: Vec<char> = std::iter::once(' ').chain(text.chars()).collect();
    let n = prefixed.len();
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < n {
        let class = class_of(prefixed[i]);
        if class == CharClass::Space {
            let mut j = i;
            while j < n && class_of(prefixed[j]) == CharClass::Space {
                j += 1;
            }
            let attaches = j < n && prefixed[j - 1] == ' ';
            if attaches && j - 1 > i {
                chunks.push(prefixed[i..j - 1].iter().collect());
                i = j - 1;
            } else if attaches {
                let word_class = class_of(prefixed[j]);
                let mut k = j;
                while k < n && class_of(prefixed[k]) == word_class {
                    k += 1;
                }
                chunks.push(prefixed[i..k].iter().collect());
                i = k;
            } else {
                chunks.push(prefixed[i..j].iter().collect());
                i = j;
            }
        } else {
            let mut j = i;
            while j < n && class_of(prefixed[j]) == class {
                j += 1;
            }
            chunks.push(prefixed[i..j].iter().collect());
            i = j;
        }
    }
    chunks
}

fn merge_pair(symbols: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns merges until the vocabulary holds `vocab_size` ids or no adjacent
/// pair occurs at least twice.
///
/// Frequency ties are broken by the byte-lexicographic order of the pair
/// `(left bytes, right bytes)`, smallest first.
pub fn train_bpe(corpus: &[String], vocab_size: usize, seed: u64) -> Result<Vocab, TokenizerError> {
    let min_size = (NUM_BYTES + NUM_SPECIALS) as usize;
    if vocab_size < min_size {
        return Err(TokenizerError::Usage(format!(
            "vocab_size {vocab_size} is below the {min_size} byte and special ids"
        )));
    }
    if corpus.is_empty() {
        return Err(TokenizerError::Usage("training corpus is empty".into()));
    }
    let selected: Vec<&String> = if corpus.len() > MAX_TRAINING_TEXTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, corpus.len(), MAX_TRAINING_TEXTS).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &corpus[i]).collect()
    } else {
        corpus.iter().collect()
    };

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for text in selected {
        for chunk in pretokenize(text) {
            *counts.entry(chunk).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.bytes().map(TokenId::from).collect(), c))
        .collect();

    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    tokens.extend([Vec::new(), Vec::new(), Vec::new()]);
    let mut merges = Vec::new();

    while tokens.len() < vocab_size {
        let mut pairs: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += count;
            }
        }
        let best = pairs.into_iter().filter(|&(_, c)| c >= 2).max_by(|a, b| {
            a.1.cmp(&b.1).then_with(|| {
                let ka = (&tokens[a.0 .0 as usize], &tokens[a.0 .1 as usize]);
                let kb = (&tokens[b.0 .0 as usize], &tokens[b.0 .1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some((pair, _)) = best else {
            break;
        };
        let new_id = tokens.len() as TokenId;
        let mut bytes = tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&tokens[pair.1 as usize]);
        tokens.push(bytes);
        merges.push(pair);
        for (symbols, _) in &mut words {
            if symbols.len() > 1 {
                merge_pair(symbols, pair, new_id);
            }
        }
    }
    Ok(Vocab::from_merges(merges))
}

impl Vocab {
    /// Rebuilds the token table from an ordered merge list.
    pub fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.extend([Vec::new(), Vec::new(), Vec::new()]);
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut bytes = tokens[a as usize].clone();
            bytes.extend_from_slice(&tokens[b as usize]);
            tokens.push(bytes);
            ranks.insert((a, b), rank as u32);
        }
        let lookup = tokens
            .iter()
            .enumerate()
            .filter(|(id, _)| !is_special(*id as TokenId))
            .map(|(id, bytes)| (bytes.clone(), id as TokenId))
            .collect();
        Self {
            merges,
            tokens,
            ranks,
            lookup,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> &[u8] {
        &self.tokens[id as usize]
    }

    /// Id of a chunk that is a single token, e.g. `" word"`.
    pub fn token_id(&self, chunk: &str) -> Option<TokenId> {
        self.lookup.get(chunk.as_bytes()).copied()
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<TokenId>) {
        if let Some(&id) = self.lookup.get(chunk.as_bytes()) {
            out.push(id);
            return;
        }
        let mut symbols: Vec<TokenId> = chunk.bytes().map(TokenId::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else {
                break;
            };
            merge_pair(&mut symbols, pair, FIRST_MERGE_ID + rank);
        }
        out.extend(symbols);
    }

    /// Content token ids of `text`, without specials or truncation.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            self.encode_chunk(&chunk, &mut out);
        }
        out
    }

    /// `BOS content EOS PAD...`, keeping the first `context_length - 2`
    /// content tokens.
    pub fn encode(&self, text: &str, context_length: usize) -> Result<TokenSeq, TokenizerError> {
        if context_length < 3 {
            return Err(TokenizerError::Usage(format!(
                "context_length {context_length} leaves no room for BOS, content and EOS"
            )));
        }
        let content = self.tokenize(text);
        let capacity = context_length - 2;
        let kept = content.len().min(capacity);
        let mut ids = Vec::with_capacity(context_length);
        ids.push(BOS);
        ids.extend_from_slice(&content[..kept]);
        ids.push(EOS);
        let visible_length = ids.len();
        ids.resize(context_length, PAD);
        Ok(TokenSeq {
            ids,
            full_length: content.len(),
            visible_length,
            truncated: content.len() > capacity,
        })
    }

    /// Inverse of [`Vocab::tokenize`]; specials are skipped and the leading
    /// space added at encode time is removed.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| !is_special(id))
            .flat_map(|&id| self.tokens[id as usize].iter().copied())
            .collect();
        let text = String::from_utf8_lossy(&bytes);
        text.strip_prefix(' ').unwrap_or(&text).to_string()
    }

    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        fs::create_dir_all(dir)?;
        let mut merges = fs::File::create(dir.join(MERGES_FILE))?;
        writeln!(merges, "{MERGES_HEADER}")?;
        for &(a, b) in &self.merges {
            writeln!(
                merges,
                "{} {}",
                hex::encode(&self.tokens[a as usize]),
                hex::encode(&self.tokens[b as usize])
            )?;
        }
        let mut table = fs::File::create(dir.join(TOKENS_FILE))?;
        writeln!(table, "{TOKENS_HEADER}")?;
        for (id, bytes) in self.tokens.iter().enumerate() {
            let kind = match id as TokenId {
                BOS => "bos",
                EOS => "eos",
                PAD => "pad",
                i if i < NUM_BYTES => "byte",
                _ => "merge",
            };
            writeln!(table, "{id}\t{kind}\t{}", hex::encode(bytes))?;
        }
        Ok(())
    }

    /// Loads a merge list and cross-checks it against the token table.
    pub fn load(dir: &Path) -> Result<Self, TokenizerError> {
        let merges_path = dir.join(MERGES_FILE);
        let text = fs::read_to_string(&merges_path)?;
        let file = merges_path.display().to_string();
        let format_err = |line: usize, detail: String| TokenizerError::Format {
            file: file.clone(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MERGES_HEADER)) => {}
            _ => return Err(format_err(1, format!("expected header '{MERGES_HEADER}'"))),
        }
        let mut lookup: HashMap<Vec<u8>, TokenId> =
            (0..=255u8).map(|b| (vec![b], TokenId::from(b))).collect();
        let mut merges = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 {
                return Err(format_err(idx + 1, "expected two hex fields".into()));
            }
            let mut ids = [0; 2];
            let mut joined = Vec::new();
            for (slot, part) in ids.iter_mut().zip(&parts) {
                let bytes = hex::decode(part)
                    .map_err(|e| format_err(idx + 1, format!("bad hex '{part}': {e}")))?;
                *slot = *lookup
                    .get(&bytes)
                    .ok_or_else(|| format_err(idx + 1, format!("unknown token '{part}'")))?;
                joined.extend(bytes);
            }
            lookup.insert(joined, FIRST_MERGE_ID + merges.len() as TokenId);
            merges.push((ids[0], ids[1]));
        }
        let vocab = Vocab::from_merges(merges);

        let table_path = dir.join(TOKENS_FILE);
        if table_path.exists() {
            let table = fs::read_to_string(&table_path)?;
            let rows = table.lines().skip(1).filter(|l| !l.is_empty()).count();
            if rows != vocab.len() {
                return Err(TokenizerError::Format {
                    file: table_path.display().to_string(),
                    line: 1,
                    detail: format!("{rows} tokens listed, merges imply {}", vocab.len()),
                });
            }
        }
        Ok(vocab)
    }
}

pub fn is_special(id: TokenId) -> bool {
    (NUM_BYTES..FIRST_MERGE_ID).contains(&id)
}
