use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::{DataError, PairRecord, PairedCorpus};

/// Little-endian f64 image features.
pub const FEATURE_EXT: &str = "feat";
/// UTF-8 caption.
pub const TEXT_EXT: &str = "txt";
/// Optional JSON object of context fields.
pub const META_EXT: &str = "json";

#[derive(Default)]
struct Sample {
    image: Option<Vec<f64>>,
    caption: Option<String>,
    context: BTreeMap<String, String>,
}

fn shard_paths(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| DataError::Usage(format!("cannot read shard directory {}: {e}", path.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tar"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::Usage(format!("no .tar shards in {}", path.display())));
    }
    Ok(paths)
}

fn read_shard(path: &Path, records: &mut Vec<PairRecord>) -> Result<(), DataError> {
    let shard = path.display().to_string();
    let err = |member: &str, detail: String| DataError::Shard {
        shard: shard.clone(),
        member: member.to_string(),
        detail,
    };
    let mut archive = tar::Archive::new(fs::File::open(path)?);
    let mut order: Vec<String> = Vec::new();
    let mut samples: BTreeMap<String, Sample> = BTreeMap::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let Some((base, ext)) = name.rsplit_once('.') else {
            return Err(err(&name, "member name has no extension".into()));
        };
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        if !samples.contains_key(base) {
            order.push(base.to_string());
        }
        let sample = samples.entry(base.to_string()).or_default();
        match ext {
            FEATURE_EXT => {
                if bytes.len() % 8 != 0 {
                    return Err(err(&name, format!("{} bytes is not a whole number of f64", bytes.len())));
                }
                sample.image = Some(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                );
            }
            TEXT_EXT => {
                sample.caption =
                    Some(String::from_utf8(bytes).map_err(|e| err(&name, format!("caption is not UTF-8: {e}")))?);
            }
            META_EXT => {
                sample.context = serde_json::from_slice(&bytes).map_err(|e| err(&name, e.to_string()))?;
            }
            other => return Err(err(&name, format!("unknown member type '.{other}'"))),
        }
    }
    for base in order {
        let sample = samples.remove(&base).expect("recorded basename");
        let image = sample
            .image
            .ok_or_else(|| err(&base, format!("basename '{base}' has no .{FEATURE_EXT} image member")))?;
        let caption = sample
            .caption
            .ok_or_else(|| err(&base, format!("basename '{base}' has no .{TEXT_EXT} caption member")))?;
        records.push(PairRecord {
            id: base,
            image,
            caption,
            context: sample.context,
        });
    }
    Ok(())
}

/// Loads one `.tar` shard or every `.tar` in a directory (sorted by name).
pub fn load_shards(path: &Path) -> Result<PairedCorpus, DataError> {
    let mut records = Vec::new();
    for shard in shard_paths(path)? {
        read_shard(&shard, &mut records)?;
    }
    PairedCorpus::new(records)
}

fn append(builder: &mut tar::Builder<fs::File>, name: &str, bytes: &[u8]) -> Result<(), DataError> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes)?;
    Ok(())
}

/// Writes `shard-NNNNN.tar` files of at most `per_shard` samples each and
/// returns their paths.
pub fn save_shards(corpus: &PairedCorpus, dir: &Path, per_shard: usize) -> Result<Vec<PathBuf>, DataError> {
    if per_shard == 0 {
        return Err(DataError::Usage("per_shard must be positive".into()));
    }
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, chunk) in corpus.records().chunks(per_shard).enumerate() {
        let path = dir.join(format!("shard-{i:05}.tar"));
        let mut builder = tar::Builder::new(fs::File::create(&path)?);
        for r in chunk {
            if r.id.contains('/') {
                return Err(DataError::Usage(format!("id '{}' cannot be a shard basename", r.id)));
            }
            let features: Vec<u8> = r.image.iter().flat_map(|v| v.to_le_bytes()).collect();
            append(&mut builder, &format!("{}.{FEATURE_EXT}", r.id), &features)?;
            append(&mut builder, &format!("{}.{TEXT_EXT}", r.id), r.caption.as_bytes())?;
            if !r.context.is_empty() {
                let meta = serde_json::to_vec(&r.context).map_err(|e| DataError::Invalid(e.to_string()))?;
                append(&mut builder, &format!("{}.{META_EXT}", r.id), &meta)?;
            }
        }
        builder.into_inner()?;
        paths.push(path);
    }
    Ok(paths)
}
