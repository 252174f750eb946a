use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{
    assess_feasibility, augment_caption, expand_acronyms, refine_caption, CaptionRecord, FeasibilityReport,
    GenerationBackend, LongCapError, Stage, TEMPLATE_VERSION,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Records processed concurrently; each worker has at most one request
    /// in flight.
    pub workers: usize,
    /// Attempts per backend request before the record is marked failed.
    pub max_attempts: usize,
    /// Append-only status journal used for resuming.
    pub journal: Option<PathBuf>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            max_attempts: 3,
            journal: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongCapOutput {
    pub id: String,
    pub image_ref: String,
    /// Final caption after refinement and acronym expansion.
    pub caption: String,
    pub original_caption: String,
    pub augmented: String,
    pub refined: String,
    pub features: FeasibilityReport,
    pub low_content: bool,
    pub reprompts: usize,
    pub template_version: String,
    pub backend: String,
}

/// One line of the journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub requests: usize,
    pub template_version: String,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<LongCapOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordStatus {
    pub id: String,
    pub status: Status,
    /// Stage that failed, for failed records.
    pub stage: Option<Stage>,
    pub error: Option<String>,
    /// Backend requests issued in this run (zero for resumed records).
    pub requests: usize,
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    /// Completed records, sorted by id.
    pub outputs: Vec<LongCapOutput>,
    /// Every input record, sorted by id.
    pub statuses: Vec<RecordStatus>,
    pub done: usize,
    pub failed: usize,
    pub resumed: usize,
    pub requests: usize,
}

impl PipelineReport {
    pub fn failure_rate(&self) -> f64 {
        self.failed as f64 / self.statuses.len().max(1) as f64
    }

    pub fn failures_by_stage(&self) -> BTreeMap<Stage, usize> {
        let mut out = BTreeMap::new();
        for s in &self.statuses {
            if let Some(stage) = s.stage {
                *out.entry(stage).or_insert(0) += 1;
            }
        }
        out
    }

    pub const STATUS_CSV_HEADER: &'static str = "id,status,stage,requests,resumed";

    pub fn status_csv(&self) -> String {
        let mut out = format!("{}\n", Self::STATUS_CSV_HEADER);
        for s in &self.statuses {
            let status = match s.status {
                Status::Done => "done",
                Status::Failed => "failed",
            };
            let stage = s.stage.map(|st| st.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{status},{stage},{},{}\n", s.id, s.requests, s.resumed));
        }
        out
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path, tolerate_torn_tail: bool) -> Result<Vec<T>, LongCapError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<(usize, &str)> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (k, &(i, line)) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if tolerate_torn_tail && k + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("{}: ignoring incomplete final line ({e})", path.display());
            }
            Err(e) => {
                return Err(LongCapError::Format {
                    source_name: path.display().to_string(),
                    line: i + 1,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_caption_records(path: &Path) -> Result<Vec<CaptionRecord>, LongCapError> {
    read_lines(path, false)
}

pub fn save_caption_records(records: &[CaptionRecord], path: &Path) -> Result<(), LongCapError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| LongCapError::Usage(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a journal; an incomplete last line (interrupted write) is skipped.
pub fn load_journal(path: &Path) -> Result<Vec<JournalEntry>, LongCapError> {
    read_lines(path, true)
}

/// Writes completed records as sorted, line-delimited JSON.
pub fn write_outputs(report: &PipelineReport, path: &Path) -> Result<(), LongCapError> {
    let mut out = BufWriter::new(File::create(path)?);
    for o in &report.outputs {
        serde_json::to_writer(&mut out, o).map_err(|e| LongCapError::Usage(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn open_journal(path: &Path) -> Result<File, LongCapError> {
    let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        // drop an entry torn by an interrupted write
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        file.set_len(keep as u64)?;
    }
    Ok(file)
}

fn process(
    record: &CaptionRecord,
    backend: &dyn GenerationBackend,
    max_attempts: usize,
    requests: &mut usize,
) -> Result<LongCapOutput, LongCapError> {
    let augmented = augment_caption(record, backend, max_attempts)?;
    *requests += augmented.requests;
    let assessed = assess_feasibility(&record.image_ref, &augmented.value, backend, max_attempts)?;
    *requests += assessed.requests;
    let refined = refine_caption(&augmented.value, &assessed.value, backend, max_attempts)?;
    *requests += refined.requests;
    let caption = expand_acronyms(&refined.value.caption, &record.acronym_map);
    let leaked = assessed.value.leaked_in(&caption);
    if !leaked.is_empty() {
        return Err(LongCapError::Validation {
            stage: Stage::Expand,
            detail: format!("expansion reintroduced: {}", leaked.join(" | ")),
        });
    }
    Ok(LongCapOutput {
        id: record.id.clone(),
        image_ref: record.image_ref.clone(),
        caption,
        original_caption: record.caption.clone(),
        augmented: augmented.value,
        refined: refined.value.caption,
        features: assessed.value,
        low_content: refined.value.low_content,
        reprompts: augmented.reprompts + assessed.reprompts + refined.reprompts,
        template_version: TEMPLATE_VERSION.to_string(),
        backend: backend.descriptor(),
    })
}

/// Runs augment, assess, refine and acronym expansion on every record.
///
/// Single-record failures are recorded and never abort the run. With a
/// journal, records already completed under the same template version and
/// backend are taken from it without contacting the backend; failed records
/// are retried.
pub fn run_pipeline(
    records: &[CaptionRecord],
    backend: &dyn GenerationBackend,
    options: &PipelineOptions,
) -> Result<PipelineReport, LongCapError> {
    if records.is_empty() {
        return Err(LongCapError::Usage("caption corpus is empty".into()));
    }
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.id.as_str()) {
            return Err(LongCapError::Usage(format!("duplicate record id '{}'", r.id)));
        }
    }
    let descriptor = backend.descriptor();

    let mut finished: BTreeMap<String, LongCapOutput> = BTreeMap::new();
    let journal = match &options.journal {
        Some(path) => {
            if path.exists() {
                for entry in load_journal(path)? {
                    let reusable = entry.template_version == TEMPLATE_VERSION && entry.backend == descriptor;
                    match (entry.status, entry.output) {
                        (Status::Done, Some(output)) if reusable => {
                            finished.insert(entry.id, output);
                        }
                        _ => {
                            finished.remove(&entry.id);
                        }
                    }
                }
            }
            Some(Mutex::new(open_journal(path)?))
        }
        None => None,
    };

    let pending: Vec<&CaptionRecord> = records.iter().filter(|r| !finished.contains_key(&r.id)).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(RecordStatus, Option<LongCapOutput>)>> = Mutex::new(Vec::with_capacity(pending.len()));
    let io_error: Mutex<Option<std::io::Error>> = Mutex::new(None);
    let workers = options.workers.clamp(1, pending.len().max(1));

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(record) = pending.get(i) else { break };
                let mut requests = 0;
                let result = process(record, backend, options.max_attempts, &mut requests);
                let entry = match &result {
                    Ok(output) => JournalEntry {
                        id: record.id.clone(),
                        status: Status::Done,
                        stage: None,
                        error: None,
                        requests,
                        template_version: TEMPLATE_VERSION.to_string(),
                        backend: descriptor.clone(),
                        output: Some(output.clone()),
                    },
                    Err(e) => {
                        log::warn!("record '{}' failed: {e}", record.id);
                        JournalEntry {
                            id: record.id.clone(),
                            status: Status::Failed,
                            stage: e.stage(),
                            error: Some(e.to_string()),
                            requests,
                            template_version: TEMPLATE_VERSION.to_string(),
                            backend: descriptor.clone(),
                            output: None,
                        }
                    }
                };
                if let Some(journal) = &journal {
                    let mut line = serde_json::to_string(&entry).expect("journal entry serializes");
                    line.push('\n');
                    let mut file = journal.lock().expect("journal lock");
                    if let Err(e) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
                        io_error.lock().expect("error lock").get_or_insert(e);
                    }
                }
                let status = RecordStatus {
                    id: entry.id,
                    status: entry.status,
                    stage: entry.stage,
                    error: entry.error,
                    requests,
                    resumed: false,
                };
                results.lock().expect("results lock").push((status, result.ok()));
            });
        }
    });
    if let Some(e) = io_error.into_inner().expect("error lock") {
        return Err(e.into());
    }

    let mut statuses = Vec::with_capacity(records.len());
    let mut outputs = Vec::new();
    let resumed = records.len() - pending.len();
    for r in records {
        if let Some(output) = finished.remove(&r.id) {
            statuses.push(RecordStatus {
                id: r.id.clone(),
                status: Status::Done,
                stage: None,
                error: None,
                requests: 0,
                resumed: true,
            });
            outputs.push(output);
        }
    }
    for (status, output) in results.into_inner().expect("results lock") {
        statuses.push(status);
        outputs.extend(output);
    }
    statuses.sort_by(|a, b| a.id.cmp(&b.id));
    outputs.sort_by(|a, b| a.id.cmp(&b.id));
    let failed = statuses.iter().filter(|s| s.status == Status::Failed).count();
    let requests = statuses.iter().map(|s| s.requests).sum();
    log::info!(
        "longcap: {} done, {failed} failed, {resumed} resumed, {requests} requests",
        statuses.len() - failed
    );
    Ok(PipelineReport {
        done: statuses.len() - failed,
        failed,
        resumed,
        requests,
        outputs,
        statuses,
    })
}
