use std::collections::VecDeque;
use std::env;
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use super::{Label, ASSESS_TEMPLATE, AUGMENT_TEMPLATE, REFINE_TEMPLATE};

/// Environment variable holding the bearer token for [`HttpBackend`].
pub const TOKEN_ENV: &str = "LONGCAP_API_TOKEN";

/// Failure of a single generation request. Every variant is retriable.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("{0}")]
    Failed(String),
}

/// Text generator conditioned on a prompt and an opaque image reference.
pub trait GenerationBackend: Sync {
    fn generate(&self, prompt: &str, image_ref: Option<&str>) -> Result<String, BackendError>;

    /// Endpoint URL, or `mock`.
    fn descriptor(&self) -> String;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for &B {
    fn generate(&self, prompt: &str, image_ref: Option<&str>) -> Result<String, BackendError> {
        (**self).generate(prompt, image_ref)
    }

    fn descriptor(&self) -> String {
        (**self).descriptor()
    }
}

// ---------------------------------------------------------------------------
// Deterministic mock
// ---------------------------------------------------------------------------

const LEADS: [&str; 3] = ["Per the text:", "From the article:", "The article adds:"];

const NON_VISUAL: [&str; 14] = [
    "patient",
    "survival",
    "outcome",
    "prognos",
    "improved",
    "cohort",
    "treatment",
    "study",
    "background",
    "clinical",
    "mortality",
    "we ",
    "years",
    "significant",
];

/// In-process backend whose reply is a pure function of
/// `(prompt, image_ref, seed)`.
///
/// It recognizes the three step templates by their header line:
/// augmentation echoes the caption and appends the referring sentences and
/// the first abstract sentence, assessment splits the caption into sentences
/// and labels those mentioning clinical or study-level facts NOT_FEASIBLE,
/// and refinement deletes the NOT_FEASIBLE sentences.
#[derive(Debug, Clone, Copy)]
pub struct MockBackend {
    seed: u64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn pick(&self, prompt: &str, image_ref: Option<&str>, salt: usize) -> usize {
        let mut bytes = Vec::with_capacity(prompt.len() + 32);
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        bytes.extend_from_slice(&(salt as u64).to_le_bytes());
        bytes.extend_from_slice(image_ref.unwrap_or("").as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(prompt.as_bytes());
        (crate::fnv1a(&bytes) % LEADS.len() as u64) as usize
    }

    fn augment(&self, prompt: &str, image_ref: Option<&str>) -> String {
        let mut out = section(prompt, "caption").unwrap_or("").trim().to_string();
        for (i, mention) in list_items(section(prompt, "inline_mentions").unwrap_or("")).enumerate() {
            let lead = LEADS[self.pick(prompt, image_ref, i)];
            out.push(' ');
            out.push_str(lead);
            out.push(' ');
            out.push_str(&ensure_period(mention));
        }
        let abstract_text = section(prompt, "abstract").unwrap_or("").trim();
        if let Some(first) = sentences(abstract_text).next() {
            out.push_str(" Study background: ");
            out.push_str(&ensure_period(first));
        }
        out
    }

    fn assess(&self, prompt: &str) -> String {
        let caption = section(prompt, "caption").unwrap_or("");
        let mut out = String::from("<features>\n");
        for s in sentences(caption) {
            let lower = s.to_lowercase();
            let (label, rationale) = match NON_VISUAL.iter().find(|k| lower.contains(*k)) {
                Some(k) => (Label::NotFeasible, format!("mentions '{}', which the image cannot show", k.trim())),
                None => (Label::Feasible, "describes visible content".to_string()),
            };
            out.push_str(&format!(
                "  <feature label=\"{}\" rationale=\"{}\">{}</feature>\n",
                label.as_str(),
                xml_escape(&rationale),
                xml_escape(s)
            ));
        }
        out.push_str("</features>");
        out
    }

    fn refine(&self, prompt: &str) -> String {
        let caption = section(prompt, "caption").unwrap_or("");
        let feasible: Vec<&str> = list_items(section(prompt, "feasible").unwrap_or("")).collect();
        let not_feasible: Vec<&str> = list_items(section(prompt, "not_feasible").unwrap_or("")).collect();
        if feasible.is_empty() {
            return "An image.".to_string();
        }
        let mut out = caption.to_string();
        for text in not_feasible {
            out = out.replace(text, " ");
        }
        out.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

impl GenerationBackend for MockBackend {
    fn generate(&self, prompt: &str, image_ref: Option<&str>) -> Result<String, BackendError> {
        let header = prompt.lines().next().unwrap_or("");
        if header == first_line(AUGMENT_TEMPLATE) {
            Ok(self.augment(prompt, image_ref))
        } else if header == first_line(ASSESS_TEMPLATE) {
            Ok(self.assess(prompt))
        } else if header == first_line(REFINE_TEMPLATE) {
            Ok(self.refine(prompt))
        } else {
            Err(BackendError::Failed(format!("mock backend does not recognize prompt header '{header}'")))
        }
    }

    fn descriptor(&self) -> String {
        "mock".to_string()
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("")
}

/// Text between `<tag>\n` and `\n</tag>`.
fn section<'a>(prompt: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>\n");
    let close = format!("\n</{tag}>");
    let start = prompt.find(&open)? + open.len();
    let end = start + prompt[start..].find(&close)?;
    Some(&prompt[start..end])
}

/// Lines written as `- item`; `(none)` stands for an empty list.
fn list_items(block: &str) -> impl Iterator<Item = &str> {
    block.lines().filter_map(|l| l.strip_prefix("- ")).map(str::trim).filter(|l| !l.is_empty())
}

/// Sentences ending in `.`, `!` or `?` followed by whitespace, or at a line
/// break; each is a verbatim slice of the input.
fn sentences(text: &str) -> impl Iterator<Item = &str> {
    let mut pieces = Vec::new();
    for line in text.lines() {
        let mut start = 0;
        let chars: Vec<(usize, char)> = line.char_indices().collect();
        for (k, &(i, c)) in chars.iter().enumerate() {
            let at_break = matches!(c, '.' | '!' | '?') && chars.get(k + 1).is_some_and(|&(_, n)| n.is_whitespace());
            if at_break {
                pieces.push(&line[start..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        pieces.push(&line[start..]);
    }
    pieces.into_iter().map(str::trim).filter(|s| !s.is_empty())
}

fn ensure_period(s: &str) -> String {
    let s = s.trim();
    if s.ends_with(['.', '!', '?']) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

pub(crate) fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Test doubles
// ---------------------------------------------------------------------------

/// Replays a fixed list of replies in order, then fails.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<Result<String, BackendError>>>,
}

impl ScriptedBackend {
    pub fn new(replies: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
        }
    }

    pub fn from_texts<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("script lock").len()
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, _prompt: &str, _image_ref: Option<&str>) -> Result<String, BackendError> {
        self.replies
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::Failed("script exhausted".into())))
    }

    fn descriptor(&self) -> String {
        "mock".to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub prompt: String,
    pub image_ref: Option<String>,
}

/// Wraps a backend and logs every request sent through it.
#[derive(Debug)]
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<Request>>,
}

impl<B: GenerationBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<Request> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().expect("log lock").len()
    }
}

impl<B: GenerationBackend> GenerationBackend for RecordingBackend<B> {
    fn generate(&self, prompt: &str, image_ref: Option<&str>) -> Result<String, BackendError> {
        self.log.lock().expect("log lock").push(Request {
            prompt: prompt.to_string(),
            image_ref: image_ref.map(str::to_string),
        });
        self.inner.generate(prompt, image_ref)
    }

    fn descriptor(&self) -> String {
        self.inner.descriptor()
    }
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    prompt: &'a str,
    image_ref: Option<&'a str>,
}

/// POSTs `{"prompt", "image_ref"}` as JSON and reads the reply body as plain
/// text. A bearer token is sent when [`TOKEN_ENV`] is set.
pub struct HttpBackend {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("token", &self.token.as_ref().map(|_| "<set>"))
            .finish()
    }
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let token = env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::with_token(endpoint, timeout, token)
    }

    pub fn with_token(endpoint: impl Into<String>, timeout: Duration, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self {
            endpoint: endpoint.into(),
            token,
            agent,
        }
    }
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, prompt: &str, image_ref: Option<&str>) -> Result<String, BackendError> {
        let body = serde_json::to_string(&HttpRequestBody { prompt, image_ref })
            .map_err(|e| BackendError::Failed(e.to_string()))?;
        let mut request = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Failed(other.to_string()),
        })?;
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Failed(e.to_string()))
    }

    fn descriptor(&self) -> String {
        self.endpoint.clone()
    }
}
