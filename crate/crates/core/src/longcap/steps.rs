use super::{
    render, CaptionRecord, FeasibilityReport, Feature, GenerationBackend, Label, LongCapError, Stage,
    ASSESS_TEMPLATE, AUGMENT_TEMPLATE, REFINE_TEMPLATE, REPAIR_REFINE_TEMPLATE, REPAIR_XML_TEMPLATE,
};

/// A step result with the number of backend requests it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub value: T,
    pub requests: usize,
    /// Repair reprompts issued after a parse or validation failure.
    pub reprompts: usize,
}

pub type Assessment = StepOutput<FeasibilityReport>;

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub caption: String,
    /// No feature survived, so the caption is a generic description.
    pub low_content: bool,
}

struct Caller<'a> {
    backend: &'a dyn GenerationBackend,
    stage: Stage,
    max_attempts: usize,
    requests: usize,
}

impl<'a> Caller<'a> {
    fn new(backend: &'a dyn GenerationBackend, stage: Stage, max_attempts: usize) -> Self {
        Self {
            backend,
            stage,
            max_attempts: max_attempts.max(1),
            requests: 0,
        }
    }

    /// One logical request, retried on backend failure.
    fn call(&mut self, prompt: &str, image_ref: Option<&str>) -> Result<String, LongCapError> {
        let mut last = None;
        for attempt in 1..=self.max_attempts {
            self.requests += 1;
            match self.backend.generate(prompt, image_ref) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("{}: attempt {attempt}/{} failed: {e}", self.stage, self.max_attempts);
                    last = Some(e);
                }
            }
        }
        Err(LongCapError::Backend {
            stage: self.stage,
            attempts: self.max_attempts,
            detail: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }
}

fn bullet_list<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    let lines: Vec<String> = items.into_iter().map(|s| format!("- {}", s.trim())).collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        "(none)"
    } else {
        s.trim()
    }
}

/// Asks the backend for a caption enriched with the record's context.
pub fn augment_caption(
    record: &CaptionRecord,
    backend: &dyn GenerationBackend,
    max_attempts: usize,
) -> Result<StepOutput<String>, LongCapError> {
    record.validate()?;
    let acronyms: Vec<String> = record.acronym_map.iter().map(|(a, e)| format!("{a}: {e}")).collect();
    let prompt = render(
        AUGMENT_TEMPLATE,
        &[
            ("caption", record.caption.trim()),
            ("inline_mentions", &bullet_list(record.inline_mentions.iter().map(String::as_str))),
            ("abstract", or_none(&record.abstract_text)),
            ("acronyms", &bullet_list(acronyms.iter().map(String::as_str))),
        ],
    );
    let mut caller = Caller::new(backend, Stage::Augment, max_attempts);
    let image_ref = Some(record.image_ref.as_str());
    let mut reprompts = 0;
    let mut text = caller.call(&prompt, image_ref)?;
    if text.trim().is_empty() {
        reprompts += 1;
        text = caller.call(&prompt, image_ref)?;
    }
    if text.trim().is_empty() {
        return Err(LongCapError::Validation {
            stage: Stage::Augment,
            detail: "backend returned an empty caption".into(),
        });
    }
    Ok(StepOutput {
        value: text.trim().to_string(),
        requests: caller.requests,
        reprompts,
    })
}

/// Parses a `<features>` document of `<feature label=".." rationale="..">`
/// elements. Surrounding prose or code fences are ignored.
pub fn parse_feasibility_xml(text: &str) -> Result<FeasibilityReport, String> {
    let start = text.find("<features").ok_or("no <features> element")?;
    let end = match text.rfind("</features>") {
        Some(i) => i + "</features>".len(),
        None => text.len(),
    };
    if end <= start {
        return Err("misplaced </features>".into());
    }
    let doc = roxmltree::Document::parse(&text[start..end]).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    if root.tag_name().name() != "features" {
        return Err(format!("root element is <{}>, expected <features>", root.tag_name().name()));
    }
    let mut features = Vec::new();
    for node in root.children() {
        if node.is_text() {
            if node.text().is_some_and(|t| !t.trim().is_empty()) {
                return Err("stray text inside <features>".into());
            }
            continue;
        }
        if !node.is_element() {
            continue;
        }
        let n = features.len() + 1;
        if node.tag_name().name() != "feature" {
            return Err(format!("element {n} is <{}>, expected <feature>", node.tag_name().name()));
        }
        let label = node.attribute("label").ok_or_else(|| format!("feature {n} has no label"))?;
        let label = Label::parse(label).ok_or_else(|| format!("feature {n} has unknown label '{label}'"))?;
        let rationale = node
            .attribute("rationale")
            .ok_or_else(|| format!("feature {n} has no rationale"))?
            .trim()
            .to_string();
        let text: String = node.descendants().filter(|d| d.is_text()).filter_map(|d| d.text()).collect();
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(format!("feature {n} has no text"));
        }
        features.push(Feature { text, label, rationale });
    }
    Ok(FeasibilityReport { features })
}

/// Splits a caption into labelled atomic features. A malformed reply gets one
/// repair reprompt.
pub fn assess_feasibility(
    image_ref: &str,
    caption: &str,
    backend: &dyn GenerationBackend,
    max_attempts: usize,
) -> Result<Assessment, LongCapError> {
    if caption.trim().is_empty() {
        return Err(LongCapError::Usage("cannot assess an empty caption".into()));
    }
    let prompt = render(ASSESS_TEMPLATE, &[("image_ref", image_ref), ("caption", caption.trim())]);
    let parse = |text: &str| {
        parse_feasibility_xml(text).and_then(|r| {
            if r.features.is_empty() {
                Err("no features for a nonempty caption".to_string())
            } else {
                Ok(r)
            }
        })
    };
    let mut caller = Caller::new(backend, Stage::Assess, max_attempts);
    let reply = caller.call(&prompt, Some(image_ref))?;
    let first_error = match parse(&reply) {
        Ok(report) => {
            return Ok(StepOutput {
                value: report,
                requests: caller.requests,
                reprompts: 0,
            })
        }
        Err(e) => e,
    };
    log::info!("assess: reply for {image_ref} did not parse ({first_error}); reprompting");
    let repair = format!("{prompt}{}", render(REPAIR_XML_TEMPLATE, &[("error", &first_error)]));
    let reply = caller.call(&repair, Some(image_ref))?;
    match parse(&reply) {
        Ok(report) => {
            log::info!("assess: {image_ref} parsed after 1 reprompt");
            Ok(StepOutput {
                value: report,
                requests: caller.requests,
                reprompts: 1,
            })
        }
        Err(detail) => Err(LongCapError::Parse {
            stage: Stage::Assess,
            detail,
        }),
    }
}

/// Rewrites the caption keeping only FEASIBLE features. The reply must not
/// contain any NOT_FEASIBLE feature verbatim; one repair reprompt is allowed.
pub fn refine_caption(
    caption: &str,
    report: &FeasibilityReport,
    backend: &dyn GenerationBackend,
    max_attempts: usize,
) -> Result<StepOutput<Refinement>, LongCapError> {
    if report.features.is_empty() {
        return Err(LongCapError::Usage("cannot refine against an empty feasibility report".into()));
    }
    let feasible = bullet_list(report.with_label(Label::Feasible).map(|f| f.text.as_str()));
    let not_feasible = bullet_list(report.with_label(Label::NotFeasible).map(|f| f.text.as_str()));
    let prompt = render(
        REFINE_TEMPLATE,
        &[("caption", caption.trim()), ("feasible", &feasible), ("not_feasible", &not_feasible)],
    );
    let low_content = report.with_label(Label::Feasible).next().is_none();
    let problems = |reply: &str| -> Vec<String> {
        let mut out: Vec<String> = report.leaked_in(reply).into_iter().map(str::to_string).collect();
        if reply.trim().is_empty() {
            out.push("(empty reply)".to_string());
        }
        out
    };

    let mut caller = Caller::new(backend, Stage::Refine, max_attempts);
    let mut reply = caller.call(&prompt, None)?;
    let mut reprompts = 0;
    let found = problems(&reply);
    if !found.is_empty() {
        reprompts = 1;
        log::info!("refine: {} leaked feature(s); reprompting", found.len());
        let offending = bullet_list(found.iter().map(String::as_str));
        let repair = format!("{prompt}{}", render(REPAIR_REFINE_TEMPLATE, &[("offending", &offending)]));
        reply = caller.call(&repair, None)?;
        let found = problems(&reply);
        if !found.is_empty() {
            return Err(LongCapError::Validation {
                stage: Stage::Refine,
                detail: format!("reply still contains: {}", found.join(" | ")),
            });
        }
    }
    Ok(StepOutput {
        value: Refinement {
            caption: reply.trim().to_string(),
            low_content,
        },
        requests: caller.requests,
        reprompts,
    })
}
