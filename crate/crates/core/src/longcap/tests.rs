use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;

fn record(id: &str, caption: &str) -> CaptionRecord {
    CaptionRecord {
        id: id.into(),
        image_ref: format!("{id}.png"),
        caption: caption.into(),
        inline_mentions: Vec::new(),
        abstract_text: String::new(),
        acronym_map: BTreeMap::new(),
    }
}

fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(a, e)| (a.to_string(), e.to_string())).collect()
}

const ONE_FEASIBLE: &str = r#"<features><feature label="FEASIBLE" rationale="visible">opacity in the left lung</feature></features>"#;

// --- acronyms -------------------------------------------------------------

#[test]
fn acronym_first_occurrence_only() {
    let m = map(&[("CXR", "chest X-ray")]);
    assert_eq!(expand_acronyms("CXR shows opacity", &m), "chest X-ray (CXR) shows opacity");
    assert_eq!(
        expand_acronyms("CXR shows opacity; repeat CXR is clear", &m),
        "chest X-ray (CXR) shows opacity; repeat CXR is clear"
    );
}

#[test]
fn acronym_edge_cases() {
    assert_eq!(expand_acronyms("CXR shows opacity", &BTreeMap::new()), "CXR shows opacity");
    let m = map(&[("CXR", "chest X-ray")]);
    assert_eq!(expand_acronyms("SCXRT planning", &m), "SCXRT planning");
    assert_eq!(expand_acronyms("cxr is lowercase", &m), "cxr is lowercase");
    assert_eq!(expand_acronyms("(CXR), then", &m), "(chest X-ray (CXR)), then");
    // already expanded text is left alone
    assert_eq!(expand_acronyms("chest X-ray (CXR) again", &m), "chest X-ray (CXR) again");
    let m = map(&[("H&E", "hematoxylin and eosin"), ("LV", "left ventricle")]);
    assert_eq!(
        expand_acronyms("LV wall on H&E; LV again", &m),
        "left ventricle (LV) wall on hematoxylin and eosin (H&E); LV again"
    );
}

#[test]
fn expansions_are_not_rescanned() {
    let m = map(&[("CT", "computed tomography"), ("MR", "magnetic CT resonance")]);
    assert_eq!(expand_acronyms("MR then CT", &m), "magnetic CT resonance (MR) then computed tomography (CT)");
}

#[test]
fn render_is_single_pass() {
    let out = render("a {x} b {y} {unknown}", &[("x", "{y}"), ("y", "Y")]);
    assert_eq!(out, "a {y} b Y {unknown}");
}

// --- augment ---------------------------------------------------------------

#[test]
fn augment_without_context_keeps_caption() {
    let r = record("a", "Fundus photograph of the right eye.");
    let out = augment_caption(&r, &MockBackend::new(0), 3).unwrap();
    assert!(out.value.contains("Fundus photograph of the right eye."));
    assert_eq!(out.requests, 1);
}

#[test]
fn augment_is_deterministic_and_echoes_stain() {
    let fixture = fixture_records();
    let r = &fixture[1];
    assert!(r.inline_mentions.iter().any(|m| m.contains("Masson trichrome")));
    let a = augment_caption(r, &MockBackend::new(7), 3).unwrap();
    let b = augment_caption(r, &MockBackend::new(7), 3).unwrap();
    assert_eq!(a, b);
    assert!(a.value.contains("Masson trichrome"));
    assert!(a.value.starts_with(r.caption.as_str()));
}

#[test]
fn augment_prompt_carries_all_context() {
    let fixture = fixture_records();
    let r = &fixture[0];
    let backend = RecordingBackend::new(MockBackend::new(0));
    augment_caption(r, &backend, 3).unwrap();
    let req = &backend.requests()[0];
    assert!(req.prompt.starts_with("#longcap-v1 augment"));
    assert!(req.prompt.contains(&r.caption));
    assert!(req.prompt.contains(&r.inline_mentions[0]));
    assert!(req.prompt.contains("viral pneumonia"));
    assert!(req.prompt.contains("- CXR: chest X-ray"));
    assert_eq!(req.image_ref.as_deref(), Some(r.image_ref.as_str()));
}

#[test]
fn backend_failures_are_retried_then_reported() {
    let r = record("a", "x");
    let backend = ScriptedBackend::new([Err(BackendError::Timeout), Ok("fine".to_string())]);
    let out = augment_caption(&r, &backend, 3).unwrap();
    assert_eq!((out.value.as_str(), out.requests), ("fine", 2));

    let backend = ScriptedBackend::new(vec![Err(BackendError::Timeout); 5]);
    let err = augment_caption(&r, &backend, 3).unwrap_err();
    assert!(matches!(err, LongCapError::Backend { stage: Stage::Augment, attempts: 3, .. }), "{err}");
    assert_eq!(backend.remaining(), 2);
}

// --- assess ---------------------------------------------------------------

#[test]
fn one_feasible_feature() {
    let backend = ScriptedBackend::from_texts([ONE_FEASIBLE]);
    let out = assess_feasibility("x.png", "Opacity in the left lung.", &backend, 3).unwrap();
    assert_eq!(out.value.features.len(), 1);
    assert_eq!(out.value.features[0].label, Label::Feasible);
    assert_eq!(out.reprompts, 0);
}

#[test]
fn invalid_xml_then_valid_needs_one_reprompt() {
    let backend = RecordingBackend::new(ScriptedBackend::from_texts(["<features><feature label=", ONE_FEASIBLE]));
    let out = assess_feasibility("x.png", "Opacity.", &backend, 3).unwrap();
    assert_eq!((out.reprompts, out.requests), (1, 2));
    let reqs = backend.requests();
    assert!(reqs[1].prompt.starts_with(&reqs[0].prompt));
    assert!(reqs[1].prompt.contains("#repair"));
}

#[test]
fn two_bad_replies_fail_with_parse_error() {
    let backend = ScriptedBackend::from_texts(["nope", "<features><feature label=\"MAYBE\" rationale=\"\">x</feature></features>"]);
    let err = assess_feasibility("x.png", "Opacity.", &backend, 3).unwrap_err();
    assert!(matches!(err, LongCapError::Parse { stage: Stage::Assess, .. }), "{err}");
    assert!(err.to_string().contains("MAYBE"));
}

#[test]
fn not_feasible_label_preserved() {
    let xml = r#"```xml
<features>
  <feature label="FEASIBLE" rationale="shown">Kaplan-Meier curve with two arms</feature>
  <feature label="NOT_FEASIBLE" rationale="requires follow-up data">patient survival improved</feature>
</features>
```"#;
    let backend = ScriptedBackend::from_texts([xml]);
    let out = assess_feasibility("km.png", "Kaplan-Meier curve with two arms; patient survival improved", &backend, 3)
        .unwrap();
    let f = &out.value.features[1];
    assert_eq!((f.text.as_str(), f.label), ("patient survival improved", Label::NotFeasible));
    assert_eq!(f.rationale, "requires follow-up data");
}

#[test]
fn xml_schema_violations() {
    assert!(parse_feasibility_xml("<features/>").unwrap().features.is_empty());
    for bad in [
        "<feats><feature label=\"FEASIBLE\" rationale=\"r\">x</feature></feats>",
        "<features><feature rationale=\"r\">x</feature></features>",
        "<features><feature label=\"FEASIBLE\">x</feature></features>",
        "<features><feature label=\"FEASIBLE\" rationale=\"r\"> </feature></features>",
        "<features><item label=\"FEASIBLE\" rationale=\"r\">x</item></features>",
        "<features>loose<feature label=\"FEASIBLE\" rationale=\"r\">x</feature></features>",
    ] {
        assert!(parse_feasibility_xml(bad).is_err(), "{bad}");
    }
    let escaped = "<features><feature label=\"FEASIBLE\" rationale=\"a &amp; b\">H&amp;E &lt;x&gt;</feature></features>";
    let r = parse_feasibility_xml(escaped).unwrap();
    assert_eq!((r.features[0].text.as_str(), r.features[0].rationale.as_str()), ("H&E <x>", "a & b"));
}

// --- refine ---------------------------------------------------------------

fn report(features: &[(&str, Label)]) -> FeasibilityReport {
    FeasibilityReport {
        features: features
            .iter()
            .map(|(t, l)| Feature {
                text: t.to_string(),
                label: *l,
                rationale: String::new(),
            })
            .collect(),
    }
}

#[test]
fn all_feasible_returns_input() {
    let caption = "Axial CT of the abdomen. A hypodense lesion is visible.";
    let rep = report(&[("Axial CT of the abdomen.", Label::Feasible), ("A hypodense lesion is visible.", Label::Feasible)]);
    let out = refine_caption(caption, &rep, &MockBackend::new(0), 3).unwrap();
    assert_eq!(out.value.caption, caption);
    assert!(!out.value.low_content);
}

#[test]
fn not_feasible_feature_removed() {
    let caption = "Axial CT of the abdomen. Patient survival improved after resection.";
    let rep = report(&[
        ("Axial CT of the abdomen.", Label::Feasible),
        ("Patient survival improved after resection.", Label::NotFeasible),
    ]);
    let out = refine_caption(caption, &rep, &MockBackend::new(0), 3).unwrap();
    assert_eq!(out.value.caption, "Axial CT of the abdomen.");
    assert!(rep.leaked_in(&out.value.caption).is_empty());
}

#[test]
fn nothing_feasible_is_low_content() {
    let rep = report(&[("Patient survival improved.", Label::NotFeasible)]);
    let out = refine_caption("Patient survival improved.", &rep, &MockBackend::new(0), 3).unwrap();
    assert!(out.value.low_content);
    assert_eq!(out.value.caption, "An image.");
}

#[test]
fn leaking_reply_reprompted_then_failed() {
    let rep = report(&[("lesion", Label::Feasible), ("survival improved", Label::NotFeasible)]);
    let backend = ScriptedBackend::from_texts(["lesion; survival improved", "lesion only"]);
    let out = refine_caption("lesion; survival improved", &rep, &backend, 3).unwrap();
    assert_eq!((out.value.caption.as_str(), out.reprompts), ("lesion only", 1));

    let backend = ScriptedBackend::from_texts(["survival improved", "still survival improved"]);
    let err = refine_caption("lesion; survival improved", &rep, &backend, 3).unwrap_err();
    assert!(matches!(err, LongCapError::Validation { stage: Stage::Refine, .. }), "{err}");
}

#[test]
fn refine_requires_features() {
    assert!(matches!(
        refine_caption("x", &FeasibilityReport::default(), &MockBackend::new(0), 3),
        Err(LongCapError::Usage(_))
    ));
}

// --- pipeline -------------------------------------------------------------

#[test]
fn fixture_has_ten_valid_records() {
    let f = fixture_records();
    assert_eq!(f.len(), 10);
    f.iter().for_each(|r| r.validate().unwrap());
}

#[test]
fn mock_backend_is_pure() {
    let b = MockBackend::new(3);
    let prompt = render(AUGMENT_TEMPLATE, &[("caption", "c"), ("inline_mentions", "- m1\n- m2"), ("abstract", "a"), ("acronyms", "(none)")]);
    assert_eq!(b.generate(&prompt, Some("i")), b.generate(&prompt, Some("i")));
    let seeds: std::collections::HashSet<String> =
        (0..8).map(|s| MockBackend::new(s).generate(&prompt, Some("i")).unwrap()).collect();
    assert!(seeds.len() > 1, "seed should affect phrasing");
    assert!(b.generate("unrelated", None).is_err());
}

#[test]
fn pipeline_filters_and_expands() {
    let records = fixture_records();
    let report = run_pipeline(&records, &MockBackend::new(7), &PipelineOptions::default()).unwrap();
    assert_eq!((report.done, report.failed), (10, 0));
    for out in &report.outputs {
        assert!(out.features.leaked_in(&out.caption).is_empty(), "{}", out.id);
        assert!(out.features.leaked_in(&out.refined).is_empty(), "{}", out.id);
        assert_eq!(out.template_version, TEMPLATE_VERSION);
    }
    let rec03 = report.outputs.iter().find(|o| o.id == "rec03").unwrap();
    assert!(!rec03.caption.contains("survival"));
    assert!(rec03.caption.starts_with("Axial computed tomography (CT) of the abdomen."));
    let rec08 = report.outputs.iter().find(|o| o.id == "rec08").unwrap();
    assert!(rec08.caption.contains("SCXRT") && rec08.caption.contains("chest X-ray (CXR)"));
}

#[test]
fn failing_record_does_not_abort() {
    let mut records = fixture_records();
    records.truncate(3);
    // first record: augment ok, then assess returns garbage twice
    struct Flaky(MockBackend);
    impl GenerationBackend for Flaky {
        fn generate(&self, prompt: &str, image_ref: Option<&str>) -> Result<String, BackendError> {
            if image_ref == Some("PMC100001/fig2.jpg") && prompt.starts_with("#longcap-v1 assess") {
                return Ok("not xml".into());
            }
            self.0.generate(prompt, image_ref)
        }
        fn descriptor(&self) -> String {
            "mock".into()
        }
    }
    let report = run_pipeline(&records, &Flaky(MockBackend::new(0)), &PipelineOptions::default()).unwrap();
    assert_eq!((report.done, report.failed), (2, 1));
    assert_eq!(report.statuses[0].stage, Some(Stage::Assess));
    assert_eq!(report.failures_by_stage()[&Stage::Assess], 1);
    assert!((report.failure_rate() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn pipeline_rejects_bad_corpora() {
    let opts = PipelineOptions::default();
    assert!(run_pipeline(&[], &MockBackend::new(0), &opts).is_err());
    let r = record("a", "x");
    assert!(run_pipeline(&[r.clone(), r], &MockBackend::new(0), &opts).is_err());
    assert!(run_pipeline(&[record("b", "  ")], &MockBackend::new(0), &opts).is_err());
}

#[test]
fn output_independent_of_worker_count() {
    let records = fixture_records();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for workers in [1, 4] {
        let opts = PipelineOptions { workers, ..Default::default() };
        let report = run_pipeline(&records, &MockBackend::new(7), &opts).unwrap();
        let path = dir.path().join(format!("out{workers}.jsonl"));
        write_outputs(&report, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn resume_skips_done_records() {
    let records = fixture_records();
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let opts = PipelineOptions { journal: Some(journal.clone()), workers: 2, ..Default::default() };

    // interrupted run: only the first five records got processed
    let first = RecordingBackend::new(MockBackend::new(7));
    run_pipeline(&records[..5], &first, &opts).unwrap();
    assert_eq!(load_journal(&journal).unwrap().len(), 5);

    let second = RecordingBackend::new(MockBackend::new(7));
    let resumed = run_pipeline(&records, &second, &opts).unwrap();
    assert_eq!((resumed.done, resumed.resumed), (10, 5));
    let done_refs: Vec<&str> = records[..5].iter().map(|r| r.image_ref.as_str()).collect();
    assert!(second
        .requests()
        .iter()
        .all(|r| !done_refs.contains(&r.image_ref.as_deref().unwrap_or(""))));
    // augment and assess carry the image reference, refine does not: 3 requests per record
    assert_eq!(second.request_count(), 5 * 3);

    let fresh = run_pipeline(&records, &MockBackend::new(7), &PipelineOptions::default()).unwrap();
    assert_eq!(resumed.outputs, fresh.outputs);

    let third = RecordingBackend::new(MockBackend::new(7));
    run_pipeline(&records, &third, &opts).unwrap();
    assert_eq!(third.request_count(), 0);
}

#[test]
fn torn_journal_line_is_tolerated() {
    let records = fixture_records();
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let opts = PipelineOptions { journal: Some(journal.clone()), workers: 1, ..Default::default() };
    run_pipeline(&records[..2], &MockBackend::new(1), &opts).unwrap();
    let mut text = std::fs::read_to_string(&journal).unwrap();
    text.push_str("{\"id\":\"rec03\",\"sta");
    std::fs::write(&journal, text).unwrap();
    let backend = RecordingBackend::new(MockBackend::new(1));
    let report = run_pipeline(&records[..3], &backend, &opts).unwrap();
    assert_eq!((report.done, report.resumed, backend.request_count()), (3, 2, 3));
    assert_eq!(load_journal(&journal).unwrap().len(), 3);
}

#[test]
fn changed_backend_invalidates_journal() {
    let records = fixture_records();
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let opts = PipelineOptions { journal: Some(journal), workers: 1, ..Default::default() };
    run_pipeline(&records[..2], &MockBackend::new(1), &opts).unwrap();
    struct Other;
    impl GenerationBackend for Other {
        fn generate(&self, p: &str, i: Option<&str>) -> Result<String, BackendError> {
            MockBackend::new(1).generate(p, i)
        }
        fn descriptor(&self) -> String {
            "http://elsewhere".into()
        }
    }
    let report = run_pipeline(&records[..2], &Other, &opts).unwrap();
    assert_eq!(report.resumed, 0);
}

#[test]
fn http_backend_round_trip() {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut headers = Vec::new();
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            headers.push(line);
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let reply = "generated text";
        let mut stream = stream;
        write!(stream, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}", reply.len()).unwrap();
        (headers, String::from_utf8(body).unwrap())
    });
    let url = format!("http://{addr}/generate");
    let backend = HttpBackend::with_token(&url, std::time::Duration::from_secs(10), Some("s3cret".into()));
    assert_eq!(backend.descriptor(), url);
    assert!(!format!("{backend:?}").contains("s3cret"));
    let out = backend.generate("hello", Some("fig.png")).unwrap();
    assert_eq!(out, "generated text");
    let (headers, body) = server.join().unwrap();
    assert!(headers.iter().any(|h| h.to_ascii_lowercase().starts_with("authorization: bearer s3cret")));
    let json: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(json["prompt"], "hello");
    assert_eq!(json["image_ref"], "fig.png");
}

#[test]
fn http_backend_unreachable_is_retriable_failure() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let backend = HttpBackend::with_token(format!("http://{addr}/"), std::time::Duration::from_secs(2), None);
    assert!(backend.generate("p", None).is_err());
}

proptest! {
    #[test]
    fn expanded_acronyms_have_expansions(
        words in prop::collection::vec(prop::sample::select(vec!["CT", "MRI", "the", "scan", "CTA", "xMRI", "shows", "(CT)", "MRI,"]), 0..20),
        use_ct in any::<bool>(),
        use_mri in any::<bool>(),
    ) {
        let caption = words.join(" ");
        let mut m = BTreeMap::new();
        if use_ct { m.insert("CT".to_string(), "computed tomography".to_string()); }
        if use_mri { m.insert("MRI".to_string(), "magnetic resonance imaging".to_string()); }
        let out = expand_acronyms(&caption, &m);
        for (acronym, expansion) in &m {
            if find_word(&out, acronym).is_some() {
                let expanded = format!("{expansion} ({acronym})");
                prop_assert!(out.contains(&expanded), "{out}");
            }
        }
        // only the first occurrence changes
        let stripped = m.iter().fold(out.clone(), |s, (a, e)| s.replacen(&format!("{e} ({a})"), a, 1));
        prop_assert_eq!(stripped, caption);
    }

    #[test]
    fn refined_output_never_leaks(seed in 0u64..1000, idx in 0usize..10) {
        let records = fixture_records();
        let report = run_pipeline(&records[idx..=idx], &MockBackend::new(seed), &PipelineOptions::default()).unwrap();
        for out in &report.outputs {
            prop_assert!(out.features.leaked_in(&out.caption).is_empty());
        }
    }
}
