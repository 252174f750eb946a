//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p longclip-cli --test acceptance`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use longclip::data::{SyntheticSpec, SyntheticWorld};
use longclip::encoders::{ImageEncoderConfig, Model, TextEncoderConfig};
use longclip::eval::{recall_pair, retrieve, zero_shot_classify, Direction, ZeroShotItem, ZeroShotTask};
use longclip::experiment::{run_ablation, synthetic_vocab, AblationConfig, AblationReport, ArchConfig};
use longclip::longcap::{
    fixture_records, run_pipeline, write_outputs, MockBackend, PipelineOptions, PipelineReport, RecordingBackend,
};
use longclip::numerics::{finite_difference_grad, relative_error, DenseArray};
use longclip::tokenizer::{corpus_token_stats, train_bpe, TokenId, BOS, EOS};
use longclip::trainer::{clip_gradients, global_norm, lr_schedule, train, StepGraph, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took <= limit, || format!("took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()))
}

// 1 ------------------------------------------------------------------------

fn random_model(rng: &mut ChaCha8Rng) -> Model {
    let text = TextEncoderConfig {
        context_length: rng.random_range(4..9),
        vocab_size: 260,
        embed_dim: 4,
        num_layers: rng.random_range(1..3),
        num_heads: 2,
        ffn_dim: 8,
        output_dim: 3,
    };
    let image = ImageEncoderConfig {
        input_dim: rng.random_range(3..6),
        hidden_dim: rng.random_range(4..7),
        num_layers: rng.random_range(1..3),
        output_dim: 3,
    };
    let mut model = Model::init(text, image, rng.random(), rng.random_range(0.0..2.0)).unwrap();
    // move away from the structured initialization (unit gains, zero biases)
    for (_, a) in model.params.iter_mut() {
        for v in a.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    model
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6752_4144);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for draw in 0..100 {
        let model = random_model(&mut rng);
        let batch = rng.random_range(2..5);
        let texts: Vec<Vec<TokenId>> = (0..batch)
            .map(|_| {
                let len = rng.random_range(0..model.text.context_length - 1);
                let mut ids = vec![BOS];
                ids.extend((0..len).map(|_| rng.random_range(0..256)));
                ids.push(EOS);
                ids
            })
            .collect();
        let images: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..model.image.input_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let text_refs: Vec<&[TokenId]> = texts.iter().map(Vec::as_slice).collect();
        let image_refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let sg = StepGraph::build(&model, &text_refs, &image_refs).map_err(s)?;
        let (_, grads) = sg.loss_and_grads(&model).map_err(s)?;
        let bindings = sg.bindings(&model);
        for (name, grad) in &grads {
            let fd = finite_difference_grad(&sg.graph, &bindings, sg.loss, name, 1e-5).map_err(s)?;
            for (i, (a, b)) in grad.data().iter().zip(fd.data()).enumerate() {
                let err = relative_error(*a, *b, 1e-6);
                worst = worst.max(err);
                ensure(err <= 1e-4, || format!("draw {draw}: {name}[{i}] backward {a} vs fd {b}"))?;
                checked += 1;
            }
        }
    }
    within(Duration::from_secs(60), started)?;
    Ok(format!(
        "{checked} components over 100 draws, worst relative error {worst:.2e}, {:.1}s",
        started.elapsed().as_secs_f64()
    ))
}

// 2 ------------------------------------------------------------------------

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Full sort of the gallery by (score descending, index ascending).
fn oracle_recalls(queries: &[Vec<f64>], gallery: &[Vec<f64>], gt: &[usize], ks: &[usize]) -> Vec<f64> {
    let mut ranks = Vec::new();
    for (q, &g) in queries.iter().zip(gt) {
        let mut scored: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(j, row)| (q.iter().zip(row).fold(0.0, |acc, (a, b)| acc + a * b), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranks.push(1 + scored.iter().position(|&(_, j)| j == g).unwrap());
    }
    ks.iter()
        .map(|&k| {
            let k = k.min(gallery.len());
            ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
        })
        .collect()
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5245_5452);
    let ks = [1, 5, 10, 50];
    let mut with_ties = 0;
    for instance in 0..100 {
        let n = if instance < 5 { 1000 } else { rng.random_range(1..=1000) };
        let d = rng.random_range(2..9);
        let mut gallery = unit_rows(&mut rng, n, d);
        let mut queries = unit_rows(&mut rng, n, d);
        // every other instance duplicates a share of the gallery rows
        if instance % 2 == 0 && n > 1 {
            for _ in 0..n / 4 + 1 {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                gallery[a] = gallery[b].clone();
                queries[rng.random_range(0..n)] = gallery[b].clone();
            }
            with_ties += 1;
        }
        let gt: Vec<usize> = if instance % 3 == 0 {
            (0..n).collect()
        } else {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        };
        let qa = DenseArray::from_rows(&queries).map_err(s)?;
        let ga = DenseArray::from_rows(&gallery).map_err(s)?;
        let got = retrieve(&qa, &ga, &gt, &ks, Direction::TextToImage).map_err(s)?;
        let want = oracle_recalls(&queries, &gallery, &gt, &ks);
        for (k, w) in ks.iter().zip(&want) {
            let g = got.recall(*k).unwrap();
            ensure(g.to_bits() == w.to_bits(), || format!("instance {instance} (N={n}) recall@{k}: {g} vs oracle {w}"))?;
        }
        if instance % 3 == 0 {
            let (t2i, i2t) = recall_pair(&ga, &qa, &ks).map_err(s)?;
            let want_t2i = oracle_recalls(&queries, &gallery, &gt, &ks);
            let want_i2t = oracle_recalls(&gallery, &queries, &gt, &ks);
            for (i, k) in ks.iter().enumerate() {
                ensure(t2i.recall(*k).unwrap().to_bits() == want_t2i[i].to_bits(), || format!("instance {instance} t2i"))?;
                ensure(i2t.recall(*k).unwrap().to_bits() == want_i2t[i].to_bits(), || format!("instance {instance} i2t"))?;
            }
        }
    }
    Ok(format!("100 instances bit-equal to the full-sort oracle, {with_ties} with duplicated embeddings"))
}

// 3 ------------------------------------------------------------------------

/// Environment variable naming a caption dump (one caption per line) for the
/// full-corpus waste check.
const CAPTION_DUMP_ENV: &str = "CAPTION_DUMP";

fn token_waste() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5741_5354);
    let words = ["cell", "tissue", "stain", "arrow", "marks", "the", "of", "lesion", "x", "panel", "scale", "bar"];
    for trial in 0..20 {
        let corpus: Vec<String> = (0..rng.random_range(1..40))
            .map(|_| {
                let n = rng.random_range(0..120);
                (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let vocab = train_bpe(&corpus, rng.random_range(257..400), trial).map_err(s)?;
        let cutoff = rng.random_range(0..200);
        let report = corpus_token_stats(&vocab, &corpus, cutoff);
        let (mut total, mut wasted) = (0u64, 0u64);
        for caption in &corpus {
            for position in 0..vocab.tokenize(caption).len() {
                total += 1;
                wasted += u64::from(position >= cutoff);
            }
        }
        let fraction = if total == 0 { 0.0 } else { wasted as f64 / total as f64 };
        ensure(report.total_tokens == total && report.wasted_tokens == wasted, || {
            format!("trial {trial}: {}/{} vs recount {wasted}/{total}", report.wasted_tokens, report.total_tokens)
        })?;
        ensure(report.waste_fraction.to_bits() == fraction.to_bits(), || format!("trial {trial}: fraction"))?;
    }
    let fixture = [50, 100, 150].map(|n| vec!["alpha"; n].join(" "));
    let vocab = train_bpe(&fixture, 300, 0).map_err(s)?;
    let fixed = corpus_token_stats(&vocab, &fixture, 77).waste_fraction;
    ensure(fixed == 0.32, || format!("3-caption fixture waste {fixed}, expected 0.32"))?;

    let dump = match std::env::var(CAPTION_DUMP_ENV) {
        Ok(path) => path,
        Err(_) => {
            return Ok(format!(
                "20 random corpora match the recount; fixture waste = {fixed}; full-corpus check dataset-gated (set {CAPTION_DUMP_ENV})"
            ))
        }
    };
    let text = std::fs::read_to_string(&dump).map_err(|e| format!("{dump}: {e}"))?;
    let captions: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    let vocab = train_bpe(&captions, 49_408, 0).map_err(s)?;
    let w77 = corpus_token_stats(&vocab, &captions, 75).waste_fraction;
    let w512 = corpus_token_stats(&vocab, &captions, 510).waste_fraction;
    ensure((w77 - 0.55).abs() <= 0.02 && (w512 - 0.022).abs() <= 0.005, || {
        format!("caption dump waste {w77:.4} at 77 and {w512:.4} at 512")
    })?;
    Ok(format!("recount and fixture exact; caption dump waste {w77:.4} at 77, {w512:.4} at 512"))
}

// 4, 5 ---------------------------------------------------------------------

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn r1(report: &AblationReport, ctx: usize) -> f64 {
    100.0 * report.result(ctx).unwrap().t2i.recall(1).unwrap()
}

fn ablation_reports() -> Result<(Vec<AblationReport>, Duration), String> {
    let started = Instant::now();
    let mut reports = Vec::new();
    for seed in ABLATION_SEEDS {
        let cfg = AblationConfig { seed, ..AblationConfig::default() };
        reports.push(run_ablation(&cfg).map_err(s)?);
    }
    Ok((reports, started.elapsed()))
}

fn context_ablation(reports: &[AblationReport], took: Duration) -> Outcome {
    let mut good = 0;
    let mut detail = Vec::new();
    for r in reports {
        let (a, b, c) = (r1(r, 77), r1(r, 154), r1(r, 512));
        let ok = c > b && b > a && c - a >= 20.0;
        good += usize::from(ok);
        detail.push(format!("seed {}: {a:.1}/{b:.1}/{c:.1}", r.seed));
    }
    let summary = format!("R@1 t2i at 77/154/512: {}; {:.0}s", detail.join(", "), took.as_secs_f64());
    ensure(good >= 2, || format!("ordering held in {good} of 3 seeds; {summary}"))?;
    ensure(took <= Duration::from_secs(600), || format!("over 10 min; {summary}"))?;
    Ok(format!("{good} of 3 seeds; {summary}"))
}

fn convergence_ordering(reports: &[AblationReport]) -> Outcome {
    let show = |s: Option<usize>| s.map_or("never".to_string(), |s| s.to_string());
    let mut good = 0;
    let mut detail = Vec::new();
    for r in reports {
        let short = r.result(77).unwrap().steps_to_threshold;
        let long = r.result(512).unwrap().steps_to_threshold;
        // a run that never reaches the threshold counts as infinitely slow
        let ok = match (long, short) {
            (Some(l), Some(s)) => l < s,
            (Some(_), None) => true,
            _ => false,
        };
        good += usize::from(ok);
        detail.push(format!("seed {}: {} vs {}", r.seed, show(long), show(short)));
    }
    let summary = format!(
        "steps to loss <= {:.3} at 512 vs 77: {}",
        reports[0].loss_threshold,
        detail.join(", ")
    );
    ensure(good >= 2, || format!("held in {good} of 3 seeds; {summary}"))?;
    Ok(format!("{good} of 3 seeds; {summary}"))
}

// 6 ------------------------------------------------------------------------

fn chance_calibration() -> Outcome {
    let classes = 5;
    let items = 500;
    let pairs = 100;
    let words = ["lung", "liver", "kidney", "heart", "brain", "skin", "bone", "blood", "nerve", "muscle"];
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random_caption = |rng: &mut ChaCha8Rng| {
            (0..rng.random_range(3..20)).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        let texts: Vec<String> = (0..pairs).map(|_| random_caption(&mut rng)).collect();
        let options: Vec<String> = (0..classes).map(|c| format!("an image of {}", words[c])).collect();
        let mut training_text = texts.clone();
        training_text.extend(options.iter().cloned());
        let vocab = train_bpe(&training_text, 400, seed).map_err(s)?;
        let arch = ArchConfig::default();
        let model = Model::init(arch.text_config(vocab.len(), 77), arch.image_config(64), seed, (1.0f64 / 0.07).ln())
            .map_err(s)?;
        let image = |rng: &mut ChaCha8Rng| (0..64).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();

        // balanced task: every class is correct for items/classes items
        let task = ZeroShotTask {
            items: (0..items)
                .map(|i| ZeroShotItem { image: format!("img{i}"), options: options.clone(), correct: i % classes })
                .collect(),
        };
        let images: Vec<Vec<f64>> = (0..items).map(|_| image(&mut rng)).collect();
        let acc = zero_shot_classify(&task, &images, &model, &vocab).map_err(s)?.accuracy;
        let p = 1.0 / classes as f64;
        let sigma = (p * (1.0 - p) / items as f64).sqrt();
        ensure((acc - p).abs() <= 3.0 * sigma, || format!("seed {seed}: zero-shot accuracy {acc} vs {p} ± {:.4}", 3.0 * sigma))?;

        let seqs = texts.iter().map(|t| vocab.encode(t, 77)).collect::<Result<Vec<_>, _>>().map_err(s)?;
        let z_txt = model.encode_texts(&seqs).map_err(s)?;
        let pair_images: Vec<Vec<f64>> = (0..pairs).map(|_| image(&mut rng)).collect();
        let z_img = model.encode_images(&pair_images).map_err(s)?;
        let (t2i, i2t) = recall_pair(&z_img, &z_txt, &[1]).map_err(s)?;
        let q = 1.0 / pairs as f64;
        let sigma_r = (q * (1.0 - q) / pairs as f64).sqrt();
        for (name, r) in [("t2i", t2i.recall(1).unwrap()), ("i2t", i2t.recall(1).unwrap())] {
            ensure((r - q).abs() <= 3.0 * sigma_r, || format!("seed {seed}: {name} recall@1 {r} vs {q} ± {:.4}", 3.0 * sigma_r))?;
        }
        detail.push(format!("{acc:.3}/{:.2}/{:.2}", t2i.recall(1).unwrap(), i2t.recall(1).unwrap()));
    }
    Ok(format!(
        "accuracy/t2i R@1/i2t R@1 per seed (chance 0.2/0.01/0.01): {}",
        detail.join(", ")
    ))
}

// 7 ------------------------------------------------------------------------

fn pipeline_bytes(report: &PipelineReport) -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(s)?;
    let path = dir.path().join("out.jsonl");
    write_outputs(report, &path).map_err(s)?;
    std::fs::read(&path).map_err(s)
}

fn longcap_pipeline() -> Outcome {
    let records = fixture_records();
    let opts = PipelineOptions { journal: None, ..PipelineOptions::default() };
    let first = run_pipeline(&records, &MockBackend::new(7), &opts).map_err(s)?;
    let second = run_pipeline(&records, &MockBackend::new(7), &opts).map_err(s)?;
    let bytes = pipeline_bytes(&first)?;
    ensure(bytes == pipeline_bytes(&second)?, || "two runs differ".into())?;
    ensure(first.done == records.len(), || format!("{} of {} records done", first.done, records.len()))?;

    let mut leaks = 0;
    for o in &first.outputs {
        leaks += o.features.leaked_in(&o.caption).len() + o.features.leaked_in(&o.refined).len();
    }
    ensure(leaks == 0, || format!("{leaks} NOT_FEASIBLE features leaked"))?;

    // interrupt after half the corpus, then resume over all of it
    let dir = tempfile::tempdir().map_err(s)?;
    let journal = PipelineOptions { journal: Some(dir.path().join("journal.jsonl")), ..PipelineOptions::default() };
    let half = RecordingBackend::new(MockBackend::new(7));
    run_pipeline(&records[..5], &half, &journal).map_err(s)?;
    let rest = RecordingBackend::new(MockBackend::new(7));
    let resumed = run_pipeline(&records, &rest, &journal).map_err(s)?;
    let before: BTreeSet<String> = half.requests().into_iter().filter_map(|r| r.image_ref).collect();
    let after: BTreeSet<String> = rest.requests().into_iter().filter_map(|r| r.image_ref).collect();
    let repeated: Vec<&String> = before.intersection(&after).collect();
    ensure(repeated.is_empty(), || format!("resume re-requested {repeated:?}"))?;
    ensure(half.request_count() + rest.request_count() == first.requests, || {
        format!("{} + {} requests vs {} uninterrupted", half.request_count(), rest.request_count(), first.requests)
    })?;
    ensure(pipeline_bytes(&resumed)? == bytes, || "resumed output differs from an uninterrupted run".into())?;

    let mut text: Vec<String> = first.outputs.iter().map(|o| o.original_caption.clone()).collect();
    text.extend(first.outputs.iter().map(|o| o.caption.clone()));
    let vocab = train_bpe(&text, 512, 0).map_err(s)?;
    let n = first.outputs.len() as f64;
    let mean = |f: &dyn Fn(&longclip::longcap::LongCapOutput) -> &str| {
        first.outputs.iter().map(|o| vocab.tokenize(f(o)).len() as f64).sum::<f64>() / n
    };
    let (mean_in, mean_out) = (mean(&|o| &o.original_caption), mean(&|o| &o.caption));
    ensure(mean_out > mean_in, || format!("mean tokens {mean_in:.1} in, {mean_out:.1} out"))?;
    Ok(format!(
        "byte-identical reruns, 0 leaks, resume repeated 0 of {} requests, mean tokens {mean_in:.1} -> {mean_out:.1}",
        first.requests
    ))
}

// 8 ------------------------------------------------------------------------

fn schedule_and_clipping() -> Outcome {
    let cfg = TrainConfig { learning_rate: 5e-4, warmup_steps: 1000, ..TrainConfig::default() };
    let total = 5000;
    let at = |step| lr_schedule(step, &cfg, total);
    ensure(at(0) == 0.0, || format!("lr(0) = {}", at(0)))?;
    ensure(at(1000) == 5e-4, || format!("lr(warmup) = {}", at(1000)))?;
    let mid = at(1000 + (total - 1000) / 2);
    ensure(mid == 2.5e-4, || format!("lr(midpoint) = {mid}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut grads = std::collections::BTreeMap::new();
        for name in ["a", "b", "c"] {
            let n = rng.random_range(1..20);
            let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            grads.insert(name.to_string(), DenseArray::vector(v));
        }
        let scale = 2.0 / global_norm(&grads);
        for g in grads.values_mut() {
            *g = g.map(|x| x * scale);
        }
        clip_gradients(&mut grads, 1.0).map_err(s)?;
        worst = worst.max((global_norm(&grads) - 1.0).abs());
    }
    ensure(worst <= 1e-12, || format!("clipped norm off by {worst:e}"))?;
    Ok(format!("lr 0 / {} / {mid} at start, warmup, midpoint; clipped norm within {worst:.1e}", at(1000)))
}

// 9 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let spec = SyntheticSpec { samples_per_class: 8, ..SyntheticSpec::default() };
    let world = SyntheticWorld::new(spec.clone()).map_err(s)?;
    let vocab = synthetic_vocab(&world, 8192, 0).map_err(s)?;
    let split = world.training_corpus().map_err(s)?;
    let cfg = TrainConfig { batch_size: 8, max_epochs: 2, ..AblationConfig::default().train };
    let texts = split.corpus.captions().iter().map(|c| vocab.encode(c, 77)).collect::<Result<Vec<_>, _>>().map_err(s)?;
    let arch = ArchConfig::compact();
    let run = || {
        let model = Model::init(arch.text_config(vocab.len(), 77), arch.image_config(spec.image_dim), 0, cfg.log_scale_init)
            .map_err(s)?;
        train(&cfg, model, &texts, &split.corpus.images()).map_err(s)
    };
    let (a, b) = (run()?, run()?);
    ensure(a.curve.deterministic_csv() == b.curve.deterministic_csv(), || "train loss curves differ".into())?;
    ensure(a.model == b.model, || "trained parameters differ".into())?;

    let ablation = AblationConfig {
        contexts: vec![77, 512],
        synthetic: spec,
        train: TrainConfig { batch_size: 8, max_epochs: 1, ..AblationConfig::default().train },
        ..AblationConfig::default()
    };
    let (x, y) = (run_ablation(&ablation).map_err(s)?, run_ablation(&ablation).map_err(s)?);
    ensure(x.table_csv() == y.table_csv(), || "ablation tables differ".into())?;
    ensure(x.curves_csv() == y.curves_csv(), || "ablation curves differ".into())?;
    Ok(format!("train ({} steps) and ablate reproduce bit for bit", a.total_steps))
}

fn report(id: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("PASS {id} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {id} {name}: {detail}");
            false
        }
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let mut passed = Vec::new();
    passed.push(report(1, "gradient fidelity", guarded(gradient_fidelity)));
    passed.push(report(2, "retrieval oracle", guarded(retrieval_oracle)));
    passed.push(report(3, "token waste", guarded(token_waste)));
    let ablation = catch_unwind(ablation_reports).unwrap_or_else(|_| Err("ablation panicked".into()));
    match ablation {
        Ok((reports, took)) => {
            passed.push(report(4, "context-length ablation", guarded(|| context_ablation(&reports, took))));
            passed.push(report(5, "convergence ordering", guarded(|| convergence_ordering(&reports))));
        }
        Err(e) => {
            passed.push(report(4, "context-length ablation", Err(e.clone())));
            passed.push(report(5, "convergence ordering", Err(e)));
        }
    }
    passed.push(report(6, "chance calibration", guarded(chance_calibration)));
    passed.push(report(7, "caption pipeline", guarded(longcap_pipeline)));
    passed.push(report(8, "schedule and clipping", guarded(schedule_and_clipping)));
    passed.push(report(9, "determinism", guarded(determinism)));
    let n = passed.iter().filter(|&&p| p).count();
    println!("{n}/{} criteria passed", passed.len());
    if n != passed.len() {
        std::process::exit(1);
    }
}
