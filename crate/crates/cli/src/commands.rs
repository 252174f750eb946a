use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};

use longclip::data::{
    build_long_caption_benchmark, load_corpus, parse_article_xml, save_records, save_shards, BenchmarkOptions,
    CorpusFormat, ManifestRow, PairedCorpus, SyntheticSpec, SyntheticWorld,
};
use longclip::encoders::{Checkpoint, Model};
use longclip::eval::{
    load_zero_shot_tasks, permute_options, recall_pair, results_csv_rows, results_summary, zero_shot_classify,
    RESULTS_CSV_HEADER,
};
use longclip::experiment::{run_ablation, AblationConfig, AblationReport, ArchConfig};
use longclip::longcap::{
    load_caption_records, run_pipeline, write_outputs, GenerationBackend, HttpBackend, MockBackend, PipelineOptions,
};
use longclip::tokenizer::{corpus_token_stats, train_bpe, TokenSeq, TokenWasteReport, Vocab};
use longclip::trainer::{train, TrainConfig};

use crate::config::RunConfig;
use crate::usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TokenizeStats,
    Train,
    EvalRetrieval,
    EvalZeroshot,
    Longcap,
    MakeSynthetic,
    BuildBenchmark,
    Ablate,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::TokenizeStats,
        Command::Train,
        Command::EvalRetrieval,
        Command::EvalZeroshot,
        Command::Longcap,
        Command::MakeSynthetic,
        Command::BuildBenchmark,
        Command::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TokenizeStats => "tokenize-stats",
            Command::Train => "train",
            Command::EvalRetrieval => "eval-retrieval",
            Command::EvalZeroshot => "eval-zeroshot",
            Command::Longcap => "longcap",
            Command::MakeSynthetic => "make-synthetic",
            Command::BuildBenchmark => "build-benchmark",
            Command::Ablate => "ablate",
        }
    }

    /// Every key the command accepts, with its default (`null` = unset).
    pub fn defaults(self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("seed".into(), json!(0));
        m.insert("out".into(), json!("runs"));
        let mut add = |pairs: Value| {
            if let Value::Object(o) = pairs {
                m.extend(o);
            }
        };
        match self {
            Command::TokenizeStats => add(json!({
                "input": null, "format": "records", "vocab": null, "vocab_size": 8192, "cutoff": "77",
            })),
            Command::Train => {
                add(Value::Object(RunConfig::defaults_of(&TrainConfig::default())));
                add(json!({
                    "input": null, "format": "records", "vocab": null, "vocab_size": 8192, "arch": "default",
                }));
            }
            Command::EvalRetrieval => add(json!({
                "checkpoint": null, "input": null, "format": "records", "ks": "1,5,10",
                "benchmark": null, "context_length": null,
            })),
            Command::EvalZeroshot => add(json!({
                "checkpoint": null, "tasks": null, "images": null, "format": "records",
                "permute_seed": null, "context_length": null,
            })),
            Command::Longcap => add(json!({
                "input": null, "backend": "mock", "workers": 4, "max_attempts": 3,
                "timeout_secs": 120, "journal": null,
            })),
            Command::MakeSynthetic => {
                add(Value::Object(RunConfig::defaults_of(&SyntheticSpec::default())));
                add(json!({ "format": "records", "per_shard": 500 }));
            }
            Command::BuildBenchmark => add(json!({ "input": null, "min_year": 0 })),
            Command::Ablate => {
                let d = AblationConfig::default();
                add(Value::Object(RunConfig::defaults_of(&d.synthetic)));
                let mut train = RunConfig::defaults_of(&d.train);
                train.remove("context_length");
                add(Value::Object(train));
                add(json!({
                    "contexts": "77,154,512", "arch": "compact", "vocab_size": d.vocab_size, "ks": "1,5,10",
                }));
            }
        }
        m
    }
}

pub fn execute(command: Command, cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    match command {
        Command::TokenizeStats => tokenize_stats(cfg, run_dir),
        Command::Train => train_cmd(cfg, run_dir),
        Command::EvalRetrieval => eval_retrieval(cfg, run_dir),
        Command::EvalZeroshot => eval_zeroshot(cfg, run_dir),
        Command::Longcap => longcap(cfg, run_dir),
        Command::MakeSynthetic => make_synthetic(cfg, run_dir),
        Command::BuildBenchmark => build_benchmark(cfg, run_dir),
        Command::Ablate => ablate(cfg, run_dir),
    }
}

fn input_path(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    let p = PathBuf::from(usage(cfg.required_str(key))?);
    if !p.exists() {
        return Err(crate::UsageError(format!("--{}: {} does not exist", key.replace('_', "-"), p.display())).into());
    }
    Ok(p)
}

fn corpus_format(cfg: &RunConfig) -> Result<CorpusFormat> {
    usage(cfg.str("format").parse::<CorpusFormat>().map_err(|e| anyhow::anyhow!("--format: {e}")))
}

fn load_paired(cfg: &RunConfig, key: &str) -> Result<PairedCorpus> {
    let path = input_path(cfg, key)?;
    let format = corpus_format(cfg)?;
    load_corpus(&path, format).with_context(|| format!("loading {}", path.display()))
}

/// Loads `vocab` when given, otherwise trains one on `captions` and saves
/// it under the run directory.
fn vocab_for(cfg: &RunConfig, captions: &[String], run_dir: &Path) -> Result<Vocab> {
    if let Some(dir) = cfg.opt_str("vocab") {
        return Vocab::load(Path::new(&dir)).with_context(|| format!("--vocab {dir}"));
    }
    let vocab = train_bpe(captions, usage(cfg.usize("vocab_size"))?, cfg.u64("seed")?)?;
    vocab.save(&run_dir.join("vocab"))?;
    Ok(vocab)
}

fn opt_usize(cfg: &RunConfig, key: &str) -> Result<Option<usize>> {
    cfg.opt_str(key)
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| crate::UsageError(format!("--{}: '{s}' is not a count", key.replace('_', "-"))).into())
        })
        .transpose()
}

fn load_model(cfg: &RunConfig) -> Result<(Model, Vocab)> {
    let path = input_path(cfg, "checkpoint")?;
    let ckpt = Checkpoint::load(&path).with_context(|| format!("--checkpoint {}", path.display()))?;
    let mut model = ckpt.model;
    if let Some(ctx) = opt_usize(cfg, "context_length")? {
        model = usage(model.with_context_length(ctx).map_err(anyhow::Error::from))
            .context("--context-length does not fit the checkpoint")?;
    }
    Ok((model, ckpt.vocab))
}

fn encode_all(vocab: &Vocab, captions: &[String], ctx: usize) -> Result<Vec<TokenSeq>> {
    Ok(captions.iter().map(|c| vocab.encode(c, ctx)).collect::<Result<_, _>>()?)
}

fn tokenize_stats(cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    let path = input_path(cfg, "input")?;
    let captions: Vec<String> = match cfg.str("format").as_str() {
        "text" => fs::read_to_string(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        _ => load_paired(cfg, "input")?.captions(),
    };
    if captions.is_empty() {
        return Err(crate::UsageError(format!("--input: {} holds no captions", path.display())).into());
    }
    let cutoffs = usage(cfg.usize_list("cutoff"))?;
    let vocab = vocab_for(cfg, &captions, run_dir)?;
    let reports: Vec<TokenWasteReport> = cutoffs.iter().map(|&c| corpus_token_stats(&vocab, &captions, c)).collect();
    let report_text: Vec<String> = reports.iter().map(TokenWasteReport::to_kv).collect();
    fs::write(run_dir.join("report.txt"), report_text.join("\n"))?;
    let mut csv = format!("{}\n", TokenWasteReport::CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(run_dir.join("stats.csv"), csv)?;
    let mut out = String::new();
    for r in &reports {
        let _ = writeln!(
            out,
            "cutoff {}: {} of {} tokens wasted ({:.4})",
            r.cutoff, r.wasted_tokens, r.total_tokens, r.waste_fraction
        );
    }
    Ok(out)
}

fn train_cmd(cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    let corpus = load_paired(cfg, "input")?;
    let train_cfg: TrainConfig = usage(cfg.extract(&TrainConfig::default()))?;
    usage(train_cfg.validate().map_err(anyhow::Error::from))?;
    let arch = usage(ArchConfig::preset(&cfg.str("arch")).map_err(anyhow::Error::from))?;
    let captions = corpus.captions();
    let vocab = vocab_for(cfg, &captions, run_dir)?;
    let texts = encode_all(&vocab, &captions, train_cfg.context_length)?;
    let model = Model::init(
        arch.text_config(vocab.len(), train_cfg.context_length),
        arch.image_config(corpus.image_dim()),
        train_cfg.seed,
        train_cfg.log_scale_init,
    )?;
    let outcome = train(&train_cfg, model, &texts, &corpus.images())?;
    fs::write(run_dir.join("loss_curve.csv"), outcome.curve.to_csv())?;
    let mut ckpt = Checkpoint::new(outcome.model, vocab);
    ckpt.metadata.insert("train_config".into(), serde_json::to_string(&train_cfg)?);
    ckpt.metadata.insert("arch".into(), cfg.str("arch"));
    ckpt.save(&run_dir.join("checkpoint.json"))?;
    let means = outcome.curve.epoch_means(outcome.steps_per_epoch);
    Ok(format!(
        "trained {} steps ({} per epoch); first epoch loss {:.4}, last epoch loss {:.4}\n",
        outcome.total_steps,
        outcome.steps_per_epoch,
        means.first().copied().unwrap_or(f64::NAN),
        means.last().copied().unwrap_or(f64::NAN)
    ))
}

fn eval_retrieval(cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    let (model, vocab) = load_model(cfg)?;
    let corpus = load_paired(cfg, "input")?;
    let ks = usage(cfg.usize_list("ks"))?;
    let benchmark = cfg.opt_str("benchmark").unwrap_or_else(|| {
        Path::new(&cfg.str("input"))
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "benchmark".into())
    });
    let texts = encode_all(&vocab, &corpus.captions(), model.text.context_length)?;
    let z_txt = model.encode_texts(&texts)?;
    let z_img = model.encode_images(&corpus.images())?;
    let (t2i, i2t) = recall_pair(&z_img, &z_txt, &ks)?;
    let csv = format!("{RESULTS_CSV_HEADER}\n{}", results_csv_rows(&benchmark, &[&t2i, &i2t]));
    fs::write(run_dir.join("results.csv"), csv)?;
    let summary = results_summary(&benchmark, &[&t2i, &i2t]);
    fs::write(run_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn eval_zeroshot(cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    let (model, vocab) = load_model(cfg)?;
    let mut task = load_zero_shot_tasks(&input_path(cfg, "tasks")?)?;
    if let Some(seed) = cfg.opt_str("permute_seed") {
        let seed: u64 = usage(seed.parse().map_err(|_| anyhow::anyhow!("--set permute_seed: '{seed}' is not an integer")))?;
        task = permute_options(&task, seed);
    }
    let corpus = load_paired(cfg, "images")?;
    let images = task
        .items
        .iter()
        .map(|item| {
            corpus
                .get(&item.image)
                .map(|r| r.image.clone())
                .with_context(|| format!("image '{}' not found in --images", item.image))
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = zero_shot_classify(&task, &images, &model, &vocab)?;
    let mut csv = String::from("image,prediction,correct\n");
    for (item, p) in task.items.iter().zip(&outcome.predictions) {
        let _ = writeln!(csv, "{},{p},{}", item.image, item.correct);
    }
    fs::write(run_dir.join("predictions.csv"), csv)?;
    let summary = format!("items = {}\naccuracy = {}\n", task.items.len(), outcome.accuracy);
    fs::write(run_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn longcap(cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    let records = load_caption_records(&input_path(cfg, "input")?)?;
    let backend_name = cfg.str("backend");
    let backend: Box<dyn GenerationBackend> = if backend_name == "mock" {
        Box::new(MockBackend::new(cfg.u64("seed")?))
    } else if backend_name.starts_with("http://") || backend_name.starts_with("https://") {
        Box::new(HttpBackend::new(&backend_name, Duration::from_secs(usage(cfg.u64("timeout_secs"))?)))
    } else {
        bail!(crate::UsageError(format!("--backend: expected 'mock' or an http(s) URL, got '{backend_name}'")));
    };
    let journal = cfg
        .opt_str("journal")
        .map(PathBuf::from)
        .unwrap_or_else(|| run_dir.join("journal.jsonl"));
    let opts = PipelineOptions {
        workers: usage(cfg.usize("workers"))?,
        max_attempts: usage(cfg.usize("max_attempts"))?,
        journal: Some(journal),
    };
    let report = run_pipeline(&records, backend.as_ref(), &opts)?;
    write_outputs(&report, &run_dir.join("longcap.jsonl"))?;
    fs::write(run_dir.join("status.csv"), report.status_csv())?;
    let words = |s: &str| s.split_whitespace().count() as f64;
    let n = report.outputs.len().max(1) as f64;
    let mean_in = report.outputs.iter().map(|o| words(&o.original_caption)).sum::<f64>() / n;
    let mean_out = report.outputs.iter().map(|o| words(&o.caption)).sum::<f64>() / n;
    let mut summary = format!(
        "records = {}\ndone = {}\nfailed = {}\nresumed = {}\nrequests = {}\nfailure_rate = {}\nmean_input_words = {mean_in}\nmean_output_words = {mean_out}\n",
        report.statuses.len(),
        report.done,
        report.failed,
        report.resumed,
        report.requests,
        report.failure_rate()
    );
    for (stage, count) in report.failures_by_stage() {
        let _ = writeln!(summary, "failed_at_{stage} = {count}");
    }
    fs::write(run_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn make_synthetic(cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    let spec: SyntheticSpec = usage(cfg.extract(&SyntheticSpec::default()))?;
    let world = usage(SyntheticWorld::new(spec).map_err(anyhow::Error::from))?;
    let format = corpus_format(cfg)?;
    let mut labels = String::from("id,split,class,class_word,detail_word\n");
    let mut out = String::new();
    for (name, split) in [("train", world.training_corpus()?), ("eval", world.eval_corpus()?)] {
        match format {
            CorpusFormat::Records => save_records(&split.corpus, &run_dir.join(format!("{name}.jsonl")))?,
            CorpusFormat::Shards => {
                save_shards(&split.corpus, &run_dir.join(name), usage(cfg.usize("per_shard"))?)?;
            }
        }
        for ((r, &class), detail) in split.corpus.records().iter().zip(&split.labels).zip(&split.details) {
            let detail_word = detail.map(|d| world.detail_words[d].as_str()).unwrap_or("");
            let _ = writeln!(labels, "{},{name},{class},{},{detail_word}", r.id, world.class_words[class]);
        }
        let _ = writeln!(out, "{name}: {} pairs", split.corpus.len());
    }
    fs::write(run_dir.join("labels.csv"), labels)?;
    Ok(out)
}

fn article_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "xml" || e == "nxml"))
        .collect();
    files.sort();
    Ok(files)
}

fn build_benchmark(cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    let path = input_path(cfg, "input")?;
    let mut articles = Vec::new();
    for file in article_files(&path)? {
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let xml = fs::read_to_string(&file)?;
        articles.push(parse_article_xml(&xml, &stem).with_context(|| format!("parsing {}", file.display()))?);
    }
    if articles.is_empty() {
        return Err(crate::UsageError(format!("--input: no article XML files under {}", path.display())).into());
    }
    let min_year = u32::try_from(usage(cfg.u64("min_year"))?).context("min_year out of range")?;
    let opts = BenchmarkOptions {
        seed: cfg.u64("seed")?,
        min_year: (min_year > 0).then_some(min_year),
    };
    let built = build_long_caption_benchmark(&articles, &opts)?;
    save_records(&built.corpus, &run_dir.join("benchmark.jsonl"))?;
    let mut manifest = format!("{}\n", ManifestRow::CSV_HEADER);
    for row in &built.manifest {
        manifest.push_str(&row.csv_row());
        manifest.push('\n');
    }
    fs::write(run_dir.join("manifest.csv"), manifest)?;
    let summary = format!(
        "articles = {}\npairs = {}\nskipped_no_figures = {}\nskipped_by_year = {}\nskipped_duplicate = {}\n",
        articles.len(),
        built.corpus.len(),
        built.skipped_no_figures,
        built.skipped_by_year,
        built.skipped_duplicate
    );
    fs::write(run_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn ablate(cfg: &RunConfig, run_dir: &Path) -> Result<String> {
    let defaults = AblationConfig::default();
    let mut train_cfg: TrainConfig = usage(cfg.extract(&defaults.train))?;
    train_cfg.context_length = defaults.train.context_length;
    let ablation = AblationConfig {
        contexts: usage(cfg.usize_list("contexts"))?,
        seed: cfg.u64("seed")?,
        synthetic: usage(cfg.extract(&defaults.synthetic))?,
        train: train_cfg,
        arch: usage(ArchConfig::preset(&cfg.str("arch")).map_err(anyhow::Error::from))?,
        vocab_size: usage(cfg.usize("vocab_size"))?,
        ks: usage(cfg.usize_list("ks"))?,
    };
    let report = run_ablation(&ablation)?;
    fs::write(run_dir.join("ablation.csv"), report.table_csv())?;
    fs::write(run_dir.join("curves.csv"), report.curves_csv())?;
    let summary = ablation_summary(&report);
    fs::write(run_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn ablation_summary(report: &AblationReport) -> String {
    let mut out = format!("seed = {}\nloss_threshold = {}\n", report.seed, report.loss_threshold);
    for r in &report.results {
        let _ = writeln!(
            out,
            "context {}: t2i R@1 {:.1}, steps to threshold {}",
            r.context_length,
            100.0 * r.t2i.recall(1).unwrap_or(f64::NAN),
            r.steps_to_threshold.map_or_else(|| "never".into(), |s| s.to_string())
        );
    }
    out
}
