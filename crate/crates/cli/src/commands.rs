//! One function per execution mode.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use activemt::active_loop::{
    read_journal, replay, ALState, ActiveLearner, AnnotationQueue, InteractiveOracle, Journal, JournalRecord,
    OracleMode, RunStatus, SimulatedOracle,
};
use activemt::corpus::{
    clean, partition_for_al, read_parallel, read_split, write_ids, write_lines, MonolingualPool, SplitTag,
};
use activemt::decoder::beam_search_each;
use activemt::metrics::{text_bleu, BleuConfig};
use activemt::rng::{derived_rng, Purpose};
use activemt::text::TextPipeline;
use activemt::trainer::{evaluate, train, DevSet, TrainOptions};
use activemt::transformer::{load_checkpoint, ModelConfig, Transformer};
use activemt::{corpus, toy};
use anyhow::{bail, Context, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::config::{self, config_error, RunConfig, TrainData};
use crate::run_dir::RunDir;
use crate::{report, server};

pub fn execute(cli: Cli) -> Result<()> {
    let run = RunDir::new(&cli.run_dir);
    match &cli.command {
        Command::MakeToy(a) => make_toy(&cli, a),
        Command::Prepare(a) => {
            let mut flags = Vec::new();
            push(&mut flags, "data.source", a.source.clone());
            push(&mut flags, "data.target", a.target.clone());
            push(&mut flags, "data.dev_size", a.dev_size.map(|v| v as i64));
            push(&mut flags, "data.test_size", a.test_size.map(|v| v as i64));
            push(&mut flags, "data.baseline_fraction", a.baseline_fraction);
            let cfg = load_config(&cli, &[&run.root], flags)?;
            let _lock = run.lock()?;
            write_snapshot(&run, &cfg)?;
            prepare(&run, &cfg)
        }
        Command::LearnBpe(a) => {
            let mut flags = Vec::new();
            push(&mut flags, "bpe.source_merges", a.source_merges.map(|v| v as i64));
            push(&mut flags, "bpe.target_merges", a.target_merges.map(|v| v as i64));
            let cfg = load_config(&cli, &[&run.root], flags)?;
            let _lock = run.lock()?;
            write_snapshot(&run, &cfg)?;
            learn_bpe(&run, &cfg)
        }
        Command::Train(a) => {
            let mut flags = Vec::new();
            push(&mut flags, "data.train_on", a.data.map(|d| d.as_str().to_string()));
            push(&mut flags, "train.epochs", a.epochs.map(|v| v as i64));
            let cfg = load_config(&cli, &[&run.root], flags)?;
            let _lock = run.lock()?;
            write_snapshot(&run, &cfg)?;
            train_model(&run, &cfg)
        }
        Command::Test(a) => {
            let mut flags = Vec::new();
            push(&mut flags, "translate.beam", a.beam.map(|v| v as i64));
            let cfg = load_config(&cli, &[&run.root], flags)?;
            test(&run, &cfg, a)
        }
        Command::Translate(a) => {
            let mut flags = Vec::new();
            push(&mut flags, "translate.beam", a.beam.map(|v| v as i64));
            let cfg = load_config(&cli, &[&run.root], flags)?;
            translate(&run, &cfg, a.checkpoint.as_deref())
        }
        Command::ActiveLearn(a) => active_learn(&cli, &run, a, false),
        Command::ServeAnnotation(a) => active_learn(&cli, &run, a, true),
        Command::Report(a) => report::report(&a.runs, &a.out),
    }
}

fn push<V: Into<toml::Value>>(flags: &mut Vec<(&'static str, toml::Value)>, key: &'static str, v: Option<V>) {
    if let Some(v) = v {
        flags.push((key, v.into()));
    }
}

/// Defaults, then the `--config` file (or the first existing snapshot
/// among `snapshot_dirs`), then `--set` overrides, then named flags.
fn load_config(cli: &Cli, snapshot_dirs: &[&Path], flags: Vec<(&str, toml::Value)>) -> Result<RunConfig> {
    let mut table = match &cli.config {
        Some(path) => config::read_table(path)?,
        None => match snapshot_dirs
            .iter()
            .map(|d| RunDir::new(*d).snapshot())
            .find(|p| p.exists())
        {
            Some(p) => config::read_table(&p)?,
            None => toml::Table::new(),
        },
    };
    config::apply_overrides(&mut table, &cli.overrides)?;
    for (k, v) in flags {
        config::set_path(&mut table, k, v)?;
    }
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| config_error("seed must fit in a signed 64-bit integer"))?;
        config::set_path(&mut table, "seed", seed.into())?;
        // The loop's seed always follows the root seed.
        if let Some(al) = table.get_mut("active_learning").and_then(toml::Value::as_table_mut) {
            al.remove("seed");
        }
    }
    config::from_table(table)
}

fn write_snapshot(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let path = run.snapshot();
    fs::write(&path, config::to_toml(cfg)).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// A settings file sized for the toy corpus.
pub fn toy_config(source: &str, target: &str) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.source = Some(source.into());
    c.data.target = Some(target.into());
    c.data.dev_size = 200;
    c.data.test_size = 200;
    c.bpe.source_merges = 200;
    c.bpe.target_merges = 200;
    c.model.d_model = 64;
    c.model.layers = 2;
    c.model.ffn_width = 256;
    c.train.lr0 = 1e-3;
    c.train.warmup_steps = 200;
    c.train.validate_every = 150;
    c.train.dropout = 0.1;
    c.train.fine_tune_epochs = 3;
    c.active_learning.pool_sample_fraction = 0.5;
    c.active_learning.query_size = 100;
    c.active_learning.budget = 5;
    c
}

fn make_toy(cli: &Cli, a: &MakeToyArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(1);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let pairs = toy::pairs(a.pairs, seed, 0);
    let dir = a.out.canonicalize()?;
    let (src, trg) = (dir.join("toy.src"), dir.join("toy.trg"));
    write_lines(&src, pairs.iter().map(|p| p.source.as_str()))?;
    write_lines(&trg, pairs.iter().map(|p| p.target.as_str()))?;
    let mut cfg = toy_config(&src.to_string_lossy(), &trg.to_string_lossy());
    cfg.seed = seed;
    cfg.active_learning.seed = seed;
    let held_out = (a.pairs / 15).max(1);
    cfg.data.dev_size = held_out;
    cfg.data.test_size = held_out;
    fs::write(dir.join("toy.toml"), config::to_toml(&cfg))?;
    println!("wrote {} pairs and toy.toml to {}", pairs.len(), dir.display());
    Ok(())
}

fn sub_seed(seed: u64, index: u64) -> u64 {
    derived_rng(seed, Purpose::Split, index).next_u64()
}

fn prepare(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let src = cfg.data.source.as_deref().ok_or_else(|| config_error("data.source is not set"))?;
    let trg = cfg.data.target.as_deref().ok_or_else(|| config_error("data.target is not set"))?;
    let (src_clean, trg_clean) = cfg.data.clean_configs()?;
    let (all, stats) = read_parallel(src, trg, &src_clean, &trg_clean)?;
    let (train_split, dev, test) = corpus::split(&all, cfg.data.dev_size, cfg.data.test_size, sub_seed(cfg.seed, 0))?;
    let (baseline, pool) = partition_for_al(&train_split, cfg.data.baseline_fraction, sub_seed(cfg.seed, 1))?;

    fs::create_dir_all(run.data_dir())?;
    let prefix = run.corpus_prefix();
    for c in [&train_split, &dev, &test] {
        c.write(&prefix)?;
        write_ids(&prefix, c)?;
    }
    baseline.write(&run.baseline_prefix())?;
    write_ids(&run.baseline_prefix(), &baseline)?;
    pool.write(&prefix)?;

    let summary = serde_json::json!({
        "read": stats.read,
        "rejected_source": stats.rejected_source,
        "rejected_target": stats.rejected_target,
        "duplicates": stats.duplicates,
        "kept": all.len(),
        "train": train_split.len(),
        "dev": dev.len(),
        "test": test.len(),
        "baseline": baseline.len(),
        "pool": pool.len(),
    });
    write_json(&run.path("data/prepare_report.json"), &summary)?;
    println!(
        "read {} pairs: {} rejected (source), {} rejected (target), {} duplicates",
        stats.read, stats.rejected_source, stats.rejected_target, stats.duplicates
    );
    println!(
        "train {} (baseline {}, pool {}), dev {}, test {}",
        train_split.len(),
        baseline.len(),
        pool.len(),
        dev.len(),
        test.len()
    );
    Ok(())
}

fn learn_bpe(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let baseline = read_split(&run.baseline_prefix(), SplitTag::Train).context("run `prepare` first")?;
    let pipe = TextPipeline::learn(&baseline.pairs, cfg.bpe.source_merges, cfg.bpe.target_merges);
    fs::create_dir_all(run.bpe_dir())?;
    pipe.save(&run.bpe_dir())?;
    println!(
        "source: {} merges, {} types; target: {} merges, {} types",
        pipe.source.bpe.merge_count(),
        pipe.source.vocab.len(),
        pipe.target.bpe.merge_count(),
        pipe.target.vocab.len()
    );
    Ok(())
}

fn load_pipeline(run: &RunDir) -> Result<TextPipeline> {
    TextPipeline::load(&run.bpe_dir()).context("run `learn-bpe` first")
}

/// The configured model with vocabulary sizes taken from the BPE files.
fn model_config(cfg: &RunConfig, pipe: &TextPipeline) -> Result<ModelConfig> {
    let mut mc = cfg.model;
    for (name, configured, actual) in [
        ("src_vocab", &mut mc.src_vocab, pipe.source.vocab.len()),
        ("trg_vocab", &mut mc.trg_vocab, pipe.target.vocab.len()),
    ] {
        if *configured != 0 && *configured != actual {
            return Err(config_error(format!(
                "model.{name} is {configured} but the BPE vocabulary has {actual} entries (use 0 to infer)"
            )));
        }
        *configured = actual;
    }
    mc.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(mc)
}

fn dev_set(pipe: &TextPipeline, pairs: &[corpus::SentencePair], max_length: usize) -> DevSet {
    DevSet {
        pairs: pipe.pairs(pairs, max_length).0,
        references: pairs.iter().map(|p| p.target.clone()).collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub data: TrainData,
    pub train_pairs: usize,
    pub truncated: usize,
    pub steps: u64,
    pub stopped_early: bool,
    pub best_dev_ppl: f64,
    pub best_dev_bleu: Option<f64>,
}

fn train_model(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    let pipe = load_pipeline(run)?;
    let mc = model_config(cfg, &pipe)?;
    let data = match cfg.data.train_on {
        TrainData::Baseline => read_split(&run.baseline_prefix(), SplitTag::Train)?,
        TrainData::Full => read_split(&run.corpus_prefix(), SplitTag::Train)?,
    };
    let dev = read_split(&run.corpus_prefix(), SplitTag::Dev)?;
    let (pairs, truncated) = pipe.pairs(&data.pairs, mc.max_length);
    if truncated > 0 {
        log::warn!("{truncated} training pairs were truncated to {} tokens", mc.max_length);
    }
    let dev = dev_set(&pipe, &dev.pairs, mc.max_length);
    let model = Transformer::new(mc, &mut derived_rng(cfg.seed, Purpose::Init, 0))?;
    let ckpt_dir = run.train_checkpoints();
    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir)?;
    }
    let mut log_file = BufWriter::new(File::create(run.train_log())?);
    let options = TrainOptions {
        epochs: cfg.train.epochs,
        seed: cfg.seed,
        skip_warmup: false,
        checkpoint_dir: Some(ckpt_dir),
    };
    let outcome = train(model, &pairs, &dev, &pipe.target, &cfg.train, &options, Some(&mut log_file))?;
    log_file.flush()?;
    let summary = TrainSummary {
        data: cfg.data.train_on,
        train_pairs: pairs.len(),
        truncated,
        steps: outcome.steps,
        stopped_early: outcome.stopped_early,
        best_dev_ppl: outcome.best_evaluation.perplexity.perplexity,
        best_dev_bleu: outcome.best_evaluation.bleu.as_ref().map(|b| b.bleu),
    };
    write_json(&run.train_summary(), &summary)?;
    println!(
        "{} steps; best dev ppl {:.3}, dev BLEU {}",
        summary.steps,
        summary.best_dev_ppl,
        summary.best_dev_bleu.map_or("n/a".into(), |b| format!("{:.2}", b * 100.0))
    );
    Ok(())
}

/// The newest model of a run: the last active-learning checkpoint if
/// there is one, otherwise the best trained model.
fn latest_model(run: &RunDir) -> Result<PathBuf> {
    if run.journal().exists() {
        let records = read_journal(&run.journal())?;
        let last = records.iter().rev().find_map(|r| match r {
            JournalRecord::IterationEnd {
                checkpoint: Some(c), ..
            } => Some(c.clone()),
            _ => None,
        });
        if let Some(name) = last {
            return Ok(run.al_checkpoints().join(name));
        }
    }
    Ok(run.best_checkpoint())
}

fn load_model(path: &Path, pipe: &TextPipeline) -> Result<Transformer<f32>> {
    let model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let mc = model.config();
    if mc.src_vocab != pipe.source.vocab.len() || mc.trg_vocab != pipe.target.vocab.len() {
        bail!(
            "{} was trained with vocabularies of {}/{} entries, but bpe/ has {}/{}",
            path.display(),
            mc.src_vocab,
            mc.trg_vocab,
            pipe.source.vocab.len(),
            pipe.target.vocab.len()
        );
    }
    Ok(model)
}

/// What a run's newest model is: a strategy name for active-learning
/// runs, else the training data.
fn infer_variant(run: &RunDir) -> String {
    if let Ok(records) = read_journal(&run.journal()) {
        if let Some(JournalRecord::Header(h)) = records.first() {
            return h.strategy.as_str().to_string();
        }
    }
    match fs::read_to_string(run.train_summary())
        .ok()
        .and_then(|t| serde_json::from_str::<TrainSummary>(&t).ok())
    {
        Some(s) if s.data == TrainData::Full => "full".into(),
        _ => "baseline".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub variant: String,
    pub checkpoint: String,
    pub sentences: usize,
    pub bleu: f64,
    pub bleu_percent: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub length_ratio: f64,
    pub perplexity: f64,
    pub cross_entropy_bits: f64,
}

/// Beam-decodes `sources`; sentences that fail to decode become empty.
fn beam_translate(model: &Transformer<f32>, pipe: &TextPipeline, cfg: &RunConfig, sources: &[String]) -> Vec<String> {
    let max_length = model.config().max_length;
    let ids: Vec<Vec<u32>> = sources.iter().map(|s| pipe.source_ids(s, max_length)).collect();
    beam_search_each(model, &ids, cfg.translate.beam, 1, &cfg.translate.decode)
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(list) => pipe.target.decode(list.best().content()),
            Err(e) => {
                log::warn!("sentence {}: {e}", i + 1);
                String::new()
            }
        })
        .collect()
}

fn test(run: &RunDir, cfg: &RunConfig, a: &TestArgs) -> Result<()> {
    let pipe = load_pipeline(run)?;
    let path = match &a.checkpoint {
        Some(p) => p.clone(),
        None => latest_model(run)?,
    };
    let model = load_model(&path, &pipe)?;
    let test = read_split(&run.corpus_prefix(), SplitTag::Test)?;
    if test.is_empty() {
        return Err(config_error("the test split is empty"));
    }
    let set = dev_set(&pipe, &test.pairs, model.config().max_length);
    let ppl = evaluate(&model, &set, &pipe.target, &cfg.translate.decode, false)?.perplexity;
    let sources: Vec<String> = test.pairs.iter().map(|p| p.source.clone()).collect();
    let hyps = beam_translate(&model, &pipe, cfg, &sources);
    let bleu = text_bleu(&hyps, &set.references, &BleuConfig::default())?;
    write_lines(run.path("test_translations.txt"), &hyps)?;
    let report = TestReport {
        variant: a.variant.clone().unwrap_or_else(|| infer_variant(run)),
        checkpoint: path.to_string_lossy().into_owned(),
        sentences: test.len(),
        bleu: bleu.bleu,
        bleu_percent: bleu.percent(),
        precisions: bleu.precisions.clone(),
        brevity_penalty: bleu.brevity_penalty,
        length_ratio: bleu.length_ratio(),
        perplexity: ppl.perplexity,
        cross_entropy_bits: ppl.cross_entropy,
    };
    write_json(&run.test_report(), &report)?;
    let p: Vec<String> = bleu.precisions.iter().map(|p| format!("{:.4}", p)).collect();
    println!("variant   {}", report.variant);
    println!("BLEU%     {:.2}", report.bleu_percent);
    println!("p1..p4    {}", p.join(" "));
    println!("BP        {:.4}", report.brevity_penalty);
    println!("c/r       {:.4}", report.length_ratio);
    println!("PPL       {:.4}", report.perplexity);
    Ok(())
}

fn translate(run: &RunDir, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let pipe = load_pipeline(run)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_model(run)?,
    };
    let model = load_model(&path, &pipe)?;
    let (src_clean, _) = cfg.data.clean_configs()?;
    let stdin = std::io::stdin();
    // Answer line by line when a person is typing.
    let chunk = if stdin.is_terminal() {
        1
    } else {
        cfg.translate.decode.batch_size.max(1)
    };
    let mut out = std::io::stdout().lock();
    let mut lines = stdin.lock().lines();
    loop {
        let mut batch = Vec::with_capacity(chunk);
        for line in lines.by_ref().take(chunk) {
            batch.push(line?);
        }
        if batch.is_empty() {
            break;
        }
        // Sentences the cleaner rejects are answered with an empty line.
        let cleaned: Vec<Option<String>> = batch.iter().map(|l| clean(l, &src_clean).ok()).collect();
        let todo: Vec<String> = cleaned.iter().flatten().cloned().collect();
        let mut done = beam_translate(&model, &pipe, cfg, &todo).into_iter();
        for c in &cleaned {
            let text = match c {
                Some(_) => done.next().unwrap_or_default(),
                None => String::new(),
            };
            writeln!(out, "{text}")?;
        }
        out.flush()?;
    }
    Ok(())
}

fn copy_if_missing(from: &Path, to: &Path) -> Result<()> {
    if to.exists() {
        return Ok(());
    }
    if from.is_dir() {
        fs::create_dir_all(to)?;
        for entry in fs::read_dir(from)? {
            let entry = entry?;
            copy_if_missing(&entry.path(), &to.join(entry.file_name()))?;
        }
    } else {
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(from, to).with_context(|| format!("copying {}", from.display()))?;
    }
    Ok(())
}

/// Reads the journal and rewrites it without a torn final line so that
/// new records start on a fresh line.
fn recover_journal(path: &Path) -> Result<Vec<JournalRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let records = read_journal(path)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("journal record serializes"));
        text.push('\n');
    }
    if fs::read_to_string(path)? != text {
        log::warn!("dropping a partially written record at the end of {}", path.display());
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, &text)?;
        fs::rename(&tmp, path)?;
    }
    Ok(records)
}

fn active_learn(cli: &Cli, run: &RunDir, a: &ActiveLearnArgs, serve: bool) -> Result<()> {
    let mut flags = Vec::new();
    push(&mut flags, "active_learning.strategy", a.strategy.clone());
    push(
        &mut flags,
        "active_learning.oracle",
        if serve {
            Some("interactive".to_string())
        } else {
            a.oracle.clone()
        },
    );
    push(&mut flags, "active_learning.budget", a.budget.map(|v| v as i64));
    push(&mut flags, "active_learning.query_size", a.query_size.map(|v| v as i64));
    push(&mut flags, "active_learning.pool_sample_fraction", a.pool_sample_fraction);
    if a.retrain_full {
        push(&mut flags, "active_learning.retrain_full", Some(true));
    }
    push(&mut flags, "annotation.bind", a.bind.clone());
    push(&mut flags, "annotation.idle_timeout_seconds", a.idle_timeout.map(|v| v as i64));
    let mut dirs: Vec<&Path> = vec![&run.root];
    if let Some(b) = &a.baseline_run {
        dirs.push(b);
    }
    let cfg = load_config(cli, &dirs, flags)?;
    let _lock = run.lock()?;
    if let Some(b) = &a.baseline_run {
        let base = RunDir::new(b);
        if !base.best_checkpoint().exists() {
            bail!("{} has no trained model; run `train` there first", b.display());
        }
        copy_if_missing(&base.data_dir(), &run.data_dir())?;
        copy_if_missing(&base.bpe_dir(), &run.bpe_dir())?;
        copy_if_missing(&base.best_checkpoint(), &run.best_checkpoint())?;
    }

    let pipe = load_pipeline(run)?;
    let initial = read_split(&run.baseline_prefix(), SplitTag::Train)?;
    let pool = MonolingualPool::read(&run.corpus_prefix())?;
    let dev_pairs = read_split(&run.corpus_prefix(), SplitTag::Dev)?;
    let history = recover_journal(&run.journal())?;
    // Refuse before touching the snapshot, so a mistyped flag cannot
    // overwrite the settings the journal was written with.
    if let Some(JournalRecord::Header(h)) = history.first() {
        let now = cfg.active_learning.header(initial.len(), pool.len());
        if *h != now {
            return Err(config_error(format!(
                "{} was written with different active-learning settings \
                 (journal: {}; now: {}); use a new run directory",
                run.journal().display(),
                serde_json::to_string(h).expect("header serializes"),
                serde_json::to_string(&now).expect("header serializes"),
            )));
        }
    }
    write_snapshot(run, &cfg)?;
    let resume_from = if history.is_empty() {
        None
    } else {
        replay(&initial.pairs, &pool, &history)
            .ok()
            .and_then(|s: ALState| s.last_checkpoint().map(str::to_owned))
    };
    let model_path = match resume_from {
        Some(name) => run.al_checkpoints().join(name),
        None => run.best_checkpoint(),
    };
    let model = load_model(&model_path, &pipe)?;
    let dev = dev_set(&pipe, &dev_pairs.pairs, model.config().max_length);
    if !history.is_empty() {
        log::info!("resuming from {} journal records", history.len());
    }

    let mut train_log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(run.al_train_log())?,
    );
    let mut learner = ActiveLearner {
        config: &cfg.active_learning,
        train_config: &cfg.train,
        pipeline: &pipe,
        dev: &dev,
        initial: &initial.pairs,
        pool: &pool,
        journal: Journal::open(&run.journal())?,
        checkpoint_dir: Some(run.al_checkpoints()),
        train_log: Some(&mut train_log),
    };

    let outcome = match cfg.active_learning.oracle {
        OracleMode::Simulated => {
            if pool.entries().iter().any(|e| !pool.has_hidden_reference(e.id)) {
                return Err(config_error(
                    "the simulated oracle needs the withheld pool references (data/corpus.pool.trg)",
                ));
            }
            learner.run(model, &history, &mut SimulatedOracle::from_pool(&pool))?
        }
        OracleMode::Interactive => {
            let queue = Arc::new(AnnotationQueue::new(Duration::from_secs(cfg.annotation.lease_seconds)));
            let state = replay(&initial.pairs, &pool, &history)?;
            queue.set_status(RunStatus {
                iteration: state.iteration,
                pending_count: 0,
                labeled_count: state.labeled.len(),
                pool_count: state.pool.len(),
                strategy: cfg.active_learning.strategy.as_str().to_string(),
            });
            let service = Service::start(&cfg.annotation.bind, queue.clone())?;
            let idle = match cfg.annotation.idle_timeout_seconds {
                0 => None,
                s => Some(Duration::from_secs(s)),
            };
            let result = learner.run(model, &history, &mut InteractiveOracle::new(queue, idle));
            service.stop();
            result?
        }
    };
    drop(learner);
    train_log.flush()?;

    let state = &outcome.state;
    let last = state.history.last();
    println!(
        "{} iterations; {} labeled, {} left in the pool; dev BLEU {}",
        state.iteration,
        state.labeled.len(),
        state.pool.len(),
        last.map_or("n/a".into(), |r| format!("{:.2}", r.dev_bleu * 100.0))
    );
    Ok(())
}

/// The annotation API running on its own thread.
struct Service {
    stop: tokio::sync::oneshot::Sender<()>,
    thread: std::thread::JoinHandle<std::io::Result<()>>,
}

impl Service {
    fn start(bind: &str, queue: Arc<AnnotationQueue>) -> Result<Self> {
        let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind(bind))
            .with_context(|| format!("binding the annotation service to {bind}"))?;
        let addr = listener.local_addr()?;
        eprintln!("annotation service listening on http://{addr}");
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(server::serve(listener, queue, async {
                let _ = stopped.await;
            }))
        });
        Ok(Self { stop, thread })
    }

    fn stop(self) {
        let _ = self.stop.send(());
        match self.thread.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => log::warn!("annotation service: {e}"),
            Err(_) => log::warn!("annotation service thread panicked"),
        }
    }
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_config = err.chain().any(|e| {
        e.downcast_ref::<config::ConfigError>().is_some()
            || matches!(e.downcast_ref::<activemt::Error>(), Some(activemt::Error::Config(_)))
    });
    if is_config {
        2
    } else {
        1
    }
}
