//! Mini-batch training with warmup, plateau decay, validation, early
//! stopping and best-checkpoint retention.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::decoder::{greedy, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::{perplexity, text_bleu, BleuConfig, BleuReport, PerplexityReport};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::rng::{derived_rng, Purpose};
use crate::text::Side;
use crate::transformer::{save_checkpoint, Mode, Transformer, TrainingPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub plateau_factor: f64,
    /// Validations without improvement before the rate is decayed.
    pub patience: u32,
    /// Relative improvement in dev perplexity that counts as progress.
    pub plateau_tolerance: f64,
    pub epochs: usize,
    /// Token budget per batch (source plus target positions).
    pub batch_tokens: usize,
    pub validate_every: u64,
    pub keep_best: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub fine_tune_epochs: usize,
    /// Compute greedy dev BLEU at each validation.
    pub dev_bleu: bool,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_steps: 1000,
            min_lr: 1e-8,
            plateau_factor: 0.7,
            patience: 5,
            plateau_tolerance: 1e-4,
            epochs: 40,
            batch_tokens: 512,
            validate_every: 1000,
            keep_best: 3,
            label_smoothing: 0.1,
            dropout: 0.3,
            fine_tune_epochs: 2,
            dev_bleu: true,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail("plateau_factor must lie in (0, 1)");
        }
        if !(self.min_lr > 0.0 && self.min_lr < self.lr0) {
            return fail("min_lr must be positive and below lr0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        if self.batch_tokens == 0 || self.validate_every == 0 || self.keep_best == 0 {
            return fail("batch_tokens, validate_every and keep_best must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Linear warmup to `lr0`, then `lr0 · factor^m` after `m` plateau
/// events, never below `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub warmup_steps: u64,
    pub factor: f64,
    pub min_lr: f64,
    pub plateaus: u32,
}

impl LrSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr0: config.lr0,
            warmup_steps: config.warmup_steps,
            factor: config.plateau_factor,
            min_lr: config.min_lr,
            plateaus: 0,
        }
    }

    /// Rate for step `t ≥ 1`.
    pub fn lr(&self, t: u64) -> f64 {
        let base = if t < self.warmup_steps {
            self.lr0 * t as f64 / self.warmup_steps as f64
        } else {
            self.lr0
        };
        (base * self.factor.powi(self.plateaus as i32)).max(self.min_lr)
    }

    /// Whether decay can no longer lower the post-warmup rate.
    pub fn at_floor(&self) -> bool {
        self.lr0 * self.factor.powi(self.plateaus as i32) <= self.min_lr
    }
}

/// Counts validations without relative improvement of the best perplexity.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauTracker {
    pub best: Option<f64>,
    pub bad: u32,
    pub patience: u32,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub plateau: bool,
}

impl PlateauTracker {
    pub fn new(patience: u32, tolerance: f64) -> Self {
        Self {
            best: None,
            bad: 0,
            patience,
            tolerance,
        }
    }

    pub fn observe(&mut self, ppl: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some(b) => ppl < b * (1.0 - self.tolerance),
        };
        if improved {
            self.best = Some(ppl);
            self.bad = 0;
            return Observation {
                improved,
                plateau: false,
            };
        }
        self.bad += 1;
        let plateau = self.bad >= self.patience;
        if plateau {
            self.bad = 0;
        }
        Observation { improved, plateau }
    }
}

/// Length-bucketed batches under a token budget: a seeded shuffle, a
/// stable sort by length, greedy packing, then a shuffle of batch order.
pub fn make_batches(pairs: &[TrainingPair], budget: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| (pairs[i].source.len(), pairs[i].target.len()));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let cost = pairs[i].source.len() + pairs[i].target_positions();
        if !current.is_empty() && used + cost > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += cost;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    batches
}

/// Held-out pairs with their reference text.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub pairs: Vec<TrainingPair>,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub perplexity: PerplexityReport,
    pub bleu: Option<BleuReport>,
    /// Share of greedy outputs equal to the reference.
    pub exact_match: Option<f64>,
    #[serde(skip)]
    pub translations: Vec<String>,
}

const EVAL_CHUNK: usize = 64;

/// Dev perplexity under teacher forcing plus, if requested, greedy BLEU
/// on detokenized text. Never touches the parameters.
pub fn evaluate(
    model: &Transformer<f32>,
    dev: &DevSet,
    target: &Side,
    decode: &DecodeConfig,
    with_bleu: bool,
) -> Result<Evaluation> {
    let mut log_probs = Vec::new();
    for chunk in dev.pairs.chunks(EVAL_CHUNK) {
        for row in model.gold_log_probs(chunk)? {
            log_probs.extend(row);
        }
    }
    let ppl = perplexity(&log_probs)?;
    if !with_bleu {
        return Ok(Evaluation {
            perplexity: ppl,
            bleu: None,
            exact_match: None,
            translations: Vec::new(),
        });
    }
    let sources: Vec<Vec<u32>> = dev.pairs.iter().map(|p| p.source.clone()).collect();
    let hyps = greedy(model, &sources, decode)?;
    let translations: Vec<String> = hyps.iter().map(|h| target.decode(h.content())).collect();
    let bleu = text_bleu(&translations, &dev.references, &BleuConfig::default())?;
    let exact = translations.iter().zip(&dev.references).filter(|(a, b)| a == b).count();
    Ok(Evaluation {
        perplexity: ppl,
        bleu: Some(bleu),
        exact_match: Some(exact as f64 / dev.pairs.len().max(1) as f64),
        translations,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub lr: f64,
    pub dev_ppl: f64,
    pub dev_bleu: Option<f64>,
}

/// Per-run knobs that differ between initial training and fine-tuning.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    /// Start at the full rate instead of warming up.
    pub skip_warmup: bool,
    /// Where to keep the best checkpoints; `best.ckpt` always holds the
    /// best one.
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    /// Parameters with the lowest dev perplexity seen.
    pub best: Transformer<f32>,
    pub best_evaluation: Evaluation,
    pub log: Vec<LogRecord>,
    pub steps: u64,
    pub stopped_early: bool,
    pub checkpoints: Vec<PathBuf>,
}

fn dump(model: &Transformer<f32>, batch: &[TrainingPair], lr: f64) -> String {
    let bad: Vec<&str> = model
        .params()
        .names()
        .iter()
        .zip(model.params().tensors())
        .filter(|(_, t)| !t.all_finite())
        .map(|(n, _)| n.as_str())
        .collect();
    let lens: Vec<(usize, usize)> = batch.iter().map(|p| (p.source.len(), p.target.len())).collect();
    format!("lr={lr:e}, batch lengths={lens:?}, non-finite parameters={bad:?}")
}

/// Trains `model` on `train`, validating on `dev` every
/// `validate_every` steps and once at the end. Log records are also
/// written as JSON lines to `log_sink` when given.
pub fn train(
    mut model: Transformer<f32>,
    train: &[TrainingPair],
    dev: &DevSet,
    target: &Side,
    config: &TrainConfig,
    options: &TrainOptions,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dev.pairs.is_empty() {
        return Err(Error::Invalid("training needs a non-empty dev set".into()));
    }
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut schedule = LrSchedule::new(config);
    if options.skip_warmup {
        schedule.warmup_steps = 0;
    }
    let mut tracker = PlateauTracker::new(config.patience, config.plateau_tolerance);
    let mut adam = AdamState::new(model.params().tensors());
    let adam_cfg = config.adam();
    let mut dropout_rng = derived_rng(options.seed, Purpose::Dropout, 0);
    let mut step = 0u64;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut log = Vec::new();
    let mut best: Option<(Transformer<f32>, Evaluation)> = None;
    let mut kept: Vec<PathBuf> = Vec::new();
    let mut stopped_early = false;
    let mut last_validated = 0u64;

    let mut validate = |model: &Transformer<f32>,
                        step: u64,
                        epoch: usize,
                        lr: f64,
                        loss_sum: &mut f64,
                        loss_count: &mut usize,
                        schedule: &mut LrSchedule|
     -> Result<bool> {
        let eval = evaluate(model, dev, target, &config.decode, config.dev_bleu)?;
        let record = LogRecord {
            step,
            epoch,
            train_loss: if *loss_count > 0 {
                *loss_sum / *loss_count as f64
            } else {
                0.0
            },
            lr,
            dev_ppl: eval.perplexity.perplexity,
            dev_bleu: eval.bleu.as_ref().map(|b| b.bleu),
        };
        *loss_sum = 0.0;
        *loss_count = 0;
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&record).expect("log record serializes");
            writeln!(sink, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        log.push(record);
        let obs = tracker.observe(eval.perplexity.perplexity);
        if obs.improved {
            if let Some(dir) = &options.checkpoint_dir {
                let path = dir.join(format!("{step}.ckpt"));
                save_checkpoint(&path, model)?;
                save_checkpoint(&dir.join("best.ckpt"), model)?;
                kept.push(path);
                while kept.len() > config.keep_best {
                    let old = kept.remove(0);
                    std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                }
            }
            best = Some((model.clone(), eval));
        }
        if obs.plateau {
            if schedule.at_floor() {
                return Ok(true);
            }
            schedule.plateaus += 1;
        }
        Ok(false)
    };

    'epochs: for epoch in 0..options.epochs {
        let mut shuffle_rng = derived_rng(options.seed, Purpose::Shuffle, epoch as u64);
        for batch_idx in make_batches(train, config.batch_tokens, &mut shuffle_rng) {
            let batch: Vec<TrainingPair> = batch_idx.iter().map(|&i| train[i].clone()).collect();
            step += 1;
            let lr = schedule.lr(step);
            let graph = model.loss_graph(
                &batch,
                config.label_smoothing,
                Mode::Train {
                    dropout: config.dropout,
                    rng: &mut dropout_rng as &mut dyn RngCore,
                },
            )?;
            let loss = graph.loss_value();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    dump: dump(&model, &batch, lr),
                });
            }
            let grads = graph.gradients();
            drop(graph);
            adam_step(model.params_mut().tensors_mut(), &grads, &mut adam, lr, &adam_cfg);
            loss_sum += loss;
            loss_count += 1;
            if step.is_multiple_of(config.validate_every) {
                last_validated = step;
                if validate(&model, step, epoch, lr, &mut loss_sum, &mut loss_count, &mut schedule)? {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if last_validated != step || step == 0 {
        let lr = schedule.lr(step.max(1));
        let epoch = options.epochs.saturating_sub(1);
        validate(&model, step, epoch, lr, &mut loss_sum, &mut loss_count, &mut schedule)?;
    }
    let (best, best_evaluation) = best.expect("at least one validation ran");
    Ok(TrainOutcome {
        best,
        best_evaluation,
        log,
        steps: step,
        stopped_early,
        checkpoints: kept,
    })
}

/// Continues training from `model` on `pairs` with fresh optimizer
/// moments and no warmup.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    model: Transformer<f32>,
    pairs: &[TrainingPair],
    dev: &DevSet,
    target: &Side,
    config: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let options = TrainOptions {
        epochs: config.fine_tune_epochs,
        seed,
        skip_warmup: true,
        checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
    };
    train(model, pairs, dev, target, config, &options, log_sink)
}
