//! Batch active learning: sample the pool, score the sample, ask the
//! oracle for the highest-ranked sentences, add them to the labeled set
//! and update the model, once per iteration until the budget or the pool
//! runs out.
//!
//! Every decision is appended to a [`Journal`], and [`replay`] rebuilds the
//! exact [`ALState`] from it, so an interrupted run resumes where it
//! stopped.

mod journal;
mod oracle;
mod queue;

pub use journal::{read_journal, Journal, JournalHeader, JournalRecord, JOURNAL_VERSION};
pub use oracle::{InteractiveOracle, Oracle, OracleEvent, OracleItem, SimulatedOracle, SIMULATED_ANNOTATOR};
pub use queue::{AnnotationQueue, QueueError, RunStatus, Task, DEFAULT_LEASE};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::PathBuf;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::acquisition::{rank, score_pool, AcquisitionConfig, Strategy};
use crate::corpus::{MonolingualPool, SentenceId, SentencePair};
use crate::decoder::beam_search_each;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, Purpose};
use crate::text::TextPipeline;
use crate::trainer::{evaluate, fine_tune, train, DevSet, TrainConfig, TrainOptions};
use crate::transformer::{save_checkpoint, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Simulated,
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ALConfig {
    pub strategy: Strategy,
    /// Share of the initial pool scored per iteration.
    pub pool_sample_fraction: f64,
    /// Labels requested per iteration.
    pub query_size: usize,
    /// Number of query iterations.
    pub budget: u64,
    pub oracle: OracleMode,
    pub seed: u64,
    /// Retrain from a fresh initialization each iteration instead of
    /// fine-tuning the current model.
    pub retrain_full: bool,
    pub acquisition: AcquisitionConfig,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::LeastConfidence,
            pool_sample_fraction: 0.06,
            query_size: 10_000,
            budget: 20,
            oracle: OracleMode::Simulated,
            seed: 1,
            retrain_full: false,
            acquisition: AcquisitionConfig::default(),
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pool_sample_fraction > 0.0 && self.pool_sample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "pool_sample_fraction must lie in (0, 1], got {}",
                self.pool_sample_fraction
            )));
        }
        if self.query_size == 0 {
            return Err(Error::Config("query_size must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.acquisition.beam == 0 || self.acquisition.n_best == 0 {
            return Err(Error::Config("beam and n_best must be at least 1".into()));
        }
        Ok(())
    }

    /// Sentences scored per iteration: the configured share of the initial
    /// pool, but never fewer than one query batch.
    pub fn sample_size(&self, initial_pool: usize) -> usize {
        let share = (self.pool_sample_fraction * initial_pool as f64 - 1e-9).ceil().max(0.0) as usize;
        share.max(self.query_size)
    }

    /// The journal header a run with these settings writes.
    pub fn header(&self, initial_labeled: usize, initial_pool: usize) -> JournalHeader {
        JournalHeader {
            version: JOURNAL_VERSION,
            strategy: self.strategy,
            sequence_probability: self.acquisition.sequence_probability,
            seed: self.seed,
            query_size: self.query_size,
            budget: self.budget,
            pool_sample_fraction: self.pool_sample_fraction,
            sample_size: self.sample_size(initial_pool),
            initial_labeled,
            initial_pool,
            retrain_full: self.retrain_full,
        }
    }
}

/// One completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    /// Labeled sentences in the order the oracle answered.
    pub labeled: Vec<SentenceId>,
    pub skipped: Vec<SentenceId>,
    pub dev_bleu: f64,
    pub dev_ppl: f64,
    pub checkpoint: Option<String>,
    pub labeled_count: usize,
}

/// An iteration whose selection is journaled but whose model update is not.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenIteration {
    pub iteration: u64,
    pub ranked: Vec<SentenceId>,
    pub labeled: Vec<SentenceId>,
    pub skipped: Vec<SentenceId>,
}

impl OpenIteration {
    fn handled(&self, id: SentenceId) -> bool {
        self.labeled.contains(&id) || self.skipped.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ALState {
    /// Completed iterations.
    pub iteration: u64,
    pub labeled: BTreeMap<SentenceId, SentencePair>,
    pub pool: BTreeSet<SentenceId>,
    /// Dev BLEU and perplexity before the first iteration.
    pub baseline: Option<(f64, f64)>,
    pub history: Vec<IterationRecord>,
    pub open: Option<OpenIteration>,
}

impl ALState {
    pub fn new(initial: &[SentencePair], pool: &MonolingualPool) -> Result<Self> {
        let labeled: BTreeMap<SentenceId, SentencePair> = initial.iter().map(|p| (p.id, p.clone())).collect();
        if labeled.len() != initial.len() {
            return Err(Error::Invalid("labeled set has duplicate ids".into()));
        }
        let ids: BTreeSet<SentenceId> = pool.entries().iter().map(|e| e.id).collect();
        if ids.len() != pool.len() {
            return Err(Error::Invalid("pool has duplicate ids".into()));
        }
        if let Some(id) = ids.iter().find(|id| labeled.contains_key(id)) {
            return Err(Error::Invalid(format!("sentence {id} is both labeled and in the pool")));
        }
        Ok(Self {
            iteration: 0,
            labeled,
            pool: ids,
            baseline: None,
            history: Vec::new(),
            open: None,
        })
    }

    /// Checkpoint of the newest model, if any iteration saved one.
    pub fn last_checkpoint(&self) -> Option<&str> {
        self.history.iter().rev().find_map(|h| h.checkpoint.as_deref())
    }

    fn apply(&mut self, record: &JournalRecord, sources: &HashMap<SentenceId, &str>) -> Result<()> {
        let bad = |msg: String| Err(Error::Journal(msg));
        match record {
            JournalRecord::Header(_) => return bad("header after the first record".into()),
            JournalRecord::Baseline { dev_bleu, dev_ppl } => {
                if self.baseline.is_some() || self.iteration > 0 {
                    return bad("baseline recorded twice".into());
                }
                self.baseline = Some((*dev_bleu, *dev_ppl));
            }
            JournalRecord::Selection { iteration, ranked, .. } => {
                if self.open.is_some() || *iteration != self.iteration + 1 {
                    return bad(format!("unexpected selection for iteration {iteration}"));
                }
                if let Some(id) = ranked.iter().find(|id| !self.pool.contains(id)) {
                    return bad(format!("selected sentence {id} is not in the pool"));
                }
                self.open = Some(OpenIteration {
                    iteration: *iteration,
                    ranked: ranked.clone(),
                    labeled: Vec::new(),
                    skipped: Vec::new(),
                });
            }
            JournalRecord::Label { iteration, id, target, .. } => {
                self.check_answer(*iteration, *id)?;
                if target.trim().is_empty() {
                    return bad(format!("empty label for sentence {id}"));
                }
                let source = sources
                    .get(id)
                    .ok_or_else(|| Error::Journal(format!("sentence {id} is unknown")))?;
                self.pool.remove(id);
                self.labeled.insert(
                    *id,
                    SentencePair {
                        id: *id,
                        source: source.to_string(),
                        target: target.clone(),
                    },
                );
                self.open.as_mut().expect("checked").labeled.push(*id);
            }
            JournalRecord::Skip { iteration, id, .. } => {
                self.check_answer(*iteration, *id)?;
                self.open.as_mut().expect("checked").skipped.push(*id);
            }
            JournalRecord::IterationEnd {
                iteration,
                dev_bleu,
                dev_ppl,
                checkpoint,
                labeled_count,
                pool_count,
            } => {
                let open = match self.open.take() {
                    Some(o) if o.iteration == *iteration => o,
                    _ => return bad(format!("iteration {iteration} ended without a selection")),
                };
                if *labeled_count != self.labeled.len() || *pool_count != self.pool.len() {
                    return bad(format!(
                        "iteration {iteration} counts {labeled_count}/{pool_count} disagree with replayed {}/{}",
                        self.labeled.len(),
                        self.pool.len()
                    ));
                }
                self.history.push(IterationRecord {
                    iteration: *iteration,
                    labeled: open.labeled,
                    skipped: open.skipped,
                    dev_bleu: *dev_bleu,
                    dev_ppl: *dev_ppl,
                    checkpoint: checkpoint.clone(),
                    labeled_count: *labeled_count,
                });
                self.iteration = *iteration;
            }
        }
        Ok(())
    }

    fn check_answer(&self, iteration: u64, id: SentenceId) -> Result<()> {
        match &self.open {
            Some(o) if o.iteration == iteration && o.ranked.contains(&id) && !o.handled(id) => Ok(()),
            _ => Err(Error::Journal(format!(
                "answer for sentence {id} in iteration {iteration} does not match an open request"
            ))),
        }
    }
}

/// Rebuilds the state described by `records`, which must start with the
/// header. A torn final line is tolerated by [`read_journal`]; anything
/// else inconsistent is an error.
pub fn replay(initial: &[SentencePair], pool: &MonolingualPool, records: &[JournalRecord]) -> Result<ALState> {
    let mut state = ALState::new(initial, pool)?;
    let sources: HashMap<SentenceId, &str> = pool.entries().iter().map(|e| (e.id, e.source.as_str())).collect();
    let Some((first, rest)) = records.split_first() else {
        return Ok(state);
    };
    let JournalRecord::Header(h) = first else {
        return Err(Error::Journal("journal does not start with a header".into()));
    };
    if h.initial_labeled != initial.len() || h.initial_pool != pool.len() {
        return Err(Error::Journal("journal was written for different data".into()));
    }
    for r in rest {
        state.apply(r, &sources)?;
    }
    Ok(state)
}

/// Everything one run needs besides the model and the oracle.
pub struct ActiveLearner<'a> {
    pub config: &'a ALConfig,
    pub train_config: &'a TrainConfig,
    pub pipeline: &'a TextPipeline,
    pub dev: &'a DevSet,
    /// The labeled seed set.
    pub initial: &'a [SentencePair],
    pub pool: &'a MonolingualPool,
    pub journal: Journal,
    /// Per-iteration checkpoints go here as `iter-<k>.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Receives the training log of every model update.
    pub train_log: Option<&'a mut dyn Write>,
}

pub struct ALOutcome {
    pub model: Transformer<f32>,
    pub state: ALState,
}

impl ActiveLearner<'_> {
    /// Runs (or, given a non-empty `history`, resumes) the loop with
    /// `model` as the current model. New records are appended to the
    /// journal; `history` must be the journal's previous contents.
    pub fn run(
        &mut self,
        mut model: Transformer<f32>,
        history: &[JournalRecord],
        oracle: &mut dyn Oracle,
    ) -> Result<ALOutcome> {
        self.config.validate()?;
        let header = self.config.header(self.initial.len(), self.pool.len());
        let mut state = match history.first() {
            None => {
                self.journal.append(&JournalRecord::Header(header.clone()))?;
                ALState::new(self.initial, self.pool)?
            }
            Some(JournalRecord::Header(h)) if *h == header => replay(self.initial, self.pool, history)?,
            Some(JournalRecord::Header(h)) => {
                return Err(Error::Config(format!(
                    "journal was written with different settings: {h:?}, now {header:?}"
                )))
            }
            Some(_) => return Err(Error::Journal("journal does not start with a header".into())),
        };
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let sources: HashMap<SentenceId, &str> =
            self.pool.entries().iter().map(|e| (e.id, e.source.as_str())).collect();
        let max_length = model.config().max_length;

        if state.baseline.is_none() && state.iteration == 0 && state.open.is_none() {
            let eval = evaluate(&model, self.dev, &self.pipeline.target, &self.train_config.decode, true)?;
            let (bleu, ppl) = (eval.bleu.map_or(0.0, |b| b.bleu), eval.perplexity.perplexity);
            self.journal.append(&JournalRecord::Baseline {
                dev_bleu: bleu,
                dev_ppl: ppl,
            })?;
            state.baseline = Some((bleu, ppl));
        }

        while state.iteration < self.config.budget && (!state.pool.is_empty() || state.open.is_some()) {
            let k = state.iteration + 1;
            let mut hypotheses: HashMap<SentenceId, (String, Option<f64>)> = HashMap::new();
            if state.open.is_none() {
                let sample = self.draw_sample(&state, k);
                let inputs: Vec<(SentenceId, Vec<u32>)> = sample
                    .iter()
                    .map(|id| (*id, self.pipeline.source_ids(sources[id], max_length)))
                    .collect();
                let scores = score_pool(
                    &model,
                    &inputs,
                    self.config.strategy,
                    &self.config.acquisition,
                    self.config.seed,
                    k,
                );
                for (s, h) in scores.scores.iter().zip(&scores.best_hypotheses) {
                    let text = h.as_ref().map(|h| self.pipeline.target.decode(h.content())).unwrap_or_default();
                    hypotheses.insert(s.id, (text, s.value));
                }
                let ranked = rank(&scores.scores);
                let record = JournalRecord::Selection {
                    iteration: k,
                    scores: scores.scores,
                    ranked,
                    query_size: self.config.query_size,
                };
                self.journal.append(&record)?;
                state.apply(&record, &sources)?;
            }
            self.report(oracle, &state, k);
            self.query(&mut state, &model, k, &sources, &hypotheses, oracle)?;
            model = self.update(model, &state, k)?;
            let eval = evaluate(&model, self.dev, &self.pipeline.target, &self.train_config.decode, true)?;
            let (bleu, ppl) = (eval.bleu.map_or(0.0, |b| b.bleu), eval.perplexity.perplexity);
            let checkpoint = match &self.checkpoint_dir {
                Some(dir) => {
                    let name = format!("iter-{k}.ckpt");
                    save_checkpoint(&dir.join(&name), &model)?;
                    Some(name)
                }
                None => None,
            };
            let record = JournalRecord::IterationEnd {
                iteration: k,
                dev_bleu: bleu,
                dev_ppl: ppl,
                checkpoint,
                labeled_count: state.labeled.len(),
                pool_count: state.pool.len(),
            };
            self.journal.append(&record)?;
            state.apply(&record, &sources)?;
            log::info!(
                "iteration {k}: {} labeled, {} in pool, dev BLEU {:.4}, ppl {:.3}",
                state.labeled.len(),
                state.pool.len(),
                bleu,
                ppl
            );
        }
        self.report(oracle, &state, state.iteration);
        Ok(ALOutcome { model, state })
    }

    /// Sorted ids drawn without replacement from the remaining pool.
    fn draw_sample(&self, state: &ALState, iteration: u64) -> Vec<SentenceId> {
        let remaining: Vec<SentenceId> = state.pool.iter().copied().collect();
        let n = self.config.sample_size(self.pool.len()).min(remaining.len());
        let mut rng = derived_rng(self.config.seed, Purpose::PoolSample, iteration);
        let mut ids: Vec<SentenceId> = rand::seq::index::sample(&mut rng, remaining.len(), n)
            .into_iter()
            .map(|i| remaining[i])
            .collect();
        ids.sort_unstable();
        ids
    }

    fn report(&self, oracle: &mut dyn Oracle, state: &ALState, iteration: u64) {
        oracle.progress(&RunStatus {
            iteration,
            pending_count: 0,
            labeled_count: state.labeled.len(),
            pool_count: state.pool.len(),
            strategy: self.config.strategy.to_string(),
        });
    }

    /// Asks the oracle for candidates in rank order until the batch has
    /// `query_size` labels or the ranking is exhausted. Skipped sentences
    /// stay in the pool and are replaced by the next candidate.
    fn query(
        &mut self,
        state: &mut ALState,
        model: &Transformer<f32>,
        k: u64,
        sources: &HashMap<SentenceId, &str>,
        hypotheses: &HashMap<SentenceId, (String, Option<f64>)>,
        oracle: &mut dyn Oracle,
    ) -> Result<()> {
        let max_length = model.config().max_length;
        loop {
            let open = state.open.as_ref().expect("selection is open");
            let needed = self.config.query_size.saturating_sub(open.labeled.len());
            let batch: Vec<SentenceId> = open
                .ranked
                .iter()
                .copied()
                .filter(|id| !open.handled(*id))
                .take(needed)
                .collect();
            if batch.is_empty() {
                if needed > 0 {
                    log::warn!("iteration {k}: ranking exhausted with {needed} labels still missing");
                }
                return Ok(());
            }
            let missing: Vec<SentenceId> = batch
                .iter()
                .copied()
                .filter(|id| oracle.wants_hypotheses() && !hypotheses.contains_key(id))
                .collect();
            let decoded = self.decode_missing(model, &missing, sources, max_length);
            let items: Vec<OracleItem> = batch
                .iter()
                .map(|id| {
                    let (hypothesis, score) = hypotheses
                        .get(id)
                        .or_else(|| decoded.get(id))
                        .cloned()
                        .unwrap_or_default();
                    OracleItem {
                        id: *id,
                        source: sources[id].to_string(),
                        hypothesis,
                        score,
                    }
                })
                .collect();
            let journal = self.journal.clone();
            oracle.answer(k, &items, &mut |event| {
                let record = match event {
                    OracleEvent::Label { id, target, annotator } => JournalRecord::Label {
                        iteration: k,
                        id,
                        target,
                        annotator,
                    },
                    OracleEvent::Skip { id, annotator } => JournalRecord::Skip {
                        iteration: k,
                        id,
                        annotator,
                    },
                };
                if !batch.contains(&event_id(&record)) {
                    return Err(Error::Oracle(format!(
                        "answer for sentence {} which was not requested",
                        event_id(&record)
                    )));
                }
                // Validate before journaling so the journal stays replayable.
                state.apply(&record, sources).map_err(|e| Error::Oracle(e.to_string()))?;
                journal.append(&record)
            })?;
        }
    }

    fn decode_missing(
        &self,
        model: &Transformer<f32>,
        ids: &[SentenceId],
        sources: &HashMap<SentenceId, &str>,
        max_length: usize,
    ) -> HashMap<SentenceId, (String, Option<f64>)> {
        if ids.is_empty() {
            return HashMap::new();
        }
        let inputs: Vec<Vec<u32>> = ids
            .iter()
            .map(|id| self.pipeline.source_ids(sources[id], max_length))
            .collect();
        let beam = self.config.acquisition.beam;
        ids.iter()
            .zip(beam_search_each(model, &inputs, beam, 1, &self.config.acquisition.decode))
            .filter_map(|(id, r)| {
                let list = r.ok()?;
                let best = list.hypotheses.first()?;
                Some((*id, (self.pipeline.target.decode(best.content()), None)))
            })
            .collect()
    }

    /// Fine-tunes the current model on the whole labeled set, or retrains
    /// from scratch when configured to.
    fn update(&mut self, model: Transformer<f32>, state: &ALState, k: u64) -> Result<Transformer<f32>> {
        let pairs: Vec<SentencePair> = state.labeled.values().cloned().collect();
        let (train_pairs, cut) = self.pipeline.pairs(&pairs, model.config().max_length);
        if cut > 0 {
            log::warn!("iteration {k}: {cut} labeled pairs truncated");
        }
        let seed = derived_rng(self.config.seed, Purpose::FineTune, k).next_u64();
        let config = TrainConfig {
            dev_bleu: false,
            ..self.train_config.clone()
        };
        let sink = self.train_log.as_mut().map(|w| &mut **w as &mut dyn Write);
        let outcome = if self.config.retrain_full {
            let mut init = derived_rng(self.config.seed, Purpose::Init, k);
            let fresh = Transformer::new(*model.config(), &mut init)?;
            let options = TrainOptions {
                epochs: config.epochs,
                seed,
                skip_warmup: false,
                checkpoint_dir: None,
            };
            train(fresh, &train_pairs, self.dev, &self.pipeline.target, &config, &options, sink)?
        } else {
            fine_tune(model, &train_pairs, self.dev, &self.pipeline.target, &config, seed, None, sink)?
        };
        Ok(outcome.best)
    }
}

fn event_id(r: &JournalRecord) -> SentenceId {
    match r {
        JournalRecord::Label { id, .. } | JournalRecord::Skip { id, .. } => *id,
        _ => unreachable!("only answers are checked"),
    }
}

/// Fewest labeled pairs at which the dev BLEU curve first reaches
/// `threshold`, counting the baseline as the first point.
pub fn labels_to_reach(state: &ALState, initial_labeled: usize, threshold: f64) -> Option<usize> {
    let base = state.baseline.map(|(b, _)| (initial_labeled, b));
    base.into_iter()
        .chain(state.history.iter().map(|h| (h.labeled_count, h.dev_bleu)))
        .find(|(_, bleu)| *bleu >= threshold)
        .map(|(n, _)| n)
}

#[cfg(test)]
mod tests;
