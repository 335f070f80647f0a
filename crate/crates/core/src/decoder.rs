//! Greedy and beam-search decoding with per-token log-probabilities.
//!
//! Both decoders are batched: sources are grouped by length into chunks
//! and every step issues one model call for all live prefixes in a chunk.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bpe::{BOS, EOS};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::transformer::{EncoderOutput, Transformer};

/// Anything that can score the next target token given a source and a
/// prefix starting with `<s>`.
pub trait StepModel {
    type Encoded;

    /// Sources end with `</s>`.
    fn encode(&self, sources: &[&[u32]]) -> Result<Self::Encoded>;

    /// Natural-log next-token distributions for `(source index, prefix)`.
    fn next_log_probs(&self, encoded: &Self::Encoded, queries: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>>;

    /// Longest prefix (including `<s>`) the model accepts.
    fn max_prefix(&self) -> usize;
}

impl<T: Scalar> StepModel for Transformer<T> {
    type Encoded = EncoderOutput<T>;

    fn encode(&self, sources: &[&[u32]]) -> Result<Self::Encoded> {
        Transformer::encode(self, sources)
    }

    fn next_log_probs(&self, encoded: &Self::Encoded, queries: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>> {
        Transformer::next_log_probs(self, encoded, queries)
    }

    fn max_prefix(&self) -> usize {
        self.config().max_length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Most tokens generated per hypothesis, `</s>` included.
    pub max_length: usize,
    /// Sentences decoded together.
    pub batch_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_length: 60,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids, ending in `</s>` unless cut at the length limit.
    pub tokens: Vec<u32>,
    pub token_log_probs: Vec<f64>,
    /// `Σ token_log_probs / |tokens|`.
    pub score: f64,
}

impl Hypothesis {
    pub fn new(tokens: Vec<u32>, token_log_probs: Vec<f64>) -> Self {
        let score = if tokens.is_empty() {
            0.0
        } else {
            token_log_probs.iter().sum::<f64>() / tokens.len() as f64
        };
        Self {
            tokens,
            token_log_probs,
            score,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Tokens without the trailing `</s>`.
    pub fn content(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    pub fn log_prob(&self) -> f64 {
        self.token_log_probs.iter().sum()
    }

    /// `exp(score)`: the geometric mean of the token probabilities.
    pub fn normalized_prob(&self) -> f64 {
        self.score.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    /// Position of the source in the decoded batch.
    pub index: usize,
    /// Descending by score.
    pub hypotheses: Vec<Hypothesis>,
}

impl NBestList {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

fn max_steps<M: StepModel>(model: &M, config: &DecodeConfig) -> Result<usize> {
    if config.max_length == 0 || config.batch_size == 0 {
        return Err(Error::Config("decode max_length and batch_size must be positive".into()));
    }
    Ok(config.max_length.min(model.max_prefix()))
}

/// Chunks of source indices with similar lengths.
fn chunks(sources: &[Vec<u32>], size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by_key(|&i| (sources[i].len(), i));
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Highest-probability token at every step, ties to the lowest id.
pub fn greedy<M: StepModel>(model: &M, sources: &[Vec<u32>], config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    let steps = max_steps(model, config)?;
    let mut out = vec![None; sources.len()];
    for chunk in chunks(sources, config.batch_size) {
        let srcs: Vec<&[u32]> = chunk.iter().map(|&i| sources[i].as_slice()).collect();
        let enc = model.encode(&srcs)?;
        let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS]; chunk.len()];
        let mut lps: Vec<Vec<f64>> = vec![Vec::new(); chunk.len()];
        let mut alive: Vec<usize> = (0..chunk.len()).collect();
        for _ in 0..steps {
            if alive.is_empty() {
                break;
            }
            let queries: Vec<(usize, &[u32])> = alive.iter().map(|&a| (a, prefixes[a].as_slice())).collect();
            let rows = model.next_log_probs(&enc, &queries)?;
            let mut still = Vec::with_capacity(alive.len());
            for (&a, row) in alive.iter().zip(&rows) {
                let t = argmax(row);
                prefixes[a].push(t as u32);
                lps[a].push(row[t]);
                if t as u32 != EOS {
                    still.push(a);
                }
            }
            alive = still;
        }
        for (k, &i) in chunk.iter().enumerate() {
            let tokens = prefixes[k][1..].to_vec();
            out[i] = Some(Hypothesis::new(tokens, std::mem::take(&mut lps[k])));
        }
    }
    Ok(out.into_iter().map(|h| h.expect("every source decoded")).collect())
}

#[derive(Clone)]
struct Partial {
    tokens: Vec<u32>,
    lps: Vec<f64>,
    cum: f64,
}

struct BeamState {
    alive: Vec<Partial>,
    finished: Vec<Hypothesis>,
}

fn by_score_desc(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Beam search over cumulative log-probability.
///
/// Each source keeps `beam − finished` live prefixes; a prefix that emits
/// `</s>` is frozen as finished. Search stops when every slot is finished,
/// no prefix is alive, or the length limit is hit. Finished hypotheses are
/// ranked by length-normalized score; if fewer than `n_best` finished, the
/// best unfinished ones fill the list.
pub fn beam_search<M: StepModel>(
    model: &M,
    sources: &[Vec<u32>],
    beam: usize,
    n_best: usize,
    config: &DecodeConfig,
) -> Result<Vec<NBestList>> {
    if beam == 0 || n_best == 0 || n_best > beam {
        return Err(Error::Config(format!(
            "beam search needs 1 <= n_best ({n_best}) <= beam ({beam})"
        )));
    }
    let steps = max_steps(model, config)?;
    let mut out = vec![None; sources.len()];
    for chunk in chunks(sources, config.batch_size) {
        let lists = beam_chunk(model, sources, &chunk, beam, n_best, steps)?;
        for (i, list) in chunk.iter().zip(lists) {
            out[*i] = Some(NBestList {
                index: *i,
                hypotheses: list,
            });
        }
    }
    Ok(out.into_iter().map(|l| l.expect("every source decoded")).collect())
}

/// Like [`beam_search`], but a failing chunk is retried one sentence at a
/// time so a single bad source only fails itself.
pub fn beam_search_each<M: StepModel>(
    model: &M,
    sources: &[Vec<u32>],
    beam: usize,
    n_best: usize,
    config: &DecodeConfig,
) -> Vec<Result<NBestList>> {
    let steps = match max_steps(model, config) {
        Ok(s) if beam > 0 && n_best > 0 && n_best <= beam => s,
        Ok(_) => return sources.iter().map(|_| Err(Error::Config("invalid beam size".into()))).collect(),
        Err(e) => {
            let msg = e.to_string();
            return sources.iter().map(|_| Err(Error::Config(msg.clone()))).collect();
        }
    };
    let mut out: Vec<Option<Result<NBestList>>> = (0..sources.len()).map(|_| None).collect();
    for chunk in chunks(sources, config.batch_size) {
        match beam_chunk(model, sources, &chunk, beam, n_best, steps) {
            Ok(lists) => {
                for (&i, list) in chunk.iter().zip(lists) {
                    out[i] = Some(Ok(NBestList {
                        index: i,
                        hypotheses: list,
                    }));
                }
            }
            Err(_) => {
                for &i in &chunk {
                    out[i] = Some(beam_chunk(model, sources, &[i], beam, n_best, steps).map(|mut l| NBestList {
                        index: i,
                        hypotheses: l.remove(0),
                    }));
                }
            }
        }
    }
    out.into_iter().map(|r| r.expect("every source decoded")).collect()
}

fn beam_chunk<M: StepModel>(
    model: &M,
    sources: &[Vec<u32>],
    chunk: &[usize],
    beam: usize,
    n_best: usize,
    steps: usize,
) -> Result<Vec<Vec<Hypothesis>>> {
    let srcs: Vec<&[u32]> = chunk.iter().map(|&i| sources[i].as_slice()).collect();
    let enc = model.encode(&srcs)?;
    let mut states: Vec<BeamState> = (0..chunk.len())
        .map(|_| BeamState {
            alive: vec![Partial {
                tokens: vec![BOS],
                lps: Vec::new(),
                cum: 0.0,
            }],
            finished: Vec::new(),
        })
        .collect();
    for _ in 0..steps {
        let mut prefixes: Vec<(usize, &[u32])> = Vec::new();
        for (s, st) in states.iter().enumerate() {
            for p in &st.alive {
                prefixes.push((s, &p.tokens));
            }
        }
        if prefixes.is_empty() {
            break;
        }
        let rows = model.next_log_probs(&enc, &prefixes)?;
        let mut offset = 0;
        for st in states.iter_mut() {
            let n_alive = st.alive.len();
            let rows = &rows[offset..offset + n_alive];
            offset += n_alive;
            if n_alive == 0 {
                continue;
            }
            let slots = beam - st.finished.len();
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (b, row) in rows.iter().enumerate() {
                let base = st.alive[b].cum;
                for (v, &lp) in row.iter().enumerate() {
                    if lp.is_finite() {
                        cands.push((base + lp, b, v));
                    }
                }
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            cands.truncate(slots);
            let mut next = Vec::with_capacity(slots);
            for (cum, b, v) in cands {
                let parent = &st.alive[b];
                let mut tokens = parent.tokens.clone();
                tokens.push(v as u32);
                let mut lps = parent.lps.clone();
                lps.push(rows[b][v]);
                if v as u32 == EOS {
                    st.finished.push(Hypothesis::new(tokens[1..].to_vec(), lps));
                } else {
                    next.push(Partial { tokens, lps, cum });
                }
            }
            st.alive = if st.finished.len() >= beam { Vec::new() } else { next };
        }
    }
    Ok(states
        .into_iter()
        .map(|st| {
            let mut finished = st.finished;
            finished.sort_by(by_score_desc);
            if finished.len() < n_best {
                let mut rest: Vec<Hypothesis> = st
                    .alive
                    .into_iter()
                    .map(|p| Hypothesis::new(p.tokens[1..].to_vec(), p.lps))
                    .collect();
                rest.sort_by(by_score_desc);
                rest.truncate(n_best - finished.len());
                finished.extend(rest);
                finished.sort_by(by_score_desc);
            }
            finished.truncate(n_best);
            finished
        })
        .collect())
}

/// A model defined by a function from `(source, prefix)` to next-token
/// probabilities. Zero probabilities become `-inf` log-probabilities.
pub struct ScriptedModel<F> {
    pub vocab: usize,
    pub max_prefix: usize,
    pub table: F,
}

impl<F: Fn(&[u32], &[u32]) -> Vec<f64>> StepModel for ScriptedModel<F> {
    type Encoded = Vec<Vec<u32>>;

    fn encode(&self, sources: &[&[u32]]) -> Result<Self::Encoded> {
        Ok(sources.iter().map(|s| s.to_vec()).collect())
    }

    fn next_log_probs(&self, encoded: &Self::Encoded, queries: &[(usize, &[u32])]) -> Result<Vec<Vec<f64>>> {
        queries
            .iter()
            .map(|&(s, prefix)| {
                if prefix.len() > self.max_prefix {
                    return Err(Error::PrefixTooLong {
                        len: prefix.len(),
                        max: self.max_prefix,
                    });
                }
                let probs = (self.table)(&encoded[s], prefix);
                if probs.len() != self.vocab {
                    return Err(Error::Invalid(format!(
                        "scripted distribution has {} entries for vocabulary {}",
                        probs.len(),
                        self.vocab
                    )));
                }
                Ok(probs.iter().map(|p| p.ln()).collect())
            })
            .collect()
    }

    fn max_prefix(&self) -> usize {
        self.max_prefix
    }
}
