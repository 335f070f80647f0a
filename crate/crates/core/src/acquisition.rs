//! Uncertainty scores for unlabeled sentences and top-B selection.
//!
//! Higher values mean a sentence is more worth labeling. Least confidence
//! is `1 − P(y*)` for the best hypothesis; margin is `−(P(y₁*) − P(y₂*))`
//! over the two best full hypotheses. `P` is the geometric mean of the
//! token probabilities unless the raw sequence product is requested.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentenceId;
use crate::decoder::{beam_search_each, DecodeConfig, Hypothesis, NBestList, StepModel};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LeastConfidence,
    Margin,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::LeastConfidence, Strategy::Margin, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LeastConfidence => "least_confidence",
            Strategy::Margin => "margin",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (least_confidence, margin, random)")))
    }
}

/// How a hypothesis becomes a sequence probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceProbability {
    /// `exp(Σ log p / |tokens|)`.
    #[default]
    Normalized,
    /// `exp(Σ log p)`.
    RawProduct,
}

pub fn sequence_probability(h: &Hypothesis, mode: SequenceProbability) -> f64 {
    match mode {
        SequenceProbability::Normalized => h.score.exp(),
        SequenceProbability::RawProduct => h.log_prob().exp(),
    }
}

/// `1 − P(y*)`; `nbest` must not be empty.
pub fn least_confidence(nbest: &[Hypothesis], mode: SequenceProbability) -> f64 {
    1.0 - sequence_probability(&nbest[0], mode)
}

/// `−(P(y₁*) − P(y₂*))`, or `−1` when there is only one hypothesis.
pub fn margin(nbest: &[Hypothesis], mode: SequenceProbability) -> f64 {
    match nbest {
        [first, second, ..] => -(sequence_probability(first, mode) - sequence_probability(second, mode)),
        _ => -1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScore {
    pub id: SentenceId,
    /// `None` when the sentence could not be decoded; such sentences rank
    /// below everything and are never selected.
    pub value: Option<f64>,
}

impl AcquisitionScore {
    pub fn rank_value(&self) -> f64 {
        self.value.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolScores {
    pub iteration: u64,
    pub strategy: Strategy,
    pub scores: Vec<AcquisitionScore>,
    /// Best hypothesis per scored sentence (content ids); empty for the
    /// random strategy, which does not decode.
    pub best_hypotheses: Vec<Option<Hypothesis>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub beam: usize,
    pub n_best: usize,
    pub sequence_probability: SequenceProbability,
    pub decode: DecodeConfig,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            n_best: 2,
            sequence_probability: SequenceProbability::Normalized,
            decode: DecodeConfig::default(),
        }
    }
}

/// Scores every pool sentence with `strategy`. Sources end with `</s>`.
///
/// The random strategy draws one uniform value per sentence, in the given
/// order, from a stream derived from `(seed, iteration)`.
pub fn score_pool<M: StepModel>(
    model: &M,
    pool: &[(SentenceId, Vec<u32>)],
    strategy: Strategy,
    config: &AcquisitionConfig,
    seed: u64,
    iteration: u64,
) -> PoolScores {
    if strategy == Strategy::Random {
        let mut rng = derived_rng(seed, Purpose::RandomScore, iteration);
        return PoolScores {
            iteration,
            strategy,
            scores: pool
                .iter()
                .map(|(id, _)| AcquisitionScore {
                    id: *id,
                    value: Some(rng.gen::<f64>()),
                })
                .collect(),
            best_hypotheses: vec![None; pool.len()],
        };
    }
    let n_best = match strategy {
        Strategy::Margin => config.n_best.max(2),
        _ => config.n_best.max(1),
    };
    let beam = config.beam.max(n_best);
    let sources: Vec<Vec<u32>> = pool.iter().map(|(_, s)| s.clone()).collect();
    let lists = beam_search_each(model, &sources, beam, n_best, &config.decode);
    let mut scores = Vec::with_capacity(pool.len());
    let mut best = Vec::with_capacity(pool.len());
    for ((id, _), list) in pool.iter().zip(lists) {
        match list {
            Ok(NBestList { hypotheses, .. }) if !hypotheses.is_empty() => {
                let mode = config.sequence_probability;
                let value = match strategy {
                    Strategy::LeastConfidence => least_confidence(&hypotheses, mode),
                    Strategy::Margin => margin(&hypotheses, mode),
                    Strategy::Random => unreachable!("handled above"),
                };
                scores.push(AcquisitionScore { id: *id, value: Some(value) });
                best.push(hypotheses.into_iter().next());
            }
            Ok(_) => {
                log::warn!("sentence {id} produced no hypotheses; it will not be selected");
                scores.push(AcquisitionScore { id: *id, value: None });
                best.push(None);
            }
            Err(e) => {
                log::warn!("sentence {id} failed to decode ({e}); it will not be selected");
                scores.push(AcquisitionScore { id: *id, value: None });
                best.push(None);
            }
        }
    }
    PoolScores {
        iteration,
        strategy,
        scores,
        best_hypotheses: best,
    }
}

/// All decodable ids, by value descending then id ascending.
pub fn rank(scores: &[AcquisitionScore]) -> Vec<SentenceId> {
    let mut valid: Vec<&AcquisitionScore> = scores.iter().filter(|s| s.value.is_some()).collect();
    valid.sort_by(|a, b| b.rank_value().total_cmp(&a.rank_value()).then(a.id.cmp(&b.id)));
    valid.into_iter().map(|s| s.id).collect()
}

/// The `b` highest-valued ids; fewer when not enough sentences are
/// selectable.
pub fn select_top(scores: &[AcquisitionScore], b: usize) -> Vec<SentenceId> {
    let mut ranked = rank(scores);
    if ranked.len() < b {
        log::warn!("asked for {b} sentences but only {} are selectable", ranked.len());
    }
    ranked.truncate(b);
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{BOS, EOS};
    use crate::decoder::ScriptedModel;

    fn hyp(lps: &[f64]) -> Hypothesis {
        Hypothesis {
            tokens: vec![4; lps.len()],
            token_log_probs: lps.to_vec(),
            score: lps.iter().sum::<f64>() / lps.len() as f64,
        }
    }

    #[test]
    fn formula_values() {
        let n = SequenceProbability::Normalized;
        assert!((least_confidence(&[hyp(&[0.3f64.ln()])], n) - 0.7).abs() < 1e-12);
        assert_eq!(least_confidence(&[hyp(&[0.0, 0.0])], n), 0.0);
        let m = margin(&[hyp(&[0.6f64.ln()]), hyp(&[0.1f64.ln()])], n);
        assert!((m + 0.5).abs() < 1e-12);
        assert_eq!(margin(&[hyp(&[0.4f64.ln()]), hyp(&[0.4f64.ln()])], n), 0.0);
        assert_eq!(margin(&[hyp(&[0.9f64.ln()])], n), -1.0);
    }

    #[test]
    fn normalized_and_raw_differ_on_long_hypotheses() {
        let h = [hyp(&[0.5f64.ln(); 4])];
        assert!((least_confidence(&h, SequenceProbability::Normalized) - 0.5).abs() < 1e-12);
        assert!((least_confidence(&h, SequenceProbability::RawProduct) - (1.0 - 0.0625)).abs() < 1e-12);
    }

    #[test]
    fn raising_best_token_probability_lowers_least_confidence() {
        let mut last = f64::INFINITY;
        for p in [0.2, 0.4, 0.6, 0.8, 1.0f64] {
            let v = least_confidence(&[hyp(&[p.ln(), 0.5f64.ln()])], SequenceProbability::Normalized);
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("entropy".parse::<Strategy>().is_err());
    }

    fn pool_model() -> ScriptedModel<impl Fn(&[u32], &[u32]) -> Vec<f64>> {
        // Source token k (4..=23) sets the first-step confidence; the second
        // step always ends the sentence.
        ScriptedModel {
            vocab: 8,
            max_prefix: 10,
            table: |src: &[u32], prefix: &[u32]| {
                let mut p = vec![0.0; 8];
                if prefix.len() == 1 {
                    let conf = 0.35 + 0.03 * (src[0] % 20) as f64;
                    p[4] = conf;
                    p[5] = (1.0 - conf) * 0.7;
                    p[6] = (1.0 - conf) * 0.3;
                } else {
                    p[EOS as usize] = 1.0;
                }
                p
            },
        }
    }

    fn pool() -> Vec<(SentenceId, Vec<u32>)> {
        (0..20u64)
            .map(|i| (100 + (i * 7) % 20, vec![(i % 7) as u32 * 3 + 4, EOS]))
            .collect()
    }

    #[test]
    fn top_b_matches_brute_force_sort() {
        let m = pool_model();
        let cfg = AcquisitionConfig::default();
        for strategy in [Strategy::LeastConfidence, Strategy::Margin] {
            let scored = score_pool(&m, &pool(), strategy, &cfg, 1, 0);
            // Brute force: exact sequence probabilities from the table.
            let mut oracle: Vec<(f64, SentenceId)> = pool()
                .iter()
                .map(|(id, src)| {
                    let first = (m.table)(src, &[BOS]);
                    let mut seqs: Vec<f64> = (4..7).map(|t| first[t].sqrt()).collect();
                    seqs.sort_by(|a, b| b.total_cmp(a));
                    let v = match strategy {
                        Strategy::LeastConfidence => 1.0 - seqs[0],
                        _ => -(seqs[0] - seqs[1]),
                    };
                    (v, *id)
                })
                .collect();
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for b in [0, 1, 5, 13, 20] {
                let want: Vec<SentenceId> = oracle.iter().take(b).map(|x| x.1).collect();
                assert_eq!(select_top(&scored.scores, b), want, "{strategy} B={b}");
            }
            for (s, o) in scored.scores.iter().zip(&pool()) {
                assert_eq!(s.id, o.0);
            }
        }
    }

    #[test]
    fn ties_resolve_by_id() {
        let scores: Vec<AcquisitionScore> = [(9, 0.5), (3, 0.5), (7, 0.9), (1, 0.1), (5, 0.5)]
            .iter()
            .map(|&(id, v)| AcquisitionScore { id, value: Some(v) })
            .collect();
        assert_eq!(select_top(&scores, 4), vec![7, 3, 5, 9]);
        assert_eq!(select_top(&scores, 10).len(), 5);
    }

    #[test]
    fn identical_sentences_fall_back_to_id_order() {
        let m = pool_model();
        let same: Vec<(SentenceId, Vec<u32>)> = [5u64, 2, 8, 1].iter().map(|&id| (id, vec![4, EOS])).collect();
        let scored = score_pool(&m, &same, Strategy::LeastConfidence, &AcquisitionConfig::default(), 0, 0);
        let v = scored.scores[0].value;
        assert!(scored.scores.iter().all(|s| s.value == v));
        assert_eq!(select_top(&scored.scores, 3), vec![1, 2, 5]);
    }

    #[test]
    fn random_is_seeded() {
        let m = pool_model();
        let cfg = AcquisitionConfig::default();
        let a = score_pool(&m, &pool(), Strategy::Random, &cfg, 42, 3);
        let b = score_pool(&m, &pool(), Strategy::Random, &cfg, 42, 3);
        let c = score_pool(&m, &pool(), Strategy::Random, &cfg, 42, 4);
        assert_eq!(a.scores, b.scores);
        assert_ne!(a.scores, c.scores);
        assert!(a.scores.iter().all(|s| (0.0..1.0).contains(&s.value.unwrap())));
    }

    #[test]
    fn failed_sentences_are_never_selected() {
        let m = ScriptedModel {
            vocab: 8,
            max_prefix: 10,
            table: |src: &[u32], _: &[u32]| {
                if src[0] == 9 {
                    vec![]
                } else {
                    let mut p = vec![0.0; 8];
                    p[EOS as usize] = 0.5;
                    p[4] = 0.5;
                    p
                }
            },
        };
        let pool = vec![(1, vec![9, EOS]), (2, vec![4, EOS]), (3, vec![5, EOS])];
        let scored = score_pool(&m, &pool, Strategy::LeastConfidence, &AcquisitionConfig::default(), 0, 0);
        assert_eq!(scored.scores[0].value, None);
        assert_eq!(scored.scores[0].rank_value(), f64::NEG_INFINITY);
        assert_eq!(select_top(&scored.scores, 3), vec![2, 3]);
    }
}
