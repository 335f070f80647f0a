//! Corpus BLEU and perplexity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BleuConfig {
    /// Highest n-gram order.
    pub max_n: usize,
    /// One weight per order; must sum to 1.
    pub weights: Vec<f64>,
    /// Add one to matches and totals for orders two and up.
    pub add_one_smoothing: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            weights: vec![0.25; 4],
            add_one_smoothing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// In `[0, 1]`.
    pub bleu: f64,
    /// Modified precision per order, `precisions[0]` being unigrams.
    pub precisions: Vec<f64>,
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

impl BleuReport {
    pub fn percent(&self) -> f64 {
        self.bleu * 100.0
    }

    /// `c / r`; zero when the references are empty.
    pub fn length_ratio(&self) -> f64 {
        if self.reference_length == 0 {
            0.0
        } else {
            self.candidate_length as f64 / self.reference_length as f64
        }
    }
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `c`, preferring the shorter on ties.
fn closest_length<S: AsRef<str>>(c: usize, refs: &[Vec<S>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU over tokenized candidates, each with one or more
/// references. N-gram matches are clipped by the maximum count in any
/// single reference and summed over the whole corpus before the
/// precisions are taken.
pub fn corpus_bleu_multi<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
    config: &BleuConfig,
) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Invalid("BLEU over an empty corpus".into()));
    }
    if config.max_n == 0 || config.weights.len() != config.max_n {
        return Err(Error::Config("BLEU needs one weight per n-gram order".into()));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Invalid("candidate without a reference".into()));
    }
    let mut matches = vec![0u64; config.max_n];
    let mut totals = vec![0u64; config.max_n];
    let mut c = 0;
    let mut r = 0;
    for (cand, refs) in candidates.iter().zip(references) {
        c += cand.len();
        r += closest_length(cand.len(), refs);
        for n in 1..=config.max_n {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<Vec<&str>, u64> = HashMap::new();
            for rf in refs {
                for (g, k) in ngram_counts(rf, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand_counts {
                totals[n - 1] += k;
                matches[n - 1] += k.min(max_ref.get(&g).copied().unwrap_or(0));
            }
        }
    }
    let precisions: Vec<f64> = (0..config.max_n)
        .map(|i| {
            let (m, t) = (matches[i] as f64, totals[i] as f64);
            if config.add_one_smoothing && i > 0 {
                (m + 1.0) / (t + 1.0)
            } else if t == 0.0 {
                0.0
            } else {
                m / t
            }
        })
        .collect();
    let bp = brevity_penalty(c, r);
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().zip(&config.weights).map(|(p, w)| w * p.ln()).sum();
        bp * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty: bp,
        candidate_length: c,
        reference_length: r,
    })
}

/// Corpus BLEU with a single reference per candidate.
pub fn corpus_bleu<S: AsRef<str> + Clone>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
    config: &BleuConfig,
) -> Result<BleuReport> {
    let refs: Vec<Vec<Vec<S>>> = references.iter().map(|r| vec![r.clone()]).collect();
    corpus_bleu_multi(candidates, &refs, config)
}

/// BLEU on plain sentences split at whitespace.
pub fn text_bleu<S: AsRef<str>>(candidates: &[S], references: &[S], config: &BleuConfig) -> Result<BleuReport> {
    let split = |s: &S| -> Vec<String> { s.as_ref().split_whitespace().map(str::to_owned).collect() };
    let cands: Vec<Vec<String>> = candidates.iter().map(split).collect();
    let refs: Vec<Vec<String>> = references.iter().map(split).collect();
    corpus_bleu(&cands, &refs, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    /// Cross entropy in bits per token.
    pub cross_entropy: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Perplexity from the natural-log probability of every gold token.
pub fn perplexity(log_probs: &[f64]) -> Result<PerplexityReport> {
    if log_probs.is_empty() {
        return Err(Error::Invalid("perplexity over zero tokens".into()));
    }
    let bits = -log_probs.iter().sum::<f64>() / (log_probs.len() as f64 * std::f64::consts::LN_2);
    Ok(PerplexityReport {
        cross_entropy: bits,
        perplexity: bits.exp2(),
        tokens: log_probs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn perfect_match_is_one() {
        let c = vec![toks("a b c d e"), toks("x y z w")];
        let r = corpus_bleu(&c, &c, &BleuConfig::default()).unwrap();
        assert_eq!(r.bleu, 1.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn clipping_example() {
        let r = corpus_bleu(
            &[toks("the the the the")],
            &[toks("the cat is on the mat")],
            &BleuConfig::default(),
        )
        .unwrap();
        assert_eq!(r.precisions[0], 0.5);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn brevity_penalty_values() {
        assert!((brevity_penalty(5, 10) - (-1f64).exp()).abs() < 1e-12);
        assert_eq!(brevity_penalty(11, 10), 1.0);
        assert_eq!(brevity_penalty(10, 10), 1.0);
        assert_eq!(brevity_penalty(0, 10), 0.0);
    }

    #[test]
    fn errors_on_mismatch_and_empty() {
        let c = vec![toks("a")];
        assert!(corpus_bleu(&c, &[], &BleuConfig::default()).is_err());
        assert!(corpus_bleu::<String>(&[], &[], &BleuConfig::default()).is_err());
    }

    #[test]
    fn empty_candidate_contributes_nothing() {
        let r = corpus_bleu(
            &[toks("a b c d"), vec![]],
            &[toks("a b c d"), toks("e f")],
            &BleuConfig::default(),
        )
        .unwrap();
        assert_eq!(r.totals[0], 4);
        assert_eq!(r.candidate_length, 4);
        assert_eq!(r.reference_length, 6);
    }

    #[test]
    fn smoothing_rescues_missing_higher_orders() {
        let cfg = BleuConfig {
            add_one_smoothing: true,
            ..BleuConfig::default()
        };
        let r = corpus_bleu(&[toks("a b c")], &[toks("a c b")], &cfg).unwrap();
        assert_eq!(r.precisions[0], 1.0);
        assert_eq!(r.precisions[1], 1.0 / 3.0);
        assert!(r.bleu > 0.0);
    }

    #[test]
    fn multi_reference_uses_max_count_and_closest_length() {
        let cands = vec![toks("the the cat")];
        let refs = vec![vec![toks("the cat"), toks("the the dog sat down")]];
        let r = corpus_bleu_multi(&cands, &refs, &BleuConfig::default()).unwrap();
        assert_eq!(r.matches[0], 3);
        // |3-2| = 1 < |3-5| = 2.
        assert_eq!(r.reference_length, 2);
    }

    /// Naive BLEU: n-grams as joined strings, counted by linear scans.
    fn brute_bleu(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
        let grams = |t: &[String], n: usize| -> Vec<String> {
            if t.len() < n {
                return vec![];
            }
            (0..=t.len() - n).map(|i| t[i..i + n].join("\u{1}")).collect()
        };
        let mut m = [0usize; 4];
        let mut tot = [0usize; 4];
        let (mut c, mut r) = (0usize, 0usize);
        for (cand, rf) in cands.iter().zip(refs) {
            c += cand.len();
            r += rf.len();
            for n in 1..=4 {
                let cg = grams(cand, n);
                let rg = grams(rf, n);
                tot[n - 1] += cg.len();
                let mut seen: Vec<&String> = Vec::new();
                for g in &cg {
                    if seen.contains(&g) {
                        continue;
                    }
                    seen.push(g);
                    let in_c = cg.iter().filter(|x| *x == g).count();
                    let in_r = rg.iter().filter(|x| *x == g).count();
                    m[n - 1] += in_c.min(in_r);
                }
            }
        }
        if (0..4).any(|i| m[i] == 0) {
            return 0.0;
        }
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        let s: f64 = (0..4).map(|i| (m[i] as f64 / tot[i] as f64).ln() / 4.0).sum();
        bp * s.exp()
    }

    #[test]
    fn matches_brute_force_on_random_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let words = ["a", "b", "c", "d", "e"];
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let mut cands = Vec::new();
            let mut refs = Vec::new();
            for _ in 0..n {
                let r: Vec<String> = (0..rng.gen_range(4..12))
                    .map(|_| words[rng.gen_range(0..3)].to_string())
                    .collect();
                let c: Vec<String> = (0..rng.gen_range(0..12))
                    .map(|_| words[rng.gen_range(0..5)].to_string())
                    .collect();
                cands.push(c);
                refs.push(r);
            }
            let got = corpus_bleu(&cands, &refs, &BleuConfig::default()).unwrap().bleu;
            let want = brute_bleu(&cands, &refs);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn appending_wrong_token_never_helps() {
        let good = toks("a b c d e f");
        let base = corpus_bleu(std::slice::from_ref(&good), std::slice::from_ref(&good), &BleuConfig::default()).unwrap();
        let mut worse = good.clone();
        worse.push("zz".into());
        let r = corpus_bleu(&[worse], &[good], &BleuConfig::default()).unwrap();
        assert!(r.bleu <= base.bleu);
    }

    #[test]
    fn perplexity_cases() {
        let uniform = vec![(1.0f64 / 16.0).ln(); 37];
        assert!((perplexity(&uniform).unwrap().perplexity - 16.0).abs() < 1e-9);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap().perplexity, 1.0);
        let r = perplexity(&[0.5f64.ln(), 0.25f64.ln()]).unwrap();
        assert!((r.cross_entropy - 1.5).abs() < 1e-12);
        assert!((r.perplexity - 2f64.powf(1.5)).abs() < 1e-12);
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn perplexity_base_change_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lp: Vec<f64> = (0..100).map(|_| rng.gen_range(0.01f64..1.0).ln()).collect();
        let r = perplexity(&lp).unwrap();
        assert_eq!(r.perplexity, r.cross_entropy.exp2());
        let nat = -lp.iter().sum::<f64>() / lp.len() as f64;
        assert!((r.perplexity - nat.exp()).abs() < 1e-9 * r.perplexity);
    }
}
