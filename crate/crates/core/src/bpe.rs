//! Byte-pair-encoding subwords with `@@` continuation markers, and the
//! token vocabularies built on top of them.
//!
//! A word is split into characters and every non-final piece carries the
//! `@@` suffix, so `"low"` starts as `["l@@", "o@@", "w"]`. Merging a pair
//! drops the marker of its left half: `("l@@", "o@@")` becomes `"lo@@"`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use crate::corpus::{read_lines, write_lines};
use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";

/// Merge operations in the order they were learned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn join_pair(left: &str, right: &str) -> String {
    let stem = left.strip_suffix(CONTINUATION).unwrap_or(left);
    format!("{stem}{right}")
}

/// Initial symbols of one word.
pub fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 < chars.len() {
                format!("{c}{CONTINUATION}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate merge {} {}", m.0, m.1)));
            }
        }
        Ok(Self { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Learns up to `num_merges` merges from cleaned sentences.
    ///
    /// Each step merges the most frequent adjacent pair, counted over word
    /// types weighted by frequency. Ties go to the lexicographically
    /// smallest `(left, right)`. Learning stops early once no pair occurs
    /// at least twice.
    pub fn learn<S: AsRef<str>>(sentences: &[S], num_merges: usize) -> Self {
        let mut word_freq: BTreeMap<&str, i64> = BTreeMap::new();
        for s in sentences {
            for w in s.as_ref().split_whitespace() {
                *word_freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<Vec<String>> = word_freq.keys().map(|w| word_symbols(w)).collect();
        let freqs: Vec<i64> = word_freq.values().copied().collect();

        let mut counts: HashMap<(String, String), i64> = HashMap::new();
        let mut where_found: HashMap<(String, String), HashSet<usize>> = HashMap::new();
        for (wi, syms) in words.iter().enumerate() {
            for pair in syms.windows(2) {
                let key = (pair[0].clone(), pair[1].clone());
                *counts.entry(key.clone()).or_default() += freqs[wi];
                where_found.entry(key).or_default().insert(wi);
            }
        }
        let mut heap: BinaryHeap<(i64, Reverse<(String, String)>)> = counts
            .iter()
            .map(|(k, &c)| (c, Reverse(k.clone())))
            .collect();

        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let Some((count, Reverse(pair))) = heap.pop() else {
                break;
            };
            if counts.get(&pair).copied().unwrap_or(0) != count {
                continue; // stale heap entry
            }
            if count < 2 {
                break;
            }
            let merged = join_pair(&pair.0, &pair.1);
            let mut touched: Vec<usize> = where_found
                .get(&pair)
                .map(|s| s.iter().copied().collect())
                .unwrap_or_default();
            touched.sort_unstable();
            let mut changed: HashSet<(String, String)> = HashSet::new();
            for wi in touched {
                let f = freqs[wi];
                let old = &words[wi];
                for p in old.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    if let Some(c) = counts.get_mut(&key) {
                        *c -= f;
                    }
                    if let Some(set) = where_found.get_mut(&key) {
                        set.remove(&wi);
                    }
                    changed.insert(key);
                }
                let mut new = Vec::with_capacity(old.len());
                let mut i = 0;
                while i < old.len() {
                    if i + 1 < old.len() && old[i] == pair.0 && old[i + 1] == pair.1 {
                        new.push(merged.clone());
                        i += 2;
                    } else {
                        new.push(old[i].clone());
                        i += 1;
                    }
                }
                for p in new.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    *counts.entry(key.clone()).or_default() += f;
                    where_found.entry(key.clone()).or_default().insert(wi);
                    changed.insert(key);
                }
                words[wi] = new;
            }
            for key in changed {
                let c = counts.get(&key).copied().unwrap_or(0);
                if c > 0 {
                    heap.push((c, Reverse(key)));
                } else {
                    counts.remove(&key);
                    where_found.remove(&key);
                }
            }
            merges.push(pair);
        }
        Self::from_merges(merges).expect("learned merges are unique")
    }

    /// Segments one word by repeatedly merging its lowest-ranked pair.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else {
                break;
            };
            let (left, right) = &self.merges[rank];
            let merged = join_pair(left, right);
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == left && &syms[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    /// Splits a cleaned sentence into subword tokens.
    pub fn apply(&self, sentence: &str) -> Vec<String> {
        sentence
            .split_whitespace()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }

    /// One merge per line, `left right`, in application order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_lines(path, self.merges.iter().map(|(l, r)| format!("{l} {r}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let merges = read_lines(path)?
            .into_iter()
            .enumerate()
            .map(|(i, line)| {
                let mut parts = line.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                        Ok((l.to_string(), r.to_string()))
                    }
                    _ => Err(Error::Invalid(format!(
                        "{}:{}: expected `left right`, got {line:?}",
                        path.display(),
                        i + 1
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_merges(merges)
    }
}

/// Joins subword tokens back into text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue = false;
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !glue {
            out.push(' ');
        }
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Bijective token ↔ id map with the four specials at fixed ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from tokenised training text: most frequent first, ties in
    /// lexicographic order.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for t in tokens {
            let t = t.as_ref();
            if SPECIALS.contains(&t) {
                continue;
            }
            *freq.entry(t.to_string()).or_default() += 1;
        }
        let mut entries: Vec<(String, usize)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t)).expect("unique by construction")
    }

    /// Builds from regular tokens in id order (ids start after the specials).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIALS[UNK as usize])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Token strings for ids, dropping pad, bos and eos.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect()
    }

    /// One token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_lines(path, self.tokens.iter().skip(SPECIALS.len()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tokens(read_lines(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_merges_is_character_level() {
        let model = BpeModel::learn(&["ab ab ab"], 0);
        assert_eq!(model.merge_count(), 0);
        assert_eq!(model.apply("ab"), vec!["a@@", "b"]);
    }

    #[test]
    fn fully_merged_word_is_single_token() {
        let model = BpeModel::learn(&["lower lower lower"], 10);
        assert_eq!(model.apply("lower"), vec!["lower"]);
    }

    #[test]
    fn unseen_characters_pass_through() {
        let model = BpeModel::learn(&["aab aab"], 5);
        assert_eq!(model.apply("aaz"), vec!["aa@@", "z"]);
        assert_eq!(model.apply("zq"), vec!["z@@", "q"]);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let model = BpeModel::learn(&["abc"], 100);
        assert_eq!(model.merge_count(), 0);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur twice; ("a@@","b") sorts first.
        let model = BpeModel::learn(&["ab cd ab cd"], 1);
        assert_eq!(model.merges(), &[("a@@".to_string(), "b".to_string())]);
    }

    #[test]
    fn detokenize_examples() {
        assert_eq!(detokenize(&["a@@", "b"]), "ab");
        assert_eq!(detokenize(&["hello", "world"]), "hello world");
        assert_eq!(detokenize::<&str>(&[]), "");
    }

    #[test]
    fn vocabulary_specials_and_unknowns() {
        let v = Vocabulary::build(["b", "a", "b"]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, PAD]), vec!["b", "a"]);
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = BpeModel::learn(&["low lower newest widest low"], 8);
        model.save(dir.path().join("m")).unwrap();
        assert_eq!(BpeModel::load(dir.path().join("m")).unwrap(), model);
        let vocab = Vocabulary::build(model.apply("low lower newest widest"));
        vocab.save(dir.path().join("v")).unwrap();
        assert_eq!(Vocabulary::load(dir.path().join("v")).unwrap(), vocab);
    }

    #[test]
    fn duplicate_merges_rejected() {
        let m = vec![("a@@".into(), "b".into()), ("a@@".into(), "b".into())];
        assert!(BpeModel::from_merges(m).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_and_token_count(
            corpus in prop::collection::vec("[a-e]{1,6}( [a-e]{1,6}){0,5}", 1..20),
            merges in 0usize..30,
        ) {
            let model = BpeModel::learn(&corpus, merges);
            for line in &corpus {
                let toks = model.apply(line);
                prop_assert_eq!(detokenize(&toks), line.clone());
                prop_assert!(toks.len() >= line.split_whitespace().count());
            }
        }
    }
}
