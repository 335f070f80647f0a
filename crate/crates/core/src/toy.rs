//! Synthetic translation task: every source word maps to a fixed target
//! word and the target sentence is the mapped sequence in reverse.

use rand::Rng;

use crate::corpus::{SentenceId, SentencePair};
use crate::rng::{derived_rng, Purpose};

pub const SOURCE_WORDS: [&str; 20] = [
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu", "na", "pe", "qi", "ro", "su", "ta", "ve", "wi",
    "xo", "yu",
];

pub const TARGET_WORDS: [&str; 20] = [
    "ka", "le", "mi", "no", "pu", "ra", "se", "ti", "vo", "wu", "ya", "zo", "bi", "co", "du", "fe", "gi", "ho",
    "ju", "ly",
];

/// Shortest and longest generated sentence, in words.
pub const MIN_WORDS: usize = 2;
pub const MAX_WORDS: usize = 8;

fn target_word(source: &str) -> Option<&'static str> {
    let i = SOURCE_WORDS.iter().position(|w| *w == source)?;
    Some(TARGET_WORDS[(7 * i + 3) % TARGET_WORDS.len()])
}

/// Reference translation of a toy source sentence; unknown words map to
/// `<unk>`.
pub fn translate(source: &str) -> String {
    let mut words: Vec<&str> = source
        .split_whitespace()
        .map(|w| target_word(w).unwrap_or("<unk>"))
        .collect();
    words.reverse();
    words.join(" ")
}

/// `n` random pairs with ids `first_id..first_id + n`.
pub fn pairs(n: usize, seed: u64, first_id: SentenceId) -> Vec<SentencePair> {
    let mut rng = derived_rng(seed, Purpose::Toy, first_id);
    (0..n)
        .map(|k| {
            let len = rng.gen_range(MIN_WORDS..=MAX_WORDS);
            let words: Vec<&str> = (0..len).map(|_| SOURCE_WORDS[rng.gen_range(0..SOURCE_WORDS.len())]).collect();
            let source = words.join(" ");
            SentencePair {
                id: first_id + k as SentenceId,
                target: translate(&source),
                source,
            }
        })
        .collect()
}
