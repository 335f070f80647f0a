//! Text ↔ id conversion for both languages: BPE segmentation followed by
//! vocabulary lookup, and the reverse.

use std::path::Path;

use crate::bpe::{detokenize, BpeModel, Vocabulary};
use crate::corpus::SentencePair;
use crate::error::Result;
use crate::transformer::{encode_source, TrainingPair};

/// BPE model and vocabulary of one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Side {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

impl Side {
    /// Learns BPE on `sentences` and builds the vocabulary from the
    /// resulting subwords.
    pub fn learn<S: AsRef<str>>(sentences: &[S], merges: usize) -> Self {
        let bpe = BpeModel::learn(sentences, merges);
        let vocab = Vocabulary::build(sentences.iter().flat_map(|s| bpe.apply(s.as_ref())));
        Self { bpe, vocab }
    }

    /// Content ids, without specials.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(&self.bpe.apply(text))
    }

    /// Detokenized text; specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        detokenize(&self.vocab.decode(ids))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPipeline {
    pub source: Side,
    pub target: Side,
}

impl TextPipeline {
    /// Separate BPE models per language, learned on the training pairs.
    pub fn learn(pairs: &[SentencePair], src_merges: usize, trg_merges: usize) -> Self {
        let src: Vec<&str> = pairs.iter().map(|p| p.source.as_str()).collect();
        let trg: Vec<&str> = pairs.iter().map(|p| p.target.as_str()).collect();
        Self {
            source: Side::learn(&src, src_merges),
            target: Side::learn(&trg, trg_merges),
        }
    }

    /// Truncated training example, and whether truncation happened.
    pub fn pair(&self, pair: &SentencePair, max_length: usize) -> (TrainingPair, bool) {
        TrainingPair::new(
            &self.source.encode(&pair.source),
            &self.target.encode(&pair.target),
            max_length,
        )
    }

    /// Encodes pairs, counting how many had to be truncated.
    pub fn pairs(&self, pairs: &[SentencePair], max_length: usize) -> (Vec<TrainingPair>, usize) {
        let mut cut = 0;
        let out = pairs
            .iter()
            .map(|p| {
                let (tp, t) = self.pair(p, max_length);
                cut += usize::from(t);
                tp
            })
            .collect();
        (out, cut)
    }

    /// Source ids ending in `</s>`.
    pub fn source_ids(&self, text: &str, max_length: usize) -> Vec<u32> {
        encode_source(&self.source.encode(text), max_length).0
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.source.bpe.save(dir.join("bpe.src"))?;
        self.target.bpe.save(dir.join("bpe.trg"))?;
        self.source.vocab.save(dir.join("vocab.src"))?;
        self.target.vocab.save(dir.join("vocab.trg"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            source: Side {
                bpe: BpeModel::load(dir.join("bpe.src"))?,
                vocab: Vocabulary::load(dir.join("vocab.src"))?,
            },
            target: Side {
                bpe: BpeModel::load(dir.join("bpe.trg"))?,
                vocab: Vocabulary::load(dir.join("vocab.trg"))?,
            },
        })
    }
}
