//! Parallel corpus ingestion, cleaning, splitting and the labeled/unlabeled
//! partition used by active learning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable sentence identifier, assigned in ingestion order.
pub type SentenceId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: SentenceId,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Dev,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub split: SplitTag,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, split: SplitTag) -> Self {
        Self { pairs, split }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = SentenceId> + '_ {
        self.pairs.iter().map(|p| p.id)
    }

    /// Writes `<prefix>.<split>.src` and `<prefix>.<split>.trg`.
    pub fn write(&self, prefix: &str) -> Result<()> {
        let name = self.split.as_str();
        write_lines(
            format!("{prefix}.{name}.src"),
            self.pairs.iter().map(|p| p.source.as_str()),
        )?;
        write_lines(
            format!("{prefix}.{name}.trg"),
            self.pairs.iter().map(|p| p.target.as_str()),
        )
    }
}

/// One unlabeled source sentence in the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: SentenceId,
    pub source: String,
}

/// Unlabeled source sentences. Withheld targets, when present, are only
/// reachable through the simulated oracle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonolingualPool {
    entries: Vec<PoolEntry>,
    hidden: HashMap<SentenceId, String>,
}

impl MonolingualPool {
    pub fn new(entries: Vec<PoolEntry>) -> Self {
        Self {
            entries,
            hidden: HashMap::new(),
        }
    }

    /// A pool built from parallel pairs whose targets are withheld.
    pub fn with_hidden_references(pairs: Vec<SentencePair>) -> Self {
        let mut entries = Vec::with_capacity(pairs.len());
        let mut hidden = HashMap::with_capacity(pairs.len());
        for p in pairs {
            entries.push(PoolEntry {
                id: p.id,
                source: p.source,
            });
            hidden.insert(p.id, p.target);
        }
        Self { entries, hidden }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_hidden_reference(&self, id: SentenceId) -> bool {
        self.hidden.contains_key(&id)
    }

    pub(crate) fn hidden_reference(&self, id: SentenceId) -> Option<&str> {
        self.hidden.get(&id).map(String::as_str)
    }

    /// Writes `<prefix>.pool.ids`, `.pool.src` and, if every entry has one,
    /// the withheld references as `.pool.trg`.
    pub fn write(&self, prefix: &str) -> Result<()> {
        write_lines(
            format!("{prefix}.pool.ids"),
            self.entries.iter().map(|e| e.id.to_string()),
        )?;
        write_lines(
            format!("{prefix}.pool.src"),
            self.entries.iter().map(|e| e.source.as_str()),
        )?;
        if !self.entries.is_empty() && self.entries.iter().all(|e| self.hidden.contains_key(&e.id)) {
            write_lines(
                format!("{prefix}.pool.trg"),
                self.entries.iter().map(|e| self.hidden[&e.id].as_str()),
            )?;
        }
        Ok(())
    }

    /// Reads a pool written by [`MonolingualPool::write`].
    pub fn read(prefix: &str) -> Result<Self> {
        let ids_path = format!("{prefix}.pool.ids");
        let ids = read_lines(&ids_path)?
            .into_iter()
            .map(|l| {
                l.trim()
                    .parse::<SentenceId>()
                    .map_err(|e| Error::Invalid(format!("{ids_path}: bad id {l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let sources = read_lines(format!("{prefix}.pool.src"))?;
        if sources.len() != ids.len() {
            return Err(Error::Misaligned {
                src: sources.len(),
                trg: ids.len(),
            });
        }
        let trg_path = format!("{prefix}.pool.trg");
        if Path::new(&trg_path).exists() {
            let targets = read_lines(&trg_path)?;
            if targets.len() != ids.len() {
                return Err(Error::Misaligned {
                    src: ids.len(),
                    trg: targets.len(),
                });
            }
            let pairs = ids
                .into_iter()
                .zip(sources)
                .zip(targets)
                .map(|((id, source), target)| SentencePair { id, source, target })
                .collect();
            Ok(Self::with_hidden_references(pairs))
        } else {
            Ok(Self::new(
                ids.into_iter()
                    .zip(sources)
                    .map(|(id, source)| PoolEntry { id, source })
                    .collect(),
            ))
        }
    }
}

/// Allowed characters, as a union of inclusive code point ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptSet {
    pub ranges: Vec<RangeInclusive<char>>,
}

impl ScriptSet {
    /// Printable ASCII.
    pub fn ascii() -> Self {
        Self {
            ranges: vec![' '..='~'],
        }
    }

    /// Printable ASCII plus the Devanagari blocks.
    pub fn devanagari_latin() -> Self {
        Self {
            ranges: vec![
                ' '..='~',
                '\u{0900}'..='\u{097F}',
                '\u{A8E0}'..='\u{A8FF}',
                // zero-width (non-)joiner, used inside Devanagari conjuncts
                '\u{200C}'..='\u{200D}',
            ],
        }
    }

    /// Resolves the names accepted in configuration files.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "ascii" => Some(Self::ascii()),
            "devanagari-latin" | "devanagari_latin" => Some(Self::devanagari_latin()),
            _ => None,
        }
    }

    pub fn contains(&self, c: char) -> bool {
        self.ranges.iter().any(|r| r.contains(&c))
    }
}

impl Default for ScriptSet {
    fn default() -> Self {
        Self::ascii()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CleanConfig {
    pub script: ScriptSet,
    /// Words dropped after normalisation; empty unless stop-word removal
    /// is switched on.
    pub stop_words: HashSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    Empty,
    ForeignScript(char),
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Empty => write!(f, "empty"),
            Self::ForeignScript(c) => write!(f, "foreign-script (U+{:04X})", *c as u32),
        }
    }
}

fn is_bad_char(c: char) -> bool {
    c.is_control()
        || matches!(
            c,
            '\u{FFFD}' | '\u{FEFF}' | '\u{200B}' | '\u{200E}' | '\u{200F}' | '\u{00AD}'
        )
}

/// Normalises one raw line.
///
/// Lowercases, strips control and invisible characters, collapses every
/// whitespace run to a single space and trims. Lines left empty, or that
/// contain a character outside the configured script set, are rejected.
pub fn clean(raw: &str, config: &CleanConfig) -> Result<String, Rejection> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if !is_bad_char(c) {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    if !config.stop_words.is_empty() {
        words.retain(|w| !config.stop_words.contains(w));
    }
    let line = words.join(" ");
    if line.is_empty() {
        return Err(Rejection::Empty);
    }
    if let Some(c) = line.chars().find(|&c| !config.script.contains(c)) {
        return Err(Rejection::ForeignScript(c));
    }
    Ok(line)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub read: usize,
    pub rejected_source: usize,
    pub rejected_target: usize,
    pub duplicates: usize,
}

/// Cleans aligned lines, drops rejected and duplicate pairs and assigns
/// ids. A pair's id is its zero-based line number in the input.
pub fn ingest<S: AsRef<str>>(
    sources: &[S],
    targets: &[S],
    src_config: &CleanConfig,
    trg_config: &CleanConfig,
) -> Result<(ParallelCorpus, IngestStats)> {
    if sources.len() != targets.len() {
        return Err(Error::Misaligned {
            src: sources.len(),
            trg: targets.len(),
        });
    }
    let mut stats = IngestStats {
        read: sources.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (line, (s, t)) in sources.iter().zip(targets).enumerate() {
        let source = match clean(s.as_ref(), src_config) {
            Ok(s) => s,
            Err(_) => {
                stats.rejected_source += 1;
                continue;
            }
        };
        let target = match clean(t.as_ref(), trg_config) {
            Ok(t) => t,
            Err(_) => {
                stats.rejected_target += 1;
                continue;
            }
        };
        if !seen.insert((source.clone(), target.clone())) {
            stats.duplicates += 1;
            continue;
        }
        pairs.push(SentencePair {
            id: line as SentenceId,
            source,
            target,
        });
    }
    Ok((ParallelCorpus::new(pairs, SplitTag::Train), stats))
}

/// Reads two aligned text files and ingests them.
pub fn read_parallel(
    src_path: impl AsRef<Path>,
    trg_path: impl AsRef<Path>,
    src_config: &CleanConfig,
    trg_config: &CleanConfig,
) -> Result<(ParallelCorpus, IngestStats)> {
    let sources = read_lines(src_path)?;
    let targets = read_lines(trg_path)?;
    ingest(&sources, &targets, src_config, trg_config)
}

/// Shuffles with `seed` and carves out dev and test sets of exactly the
/// requested sizes; the rest is training data.
///
/// Dev and test sentences are drawn only from pairs whose source occurs
/// once in the corpus, so no source sentence is shared between splits.
pub fn split(
    corpus: &ParallelCorpus,
    dev_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus)> {
    let n = corpus.len();
    if dev_size + test_size >= n && dev_size + test_size > 0 {
        return Err(Error::Config(format!(
            "dev ({dev_size}) + test ({test_size}) must be smaller than the corpus ({n})"
        )));
    }
    let mut source_counts: HashMap<&str, usize> = HashMap::new();
    for p in &corpus.pairs {
        *source_counts.entry(p.source.as_str()).or_default() += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut dev = Vec::with_capacity(dev_size);
    let mut test = Vec::with_capacity(test_size);
    let mut train = Vec::with_capacity(n - dev_size - test_size);
    for idx in order {
        let pair = &corpus.pairs[idx];
        let unique = source_counts[pair.source.as_str()] == 1;
        if unique && dev.len() < dev_size {
            dev.push(pair.clone());
        } else if unique && test.len() < test_size {
            test.push(pair.clone());
        } else {
            train.push(pair.clone());
        }
    }
    if dev.len() < dev_size || test.len() < test_size {
        return Err(Error::Config(format!(
            "only {} pairs have a unique source; cannot hold out {dev_size} dev + {test_size} test",
            dev.len() + test.len()
        )));
    }
    Ok((
        ParallelCorpus::new(train, SplitTag::Train),
        ParallelCorpus::new(dev, SplitTag::Dev),
        ParallelCorpus::new(test, SplitTag::Test),
    ))
}

/// Size of the baseline share for `fraction` of `n` pairs.
pub fn baseline_size(n: usize, fraction: f64) -> usize {
    // Absorb representation error so that e.g. 0.7 × 10 is exactly 7.
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Randomly keeps `baseline_fraction` of the training pairs as labeled
/// data; the remainder becomes a pool whose targets are withheld.
pub fn partition_for_al(
    train: &ParallelCorpus,
    baseline_fraction: f64,
    seed: u64,
) -> Result<(ParallelCorpus, MonolingualPool)> {
    if !(baseline_fraction > 0.0 && baseline_fraction < 1.0) {
        return Err(Error::Config(format!(
            "baseline fraction must lie in (0, 1), got {baseline_fraction}"
        )));
    }
    let keep = baseline_size(train.len(), baseline_fraction);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base_idx, pool_idx) = order.split_at(keep);
    let mut base_idx = base_idx.to_vec();
    let mut pool_idx = pool_idx.to_vec();
    base_idx.sort_unstable();
    pool_idx.sort_unstable();
    let baseline = base_idx.iter().map(|&i| train.pairs[i].clone()).collect();
    let pool = pool_idx.iter().map(|&i| train.pairs[i].clone()).collect();
    Ok((
        ParallelCorpus::new(baseline, SplitTag::Train),
        MonolingualPool::with_hidden_references(pool),
    ))
}

/// Reads a corpus split written by [`ParallelCorpus::write`]; ids are
/// line numbers unless an `.ids` file sits next to it.
pub fn read_split(prefix: &str, split: SplitTag) -> Result<ParallelCorpus> {
    let name = split.as_str();
    let sources = read_lines(format!("{prefix}.{name}.src"))?;
    let targets = read_lines(format!("{prefix}.{name}.trg"))?;
    if sources.len() != targets.len() {
        return Err(Error::Misaligned {
            src: sources.len(),
            trg: targets.len(),
        });
    }
    let ids_path = format!("{prefix}.{name}.ids");
    let ids: Vec<SentenceId> = if Path::new(&ids_path).exists() {
        read_lines(&ids_path)?
            .iter()
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|e| Error::Invalid(format!("{ids_path}: bad id {l:?}: {e}")))
            })
            .collect::<Result<_>>()?
    } else {
        (0..sources.len() as SentenceId).collect()
    };
    if ids.len() != sources.len() {
        return Err(Error::Misaligned {
            src: sources.len(),
            trg: ids.len(),
        });
    }
    let pairs = ids
        .into_iter()
        .zip(sources.into_iter().zip(targets))
        .map(|(id, (source, target))| SentencePair { id, source, target })
        .collect();
    Ok(ParallelCorpus::new(pairs, split))
}

/// Writes the ids of a split next to its text files.
pub fn write_ids(prefix: &str, corpus: &ParallelCorpus) -> Result<()> {
    write_lines(
        format!("{prefix}.{}.ids", corpus.split.as_str()),
        corpus.pairs.iter().map(|p| p.id.to_string()),
    )
}

/// Source sentences that occur in more than one of the given corpora.
pub fn leaked_sources<'a>(corpora: &[&'a ParallelCorpus]) -> Vec<&'a str> {
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    let mut leaks = Vec::new();
    for (i, c) in corpora.iter().enumerate() {
        for p in &c.pairs {
            match owner.get(p.source.as_str()) {
                Some(&j) if j != i => leaks.push(p.source.as_str()),
                Some(_) => {}
                None => {
                    owner.insert(p.source.as_str(), i);
                }
            }
        }
    }
    leaks
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn write_lines<I, S>(path: impl AsRef<Path>, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{}", line.as_ref()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
