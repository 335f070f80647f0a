//! Append-only JSON-lines journal of an active-learning run.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionScore, SequenceProbability, Strategy};
use crate::corpus::SentenceId;
use crate::error::{Error, Result};

pub const JOURNAL_VERSION: u32 = 1;

/// Settings that must match when a journal is resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalHeader {
    pub version: u32,
    pub strategy: Strategy,
    pub sequence_probability: SequenceProbability,
    pub seed: u64,
    pub query_size: usize,
    pub budget: u64,
    pub pool_sample_fraction: f64,
    pub sample_size: usize,
    pub initial_labeled: usize,
    pub initial_pool: usize,
    pub retrain_full: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JournalRecord {
    Header(JournalHeader),
    /// Dev scores of the model the run started from.
    Baseline { dev_bleu: f64, dev_ppl: f64 },
    /// Scores of the sampled pool sentences and the resulting candidate
    /// order; the first `query_size` labeled candidates form the batch.
    Selection {
        iteration: u64,
        scores: Vec<AcquisitionScore>,
        ranked: Vec<SentenceId>,
        query_size: usize,
    },
    Label {
        iteration: u64,
        id: SentenceId,
        target: String,
        annotator: String,
    },
    Skip {
        iteration: u64,
        id: SentenceId,
        annotator: String,
    },
    IterationEnd {
        iteration: u64,
        dev_bleu: f64,
        dev_ppl: f64,
        checkpoint: Option<String>,
        labeled_count: usize,
        pool_count: usize,
    },
}

/// Cloneable handle to a journal sink. Every record is written as one
/// line and flushed before `append` returns.
#[derive(Clone)]
pub struct Journal {
    inner: Arc<Mutex<Box<dyn Write + Send>>>,
    path: Option<PathBuf>,
}

impl Journal {
    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: Arc::new(Mutex::new(Box::new(file))),
            path: Some(path.to_path_buf()),
        })
    }

    /// A journal backed by any writer (used for in-memory runs).
    pub fn from_writer(w: impl Write + Send + 'static) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Box::new(w))),
            path: None,
        }
    }

    /// A journal that discards everything.
    pub fn sink() -> Self {
        Self::from_writer(std::io::sink())
    }

    pub fn append(&self, record: &JournalRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Journal(e.to_string()))?;
        let mut w = self.inner.lock().map_err(|_| Error::Journal("journal lock poisoned".into()))?;
        let err = |e| Error::io(self.path.clone().unwrap_or_else(|| "journal".into()), e);
        writeln!(w, "{line}").map_err(err)?;
        w.flush().map_err(err)
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<JournalRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            // A torn final line from a crash mid-write is dropped.
            Err(_) if is_last_line(path, n)? => break,
            Err(e) => return Err(Error::Journal(format!("line {}: {e}", n + 1))),
        }
    }
    Ok(out)
}

fn is_last_line(path: &Path, n: usize) -> Result<bool> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines().count() == n + 1)
}
