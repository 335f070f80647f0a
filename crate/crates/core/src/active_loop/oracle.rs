//! Label sources: a lookup of withheld references, or human annotators
//! reached through an [`AnnotationQueue`].

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::queue::{AnnotationQueue, RunStatus};
use crate::corpus::{MonolingualPool, SentenceId};
use crate::error::{Error, Result};

/// One sentence sent to the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleItem {
    pub id: SentenceId,
    pub source: String,
    /// Current model's best translation, if the strategy decoded it.
    pub hypothesis: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleEvent {
    Label {
        id: SentenceId,
        target: String,
        annotator: String,
    },
    Skip {
        id: SentenceId,
        annotator: String,
    },
}

impl OracleEvent {
    pub fn id(&self) -> SentenceId {
        match self {
            OracleEvent::Label { id, .. } | OracleEvent::Skip { id, .. } => *id,
        }
    }
}

pub trait Oracle {
    /// Answers every item with exactly one label or skip, passing each to
    /// `sink` as soon as it is known.
    fn answer(
        &mut self,
        iteration: u64,
        items: &[OracleItem],
        sink: &mut dyn FnMut(OracleEvent) -> Result<()>,
    ) -> Result<()>;

    /// Whether items should carry the model's current best translation.
    fn wants_hypotheses(&self) -> bool {
        false
    }

    /// Progress report from the loop.
    fn progress(&mut self, _status: &RunStatus) {}
}

pub const SIMULATED_ANNOTATOR: &str = "simulated";

/// Returns the withheld reference of every requested sentence.
pub struct SimulatedOracle {
    references: HashMap<SentenceId, String>,
}

impl SimulatedOracle {
    pub fn new(references: HashMap<SentenceId, String>) -> Self {
        Self { references }
    }

    pub fn from_pool(pool: &MonolingualPool) -> Self {
        Self::new(
            pool.entries()
                .iter()
                .filter_map(|e| pool.hidden_reference(e.id).map(|r| (e.id, r.to_string())))
                .collect(),
        )
    }

    /// Lookup of several ids, in request order.
    pub fn lookup(&self, ids: &[SentenceId]) -> Result<Vec<(SentenceId, String)>> {
        ids.iter()
            .map(|id| {
                self.references
                    .get(id)
                    .map(|t| (*id, t.clone()))
                    .ok_or_else(|| Error::Oracle(format!("sentence {id} has no hidden reference")))
            })
            .collect()
    }
}

impl Oracle for SimulatedOracle {
    fn answer(
        &mut self,
        _iteration: u64,
        items: &[OracleItem],
        sink: &mut dyn FnMut(OracleEvent) -> Result<()>,
    ) -> Result<()> {
        let ids: Vec<SentenceId> = items.iter().map(|i| i.id).collect();
        for (id, target) in self.lookup(&ids)? {
            sink(OracleEvent::Label {
                id,
                target,
                annotator: SIMULATED_ANNOTATOR.into(),
            })?;
        }
        Ok(())
    }
}

/// Publishes items on an annotation queue and waits for annotators.
pub struct InteractiveOracle {
    queue: Arc<AnnotationQueue>,
    /// Give up after this long without any answer.
    pub idle_timeout: Option<Duration>,
}

impl InteractiveOracle {
    pub fn new(queue: Arc<AnnotationQueue>, idle_timeout: Option<Duration>) -> Self {
        Self { queue, idle_timeout }
    }
}

impl Oracle for InteractiveOracle {
    fn answer(
        &mut self,
        iteration: u64,
        items: &[OracleItem],
        sink: &mut dyn FnMut(OracleEvent) -> Result<()>,
    ) -> Result<()> {
        self.queue.publish(iteration, items.to_vec());
        let mut remaining = items.len();
        while remaining > 0 {
            let events = self.queue.wait_events(self.idle_timeout);
            if events.is_empty() {
                self.queue.withdraw();
                return Err(Error::OracleTimeout { pending: remaining });
            }
            for e in events {
                remaining -= 1;
                sink(e)?;
            }
        }
        Ok(())
    }

    fn wants_hypotheses(&self) -> bool {
        true
    }

    fn progress(&mut self, status: &RunStatus) {
        self.queue.set_status(status.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentencePair;

    fn pool() -> MonolingualPool {
        MonolingualPool::with_hidden_references(
            (0..10)
                .map(|i| SentencePair {
                    id: i,
                    source: format!("s{i}"),
                    target: format!("t{i}"),
                })
                .collect(),
        )
    }

    #[test]
    fn simulated_lookup_preserves_order() {
        let o = SimulatedOracle::from_pool(&pool());
        assert_eq!(o.lookup(&[7, 3]).unwrap(), vec![(7, "t7".into()), (3, "t3".into())]);
        assert!(o.lookup(&[]).unwrap().is_empty());
        assert!(matches!(o.lookup(&[99]), Err(Error::Oracle(_))));
    }

    #[test]
    fn simulated_answers_every_item() {
        let mut o = SimulatedOracle::from_pool(&pool());
        let items: Vec<OracleItem> = [2, 5]
            .iter()
            .map(|&id| OracleItem {
                id,
                source: format!("s{id}"),
                hypothesis: String::new(),
                score: None,
            })
            .collect();
        let mut got = Vec::new();
        o.answer(1, &items, &mut |e| {
            got.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(got.iter().map(OracleEvent::id).collect::<Vec<_>>(), vec![2, 5]);
    }
}
