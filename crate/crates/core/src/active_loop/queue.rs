//! Work queue between the active-learning loop and human annotators.
//!
//! The loop publishes a batch of sentences; annotators claim them one at a
//! time under a lease, and every submit or skip becomes an
//! [`OracleEvent`] the loop picks up. A sentence is leased to at most one
//! annotator at a time and an expired lease frees the sentence again.

use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::oracle::{OracleEvent, OracleItem};
use crate::corpus::SentenceId;

pub const DEFAULT_LEASE: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct RunStatus {
    pub iteration: u64,
    pub pending_count: usize,
    pub labeled_count: usize,
    pub pool_count: usize,
    pub strategy: String,
}

/// A leased sentence as shown to an annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub lease_id: String,
    pub sentence_id: SentenceId,
    pub source_text: String,
    pub model_best_hypothesis: String,
    pub score: Option<f64>,
    pub strategy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueueError {
    #[error("lease is unknown, expired, or for a different sentence")]
    StaleLease,
    #[error("target text must not be empty")]
    EmptyTarget,
    #[error("annotator name must not be empty")]
    NoAnnotator,
}

struct Lease {
    sentence_id: SentenceId,
    annotator: String,
    expires: Instant,
}

#[derive(Default)]
struct State {
    /// Sentences still waiting for an answer, in rank order.
    pending: Vec<OracleItem>,
    leases: HashMap<String, Lease>,
    events: VecDeque<OracleEvent>,
    status: RunStatus,
}


pub struct AnnotationQueue {
    state: Mutex<State>,
    answered: Condvar,
    lease_duration: Duration,
}

impl Default for AnnotationQueue {
    fn default() -> Self {
        Self::new(DEFAULT_LEASE)
    }
}

impl AnnotationQueue {
    pub fn new(lease_duration: Duration) -> Self {
        Self {
            state: Mutex::new(State::default()),
            answered: Condvar::new(),
            lease_duration,
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        // A panicking holder leaves the data consistent: every mutation
        // below is a single push or remove.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Replaces the open batch. Outstanding leases become stale.
    pub fn publish(&self, iteration: u64, items: Vec<OracleItem>) {
        let mut s = self.lock();
        s.pending = items;
        s.leases.clear();
        s.events.clear();
        s.status.iteration = iteration;
    }

    /// Drops the open batch, e.g. after the loop gave up waiting.
    pub fn withdraw(&self) {
        let mut s = self.lock();
        s.pending.clear();
        s.leases.clear();
    }

    /// Updates everything in the status except the pending count, which
    /// the queue tracks itself.
    pub fn set_status(&self, status: RunStatus) {
        self.lock().status = status;
    }

    pub fn status(&self) -> RunStatus {
        let s = self.lock();
        RunStatus {
            pending_count: s.pending.len(),
            ..s.status.clone()
        }
    }

    pub fn next(&self, annotator: &str) -> Result<Option<Task>, QueueError> {
        self.next_at(annotator, Instant::now())
    }

    /// Leases the highest-ranked unclaimed sentence to `annotator`.
    pub fn next_at(&self, annotator: &str, now: Instant) -> Result<Option<Task>, QueueError> {
        if annotator.trim().is_empty() {
            return Err(QueueError::NoAnnotator);
        }
        let mut s = self.lock();
        s.leases.retain(|_, l| l.expires > now);
        let Some(item) = s
            .pending
            .iter()
            .find(|i| !s.leases.values().any(|l| l.sentence_id == i.id))
            .cloned()
        else {
            return Ok(None);
        };
        let lease_id = uuid::Uuid::new_v4().to_string();
        s.leases.insert(
            lease_id.clone(),
            Lease {
                sentence_id: item.id,
                annotator: annotator.to_string(),
                expires: now + self.lease_duration,
            },
        );
        Ok(Some(Task {
            lease_id,
            sentence_id: item.id,
            source_text: item.source,
            model_best_hypothesis: item.hypothesis,
            score: item.score,
            strategy: s.status.strategy.clone(),
        }))
    }

    pub fn submit(&self, lease_id: &str, sentence_id: SentenceId, target: &str) -> Result<(), QueueError> {
        self.submit_at(lease_id, sentence_id, target, Instant::now())
    }

    pub fn submit_at(
        &self,
        lease_id: &str,
        sentence_id: SentenceId,
        target: &str,
        now: Instant,
    ) -> Result<(), QueueError> {
        let target = target.trim();
        if target.is_empty() {
            return Err(QueueError::EmptyTarget);
        }
        let target = target.to_string();
        self.resolve(lease_id, sentence_id, now, |id, annotator| OracleEvent::Label {
            id,
            target,
            annotator,
        })
    }

    pub fn skip(&self, lease_id: &str, sentence_id: SentenceId) -> Result<(), QueueError> {
        self.skip_at(lease_id, sentence_id, Instant::now())
    }

    pub fn skip_at(&self, lease_id: &str, sentence_id: SentenceId, now: Instant) -> Result<(), QueueError> {
        self.resolve(lease_id, sentence_id, now, |id, annotator| OracleEvent::Skip { id, annotator })
    }

    fn resolve(
        &self,
        lease_id: &str,
        sentence_id: SentenceId,
        now: Instant,
        event: impl FnOnce(SentenceId, String) -> OracleEvent,
    ) -> Result<(), QueueError> {
        let mut s = self.lock();
        match s.leases.get(lease_id) {
            Some(l) if l.sentence_id == sentence_id && l.expires > now => {}
            _ => return Err(QueueError::StaleLease),
        }
        let lease = s.leases.remove(lease_id).expect("checked above");
        s.pending.retain(|i| i.id != sentence_id);
        s.events.push_back(event(sentence_id, lease.annotator));
        self.answered.notify_all();
        Ok(())
    }

    /// Blocks until at least one answer is available or `timeout` passes
    /// without one, then drains all answers. `None` waits indefinitely.
    pub fn wait_events(&self, timeout: Option<Duration>) -> Vec<OracleEvent> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut s = self.lock();
        while s.events.is_empty() {
            match deadline {
                None => s = self.answered.wait(s).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        break;
                    }
                    s = self.answered.wait_timeout(s, d - now).unwrap_or_else(|e| e.into_inner()).0;
                }
            }
        }
        s.events.drain(..).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    fn items(ids: &[SentenceId]) -> Vec<OracleItem> {
        ids.iter()
            .map(|&id| OracleItem {
                id,
                source: format!("s{id}"),
                hypothesis: format!("h{id}"),
                score: Some(id as f64),
            })
            .collect()
    }

    #[test]
    fn leases_are_disjoint_and_follow_rank_order() {
        let q = AnnotationQueue::default();
        q.publish(1, items(&[5, 2, 9]));
        let a = q.next("ann").unwrap().unwrap();
        let b = q.next("bob").unwrap().unwrap();
        let c = q.next("ann").unwrap().unwrap();
        assert_eq!((a.sentence_id, b.sentence_id, c.sentence_id), (5, 2, 9));
        assert!(q.next("carl").unwrap().is_none());
        assert_eq!(a.model_best_hypothesis, "h5");
        assert_eq!(q.status().pending_count, 3);
    }

    #[test]
    fn submit_and_skip_produce_events() {
        let q = AnnotationQueue::default();
        q.publish(1, items(&[1, 2]));
        let a = q.next("ann").unwrap().unwrap();
        let b = q.next("bob").unwrap().unwrap();
        q.submit(&a.lease_id, 1, " translated ").unwrap();
        q.skip(&b.lease_id, 2).unwrap();
        assert_eq!(
            q.wait_events(Some(Duration::ZERO)),
            vec![
                OracleEvent::Label {
                    id: 1,
                    target: "translated".into(),
                    annotator: "ann".into()
                },
                OracleEvent::Skip {
                    id: 2,
                    annotator: "bob".into()
                },
            ]
        );
        assert_eq!(q.status().pending_count, 0);
        // Reusing a consumed lease is stale.
        assert_eq!(q.submit(&a.lease_id, 1, "again"), Err(QueueError::StaleLease));
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let q = AnnotationQueue::default();
        q.publish(1, items(&[1, 2]));
        let a = q.next("ann").unwrap().unwrap();
        assert_eq!(q.submit(&a.lease_id, 1, "   "), Err(QueueError::EmptyTarget));
        assert_eq!(q.submit(&a.lease_id, 2, "x"), Err(QueueError::StaleLease));
        assert_eq!(q.submit("nope", 1, "x"), Err(QueueError::StaleLease));
        assert_eq!(q.next(" "), Err(QueueError::NoAnnotator));
        // The failed attempts did not consume the lease.
        q.submit(&a.lease_id, 1, "x").unwrap();
    }

    #[test]
    fn expired_leases_free_the_sentence() {
        let q = AnnotationQueue::new(Duration::from_secs(10));
        q.publish(1, items(&[7]));
        let t0 = Instant::now();
        let a = q.next_at("ann", t0).unwrap().unwrap();
        assert!(q.next_at("bob", t0 + Duration::from_secs(5)).unwrap().is_none());
        let b = q.next_at("bob", t0 + Duration::from_secs(11)).unwrap().unwrap();
        assert_eq!(b.sentence_id, 7);
        assert_eq!(
            q.submit_at(&a.lease_id, 7, "late", t0 + Duration::from_secs(12)),
            Err(QueueError::StaleLease)
        );
        q.submit_at(&b.lease_id, 7, "ok", t0 + Duration::from_secs(12)).unwrap();
    }

    #[test]
    fn republishing_invalidates_old_leases() {
        let q = AnnotationQueue::default();
        q.publish(1, items(&[1]));
        let a = q.next("ann").unwrap().unwrap();
        q.publish(2, items(&[1]));
        assert_eq!(q.submit(&a.lease_id, 1, "x"), Err(QueueError::StaleLease));
        assert_eq!(q.status().iteration, 2);
    }

    #[test]
    fn wait_times_out_empty() {
        let q = AnnotationQueue::default();
        assert!(q.wait_events(Some(Duration::from_millis(10))).is_empty());
    }

    #[test]
    fn concurrent_annotators_never_share_a_sentence() {
        let q = Arc::new(AnnotationQueue::default());
        q.publish(1, items(&(0..200).collect::<Vec<_>>()));
        let handles: Vec<_> = (0..4)
            .map(|w| {
                let q = Arc::clone(&q);
                std::thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Some(t) = q.next(&format!("w{w}")).unwrap() {
                        q.submit(&t.lease_id, t.sentence_id, "t").unwrap();
                        got.push(t.sentence_id);
                    }
                    got
                })
            })
            .collect();
        let all: Vec<SentenceId> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        let unique: HashSet<_> = all.iter().collect();
        assert_eq!(all.len(), 200);
        assert_eq!(unique.len(), 200);
        assert_eq!(q.wait_events(None).len(), 200);
    }
}
