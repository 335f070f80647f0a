use std::io;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::toy;
use crate::transformer::{load_checkpoint, ModelConfig};

#[derive(Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl io::Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl SharedBuf {
    fn records(&self) -> Vec<JournalRecord> {
        String::from_utf8(self.0.lock().unwrap().clone())
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

struct Fixture {
    initial: Vec<SentencePair>,
    pool: MonolingualPool,
    hidden: Vec<SentencePair>,
    dev: DevSet,
    pipeline: TextPipeline,
    model: Transformer<f32>,
    train_config: TrainConfig,
}

fn fixture(pool_size: usize) -> Fixture {
    let initial = toy::pairs(30, 4, 0);
    let hidden = toy::pairs(pool_size, 4, 1000);
    let dev_pairs = toy::pairs(8, 4, 5000);
    let pipeline = TextPipeline::learn(&initial, 30, 30);
    let (dev_train, _) = pipeline.pairs(&dev_pairs, 20);
    let dev = DevSet {
        pairs: dev_train,
        references: dev_pairs.iter().map(|p| p.target.clone()).collect(),
    };
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        ffn_width: 32,
        src_vocab: pipeline.source.vocab.len(),
        trg_vocab: pipeline.target.vocab.len(),
        max_length: 20,
        ..ModelConfig::default()
    };
    let model = Transformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let train_config = TrainConfig {
        lr0: 1e-3,
        fine_tune_epochs: 1,
        batch_tokens: 200,
        validate_every: 10_000,
        dropout: 0.1,
        decode: crate::decoder::DecodeConfig {
            max_length: 20,
            batch_size: 16,
        },
        ..TrainConfig::default()
    };
    Fixture {
        initial,
        pool: MonolingualPool::with_hidden_references(hidden.clone()),
        hidden,
        dev,
        pipeline,
        model,
        train_config,
    }
}

fn al_config(strategy: Strategy, b: usize, budget: u64) -> ALConfig {
    ALConfig {
        strategy,
        pool_sample_fraction: 0.25,
        query_size: b,
        budget,
        seed: 11,
        acquisition: AcquisitionConfig {
            beam: 2,
            n_best: 2,
            decode: crate::decoder::DecodeConfig {
                max_length: 20,
                batch_size: 16,
            },
            ..AcquisitionConfig::default()
        },
        ..ALConfig::default()
    }
}

fn learner<'a>(f: &'a Fixture, cfg: &'a ALConfig, journal: Journal, dir: Option<PathBuf>) -> ActiveLearner<'a> {
    ActiveLearner {
        config: cfg,
        train_config: &f.train_config,
        pipeline: &f.pipeline,
        dev: &f.dev,
        initial: &f.initial,
        pool: &f.pool,
        journal,
        checkpoint_dir: dir,
        train_log: None,
    }
}

fn check_partition(state: &ALState, f: &Fixture) {
    let pool_ids: BTreeSet<SentenceId> = f.pool.entries().iter().map(|e| e.id).collect();
    let from_pool: BTreeSet<SentenceId> = state.labeled.keys().copied().filter(|id| pool_ids.contains(id)).collect();
    assert!(state.pool.is_disjoint(&from_pool));
    assert_eq!(state.pool.len() + from_pool.len(), f.pool.len());
    assert!(state.pool.iter().all(|id| !state.labeled.contains_key(id)));
}

#[test]
fn iterations_move_exactly_b_sentences_and_replay_matches() {
    let f = fixture(40);
    let cfg = al_config(Strategy::LeastConfidence, 5, 3);
    let buf = SharedBuf::default();
    let mut oracle = SimulatedOracle::from_pool(&f.pool);
    let out = learner(&f, &cfg, Journal::from_writer(buf.clone()), None)
        .run(f.model.clone(), &[], &mut oracle)
        .unwrap();
    let s = &out.state;
    assert_eq!(s.iteration, 3);
    assert_eq!(s.history.len(), 3);
    assert_eq!(s.pool.len(), 40 - 15);
    for (k, h) in s.history.iter().enumerate() {
        assert_eq!(h.labeled.len(), 5);
        assert_eq!(h.labeled_count, 30 + 5 * (k + 1));
    }
    check_partition(s, &f);
    // Revealed pairs equal the original ones.
    for h in &f.hidden {
        if let Some(p) = s.labeled.get(&h.id) {
            assert_eq!(p, h);
        }
    }
    let records = buf.records();
    assert_eq!(replay(&f.initial, &f.pool, &records).unwrap(), out.state);
    // Labels go to the top of each iteration's ranking.
    for r in &records {
        if let JournalRecord::Selection { iteration, ranked, .. } = r {
            let h = &s.history[*iteration as usize - 1];
            assert_eq!(h.labeled, ranked[..5].to_vec());
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let f = fixture(30);
    let cfg = al_config(Strategy::Margin, 4, 2);
    let run = || {
        let buf = SharedBuf::default();
        let mut log = Vec::new();
        let mut l = learner(&f, &cfg, Journal::from_writer(buf.clone()), None);
        l.train_log = Some(&mut log);
        l.run(f.model.clone(), &[], &mut SimulatedOracle::from_pool(&f.pool)).unwrap();
        drop(l);
        let journal = buf.0.lock().unwrap().clone();
        (journal, log)
    };
    let (j1, l1) = run();
    let (j2, l2) = run();
    assert_eq!(j1, j2);
    assert_eq!(l1, l2);
    assert!(!l1.is_empty());
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let f = fixture(30);
    let cfg = al_config(Strategy::LeastConfidence, 4, 3);
    let full_dir = tempfile::tempdir().unwrap();
    let full = SharedBuf::default();
    learner(&f, &cfg, Journal::from_writer(full.clone()), Some(full_dir.path().into()))
        .run(f.model.clone(), &[], &mut SimulatedOracle::from_pool(&f.pool))
        .unwrap();
    let records = full.records();
    // Cut inside iteration 2, after its selection and two labels.
    let sel2 = records
        .iter()
        .position(|r| matches!(r, JournalRecord::Selection { iteration: 2, .. }))
        .unwrap();
    let prefix = &records[..sel2 + 3];
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(full_dir.path().join("iter-1.ckpt"), dir.path().join("iter-1.ckpt")).unwrap();
    let state = replay(&f.initial, &f.pool, prefix).unwrap();
    assert_eq!(state.open.as_ref().unwrap().labeled.len(), 2);
    let model = load_checkpoint(&dir.path().join(state.last_checkpoint().unwrap())).unwrap();
    let rest = SharedBuf::default();
    let out = learner(&f, &cfg, Journal::from_writer(rest.clone()), Some(dir.path().into()))
        .run(model, prefix, &mut SimulatedOracle::from_pool(&f.pool))
        .unwrap();
    let mut joined = prefix.to_vec();
    joined.extend(rest.records());
    assert_eq!(joined, records);
    assert_eq!(out.state, replay(&f.initial, &f.pool, &records).unwrap());
}

#[test]
fn mismatched_header_is_rejected() {
    let f = fixture(10);
    let cfg = al_config(Strategy::Random, 2, 1);
    let buf = SharedBuf::default();
    learner(&f, &cfg, Journal::from_writer(buf.clone()), None)
        .run(f.model.clone(), &[], &mut SimulatedOracle::from_pool(&f.pool))
        .unwrap();
    let other = ALConfig { seed: 12, ..cfg.clone() };
    let err = learner(&f, &other, Journal::sink(), None)
        .run(f.model.clone(), &buf.records(), &mut SimulatedOracle::from_pool(&f.pool))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn one_iteration_can_exhaust_the_pool() {
    let f = fixture(12);
    let cfg = ALConfig {
        pool_sample_fraction: 1.0,
        ..al_config(Strategy::Random, 12, 1)
    };
    let out = learner(&f, &cfg, Journal::sink(), None)
        .run(f.model.clone(), &[], &mut SimulatedOracle::from_pool(&f.pool))
        .unwrap();
    assert!(out.state.pool.is_empty());
    assert_eq!(out.state.labeled.len(), 42);
}

#[test]
fn loop_stops_when_the_pool_is_empty() {
    let f = fixture(6);
    let cfg = al_config(Strategy::Random, 4, 10);
    let out = learner(&f, &cfg, Journal::sink(), None)
        .run(f.model.clone(), &[], &mut SimulatedOracle::from_pool(&f.pool))
        .unwrap();
    assert_eq!(out.state.iteration, 2);
    assert!(out.state.pool.is_empty());
    assert_eq!(out.state.history[1].labeled.len(), 2);
}

/// Skips one fixed sentence, labels everything else from the references.
struct Skipper {
    inner: SimulatedOracle,
    skip: SentenceId,
}

impl Oracle for Skipper {
    fn answer(
        &mut self,
        iteration: u64,
        items: &[OracleItem],
        sink: &mut dyn FnMut(OracleEvent) -> Result<()>,
    ) -> Result<()> {
        for item in items {
            if item.id == self.skip {
                sink(OracleEvent::Skip {
                    id: item.id,
                    annotator: "s".into(),
                })?;
            } else {
                self.inner.answer(iteration, std::slice::from_ref(item), sink)?;
            }
        }
        Ok(())
    }
}

#[test]
fn a_skip_is_replaced_by_the_next_candidate() {
    let f = fixture(30);
    let cfg = al_config(Strategy::Random, 4, 1);
    let plain = learner(&f, &cfg, Journal::sink(), None)
        .run(f.model.clone(), &[], &mut SimulatedOracle::from_pool(&f.pool))
        .unwrap();
    let chosen = plain.state.history[0].labeled.clone();
    let mut skipper = Skipper {
        inner: SimulatedOracle::from_pool(&f.pool),
        skip: chosen[1],
    };
    let buf = SharedBuf::default();
    let out = learner(&f, &cfg, Journal::from_writer(buf.clone()), None)
        .run(f.model.clone(), &[], &mut skipper)
        .unwrap();
    let h = &out.state.history[0];
    assert_eq!(h.skipped, vec![chosen[1]]);
    assert_eq!(h.labeled.len(), 4);
    let ranked = match &buf.records()[2] {
        JournalRecord::Selection { ranked, .. } => ranked.clone(),
        r => panic!("{r:?}"),
    };
    let old: BTreeSet<_> = chosen.iter().collect();
    let new: BTreeSet<_> = h.labeled.iter().collect();
    assert_eq!(old.difference(&new).collect::<Vec<_>>(), vec![&&chosen[1]]);
    assert_eq!(new.difference(&old).collect::<Vec<_>>(), vec![&&ranked[4]]);
    assert!(out.state.pool.contains(&chosen[1]));
    check_partition(&out.state, &f);
}

#[test]
fn unrequested_answers_are_rejected() {
    struct Rogue;
    impl Oracle for Rogue {
        fn answer(&mut self, _: u64, _: &[OracleItem], sink: &mut dyn FnMut(OracleEvent) -> Result<()>) -> Result<()> {
            sink(OracleEvent::Label {
                id: 999_999,
                target: "x".into(),
                annotator: "r".into(),
            })
        }
    }
    let f = fixture(10);
    let cfg = al_config(Strategy::Random, 2, 1);
    let err = learner(&f, &cfg, Journal::sink(), None)
        .run(f.model.clone(), &[], &mut Rogue)
        .err()
        .unwrap();
    assert!(matches!(err, Error::Oracle(_)));
}

#[test]
fn interactive_oracle_through_the_queue() {
    let f = fixture(20);
    let cfg = al_config(Strategy::LeastConfidence, 3, 1);
    let queue = Arc::new(AnnotationQueue::default());
    let refs: HashMap<SentenceId, String> = f.hidden.iter().map(|p| (p.id, p.target.clone())).collect();
    let worker = {
        let q = Arc::clone(&queue);
        std::thread::spawn(move || {
            let mut done = 0;
            let mut skipped = false;
            while done < 3 {
                match q.next("human").unwrap() {
                    Some(t) if !skipped => {
                        assert!(!t.model_best_hypothesis.is_empty() || t.score.is_some());
                        q.skip(&t.lease_id, t.sentence_id).unwrap();
                        skipped = true;
                    }
                    Some(t) => {
                        q.submit(&t.lease_id, t.sentence_id, &refs[&t.sentence_id]).unwrap();
                        done += 1;
                    }
                    None => std::thread::sleep(Duration::from_millis(5)),
                }
            }
        })
    };
    let mut oracle = InteractiveOracle::new(Arc::clone(&queue), Some(Duration::from_secs(60)));
    let out = learner(&f, &cfg, Journal::sink(), None)
        .run(f.model.clone(), &[], &mut oracle)
        .unwrap();
    worker.join().unwrap();
    assert_eq!(out.state.history[0].labeled.len(), 3);
    assert_eq!(out.state.history[0].skipped.len(), 1);
    let status = queue.status();
    assert_eq!(status.labeled_count, 33);
    assert_eq!(status.pool_count, 17);
    assert_eq!(status.strategy, "least_confidence");
}

#[test]
fn interactive_timeout_leaves_a_resumable_journal() {
    let f = fixture(20);
    let cfg = al_config(Strategy::Random, 3, 1);
    let queue = Arc::new(AnnotationQueue::default());
    let buf = SharedBuf::default();
    let mut oracle = InteractiveOracle::new(Arc::clone(&queue), Some(Duration::from_millis(50)));
    let err = learner(&f, &cfg, Journal::from_writer(buf.clone()), None)
        .run(f.model.clone(), &[], &mut oracle)
        .err()
        .unwrap();
    assert!(matches!(err, Error::OracleTimeout { pending: 3 }));
    let records = buf.records();
    let state = replay(&f.initial, &f.pool, &records).unwrap();
    assert!(state.open.is_some());
    let out = learner(&f, &cfg, Journal::sink(), None)
        .run(f.model.clone(), &records, &mut SimulatedOracle::from_pool(&f.pool))
        .unwrap();
    assert_eq!(out.state.iteration, 1);
    assert_eq!(out.state.history[0].labeled.len(), 3);
}

#[test]
fn replay_rejects_inconsistent_journals() {
    let f = fixture(10);
    let cfg = al_config(Strategy::Random, 2, 1);
    let buf = SharedBuf::default();
    learner(&f, &cfg, Journal::from_writer(buf.clone()), None)
        .run(f.model.clone(), &[], &mut SimulatedOracle::from_pool(&f.pool))
        .unwrap();
    let records = buf.records();
    let label = records
        .iter()
        .position(|r| matches!(r, JournalRecord::Label { .. }))
        .unwrap();
    let mut dup = records.clone();
    dup.insert(label, records[label].clone());
    assert!(replay(&f.initial, &f.pool, &dup).is_err());
    let mut headless = records.clone();
    headless.remove(0);
    assert!(replay(&f.initial, &f.pool, &headless).is_err());
}

#[test]
fn config_validation_and_sample_size() {
    assert!(ALConfig::default().validate().is_ok());
    for bad in [
        ALConfig {
            pool_sample_fraction: 0.0,
            ..ALConfig::default()
        },
        ALConfig {
            pool_sample_fraction: 1.5,
            ..ALConfig::default()
        },
        ALConfig {
            query_size: 0,
            ..ALConfig::default()
        },
        ALConfig {
            budget: 0,
            ..ALConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let c = ALConfig::default();
    assert_eq!(c.sample_size(1_000_000), 60_000);
    // Never fewer than one batch.
    assert_eq!(c.sample_size(1000), 10_000);
}

#[test]
fn labels_to_reach_reads_the_curve() {
    let mut s = ALState::new(&[], &MonolingualPool::default()).unwrap();
    s.baseline = Some((0.2, 9.0));
    for (k, b) in [(1u64, 0.3), (2, 0.5), (3, 0.45)] {
        s.history.push(IterationRecord {
            iteration: k,
            labeled: vec![],
            skipped: vec![],
            dev_bleu: b,
            dev_ppl: 1.0,
            checkpoint: None,
            labeled_count: 10 * k as usize + 10,
        });
    }
    assert_eq!(labels_to_reach(&s, 10, 0.1), Some(10));
    assert_eq!(labels_to_reach(&s, 10, 0.4), Some(30));
    assert_eq!(labels_to_reach(&s, 10, 0.6), None);
}
