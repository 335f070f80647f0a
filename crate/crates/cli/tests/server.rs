//! The annotation endpoints, driven in-process through the router.

use std::sync::Arc;
use std::time::Duration;

use activemt::active_loop::{AnnotationQueue, OracleEvent, OracleItem, RunStatus, Task};
use activemt_cli::server::{router, Ack, ErrorBody, SkipRequest, SubmitRequest};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use serde::de::DeserializeOwned;
use tower::ServiceExt;

fn items(ids: &[u64]) -> Vec<OracleItem> {
    ids.iter()
        .map(|&id| OracleItem {
            id,
            source: format!("source {id}"),
            hypothesis: format!("guess {id}"),
            score: Some(id as f64 / 10.0),
        })
        .collect()
}

fn queue() -> Arc<AnnotationQueue> {
    Arc::new(AnnotationQueue::new(Duration::from_secs(60)))
}

async fn call(queue: &Arc<AnnotationQueue>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(queue.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

fn json<T: DeserializeOwned>(body: &[u8]) -> T {
    serde_json::from_slice(body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(body)))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post<T: serde::Serialize>(uri: &str, body: &T) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap()
}

async fn next(q: &Arc<AnnotationQueue>, annotator: &str) -> Task {
    let (status, body) = call(q, get(&format!("/api/batch/next?annotator={annotator}"))).await;
    assert_eq!(status, StatusCode::OK);
    json(&body)
}

#[tokio::test]
async fn status_reports_the_loop_state_and_pending_count() {
    let q = queue();
    q.set_status(RunStatus {
        iteration: 3,
        pending_count: 0,
        labeled_count: 120,
        pool_count: 80,
        strategy: "margin".into(),
    });
    q.publish(3, items(&[1, 2]));
    let (status, body) = call(&q, get("/api/run/status")).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = json(&body);
    assert_eq!(
        v,
        serde_json::json!({
            "iteration": 3, "pending_count": 2, "labeled_count": 120, "pool_count": 80, "strategy": "margin"
        })
    );
}

#[tokio::test]
async fn next_is_empty_without_work_and_needs_an_annotator() {
    let q = queue();
    let (status, body) = call(&q, get("/api/batch/next?annotator=ana")).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert!(body.is_empty());
    let (status, body) = call(&q, get("/api/batch/next")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json::<ErrorBody>(&body).error, "no_annotator");
}

#[tokio::test]
async fn tasks_carry_the_sentence_and_model_suggestion() {
    let q = queue();
    q.set_status(RunStatus {
        strategy: "least_confidence".into(),
        ..RunStatus::default()
    });
    q.publish(1, items(&[7, 4]));
    let (status, body) = call(&q, get("/api/batch/next?annotator=ana")).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = json(&body);
    for key in ["lease_id", "sentence_id", "source_text", "model_best_hypothesis", "score"] {
        assert!(v.get(key).is_some(), "missing {key} in {v}");
    }
    let t: Task = json(&body);
    // Served in rank order.
    assert_eq!(t.sentence_id, 7);
    assert_eq!(t.source_text, "source 7");
    assert_eq!(t.model_best_hypothesis, "guess 7");
    assert_eq!(t.score, Some(0.7));
    assert_eq!(t.strategy, "least_confidence");
}

#[tokio::test]
async fn concurrent_annotators_get_different_sentences() {
    let q = queue();
    q.publish(1, items(&[1, 2, 3]));
    let a = next(&q, "ana").await;
    let b = next(&q, "ben").await;
    let c = next(&q, "cy").await;
    let mut ids = vec![a.sentence_id, b.sentence_id, c.sentence_id];
    ids.sort();
    assert_eq!(ids, [1, 2, 3]);
    assert_ne!(a.lease_id, b.lease_id);
    let (status, _) = call(&q, get("/api/batch/next?annotator=dee")).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn submit_acknowledges_and_reaches_the_loop() {
    let q = queue();
    q.publish(1, items(&[5]));
    let t = next(&q, "ana").await;
    let req = SubmitRequest {
        lease_id: t.lease_id.clone(),
        sentence_id: t.sentence_id,
        target_text: "eine Übersetzung".into(),
    };
    let (status, body) = call(&q, post("/api/batch/submit", &req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        json::<Ack>(&body),
        Ack {
            status: "labeled".into(),
            sentence_id: 5
        }
    );
    let events = q.wait_events(Some(Duration::from_millis(10)));
    assert_eq!(
        events,
        [OracleEvent::Label {
            id: 5,
            target: "eine Übersetzung".into(),
            annotator: "ana".into()
        }]
    );
    // The same lease cannot be used twice.
    let (status, body) = call(&q, post("/api/batch/submit", &req)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(json::<ErrorBody>(&body).error, "stale_lease");
}

#[tokio::test]
async fn stale_and_mismatched_leases_are_conflicts() {
    let q = queue();
    q.publish(1, items(&[5, 6]));
    let t = next(&q, "ana").await;
    for (lease, id) in [("not-a-lease".to_string(), 5), (t.lease_id.clone(), 6)] {
        let req = SubmitRequest {
            lease_id: lease.clone(),
            sentence_id: id,
            target_text: "x".into(),
        };
        let (status, _) = call(&q, post("/api/batch/submit", &req)).await;
        assert_eq!(status, StatusCode::CONFLICT);
        let (status, _) = call(&q, post("/api/batch/skip", &SkipRequest { lease_id: lease, sentence_id: id })).await;
        assert_eq!(status, StatusCode::CONFLICT);
    }
    assert!(q.wait_events(Some(Duration::from_millis(10))).is_empty());
}

#[tokio::test]
async fn empty_submissions_are_rejected_and_keep_the_lease() {
    let q = queue();
    q.publish(1, items(&[5]));
    let t = next(&q, "ana").await;
    let mut req = SubmitRequest {
        lease_id: t.lease_id,
        sentence_id: 5,
        target_text: "   ".into(),
    };
    let (status, body) = call(&q, post("/api/batch/submit", &req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json::<ErrorBody>(&body).error, "empty_target");
    req.target_text = "now filled in".into();
    let (status, _) = call(&q, post("/api/batch/submit", &req)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn skip_acknowledges_and_reaches_the_loop() {
    let q = queue();
    q.publish(1, items(&[8, 9]));
    let t = next(&q, "ana").await;
    let req = SkipRequest {
        lease_id: t.lease_id,
        sentence_id: t.sentence_id,
    };
    let (status, body) = call(&q, post("/api/batch/skip", &req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json::<Ack>(&body).status, "skipped");
    assert_eq!(
        q.wait_events(Some(Duration::from_millis(10))),
        [OracleEvent::Skip {
            id: 8,
            annotator: "ana".into()
        }]
    );
    // The skipped sentence is not offered again in this batch.
    assert_eq!(next(&q, "ana").await.sentence_id, 9);
}

#[tokio::test]
async fn malformed_bodies_are_client_errors() {
    let q = queue();
    let req = Request::post("/api/batch/submit")
        .header("content-type", "application/json")
        .body(Body::from("{\"lease_id\": 3}"))
        .unwrap();
    let (status, _) = call(&q, req).await;
    assert!(status.is_client_error(), "{status}");
}

#[tokio::test]
async fn serves_over_tcp_until_shut_down() {
    let q = queue();
    q.publish(1, items(&[1]));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(activemt_cli::server::serve(listener, q.clone(), async {
        let _ = stopped.await;
    }));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /api/run/status HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).await.unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"pending_count\":1"), "{reply}");
    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
}
