//! Kept in its own binary: the worker is left busy with a long job until the
//! process exits.

use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cyclesketch::service::{router, AppState, QUEUE_DEPTH};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn a_full_queue_answers_409() {
    let app = router(AppState::new(None).unwrap(), None);
    let points: Vec<Value> = (0..16)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / 16.0;
            json!({ "u": 320.0 + 100.0 * t.cos(), "v": 240.0 + 80.0 * t.sin() })
        })
        .collect();
    let (_, body) = call(&app, Method::POST, "/sketches", Some(json!({ "v": 1, "points": points }))).await;
    let sketch = body["sketch_id"].as_str().unwrap().to_string();
    let request = json!({ "v": 1, "sketch_id": sketch, "config": { "epochs": 1_000_000 } });

    let (status, body) = call(&app, Method::POST, "/train", Some(request.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let running = body["job_id"].as_str().unwrap().to_string();
    for _ in 0..500 {
        let (_, job) = call(&app, Method::GET, &format!("/jobs/{running}"), None).await;
        if job["state"] == "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }

    for _ in 0..QUEUE_DEPTH {
        let (status, body) = call(&app, Method::POST, "/train", Some(request.clone())).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        let (_, job) = call(&app, Method::GET, &format!("/jobs/{}", body["job_id"].as_str().unwrap()), None).await;
        assert_eq!(job["state"], "queued");
    }
    let (status, body) = call(&app, Method::POST, "/train", Some(request)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("queue"));
}
