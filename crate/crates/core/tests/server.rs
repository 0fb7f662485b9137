mod common;

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use layoutpaint::config::EngineConfig;
use layoutpaint::server::{router, AppState};

use common::*;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn layout_doc() -> Value {
    let lay = layout(
        32,
        32,
        "a desk",
        vec![
            object("lamp", "a lamp", 1, rect(32, 32, 0, 14, 0, 14)),
            object("cup", "a cup", 2, rect(32, 32, 16, 30, 12, 28)),
        ],
    );
    serde_json::from_slice(&layoutpaint::layout::save_layout(&lay)).unwrap()
}

async fn wait_done(app: &axum::Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, body) = call(app, "GET", &format!("/api/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let rec = json_of(&body);
        match rec["state"].as_str().unwrap() {
            "done" | "failed" => return rec,
            _ => {}
        }
        assert!(start.elapsed() < Duration::from_secs(60), "job {id} did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn app(dir: &std::path::Path) -> axum::Router {
    let mut cfg = EngineConfig::default();
    cfg.toy.codec_factor = 4;
    cfg.workers = 2;
    router(AppState::new(cfg, dir.to_path_buf()))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn create_poll_fetch_and_regenerate() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());

    let (status, body) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["status"], "ok");

    let (status, body) = call(&app, "POST", "/api/jobs", Some(json!({"layout": layout_doc(), "overrides": {"seed": 3}}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = json_of(&body)["id"].as_str().unwrap().to_string();

    let rec = wait_done(&app, &id).await;
    assert_eq!(rec["state"], "done", "{rec}");
    assert!(rec["objects"].as_array().unwrap().iter().all(|o| o["done"] == true));
    assert_eq!(rec["artifacts"]["scene"], "scene.png");

    let (status, png) = call(&app, "GET", &format!("/api/jobs/{id}/image"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (status, png) = call(&app, "GET", &format!("/api/jobs/{id}/objects/cup/image"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (status, body) = call(&app, "GET", &format!("/api/jobs/{id}/objects/mug/image"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["code"], "not_found");

    let (status, body) = call(&app, "POST", &format!("/api/jobs/{id}/objects/cup/regenerate"), Some(json!({"seed": 77}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let child = json_of(&body)["id"].as_str().unwrap().to_string();
    assert_ne!(child, id);
    let rec = wait_done(&app, &child).await;
    assert_eq!(rec["state"], "done", "{rec}");
    assert_eq!(rec["parent"], id.as_str());

    let read = |job: &str, oid: &str| std::fs::read(dir.path().join(job).join("objects").join(oid).join("latent.bin")).unwrap();
    assert_eq!(read(&id, "lamp"), read(&child, "lamp"));
    assert_ne!(read(&id, "cup"), read(&child, "cup"));
    // the parent job directory is untouched
    let meta: Value = serde_json::from_slice(&std::fs::read(dir.path().join(&id).join("objects/cup/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 2);
}

#[tokio::test]
async fn request_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());

    let (status, body) = call(&app, "GET", "/api/jobs/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["code"], "not_found");

    let (status, body) = call(&app, "POST", "/api/jobs", Some(json!({"layuot": {}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["code"], "invalid_request");

    let mut doc = layout_doc();
    doc["objects"][0]["mask"]["counts"] = json!([3, 4]);
    let (status, body) = call(&app, "POST", "/api/jobs", Some(json!({"layout": doc}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err = json_of(&body);
    assert_eq!(err["code"], "validation_error");
    assert_eq!(err["stage"], "layout");

    let mut doc = layout_doc();
    doc["objects"][1]["mask"] = json!("/etc/passwd");
    let (status, body) = call(&app, "POST", "/api/jobs", Some(json!({"layout": doc}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json_of(&body)["message"].as_str().unwrap().contains("inline"));

    let mut doc = layout_doc();
    doc["objects"][1]["mask"]["counts"] = json!([1024]);
    let (status, body) = call(&app, "POST", "/api/jobs", Some(json!({"layout": doc}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["code"], "empty_mask");

    let (status, body) = call(&app, "POST", "/api/jobs", Some(json!({"layout": layout_doc(), "overrides": {"cc.t_min": 900}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["code"], "invalid_config");

    let (status, _) = call(&app, "POST", "/api/jobs/nope/objects/a/regenerate", Some(json!({}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
