use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use ddnet_core::checkpoint::{save_checkpoint, Checkpoint};
use ddnet_core::image::save_image;
use ddnet_core::model::{Model, ModelConfig};
use ddnet_core::Image;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small() -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        num_scales: 2,
        ..ModelConfig::default()
    }
}

fn zero_checkpoint(path: &Path) {
    let ckpt = Checkpoint {
        model: Model::zeroed(&small()).unwrap(),
        step: 0,
        epoch: 0,
        optimizer: None,
    };
    save_checkpoint(&ckpt, path).unwrap();
}

fn scene(k: usize) -> Image {
    Image::from_fn(20, 20, 3, |c, y, x| ((x * (2 + k) + y * 3 + c) % 17) as f32 / 17.0).unwrap()
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_reports_cpu() {
    let app = ddnet_service::router();
    let (status, body) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["device"], "cpu");
}

#[tokio::test]
async fn errors_carry_category_and_status() {
    let app = ddnet_service::router();
    let dir = tempfile::tempdir().unwrap();

    let (status, body) = call(&app, Method::POST, "/v1/gradmap", Some(json!({"input": 3}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["category"], "argument");

    let missing = dir.path().join("missing.png");
    let out = dir.path().join("g.png");
    let (status, body) = call(&app, Method::POST, "/v1/gradmap", Some(json!({"input": missing, "output": out}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["category"], "io");

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"junk").unwrap();
    let req = json!({"checkpoint": junk, "input": missing, "output": out});
    let (status, body) = call(&app, Method::POST, "/v1/enhance", Some(req)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["category"], "checkpoint");

    let req = json!({"checkpoint": junk, "options": {"repeats": 1}});
    let (status, body) = call(&app, Method::POST, "/v1/bench", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["category"], "argument");

    let (status, body) = call(&app, Method::GET, "/v1/train/77", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["category"], "not_found");

    let (status, body) = call(&app, Method::POST, "/v1/train", Some(json!({"patch": 30}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["category"], "argument");
}

#[tokio::test]
async fn enhance_eval_bench_and_gradmap() {
    let app = ddnet_service::router();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("zero.ckpt");
    zero_checkpoint(&ckpt);
    for k in 0..2 {
        save_image(&scene(k), dir.path().join(format!("data/low/i{k}.png"))).unwrap();
        save_image(&scene(k), dir.path().join(format!("data/high/i{k}.png"))).unwrap();
    }

    let out = dir.path().join("out");
    let req = json!({"checkpoint": ckpt, "input": dir.path().join("data/low"), "output": out});
    let (status, body) = call(&app, Method::POST, "/v1/enhance", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["written"].as_array().unwrap().len(), 2);
    assert!(out.join("i1.png").is_file());

    let req = json!({"checkpoint": ckpt, "data": dir.path().join("data")});
    let (status, body) = call(&app, Method::POST, "/v1/eval", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["report"]["psnr_mean"], 99.0);

    let req = json!({"checkpoint": ckpt, "options": {"resolutions": [[32, 24], [64, 48]]}});
    let (status, body) = call(&app, Method::POST, "/v1/bench", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["rows"].as_array().unwrap().len(), 2);
    assert_eq!(body["checkpoint"], ckpt.display().to_string());

    let g = dir.path().join("g.png");
    let req = json!({"input": dir.path().join("data/low/i0.png"), "output": g});
    let (status, _) = call(&app, Method::POST, "/v1/gradmap", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(g.is_file());

    let synth = dir.path().join("synth");
    let req = json!({"input": dir.path().join("data/high"), "output": synth, "seed": 5});
    let (status, body) = call(&app, Method::POST, "/v1/synthesize", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["records"].as_array().unwrap().len(), 2);
    assert!(synth.join("coefficients.csv").is_file());
}

async fn wait_for(app: &Router, id: u64) -> Value {
    for _ in 0..600 {
        let (status, body) = call(app, Method::GET, &format!("/v1/train/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["state"] != "running" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("training job {id} did not finish");
}

#[tokio::test(flavor = "multi_thread")]
async fn training_job_runs_to_completion() {
    let app = ddnet_service::router();
    let dir = tempfile::tempdir().unwrap();
    for k in 0..2 {
        save_image(&scene(k).map(|v| v * 0.3), dir.path().join(format!("data/low/i{k}.png"))).unwrap();
        save_image(&scene(k), dir.path().join(format!("data/high/i{k}.png"))).unwrap();
    }
    let cfg = json!({
        "epochs": 2, "batch": 2, "patch": 16, "base_channels": 2, "num_scales": 2,
        "train_root": dir.path().join("data"), "out_dir": dir.path().join("run"),
    });
    let (status, body) = call(&app, Method::POST, "/v1/train", Some(cfg)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = body["id"].as_u64().unwrap();
    let done = wait_for(&app, id).await;
    assert_eq!(done["state"], "finished");
    assert_eq!(done["last"]["step"], 2);
    assert!(dir.path().join("run/final.ckpt").is_file());
    assert!(dir.path().join("run/train_log.csv").is_file());

    let cfg = json!({"epochs": 1, "patch": 16, "train_root": dir.path().join("nowhere"), "out_dir": dir.path().join("bad")});
    let (_, body) = call(&app, Method::POST, "/v1/train", Some(cfg)).await;
    let failed = wait_for(&app, body["id"].as_u64().unwrap()).await;
    assert_eq!(failed["state"], "failed");
    assert_eq!(failed["error"]["category"], "io");
}
