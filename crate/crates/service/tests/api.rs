use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

use hmar_core::dataset::{generate, Manifest, SyntheticSpec};
use hmar_core::model::{save_checkpoint, BackboneConfig, Model, ModelConfig};
use hmar_service::{router, AppState, Health, QueryResponse, ServiceConfig};

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: Manifest,
    config: ServiceConfig,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        images_per_class: 2,
        image_size: 32,
        motif_min: 8,
        motif_max: 14,
        ..SyntheticSpec::default()
    };
    let manifest = generate(&spec, 4, dir.path().join("data")).unwrap();
    let backbone = BackboneConfig {
        input_size: 32,
        shallow_channels: 8,
        deep_channels: 8,
        ..BackboneConfig::default()
    };
    let model = Model::new(ModelConfig::new(backbone, 16), 3).unwrap();
    save_checkpoint(&model, dir.path().join("m.ckpt")).unwrap();
    let config = ServiceConfig {
        checkpoint: dir.path().join("m.ckpt"),
        code_db: dir.path().join("codes.db"),
        manifest: dir.path().join("data/manifest.jsonl"),
        top_k_global: 8,
        top_n_local: 4,
        ..ServiceConfig::default()
    };
    Fixture { _dir: dir, manifest, config }
}

fn open_app(config: &ServiceConfig) -> Router {
    router(Arc::new(AppState::open(config.clone()).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json<T: serde::de::DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Option<Value>) -> T {
    let (status, bytes) = call(app, method, uri, body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn indexed(f: &Fixture) -> Router {
    let app = open_app(&f.config);
    let (status, body) = call(&app, "POST", "/index", Some(json!({ "manifest_path": f.config.manifest }))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({ "count": 16 }));
    app
}

fn error_kind(body: &[u8]) -> String {
    let v: Value = serde_json::from_slice(body).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn missing_index_is_unavailable() {
    let f = fixture();
    let app = open_app(&f.config);
    let h: Health = call_json(&app, "GET", "/health", None).await;
    assert_eq!(
        h,
        Health {
            status: "no_index".into(),
            bits: 16,
            index_size: 0
        }
    );
    let (status, body) = call(&app, "POST", "/query/global", Some(json!({ "image_id": 0 }))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_kind(&body), "no_index");
    let (status, _) = call(&app, "GET", "/image/0", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn build_then_query_global() {
    let f = fixture();
    let app = indexed(&f).await;
    let h: Health = call_json(&app, "GET", "/health", None).await;
    assert_eq!((h.status.as_str(), h.index_size), ("ok", 16));
    assert!(f.config.code_db.exists());

    for id in [0u64, 5, 13] {
        let r: QueryResponse = call_json(&app, "POST", "/query/global", Some(json!({ "image_id": id }))).await;
        assert_eq!(r.results.len(), 8);
        assert_eq!(r.results[0].distance, 0);
        let own = r.results.iter().find(|h| h.id == id).expect("self in results");
        assert_eq!(own.distance, 0);
        assert!(own.path.ends_with(&f.manifest.get(id).unwrap().path));
        assert!(r.results.iter().all(|h| h.window.is_none()));

        let png = fs::read(f.manifest.resolve(f.manifest.get(id).unwrap())).unwrap();
        let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
        let inline: QueryResponse = call_json(&app, "POST", "/query/global", Some(json!({ "image_b64": b64 }))).await;
        assert_eq!(inline, r);
    }
    let one: QueryResponse = call_json(&app, "POST", "/query/global", Some(json!({ "image_id": 2, "k": 1 }))).await;
    assert_eq!(one.results.len(), 1);
}

#[tokio::test]
async fn local_queries_return_windows_in_bounds() {
    let f = fixture();
    let app = indexed(&f).await;
    for id in [1u64, 6, 10] {
        let b = f.manifest.get(id).unwrap().r#box.unwrap().to_array();
        let body = json!({ "image_id": id, "bbox": b });
        let r: QueryResponse = call_json(&app, "POST", "/query/local", Some(body.clone())).await;
        assert_eq!(r.results.len(), 4);
        assert_eq!(r.results[0].distance, 0);
        assert_eq!(r.results.iter().find(|h| h.id == id).map(|h| h.distance), Some(0));
        for h in &r.results {
            let [x1, y1, x2, y2] = h.window.unwrap();
            assert!(x2 <= 32 && y2 <= 32);
            assert_eq!((x2 - x1, y2 - y1), (b[2] - b[0], b[3] - b[1]));
        }
        // identical requests, identical responses
        let again: QueryResponse = call_json(&app, "POST", "/query/local", Some(body)).await;
        assert_eq!(again, r);

        let png = fs::read(f.manifest.resolve(f.manifest.get(id).unwrap())).unwrap();
        let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
        let inline: QueryResponse =
            call_json(&app, "POST", "/query/local", Some(json!({ "image_b64": b64, "bbox": b }))).await;
        assert_eq!(inline, r);
    }
    let clamped: QueryResponse =
        call_json(&app, "POST", "/query/local", Some(json!({ "image_id": 0, "bbox": [0, 0, 32, 32], "k": 3, "n": 9 }))).await;
    assert_eq!(clamped.results.len(), 3);
    assert!(clamped.results.iter().all(|h| h.window == Some([0, 0, 32, 32])));
}

#[tokio::test]
async fn malformed_requests_are_client_errors() {
    let f = fixture();
    let app = indexed(&f).await;
    let cases = [
        ("/query/global", json!({ "image_b64": "***" })),
        ("/query/global", json!({ "image_b64": base64::engine::general_purpose::STANDARD.encode(b"not a png") })),
        ("/query/global", json!({ "image_id": 1, "image_b64": "AAAA" })),
        ("/query/global", json!({})),
        ("/query/global", json!({ "image_id": 1, "k": 0 })),
        ("/query/global", json!({ "image_id": 1, "bbox": [0, 0, 4, 4] })),
        ("/query/global", json!({ "image_id": 1, "colour": "red" })),
        ("/query/local", json!({ "image_id": 1 })),
        ("/query/local", json!({ "image_id": 1, "bbox": [4, 4, 2, 8] })),
        ("/query/local", json!({ "image_id": 1, "bbox": [0, 0, 40, 8] })),
        ("/query/local", json!({ "image_id": 1, "bbox": [0, 0, 8, 8], "n": 0 })),
    ];
    for (uri, body) in cases {
        let (status, bytes) = call(&app, "POST", uri, Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri} {body} -> {}", String::from_utf8_lossy(&bytes));
        assert!(serde_json::from_slice::<Value>(&bytes).unwrap()["error"]["message"].is_string());
    }
    let (_, bytes) = call(&app, "POST", "/query/local", Some(json!({ "image_id": 1, "bbox": [0, 0, 40, 8] }))).await;
    assert!(String::from_utf8_lossy(&bytes).contains("32"), "bounds reported");

    let (status, _) = call(&app, "POST", "/query/global", Some(json!({ "image_id": 999 }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/index", Some(json!({ "manifest_path": "/nonexistent/m.jsonl" }))).await;
    assert!(status.is_server_error() || status.is_client_error());
    let h: Health = call_json(&app, "GET", "/health", None).await;
    assert_eq!(h.index_size, 16, "failed rebuild leaves the old index in place");
}

#[tokio::test]
async fn serves_image_bytes() {
    let f = fixture();
    let app = indexed(&f).await;
    let (status, bytes) = call(&app, "GET", "/image/3", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, fs::read(f.manifest.resolve(f.manifest.get(3).unwrap())).unwrap());
    let (status, _) = call(&app, "GET", "/image/77", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn rebuild_is_byte_identical_and_reloads() {
    let f = fixture();
    let app = indexed(&f).await;
    let first = fs::read(&f.config.code_db).unwrap();
    let r1: QueryResponse = call_json(&app, "POST", "/query/global", Some(json!({ "image_id": 4 }))).await;
    let _ = call(&app, "POST", "/index", Some(json!({ "manifest_path": f.config.manifest }))).await;
    assert_eq!(fs::read(&f.config.code_db).unwrap(), first);
    assert!(!Path::new(&format!("{}.tmp", f.config.code_db.display())).exists());

    // a fresh process picks the saved index up from disk
    let restarted = open_app(&f.config);
    let h: Health = call_json(&restarted, "GET", "/health", None).await;
    assert_eq!(h.index_size, 16);
    let r2: QueryResponse = call_json(&restarted, "POST", "/query/global", Some(json!({ "image_id": 4 }))).await;
    assert_eq!(r1, r2);
}

#[test]
fn config_validation() {
    let mut c = ServiceConfig::default();
    c.validate().unwrap();
    c.top_n_local = 60;
    assert!(c.validate().is_err());
    let mut c = ServiceConfig::default();
    c.alpha = 1.5;
    assert!(c.validate().is_err());
    let mut c = ServiceConfig::default();
    c.listen = "nowhere".into();
    assert!(c.validate().is_err());
    let parsed: ServiceConfig = hmar_core::config::Settings::parse("top_k_global = 20\nalpha = 0.25\n")
        .unwrap()
        .deserialize()
        .unwrap();
    assert_eq!((parsed.top_k_global, parsed.top_n_local, parsed.alpha), (20, 10, 0.25));
}
