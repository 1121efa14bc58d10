#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;
use triplane_edit::context::ContextConfig;
use triplane_edit::io::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use triplane_edit::pipeline::field_config_for;
use triplane_edit::{EditStack, FieldConfig, TriPlaneField};
use triplane_service::{router, AppState, ServiceConfig};

pub const SAMPLES: usize = 12;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest: PathBuf,
    pub dataset: Dataset,
}

/// A 12x12 two-object scene with enough train views for three context epochs.
pub fn dataset() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::two_objects(12, 12);
    spec.rig.train = 8;
    spec.rig.holdout = 1;
    let (manifest, _) = generate_synthetic(&spec, dir.path()).unwrap();
    let dataset = load_dataset(&manifest).unwrap();
    Fixture { dir, manifest, dataset }
}

pub fn small_field(dataset: &Dataset) -> TriPlaneField {
    let base = FieldConfig {
        resolution: 8,
        feature_dim: 4,
        hidden_width: 8,
        geom_dim: 4,
        edit_hidden: 8,
        ..FieldConfig::default()
    };
    TriPlaneField::new(&field_config_for(dataset, &base)).unwrap()
}

pub fn config() -> ServiceConfig {
    ServiceConfig {
        samples: SAMPLES,
        percentile_probes: 256,
        context: ContextConfig {
            samples: SAMPLES,
            ..ContextConfig::default()
        },
        ..ServiceConfig::default()
    }
}

pub fn app(fx: &Fixture) -> (AppState, Router) {
    let state = AppState::new(
        fx.dataset.clone(),
        small_field(&fx.dataset),
        BTreeMap::new(),
        EditStack::new(),
        config(),
    )
    .unwrap();
    (state.clone(), router(state))
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("not JSON ({e}): {:?}", String::from_utf8_lossy(&self.bytes)))
    }

    pub fn code(&self) -> String {
        self.json()["error"]["code"].as_str().unwrap_or_default().to_string()
    }
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, bytes }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, "GET", uri, None, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    send(app, "POST", uri, Some(body), None).await
}

pub fn png(field: &Value) -> Vec<u8> {
    B64.decode(field.as_str().expect("base64 string")).unwrap()
}

/// Polls a job until it reaches a terminal state.
pub async fn wait_job(app: &Router, id: u64, limit: Duration) -> Value {
    let start = Instant::now();
    loop {
        let r = get(app, &format!("/jobs/{id}")).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        if matches!(v["state"].as_str(), Some("done" | "failed" | "cancelled")) {
            return v;
        }
        assert!(start.elapsed() < limit, "job {id} still {v}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

pub fn centre_rect(w: u32, h: u32) -> Value {
    serde_json::json!({ "type": "rect", "x": w / 2 - 2, "y": h / 2 - 2, "w": 4, "h": 4 })
}
