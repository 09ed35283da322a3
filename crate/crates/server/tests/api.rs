use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

use probefield::geometry::{Aabb, Material, Primitive, Scene, Vec3};
use probefield::model::{Model, ModelConfig};
use probefield::train::Checkpoint;
use probefield_server::{router, scene_outline, AppState, PredictRequest, PredictResponse, Snapshot};

const SCENE_JSON: &str = r#"{"units":"m","extent":{"min":[-10,-10,0],"max":[10,10,6]},
  "primitives":[{"type":"box","min":[-2.5,-1.5,0],"max":[2.0,3.25,3]}]}"#;

fn scene() -> Scene {
    Scene::from_json_str(SCENE_JSON, std::path::Path::new("scene.json")).unwrap()
}

fn config() -> ModelConfig {
    ModelConfig {
        n: 4,
        k: 4,
        encoder_widths: vec![16],
        point_feature_dim: 16,
        d_model: 8,
        heads: 2,
        pe_frequencies: 2,
        decoder_layers: 2,
        decoder_width: 16,
        point_density: 0.5,
        probe_spacing: Some(5.0),
        ..Default::default()
    }
}

fn checkpoint_bytes(seed: u64) -> Vec<u8> {
    let model = Model::new(config(), seed).unwrap();
    Checkpoint::new(model, "test".into(), (-160.0, -50.0), &scene()).to_bytes()
}

fn state(seed: u64) -> Arc<AppState> {
    AppState::new(Snapshot::from_bytes(&checkpoint_bytes(seed)).unwrap())
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn request(resolution: usize) -> Value {
    json!({"tx": [-6.0, 4.0, 4.5], "pattern_id": 1, "height": 1.5, "resolution": resolution})
}

#[tokio::test]
async fn health_reports_stable_hashes() {
    let s = state(0);
    let (status, a) = call(&s, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a["status"], "ok");
    assert_eq!(a["scene_hash"], scene().hash());
    let (_, b) = call(&s, "GET", "/health", None).await;
    assert_eq!(a, b);
    let (_, other) = call(&state(1), "GET", "/health", None).await;
    assert_ne!(a["model_hash"], other["model_hash"]);
}

#[tokio::test]
async fn scene_outline_matches_input() {
    let (status, v) = call(&state(0), "GET", "/scene", None).await;
    assert_eq!(status, StatusCode::OK);
    let fp = v["footprints"].as_array().unwrap();
    assert_eq!(fp.len(), 1);
    let verts: Vec<[f64; 2]> = serde_json::from_value(fp[0]["vertices"].clone()).unwrap();
    let expected = [[-2.5, -1.5], [2.0, -1.5], [2.0, 3.25], [-2.5, 3.25]];
    for (a, b) in verts.iter().zip(expected) {
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }
    assert!(!v["probes"].as_array().unwrap().is_empty());

    let empty = Scene::new(vec![], Some(Aabb::new(Vec3::zeros(), Vec3::new(5.0, 5.0, 2.0)))).unwrap();
    let outline = scene_outline(&empty, &[]);
    assert!(outline.footprints.is_empty());
    assert_eq!(outline.bounds.max, Vec3::new(5.0, 5.0, 2.0));
    let boxed = Scene::new(
        vec![Primitive::Box { min: [0.0; 3], max: [1.0; 3], material: Material::default() }],
        None,
    )
    .unwrap();
    assert_eq!(scene_outline(&boxed, &[]).footprints.len(), 1);
}

#[tokio::test]
async fn predict_shape_range_and_determinism() {
    let s = state(0);
    let (status, a) = call(&s, "POST", "/predict", Some(request(32))).await;
    assert_eq!(status, StatusCode::OK, "{a}");
    let resp: PredictResponse = serde_json::from_value(a.clone()).unwrap();
    assert_eq!(resp.values_norm.len(), 1024);
    assert!(resp.values_norm.iter().all(|v| *v > 0.0 && *v < 1.0));
    let (_, b) = call(&s, "POST", "/predict", Some(request(32))).await;
    assert_eq!(a["values_norm"], b["values_norm"]);
}

#[tokio::test]
async fn predict_matches_the_library_map_bit_for_bit() {
    let s = state(2);
    let (_, v) = call(&s, "POST", "/predict", Some(request(16))).await;
    let resp: PredictResponse = serde_json::from_value(v).unwrap();
    let snap = s.snapshot();
    let map = snap
        .checkpoint
        .model
        .predict_map(&snap.ctx, &Vec3::new(-6.0, 4.0, 4.5), 1, 1.5, 16, snap.p_bounds_db())
        .unwrap();
    let a: Vec<u32> = resp.values_norm.iter().map(|x| x.to_bits()).collect();
    let b: Vec<u32> = map.values.iter().map(|x| x.to_bits()).collect();
    assert_eq!(a, b);
}

#[tokio::test]
async fn point_queries_agree_with_grid_cells() {
    let s = state(3);
    let bounds = scene().bounds;
    let res = 8;
    let cell = |i: usize, j: usize| {
        let x = bounds.min.x + (bounds.max.x - bounds.min.x) * (j as f64 + 0.5) / res as f64;
        let y = bounds.min.y + (bounds.max.y - bounds.min.y) * (i as f64 + 0.5) / res as f64;
        [x, y, 1.5]
    };
    let mut body = request(res);
    body["point_queries"] = json!([cell(0, 0), cell(5, 2)]);
    let (status, v) = call(&s, "POST", "/predict", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: PredictResponse = serde_json::from_value(v).unwrap();
    assert_eq!(resp.point_results.len(), 2);
    assert!((resp.point_results[0].p_norm - resp.values_norm[0] as f64).abs() < 1e-6);
    assert!((resp.point_results[1].p_norm - resp.values_norm[5 * res + 2] as f64).abs() < 1e-6);
    let p = &resp.point_results[1];
    assert!((p.p_db - (-160.0 + 110.0 * p.p_norm)).abs() < 1e-9);
}

#[tokio::test]
async fn invalid_requests_name_the_field() {
    let s = state(0);
    let cases = [
        (json!({"tx": [0.0, 0.0, 4.5], "pattern_id": 9, "height": 1.5, "resolution": 32}), "pattern_id"),
        (json!({"tx": [0.0, 0.0, 4.5], "pattern_id": -1, "height": 1.5, "resolution": 32}), "pattern_id"),
        (json!({"tx": [0.0, 0.0, 4.5], "pattern_id": 0, "height": 1.5, "resolution": 4}), "resolution"),
        (json!({"tx": [0.0, 0.0, 4.5], "pattern_id": 0, "height": 1.5, "resolution": 513}), "resolution"),
        (json!({"tx": [50.0, 0.0, 4.5], "pattern_id": 0, "height": 1.5, "resolution": 32}), "tx"),
        (json!({"tx": [0.0, 0.0], "pattern_id": 0, "height": 1.5, "resolution": 32}), "tx"),
        (json!({"tx": [0.0, 0.0, 4.5], "pattern_id": 0, "height": 99.0, "resolution": 32}), "height"),
        (json!({"pattern_id": 0, "height": 1.5, "resolution": 32}), "tx"),
        (json!({"tx": [0.0, 0.0, 4.5], "pattern_id": 0, "height": 1.5, "resolution": 32, "point_queries": [[0.0, 0.0, 90.0]]}), "point_queries"),
        (json!({"tx": [0.0, 0.0, 4.5], "pattern_id": 0, "height": 1.5, "resolution": 32, "colour": 1}), "colour"),
    ];
    for (body, field) in cases {
        let (status, v) = call(&s, "POST", "/predict", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(v["field"], field, "{body} -> {v}");
        assert!(v["error"].as_str().unwrap().contains(field), "{v}");
    }
}

#[tokio::test]
async fn reload_in_progress_gives_503_and_swap_is_atomic() {
    let s = state(0);
    let before = s.snapshot().model_hash.clone();
    {
        let guard = s.begin_reload().unwrap();
        assert!(s.begin_reload().is_none());
        let (status, _) = call(&s, "POST", "/predict", Some(request(8))).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
        let (_, h) = call(&s, "GET", "/health", None).await;
        assert_eq!(h["status"], "reloading");
        s.swap(&guard, Snapshot::from_bytes(&checkpoint_bytes(5)).unwrap());
    }
    let (status, v) = call(&s, "POST", "/predict", Some(request(8))).await;
    assert_eq!(status, StatusCode::OK);
    assert_ne!(v["model_hash"], before);
    assert_eq!(v["model_hash"], s.snapshot().model_hash);
}

#[tokio::test]
async fn admin_reload_endpoint_swaps_checkpoints() {
    let dir = tempfile_dir();
    let path = dir.join("next.rpnc");
    std::fs::write(&path, checkpoint_bytes(7)).unwrap();
    let s = state(0);
    let (status, v) = call(&s, "POST", "/admin/reload", Some(json!({"checkpoint": path}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let (_, h) = call(&s, "GET", "/health", None).await;
    assert_eq!(h["model_hash"], v["model_hash"]);
    assert_eq!(h["status"], "ok");
    let (status, v) = call(&s, "POST", "/admin/reload", Some(json!({"checkpoint": dir.join("missing.rpnc")}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "checkpoint");
    std::fs::remove_dir_all(dir).unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_identical_requests_agree() {
    let s = state(4);
    let calls = (0..4).map(|_| {
        let s = s.clone();
        tokio::spawn(async move { call(&s, "POST", "/predict", Some(request(16))).await })
    });
    let mut bodies = Vec::new();
    for c in calls {
        let (status, mut v) = c.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        v.as_object_mut().unwrap().remove("elapsed_ms");
        bodies.push(v);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn request_parsing_defaults_point_queries() {
    let r = PredictRequest::parse(br#"{"tx":[1,2,3],"pattern_id":0,"height":1.5,"resolution":8}"#).unwrap();
    assert!(r.point_queries.is_empty());
    assert_eq!(PredictRequest::parse(b"[1]").unwrap_err().field.as_deref(), Some("body"));
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("probefield-server-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
