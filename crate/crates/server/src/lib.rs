//! HTTP service answering coverage queries from a loaded checkpoint.
//!
//! Every request works on one immutable [`Snapshot`]; an administrative
//! reload builds a new snapshot off to the side and swaps it in atomically.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use probefield::geometry::{Aabb, PatternKind, Primitive, Scene, Vec3};
use probefield::model::{Query, SceneContext};
use probefield::train::{parse_checkpoint, Checkpoint};

pub const MIN_RESOLUTION: usize = 8;
pub const MAX_RESOLUTION: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    pub fn bad_request(field: &str, message: impl Into<String>) -> Self {
        Self { status: 400, error: message.into(), field: Some(field.to_string()) }
    }

    fn unavailable(message: &str) -> Self {
        Self { status: 503, error: message.to_string(), field: None }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { status: 500, error: message.into(), field: None }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// A loaded checkpoint with everything needed to answer requests.
pub struct Snapshot {
    pub checkpoint: Checkpoint,
    pub scene: Scene,
    pub ctx: SceneContext,
    /// SHA-256 of the checkpoint file bytes.
    pub model_hash: String,
}

impl Snapshot {
    pub fn from_bytes(bytes: &[u8]) -> probefield::Result<Self> {
        let checkpoint = parse_checkpoint(bytes)?;
        let scene = checkpoint.scene()?;
        if scene.hash() != checkpoint.header.scene_hash {
            return Err(probefield::Error::format("checkpoint scene does not match its recorded hash"));
        }
        let ctx = SceneContext::new(&scene, &checkpoint.model.config)?;
        Ok(Self { checkpoint, scene, ctx, model_hash: hex::encode(Sha256::digest(bytes)) })
    }

    pub fn load(path: &Path) -> probefield::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| probefield::Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn p_bounds_db(&self) -> (f64, f64) {
        (self.checkpoint.header.p_min_db, self.checkpoint.header.p_max_db)
    }

    pub fn predict(&self, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
        let started = Instant::now();
        let b = self.scene.bounds;
        let tx = Vec3::from(req.tx);
        if !b.contains(&tx) {
            return Err(ApiError::bad_request("tx", format!("tx {:?} outside the scene bounds", req.tx)));
        }
        if req.pattern_id as usize >= PatternKind::COUNT {
            return Err(ApiError::bad_request("pattern_id", format!("pattern_id {} not in [0, 3]", req.pattern_id)));
        }
        if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&req.resolution) {
            return Err(ApiError::bad_request(
                "resolution",
                format!("resolution {} not in [{MIN_RESOLUTION}, {MAX_RESOLUTION}]", req.resolution),
            ));
        }
        if !(req.height >= b.min.z && req.height <= b.max.z) {
            return Err(ApiError::bad_request("height", format!("height {} outside the scene bounds", req.height)));
        }
        let points: Vec<Vec3> = req.point_queries.iter().map(|p| Vec3::from(*p)).collect();
        if let Some(p) = points.iter().find(|p| !b.contains(p) || **p == tx) {
            return Err(ApiError::bad_request(
                "point_queries",
                format!("point_queries entry {:?} is outside the scene bounds or on the transmitter", p.as_slice()),
            ));
        }
        let bounds_db = self.p_bounds_db();
        let model = &self.checkpoint.model;
        let map = model
            .predict_map(&self.ctx, &tx, req.pattern_id, req.height, req.resolution, bounds_db)
            .map_err(|e| ApiError::bad_request("tx", e.to_string()))?;
        let queries: Vec<Query> = points.iter().map(|&rx| Query { tx, pattern_id: req.pattern_id, rx }).collect();
        let values = if queries.is_empty() {
            Vec::new()
        } else {
            model.predict(&self.ctx, &queries).map_err(|e| ApiError::internal(e.to_string()))?
        };
        let point_results = points
            .iter()
            .zip(values)
            .map(|(p, v)| PointResult {
                position: [p.x, p.y, p.z],
                p_norm: v,
                p_db: bounds_db.0 + v * (bounds_db.1 - bounds_db.0),
            })
            .collect();
        Ok(PredictResponse {
            bounds: map.header.bounds,
            height: req.height,
            resolution: req.resolution,
            values_norm: map.values,
            p_min_db: bounds_db.0,
            p_max_db: bounds_db.1,
            point_results,
            model_hash: self.model_hash.clone(),
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub tx: [f64; 3],
    pub pattern_id: u32,
    pub height: f64,
    pub resolution: usize,
    #[serde(default)]
    pub point_queries: Vec<[f64; 3]>,
}

const REQUEST_FIELDS: [&str; 5] = ["tx", "pattern_id", "height", "resolution", "point_queries"];

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str) -> Result<Option<T>, ApiError> {
    obj.get(name)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| ApiError::bad_request(name, format!("{name}: {e}"))))
        .transpose()
}

fn required<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str) -> Result<T, ApiError> {
    field(obj, name)?.ok_or_else(|| ApiError::bad_request(name, format!("missing field {name}")))
}

impl PredictRequest {
    /// Parses a request body, naming the offending field on failure.
    pub fn parse(body: &[u8]) -> Result<Self, ApiError> {
        let value: Value =
            serde_json::from_slice(body).map_err(|e| ApiError::bad_request("body", format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| ApiError::bad_request("body", "expected a JSON object"))?;
        if let Some(k) = obj.keys().find(|k| !REQUEST_FIELDS.contains(&k.as_str())) {
            return Err(ApiError::bad_request(k, format!("unknown field {k}")));
        }
        Ok(Self {
            tx: required(obj, "tx")?,
            pattern_id: required(obj, "pattern_id")?,
            height: required(obj, "height")?,
            resolution: required(obj, "resolution")?,
            point_queries: field(obj, "point_queries")?.unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub position: [f64; 3],
    pub p_norm: f64,
    pub p_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub bounds: Aabb,
    pub height: f64,
    pub resolution: usize,
    /// Row-major: row `i` is the `i`-th y cell, column `j` the `j`-th x cell.
    pub values_norm: Vec<f32>,
    #[serde(rename = "P_min_db")]
    pub p_min_db: f64,
    #[serde(rename = "P_max_db")]
    pub p_max_db: f64,
    pub point_results: Vec<PointResult>,
    pub model_hash: String,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub kind: String,
    /// Horizontal outline in meters.
    pub vertices: Vec<[f64; 2]>,
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutline {
    pub bounds: Aabb,
    pub footprints: Vec<Footprint>,
    /// Light-probe positions in meters.
    pub probes: Vec<[f64; 3]>,
}

pub fn scene_outline(scene: &Scene, probes: &[Vec3]) -> SceneOutline {
    let footprints = scene
        .primitives
        .iter()
        .map(|p| match p {
            Primitive::Box { min, max, .. } => Footprint {
                kind: "box".into(),
                vertices: vec![[min[0], min[1]], [max[0], min[1]], [max[0], max[1]], [min[0], max[1]]],
                z_min: min[2],
                z_max: max[2],
            },
            Primitive::Triangle { v, .. } => Footprint {
                kind: "triangle".into(),
                vertices: v.iter().map(|p| [p[0], p[1]]).collect(),
                z_min: v.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min),
                z_max: v.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max),
            },
        })
        .collect();
    SceneOutline { bounds: scene.bounds, footprints, probes: probes.iter().map(|p| [p.x, p.y, p.z]).collect() }
}

/// Shared server state: the current snapshot and the reload flag.
pub struct AppState {
    current: RwLock<Arc<Snapshot>>,
    reloading: AtomicBool,
}

/// Held while a reload is in progress; requests for predictions get 503
/// until it is dropped.
pub struct ReloadGuard<'a> {
    state: &'a AppState,
}

impl Drop for ReloadGuard<'_> {
    fn drop(&mut self) {
        self.state.reloading.store(false, Ordering::SeqCst);
    }
}

impl AppState {
    pub fn new(snapshot: Snapshot) -> Arc<Self> {
        Arc::new(Self { current: RwLock::new(Arc::new(snapshot)), reloading: AtomicBool::new(false) })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }

    pub fn is_reloading(&self) -> bool {
        self.reloading.load(Ordering::SeqCst)
    }

    /// `None` if another reload is already running.
    pub fn begin_reload(&self) -> Option<ReloadGuard<'_>> {
        self.reloading
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .ok()
            .map(|_| ReloadGuard { state: self })
    }

    pub fn swap(&self, _guard: &ReloadGuard<'_>, snapshot: Snapshot) {
        *self.current.write().expect("snapshot lock") = Arc::new(snapshot);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_hash: String,
    pub scene_hash: String,
    #[serde(rename = "P_min_db")]
    pub p_min_db: f64,
    #[serde(rename = "P_max_db")]
    pub p_max_db: f64,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let s = state.snapshot();
    let (p_min_db, p_max_db) = s.p_bounds_db();
    Json(Health {
        status: if state.is_reloading() { "reloading" } else { "ok" }.into(),
        model_hash: s.model_hash.clone(),
        scene_hash: s.checkpoint.header.scene_hash.clone(),
        p_min_db,
        p_max_db,
    })
}

async fn scene(State(state): State<Arc<AppState>>) -> Json<SceneOutline> {
    let s = state.snapshot();
    let probes: Vec<Vec3> = s.ctx.probes.iter().map(|p| s.ctx.transform.to_world(p)).collect();
    Json(scene_outline(&s.scene, &probes))
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    if state.is_reloading() {
        return Err(ApiError::unavailable("a new checkpoint is being loaded"));
    }
    let req = PredictRequest::parse(&body)?;
    let snapshot = state.snapshot();
    tokio::task::spawn_blocking(move || snapshot.predict(&req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct ReloadRequest {
    checkpoint: PathBuf,
}

#[derive(Debug, Serialize)]
struct ReloadResponse {
    model_hash: String,
    scene_hash: String,
}

async fn reload(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<ReloadResponse>, ApiError> {
    let req: ReloadRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("checkpoint", e.to_string()))?;
    let guard = state
        .begin_reload()
        .ok_or_else(|| ApiError::unavailable("another reload is in progress"))?;
    let path = req.checkpoint.clone();
    let loaded = tokio::task::spawn_blocking(move || Snapshot::load(&path))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::bad_request("checkpoint", e.to_string()))?;
    let out = ReloadResponse {
        model_hash: loaded.model_hash.clone(),
        scene_hash: loaded.checkpoint.header.scene_hash.clone(),
    };
    state.swap(&guard, loaded);
    log::info!("reloaded checkpoint {} ({})", req.checkpoint.display(), out.model_hash);
    Ok(Json(out))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scene", get(scene))
        .route("/predict", post(predict))
        .route("/admin/reload", post(reload))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
