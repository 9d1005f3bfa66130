//! HTTP JSON API over a loaded model bundle: volume uploads, counterfactual
//! queries and PNG slice rendering.
//!
//! Image ids are sha256 digests of the canonical NIfTI encoding, so identical
//! uploads share one entry and its cached inversion.

mod cache;
mod error;
mod slice;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use causal_voxel::bundle::{ModelBundle, ModelInfo};
use causal_voxel::dataset_io::nifti_bytes;
use causal_voxel::inversion::{invert, InversionResult, OptimizerConfig};
use causal_voxel::latent_edit::{counterfactual_from_inversion, demographic_variables, EditMode};
use causal_voxel::metrics::ssim3d;
use causal_voxel::phantom::{measure_volumes, VoxelGrid, VOLUME_NAMES};
use causal_voxel::scm::{CausalGraph, Evidence, Intervention};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use cache::Lru;
pub use error::{ApiError, ErrorBody};
pub use slice::{encode_png, extract as extract_slice, Axis, Window};

pub const DEFAULT_CACHE_IMAGES: usize = 32;
const REQUEST_LOG_LEN: usize = 256;
const MAX_UPLOAD_BYTES: usize = 256 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub cache_images: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            cache_images: DEFAULT_CACHE_IMAGES,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// A stored volume and, once computed, its inversion.
#[derive(Debug)]
pub struct ImageEntry {
    pub image: Arc<VoxelGrid>,
    inversion: Mutex<Option<Arc<InversionResult>>>,
}

#[derive(Debug)]
struct CachedResult {
    body: Bytes,
    result_id: String,
    image: Arc<VoxelGrid>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogEntry {
    pub method: String,
    pub path: String,
    pub status: u16,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub images: usize,
    pub results: usize,
    pub capacity: usize,
    pub hits: u64,
    pub misses: u64,
    pub inversions: u64,
}

pub struct AppState {
    bundle: Option<Arc<ModelBundle>>,
    config: ServiceConfig,
    images: Mutex<Lru<Arc<ImageEntry>>>,
    results: Mutex<Lru<Arc<CachedResult>>>,
    inflight: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    inversions: AtomicU64,
    log: Mutex<VecDeque<LogEntry>>,
}

pub type SharedState = Arc<AppState>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn content_id(image: &VoxelGrid) -> Result<String, ApiError> {
    let bytes = nifti_bytes::encode(image).map_err(|e| ApiError::from_core("invalid_volume", e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl AppState {
    pub fn new(bundle: Option<ModelBundle>, config: ServiceConfig) -> Self {
        AppState {
            bundle: bundle.map(Arc::new),
            images: Mutex::new(Lru::new(config.cache_images)),
            results: Mutex::new(Lru::new(config.cache_images)),
            config,
            inflight: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            inversions: AtomicU64::new(0),
            log: Mutex::new(VecDeque::new()),
        }
    }

    pub fn shared(self) -> SharedState {
        Arc::new(self)
    }

    pub fn bundle(&self) -> Option<&ModelBundle> {
        self.bundle.as_deref()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            images: lock(&self.images).len(),
            results: lock(&self.results).len(),
            capacity: self.config.cache_images,
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            inversions: self.inversions.load(Ordering::SeqCst),
        }
    }

    pub fn clear_cache(&self) {
        lock(&self.images).clear();
        lock(&self.results).clear();
    }

    pub fn request_log(&self) -> Vec<LogEntry> {
        lock(&self.log).iter().cloned().collect()
    }

    /// Stores `image` under its content id; the flag is false for a duplicate.
    pub fn insert_image(&self, image: VoxelGrid) -> Result<(String, bool), ApiError> {
        let id = content_id(&image)?;
        let mut images = lock(&self.images);
        let fresh = !images.contains(&id);
        images.insert(
            id.clone(),
            Arc::new(ImageEntry {
                image: Arc::new(image),
                inversion: Mutex::new(None),
            }),
        );
        Ok((id, fresh))
    }

    pub fn image(&self, id: &str) -> Option<Arc<ImageEntry>> {
        lock(&self.images).get(id)
    }

    fn inversion(&self, entry: &ImageEntry, bundle: &ModelBundle) -> Result<Arc<InversionResult>, ApiError> {
        // held through the computation: one inversion per image
        let mut slot = lock(&entry.inversion);
        if let Some(inv) = slot.as_ref() {
            return Ok(inv.clone());
        }
        let inv = invert(&entry.image, &bundle.generator, &self.config.optimizer)
            .map_err(|e| ApiError::from_core("inversion_failed", e))?;
        self.inversions.fetch_add(1, Ordering::SeqCst);
        let inv = Arc::new(inv);
        *slot = Some(inv.clone());
        Ok(inv)
    }

    fn cached_result(&self, key: &str) -> Option<Arc<CachedResult>> {
        let hit = lock(&self.results).get(key)?;
        // keep the result image retrievable even if it was evicted
        if self.image(&hit.result_id).is_none() {
            lock(&self.images).insert(
                hit.result_id.clone(),
                Arc::new(ImageEntry {
                    image: hit.image.clone(),
                    inversion: Mutex::new(None),
                }),
            );
        }
        Some(hit)
    }

    fn flight(&self, key: &str) -> Arc<tokio::sync::Mutex<()>> {
        lock(&self.inflight).entry(key.to_string()).or_default().clone()
    }

    fn land(&self, key: &str) {
        lock(&self.inflight).remove(key);
    }

    fn record(&self, entry: LogEntry) {
        let mut log = lock(&self.log);
        if log.len() == REQUEST_LOG_LEN {
            log.pop_front();
        }
        log.push_back(entry);
    }
}

// ---- request and response bodies ----

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UploadRequest {
    pub nifti_base64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UploadResponse {
    pub id: String,
    pub created: bool,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub volumes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualRequest {
    #[serde(default)]
    pub image_id: Option<String>,
    /// NIfTI bytes, as an alternative to a previously uploaded id.
    #[serde(default)]
    pub volume_base64: Option<String>,
    #[serde(default)]
    pub interventions: BTreeMap<String, f64>,
    #[serde(default)]
    pub demographics: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub mode: EditMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub name: String,
    /// Measured on the input image.
    pub factual_ml: f64,
    /// Value assigned by the counterfactual SCM pass.
    pub target_ml: f64,
    /// Measured on the generated counterfactual image.
    pub counterfactual_ml: f64,
    pub delta_ml: f64,
    pub delta_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub l1_error: f64,
    pub style_l1: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResponse {
    pub image_id: String,
    pub result_id: String,
    pub mode: EditMode,
    pub interventions: BTreeMap<String, f64>,
    pub volumes: Vec<VolumeRow>,
    pub ssim: f64,
    pub factual: BTreeMap<String, f64>,
    pub counterfactual: BTreeMap<String, f64>,
    pub defaulted: Vec<String>,
    pub clamped: Vec<String>,
    pub inversion: InversionSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceQuery {
    pub axis: Option<String>,
    pub index: Option<String>,
    pub window: Option<String>,
}

// ---- router ----

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model/info", get(model_info))
        .route("/v1/images", post(upload))
        .route("/v1/images/{id}/slice", get(slice_png))
        .route("/v1/counterfactual", post(counterfactual))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(middleware::from_fn_with_state(state.clone(), log_requests))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: SharedState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn log_requests(State(st): State<SharedState>, req: Request, next: Next) -> Response {
    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let t0 = Instant::now();
    let resp = next.run(req).await;
    st.record(LogEntry {
        method,
        path,
        status: resp.status().as_u16(),
        elapsed_us: t0.elapsed().as_micros() as u64,
    });
    resp
}

async fn health(State(st): State<SharedState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "model_loaded": st.bundle.is_some(),
        "cache": st.stats(),
        "requests_logged": lock(&st.log).len(),
    }))
}

async fn model_info(State(st): State<SharedState>) -> Result<Json<ModelInfo>, ApiError> {
    let bundle = st.bundle.as_ref().ok_or_else(ApiError::model_not_loaded)?;
    Ok(Json(bundle.info()))
}

fn decode_base64(text: &str) -> Result<Vec<u8>, ApiError> {
    base64::engine::general_purpose::STANDARD
        .decode(text.trim())
        .map_err(|e| ApiError::bad_request("invalid_volume", format!("base64: {e}")))
}

fn decode_volume(bytes: &[u8]) -> Result<VoxelGrid, ApiError> {
    nifti_bytes::decode(bytes).map_err(|e| ApiError::from_core("invalid_volume", e))
}

async fn upload(State(st): State<SharedState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let raw = if is_json {
        let req: UploadRequest = serde_json::from_slice(&body)
            .map_err(|e| ApiError::bad_request("invalid_body", e.to_string()))?;
        decode_base64(&req.nifti_base64)?
    } else {
        body.to_vec()
    };
    let image = decode_volume(&raw)?;
    let (dims, spacing_mm) = (image.dims, image.spacing_mm);
    let volumes = VOLUME_NAMES.iter().map(|n| n.to_string()).zip(measure_volumes(&image)).collect();
    let (id, created) = tokio::task::spawn_blocking({
        let st = st.clone();
        move || st.insert_image(image)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((
        status,
        Json(UploadResponse {
            id,
            created,
            dims,
            spacing_mm,
            volumes,
        }),
    )
        .into_response())
}

fn check_values(graph: &CausalGraph, values: &BTreeMap<String, f64>, code: &str) -> Result<(), ApiError> {
    for (name, &v) in values {
        let spec = graph.variable(name).map_err(|_| {
            let known: Vec<&str> = graph.variables.iter().map(|v| v.name.as_str()).collect();
            ApiError::new(
                StatusCode::BAD_REQUEST,
                code,
                format!("unknown variable `{name}`"),
                json!({ "variable": name, "known": known }),
            )
        })?;
        spec.check_value(v).map_err(|e| match e {
            causal_voxel::Error::NonFinite { .. } => ApiError::new(
                StatusCode::BAD_REQUEST,
                code,
                format!("value for `{name}` is not finite"),
                json!({ "variable": name, "lower": spec.bounds.map(|b| b.0), "upper": spec.bounds.map(|b| b.1) }),
            ),
            other => ApiError::from_core(code, other),
        })?;
    }
    Ok(())
}

fn request_key(image_id: &str, req: &CounterfactualRequest) -> String {
    let canon = json!({
        "image_id": image_id,
        "interventions": req.interventions,
        "demographics": req.demographics,
        "mode": req.mode,
    });
    let digest = Sha256::digest(canon.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn cached_response(hit: &CachedResult, cache: &'static str) -> Response {
    let mut resp = (
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
        hit.body.clone(),
    )
        .into_response();
    resp.headers_mut().insert("x-cache", HeaderValue::from_static(cache));
    resp
}

async fn counterfactual(
    State(st): State<SharedState>,
    body: Result<Json<CounterfactualRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(mut req) = body.map_err(|e| ApiError::bad_request("invalid_body", e.body_text()))?;
    let bundle = st.bundle.clone().ok_or_else(ApiError::model_not_loaded)?;
    let graph = &bundle.model.graph;
    check_values(graph, &req.interventions, "invalid_intervention")?;
    if let Some(d) = &req.demographics {
        let allowed = demographic_variables(graph);
        if let Some(bad) = d.keys().find(|k| !allowed.contains(k)) {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_demographics",
                format!("`{bad}` is not a demographic variable"),
                json!({ "variable": bad, "allowed": allowed }),
            ));
        }
        check_values(graph, d, "invalid_demographics")?;
    }

    let image_id = match (req.image_id.take(), req.volume_base64.take()) {
        (Some(id), None) => id,
        (None, Some(b64)) => st.insert_image(decode_volume(&decode_base64(&b64)?)?)?.0,
        (Some(_), Some(_)) => {
            return Err(ApiError::bad_request(
                "invalid_body",
                "give either image_id or volume_base64, not both",
            ))
        }
        (None, None) => return Err(ApiError::bad_request("invalid_body", "image_id or volume_base64 is required")),
    };
    let entry = st.image(&image_id).ok_or_else(|| ApiError::not_found("image", &image_id))?;

    let key = request_key(&image_id, &req);
    if let Some(hit) = st.cached_result(&key) {
        st.hits.fetch_add(1, Ordering::SeqCst);
        return Ok(cached_response(&hit, "hit"));
    }
    let gate = st.flight(&key);
    let _guard = gate.lock().await;
    if let Some(hit) = st.cached_result(&key) {
        st.hits.fetch_add(1, Ordering::SeqCst);
        return Ok(cached_response(&hit, "hit"));
    }
    st.misses.fetch_add(1, Ordering::SeqCst);

    let computed = tokio::task::spawn_blocking({
        let st = st.clone();
        move || run_counterfactual(&st, &bundle, &entry, image_id, req)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()));
    let result = match computed {
        Ok(Ok(r)) => r,
        Ok(Err(e)) | Err(e) => {
            st.land(&key);
            return Err(e);
        }
    };
    let result = lock(&st.results).insert(key.clone(), Arc::new(result));
    st.land(&key);
    Ok(cached_response(&result, "miss"))
}

fn run_counterfactual(
    st: &AppState,
    bundle: &ModelBundle,
    entry: &ImageEntry,
    image_id: String,
    req: CounterfactualRequest,
) -> Result<CachedResult, ApiError> {
    let inversion = st.inversion(entry, bundle)?;
    let demographics = req.demographics.clone().map(|values| Evidence { values });
    let intervention = Intervention {
        assignments: req.interventions.clone(),
    };
    let outcome = counterfactual_from_inversion(
        &entry.image,
        (*inversion).clone(),
        demographics.as_ref(),
        &intervention,
        &bundle.model.graph,
        &bundle.model.mechanisms,
        &bundle.generator,
        &bundle.regression,
        req.mode,
    )
    .map_err(|e| ApiError::from_core("counterfactual_failed", e))?;
    let before = measure_volumes(&entry.image);
    let after = measure_volumes(&outcome.image);
    let volumes = VOLUME_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| VolumeRow {
            name: name.to_string(),
            factual_ml: before[k],
            target_ml: outcome.counterfactual.get(name).unwrap_or(before[k]),
            counterfactual_ml: after[k],
            delta_ml: after[k] - before[k],
            delta_pct: if before[k] > 0.0 {
                100.0 * (after[k] - before[k]) / before[k]
            } else {
                0.0
            },
        })
        .collect();
    let ssim = ssim3d(&entry.image, &outcome.image).map_err(|e| ApiError::from_core("counterfactual_failed", e))?;
    let result_image = outcome.image.clone();
    let (result_id, _) = st.insert_image(outcome.image)?;
    let response = CounterfactualResponse {
        image_id,
        result_id: result_id.clone(),
        mode: req.mode,
        interventions: req.interventions,
        volumes,
        ssim,
        factual: outcome.factual.values,
        counterfactual: outcome.counterfactual.values,
        defaulted: outcome.defaulted,
        clamped: outcome.clamped,
        inversion: InversionSummary {
            l1_error: inversion.l1_error,
            style_l1: inversion.style_l1,
            iterations: inversion.iterations,
            converged: inversion.converged,
            degenerate: inversion.degenerate,
        },
    };
    let body = serde_json::to_vec(&response).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(CachedResult {
        body: Bytes::from(body),
        result_id,
        image: Arc::new(result_image),
    })
}

async fn slice_png(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> Result<Response, ApiError> {
    let entry = st.image(&id).ok_or_else(|| ApiError::not_found("image", &id))?;
    let axis: Axis = match q.axis.as_deref() {
        Some(a) => a.parse().map_err(|m: String| ApiError::bad_request("invalid_query", m))?,
        None => Axis::Axial,
    };
    let window: Window = match q.window.as_deref() {
        Some(w) => w.parse().map_err(|m: String| ApiError::bad_request("invalid_query", m))?,
        None => Window::default(),
    };
    let n = entry.image.dims[axis.fixed()];
    let index: i64 = match q.index.as_deref() {
        Some(s) => s
            .trim()
            .parse()
            .map_err(|_| ApiError::bad_request("invalid_query", format!("index `{s}` is not an integer")))?,
        None => (n / 2) as i64,
    };
    if index < 0 || index >= n as i64 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "index_out_of_range",
            format!("index {index} outside 0..={} for {axis:?}", n - 1),
            json!({ "axis": axis, "index": index, "min": 0, "max": n - 1 }),
        ));
    }
    let (w, h, px) = extract_slice(&entry.image, axis, index as usize, window);
    let png = encode_png(w, h, &px);
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=31536000, immutable")),
        ],
        png,
    )
        .into_response())
}
