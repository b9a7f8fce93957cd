//! HTTP annotation service: sessions hold prompts and a graph, `auto-run`
//! proposes a graph from the masks of the prompted patches, and edits
//! refine it under optimistic concurrency.
//!
//! Every session response carries the session revision in the `x-revision`
//! header. Each mutation (prompt replacement, auto-run, an edit batch) bumps
//! the revision by one.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use trailgraph_core::assembly::{extract_graph_tiled, Coverage, MaskProvider};
use trailgraph_core::head::HeadWeights;
use trailgraph_core::{ExtractionConfig, PatchLayout, Polarity, PromptPoint, RoadGraph, Vertex};

use crate::formats::{encode_raster, GraphDoc};
use crate::provider::{new_mask_cache, CachedProvider, MaskCache, ProviderConfig};

/// Everything a session persists. Saved bundles are this, as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bundle {
    pub width: usize,
    pub height: usize,
    pub layout: PatchLayout,
    pub provider: ProviderConfig,
    pub config: ExtractionConfig,
    pub prompts: Vec<PromptPoint>,
    pub graph: RoadGraph,
    pub revision: u64,
}

impl Bundle {
    /// Structural checks for bundles arriving from disk.
    pub fn validate(&self) -> Result<(), String> {
        let l = &self.layout;
        PatchLayout::new(l.image_w, l.image_h, l.patch, l.stride).map_err(|e| e.to_string())?;
        if (l.image_w, l.image_h) != (self.width, self.height) {
            return Err("layout size differs from image size".into());
        }
        self.config.validate().map_err(|e| e.to_string())?;
        self.graph.validate().map_err(|e| e.to_string())?;
        if let Some(i) = self.prompts.iter().position(|p| !p.in_bounds(self.width, self.height)) {
            return Err(format!("prompt {i} lies outside the image"));
        }
        Ok(())
    }
}

pub fn save_bundle(bundle: &Bundle, path: &Path) -> crate::Result<()> {
    crate::formats::write_json(bundle, path)
}

pub fn load_bundle(path: &Path) -> crate::Result<Bundle> {
    let b: Bundle = crate::formats::read_json(path)?;
    b.validate().map_err(|m| crate::Error::format(m).at(path))?;
    Ok(b)
}

/// One graph edit. Vertex ids are positions in the current vertex list;
/// deleting a vertex removes its edges and shifts later ids down by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    AddVertex { x: f64, y: f64 },
    MoveVertex { id: usize, x: f64, y: f64 },
    DeleteVertex { id: usize },
    AddEdge { i: usize, j: usize },
    DeleteEdge { i: usize, j: usize },
}

/// Applies `ops` in order to a copy of `graph`. Fails on the first invalid
/// op with its position and the reason.
pub fn apply_edits(graph: &RoadGraph, ops: &[EditOp], width: usize, height: usize) -> Result<RoadGraph, (usize, String)> {
    let mut vertices = graph.vertices.clone();
    let mut edges = graph.edges.clone();
    let in_image = |x: f64, y: f64| x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
    for (k, op) in ops.iter().enumerate() {
        let n = vertices.len();
        let check = |id: usize| {
            if id < n {
                Ok(())
            } else {
                Err((k, format!("vertex {id} does not exist ({n} vertices)")))
            }
        };
        match *op {
            EditOp::AddVertex { x, y } => {
                if !in_image(x, y) {
                    return Err((k, format!("({x}, {y}) lies outside the image")));
                }
                vertices.push(Vertex::at(x, y));
            }
            EditOp::MoveVertex { id, x, y } => {
                check(id)?;
                if !in_image(x, y) {
                    return Err((k, format!("({x}, {y}) lies outside the image")));
                }
                vertices[id].x = x;
                vertices[id].y = y;
            }
            EditOp::DeleteVertex { id } => {
                check(id)?;
                vertices.remove(id);
                edges.retain(|&(a, b)| a != id && b != id);
                for e in &mut edges {
                    e.0 -= usize::from(e.0 > id);
                    e.1 -= usize::from(e.1 > id);
                }
            }
            EditOp::AddEdge { i, j } => {
                check(i)?;
                check(j)?;
                if i == j {
                    return Err((k, format!("edge ({i}, {j}) is a self-loop")));
                }
                let key = (i.min(j), i.max(j));
                if edges.contains(&key) {
                    return Err((k, format!("edge ({i}, {j}) already exists")));
                }
                edges.push(key);
            }
            EditOp::DeleteEdge { i, j } => {
                let key = (i.min(j), i.max(j));
                let Some(pos) = edges.iter().position(|&e| e == key) else {
                    return Err((k, format!("edge ({i}, {j}) does not exist")));
                };
                edges.remove(pos);
            }
        }
    }
    RoadGraph::new(vertices, edges).map_err(|e| (ops.len().saturating_sub(1), e.to_string()))
}

/// Error reply: a status plus a JSON body `{"error": ..., extra fields}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceError {
    pub status: StatusCode,
    pub body: Value,
}

impl ServiceError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }

    fn from_core(e: trailgraph_core::Error) -> Self {
        match e {
            trailgraph_core::Error::Provider { origin, message } => Self::new(
                StatusCode::BAD_GATEWAY,
                format!("mask provider failed for patch ({}, {}): {message}", origin.0, origin.1),
            )
            .with("origin", json!([origin.0, origin.1])),
            other => Self::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ServiceResult<T> = Result<T, ServiceError>;

struct SessionSlot {
    /// Serializes mutations; readers never take it.
    writer: tokio::sync::Mutex<()>,
    snapshot: RwLock<Arc<Bundle>>,
    provider: Arc<dyn MaskProvider + Send + Sync>,
    owner: u64,
}

impl SessionSlot {
    fn current(&self) -> Arc<Bundle> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, next: Bundle) -> Arc<Bundle> {
        let next = Arc::new(next);
        *self.snapshot.write().expect("snapshot lock") = next.clone();
        next
    }
}

/// Shared service state.
pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
    next_id: AtomicU64,
    weights: Arc<HeadWeights>,
    defaults: ExtractionConfig,
    cache: MaskCache,
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub patch: Option<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub config: Option<ExtractionConfig>,
}

impl AppState {
    pub fn new(weights: HeadWeights, defaults: ExtractionConfig) -> Self {
        Self::with_cache_capacity(weights, defaults, 64)
    }

    pub fn with_cache_capacity(weights: HeadWeights, defaults: ExtractionConfig, capacity: usize) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            weights: Arc::new(weights),
            defaults,
            cache: new_mask_cache(capacity),
        }
    }

    fn slot(&self, id: &str) -> ServiceResult<Arc<SessionSlot>> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::new(StatusCode::NOT_FOUND, format!("no session '{id}'")))
    }

    fn insert(&self, bundle: Bundle) -> ServiceResult<(String, Arc<Bundle>)> {
        let provider = bundle
            .provider
            .build(bundle.width, bundle.height)
            .map_err(|e| ServiceError::new(StatusCode::BAD_REQUEST, format!("provider: {e}")))?;
        let owner = self.next_id.fetch_add(1, Ordering::SeqCst);
        let id = format!("s{owner}");
        let bundle = Arc::new(bundle);
        let slot = SessionSlot {
            writer: tokio::sync::Mutex::new(()),
            snapshot: RwLock::new(bundle.clone()),
            provider,
            owner,
        };
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(id.clone(), Arc::new(slot));
        Ok((id, bundle))
    }

    pub fn create(&self, req: CreateRequest) -> ServiceResult<(String, Arc<Bundle>)> {
        let bad = |m: String| ServiceError::new(StatusCode::BAD_REQUEST, m);
        if req.width == 0 || req.height == 0 {
            return Err(bad("image size must be positive".into()));
        }
        let patch = req.patch.unwrap_or(PatchLayout::DEFAULT_PATCH);
        let stride = req.stride.unwrap_or(PatchLayout::DEFAULT_STRIDE.min(patch));
        let layout = PatchLayout::new(req.width, req.height, patch, stride).map_err(|e| bad(e.to_string()))?;
        let config = req.config.unwrap_or_else(|| self.defaults.clone());
        config.validate().map_err(|e| bad(e.to_string()))?;
        self.insert(Bundle {
            width: req.width,
            height: req.height,
            layout,
            provider: req.provider,
            config,
            prompts: Vec::new(),
            graph: RoadGraph::default(),
            revision: 0,
        })
    }

    pub fn load(&self, path: &Path) -> ServiceResult<(String, Arc<Bundle>)> {
        let bundle = load_bundle(path).map_err(|e| match e {
            crate::Error::Io { .. } => ServiceError::new(StatusCode::NOT_FOUND, e.to_string()),
            other => ServiceError::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
        })?;
        self.insert(bundle)
    }

    pub fn get(&self, id: &str) -> ServiceResult<Arc<Bundle>> {
        Ok(self.slot(id)?.current())
    }

    pub async fn set_prompts(&self, id: &str, prompts: Vec<PromptPoint>) -> ServiceResult<Arc<Bundle>> {
        let slot = self.slot(id)?;
        let _w = slot.writer.lock().await;
        let cur = slot.current();
        if let Some(i) = prompts.iter().position(|p| !p.in_bounds(cur.width, cur.height)) {
            let p = &prompts[i];
            return Err(ServiceError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("prompt {i} at ({}, {}) lies outside the image", p.x, p.y),
            )
            .with("index", json!(i)));
        }
        Ok(slot.publish(Bundle {
            prompts,
            revision: cur.revision + 1,
            ..(*cur).clone()
        }))
    }

    /// Extracts a proposal over the patches holding positive prompts and
    /// swaps it in as the session graph.
    pub async fn auto_run(&self, id: &str, config: Option<ExtractionConfig>) -> ServiceResult<Arc<Bundle>> {
        let slot = self.slot(id)?;
        let _w = slot.writer.lock().await;
        let cur = slot.current();
        let positives: Vec<PromptPoint> = cur
            .prompts
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
            .copied()
            .collect();
        if positives.is_empty() {
            return Err(ServiceError::new(StatusCode::CONFLICT, "no prompts"));
        }
        let config = config.unwrap_or_else(|| cur.config.clone());
        config
            .validate()
            .map_err(|e| ServiceError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
        let provider = CachedProvider {
            inner: slot.provider.clone(),
            owner: slot.owner,
            cache: self.cache.clone(),
        };
        let weights = self.weights.clone();
        let layout = cur.layout;
        let run_cfg = config.clone();
        let graph = tokio::task::spawn_blocking(move || {
            extract_graph_tiled(&provider, &layout, Coverage::Prompts(&positives), &weights, &run_cfg)
        })
        .await
        .map_err(|e| ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ServiceError::from_core)?
        .graph;
        Ok(slot.publish(Bundle {
            graph,
            config,
            revision: cur.revision + 1,
            ..(*cur).clone()
        }))
    }

    pub async fn edit(&self, id: &str, base_revision: u64, ops: &[EditOp]) -> ServiceResult<Arc<Bundle>> {
        let slot = self.slot(id)?;
        let _w = slot.writer.lock().await;
        let cur = slot.current();
        if base_revision != cur.revision {
            return Err(ServiceError::new(
                StatusCode::CONFLICT,
                format!("base revision {base_revision} is stale; current is {}", cur.revision),
            )
            .with("revision", json!(cur.revision)));
        }
        let graph = apply_edits(&cur.graph, ops, cur.width, cur.height).map_err(|(k, m)| {
            ServiceError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("op {k}: {m}")).with("op_index", json!(k))
        })?;
        Ok(slot.publish(Bundle {
            graph,
            revision: cur.revision + 1,
            ..(*cur).clone()
        }))
    }

    pub fn save(&self, id: &str, path: &Path) -> ServiceResult<Arc<Bundle>> {
        let cur = self.get(id)?;
        save_bundle(&cur, path).map_err(|e| ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok(cur)
    }

    /// Masks of one patch through the shared cache.
    pub fn raster(&self, id: &str, kind: &str, origin: (usize, usize)) -> ServiceResult<(u64, Vec<u8>)> {
        let slot = self.slot(id)?;
        let cur = slot.current();
        if origin.0 >= cur.width || origin.1 >= cur.height {
            return Err(ServiceError::new(
                StatusCode::BAD_REQUEST,
                format!("patch ({}, {}) lies outside the image", origin.0, origin.1),
            ));
        }
        let provider = CachedProvider {
            inner: slot.provider.clone(),
            owner: slot.owner,
            cache: self.cache.clone(),
        };
        let masks = provider
            .masks(origin, cur.layout.patch)
            .map_err(ServiceError::from_core)?;
        let r = match kind {
            "road" => &masks.road,
            "keypoint" => &masks.keypoint,
            other => {
                return Err(ServiceError::new(
                    StatusCode::BAD_REQUEST,
                    format!("raster kind must be 'road' or 'keypoint', not '{other}'"),
                ))
            }
        };
        Ok((cur.revision, encode_raster(r)))
    }
}

fn with_revision(revision: u64, body: impl IntoResponse) -> Response {
    let mut resp = body.into_response();
    resp.headers_mut()
        .insert("x-revision", HeaderValue::from(revision));
    resp
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ServiceResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::new(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))
}

#[derive(Serialize)]
struct SessionView<'a> {
    id: &'a str,
    #[serde(flatten)]
    bundle: &'a Bundle,
}

fn session_reply(status: StatusCode, id: &str, b: &Bundle) -> Response {
    with_revision(b.revision, (status, Json(SessionView { id, bundle: b })))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ServiceResult<Response> {
    let (id, b) = app.create(parse_body(&body)?)?;
    Ok(session_reply(StatusCode::CREATED, &id, &b))
}

#[derive(Deserialize)]
struct PathBody {
    path: PathBuf,
}

async fn load_session(State(app): State<Arc<AppState>>, body: Bytes) -> ServiceResult<Response> {
    let req: PathBody = parse_body(&body)?;
    let (id, b) = app.load(&req.path)?;
    Ok(session_reply(StatusCode::CREATED, &id, &b))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Response> {
    let b = app.get(&id)?;
    Ok(session_reply(StatusCode::OK, &id, &b))
}

#[derive(Deserialize)]
struct PromptsBody {
    prompts: Vec<PromptPoint>,
}

async fn put_prompts(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ServiceResult<Response> {
    let req: PromptsBody = parse_body(&body)?;
    let b = app.set_prompts(&id, req.prompts).await?;
    Ok(with_revision(b.revision, Json(json!({ "revision": b.revision }))))
}

#[derive(Deserialize, Default)]
struct AutoRunBody {
    #[serde(default)]
    config: Option<ExtractionConfig>,
}

async fn post_auto_run(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ServiceResult<Response> {
    let req: AutoRunBody = if body.is_empty() { AutoRunBody::default() } else { parse_body(&body)? };
    let b = app.auto_run(&id, req.config).await?;
    Ok(with_revision(
        b.revision,
        Json(json!({ "revision": b.revision, "graph": GraphDoc::from_graph(&b.graph) })),
    ))
}

#[derive(Deserialize)]
struct EditsBody {
    base_revision: u64,
    ops: Vec<EditOp>,
}

async fn post_edits(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ServiceResult<Response> {
    let req: EditsBody = parse_body(&body)?;
    let b = app.edit(&id, req.base_revision, &req.ops).await?;
    Ok(with_revision(
        b.revision,
        Json(json!({ "revision": b.revision, "graph": GraphDoc::from_graph(&b.graph) })),
    ))
}

async fn post_save(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ServiceResult<Response> {
    let req: PathBody = parse_body(&body)?;
    let b = app.save(&id, &req.path)?;
    Ok(with_revision(
        b.revision,
        Json(json!({ "revision": b.revision, "path": req.path })),
    ))
}

async fn get_graph(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ServiceResult<Response> {
    let b = app.get(&id)?;
    Ok(with_revision(b.revision, Json(GraphDoc::from_graph(&b.graph))))
}

#[derive(Deserialize)]
struct RasterQuery {
    kind: String,
    patch: String,
}

async fn get_raster(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RasterQuery>,
) -> ServiceResult<Response> {
    let origin = q
        .patch
        .split_once(',')
        .and_then(|(x, y)| Some((x.trim().parse().ok()?, y.trim().parse().ok()?)))
        .ok_or_else(|| ServiceError::new(StatusCode::BAD_REQUEST, format!("patch must be 'X,Y', got '{}'", q.patch)))?;
    let app2 = app.clone();
    let (revision, bytes) = tokio::task::spawn_blocking(move || app2.raster(&id, &q.kind, origin))
        .await
        .map_err(|e| ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(with_revision(
        revision,
        ([(header::CONTENT_TYPE, "application/octet-stream")], bytes),
    ))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/load", post(load_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/prompts", put(put_prompts))
        .route("/sessions/{id}/auto-run", post(post_auto_run))
        .route("/sessions/{id}/edits", post(post_edits))
        .route("/sessions/{id}/save", post(post_save))
        .route("/sessions/{id}/graph", get(get_graph))
        .route("/sessions/{id}/raster", get(get_raster))
        .with_state(app)
}

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// Address from `TRAILGRAPH_ADDR`, else [`DEFAULT_ADDR`].
pub fn addr_from_env() -> crate::Result<SocketAddr> {
    let raw = std::env::var("TRAILGRAPH_ADDR").unwrap_or_else(|_| DEFAULT_ADDR.to_string());
    raw.parse()
        .map_err(|_| crate::Error::Usage(format!("TRAILGRAPH_ADDR '{raw}' is not a socket address")))
}

/// Weights from an explicit path, else from `TRAILGRAPH_WEIGHTS`.
pub fn weights_from_env(explicit: Option<&Path>) -> crate::Result<HeadWeights> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os("TRAILGRAPH_WEIGHTS")
            .map(PathBuf::from)
            .ok_or_else(|| crate::Error::Usage("no weights: pass --weights or set TRAILGRAPH_WEIGHTS".into()))?,
    };
    crate::formats::read_weights(&path)
}

/// Serves until the process is stopped.
pub fn serve(addr: SocketAddr, app: Arc<AppState>) -> crate::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| crate::Error::io("<runtime>", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| crate::Error::io(addr.to_string(), e))?;
        eprintln!("listening on {}", listener.local_addr().map_err(|e| crate::Error::io(addr.to_string(), e))?);
        axum::serve(listener, router(app))
            .await
            .map_err(|e| crate::Error::io(addr.to_string(), e))
    })
}
