//! HTTP+JSON front end: index building, whole-image and box queries, image
//! bytes and health. Queries read an immutable index snapshot; a rebuild
//! swaps in a new snapshot only once it is complete.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use hmar_core::dataset::{decode_image, load_image, Manifest};
use hmar_core::index::{fmap_path, Index};
use hmar_core::model::{load_checkpoint, Model};
use hmar_core::numerics::Tensor;
use hmar_core::retrieval::{BoundingBox, RetrievalResult};
use hmar_core::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub checkpoint: PathBuf,
    pub code_db: PathBuf,
    pub manifest: PathBuf,
    pub top_k_global: usize,
    pub top_n_local: usize,
    /// Expert₀ weight used when extracting local feature maps.
    pub alpha: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            checkpoint: "model.ckpt".into(),
            code_db: "codes.db".into(),
            manifest: "manifest.jsonl".into(),
            top_k_global: 50,
            top_n_local: 10,
            alpha: 0.0,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> hmar_core::Result<()> {
        if self.top_n_local == 0 || self.top_n_local > self.top_k_global {
            return Err(Error::Domain(format!(
                "need 1 ≤ top_n_local ≤ top_k_global, got {} and {}",
                self.top_n_local, self.top_k_global
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        self.listen
            .parse::<SocketAddr>()
            .map_err(|e| Error::Domain(format!("listen address `{}`: {e}", self.listen)))?;
        Ok(())
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    model: Arc<Model>,
    index: RwLock<Option<Arc<Index>>>,
    /// Serializes rebuilds; readers never wait on it.
    rebuild: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(config: ServiceConfig, model: Model, index: Option<Index>) -> Self {
        AppState {
            config,
            model: Arc::new(model),
            index: RwLock::new(index.map(Arc::new)),
            rebuild: tokio::sync::Mutex::new(()),
        }
    }

    /// Loads the checkpoint, and the index too when both its code database and
    /// manifest exist.
    pub fn open(config: ServiceConfig) -> hmar_core::Result<Self> {
        config.validate()?;
        let model = load_checkpoint(&config.checkpoint)?;
        let index = if config.code_db.exists() && config.manifest.exists() {
            let manifest = Manifest::load(&config.manifest)?;
            Some(Index::load(&config.code_db, manifest, config.alpha)?)
        } else {
            None
        };
        Ok(AppState::new(config, model, index))
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn index(&self) -> Option<Arc<Index>> {
        self.index.read().expect("index lock poisoned").clone()
    }

    pub fn install(&self, index: Index) {
        *self.index.write().expect("index lock poisoned") = Some(Arc::new(index));
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request",
            message: message.into(),
        }
    }

    fn no_index() -> Self {
        ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            kind: "no_index",
            message: "no index loaded; POST /index first".into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape(_) | Error::Domain(_) | Error::Image(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Format(_) | Error::Numeric(_) | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            kind: e.kind(),
            message: e.detail(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRequest {
    pub manifest_path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IndexResponse {
    pub count: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub image_b64: Option<String>,
    pub image_id: Option<u64>,
    pub bbox: Option<[usize; 4]>,
    pub k: Option<usize>,
    pub n: Option<usize>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: u64,
    pub distance: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 4]>,
    pub path: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub bits: usize,
    pub index_size: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/index", post(build_index))
        .route("/query/global", post(query_global))
        .route("/query/local", post(query_local))
        .route("/image/{id}", get(image_bytes))
        .route("/health", get(health))
        .with_state(state)
}

/// Binds `config.listen` and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> hmar_core::Result<()> {
    let listen = config.listen.clone();
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::open(config)).await.map_err(join_err)??);
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn join_err(e: tokio::task::JoinError) -> Error {
    Error::Numeric(format!("worker task failed: {e}"))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> hmar_core::Result<T> + Send + 'static) -> ApiResult<T> {
    Ok(tokio::task::spawn_blocking(f).await.map_err(join_err)??)
}

/// Code database written beside the target, then renamed over it with its
/// feature cache, so a crash never leaves a half-written pair.
fn save_atomically(index: &Index, code_db: &Path) -> hmar_core::Result<()> {
    let mut tmp_name = code_db.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = code_db.with_file_name(tmp_name);
    index.save(&tmp)?;
    fs::rename(fmap_path(&tmp), fmap_path(code_db))?;
    fs::rename(&tmp, code_db)?;
    Ok(())
}

async fn build_index(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<IndexRequest>, JsonRejection>,
) -> ApiResult<Json<IndexResponse>> {
    let Json(req) = body?;
    let _guard = state.rebuild.lock().await;
    let worker = state.clone();
    let index = blocking(move || {
        let manifest = Manifest::load(&req.manifest_path)?;
        let index = Index::build(&worker.model, &manifest, worker.config.alpha)?;
        save_atomically(&index, &worker.config.code_db)?;
        Ok(index)
    })
    .await?;
    let count = index.len();
    state.install(index);
    Ok(Json(IndexResponse { count }))
}

enum QueryImage {
    Inline(Tensor),
    Indexed(u64),
}

fn query_image(req: &QueryRequest) -> ApiResult<QueryImage> {
    match (&req.image_b64, req.image_id) {
        (Some(b64), None) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request(format!("image_b64 is not valid base64: {e}")))?;
            Ok(QueryImage::Inline(decode_image(&bytes)?))
        }
        (None, Some(id)) => Ok(QueryImage::Indexed(id)),
        _ => Err(ApiError::bad_request("give exactly one of image_b64 and image_id")),
    }
}

fn load_indexed(index: &Index, id: u64) -> hmar_core::Result<Tensor> {
    let entry = index
        .manifest
        .get(id)
        .ok_or_else(|| Error::NotFound(format!("image {id} is not in the index")))?;
    load_image(index.manifest.resolve(entry))
}

fn positive(v: Option<usize>, default: usize, name: &str) -> ApiResult<usize> {
    match v.unwrap_or(default) {
        0 => Err(ApiError::bad_request(format!("{name} must be at least 1"))),
        v => Ok(v),
    }
}

fn respond(index: &Index, result: RetrievalResult) -> QueryResponse {
    let results = result
        .results
        .into_iter()
        .map(|r| QueryHit {
            id: r.id,
            distance: r.distance,
            window: r.window.map(|w| w.pixel_box.to_array()),
            path: index
                .manifest
                .get(r.id)
                .map(|e| index.manifest.resolve(e).display().to_string())
                .unwrap_or_default(),
        })
        .collect();
    QueryResponse { results }
}

async fn query_global(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<Json<QueryResponse>> {
    let Json(req) = body?;
    if req.bbox.is_some() || req.n.is_some() {
        return Err(ApiError::bad_request("bbox and n belong to /query/local"));
    }
    let k = positive(req.k, state.config.top_k_global, "k")?;
    let image = query_image(&req)?;
    let index = state.index().ok_or_else(ApiError::no_index)?;
    let worker = state.clone();
    let result = {
        let index = index.clone();
        blocking(move || {
            let image = match image {
                QueryImage::Inline(t) => t,
                QueryImage::Indexed(id) => load_indexed(&index, id)?,
            };
            index.query_global(&worker.model, &image, k)
        })
        .await?
    };
    Ok(Json(respond(&index, result)))
}

async fn query_local(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<Json<QueryResponse>> {
    let Json(req) = body?;
    let [x1, y1, x2, y2] = req.bbox.ok_or_else(|| ApiError::bad_request("local queries need a bbox"))?;
    let bbox = BoundingBox::new(x1, y1, x2, y2)?;
    let k = positive(req.k, state.config.top_k_global, "k")?;
    let n = positive(req.n, state.config.top_n_local, "n")?;
    let image = query_image(&req)?;
    let index = state.index().ok_or_else(ApiError::no_index)?;
    let worker = state.clone();
    let result = {
        let index = index.clone();
        blocking(move || match image {
            QueryImage::Inline(t) => index.query_local(&worker.model, &t, bbox, k, n),
            QueryImage::Indexed(id) => index.query_local_by_id(&worker.model, id, bbox, k, n),
        })
        .await?
    };
    Ok(Json(respond(&index, result)))
}

async fn image_bytes(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> ApiResult<Response> {
    let index = state.index().ok_or_else(ApiError::no_index)?;
    let path = index
        .manifest
        .get(id)
        .map(|e| index.manifest.resolve(e))
        .ok_or_else(|| Error::NotFound(format!("image {id} is not in the index")))?;
    let bytes = blocking(move || Ok(fs::read(path)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let index = state.index();
    Json(Health {
        status: if index.is_some() { "ok" } else { "no_index" }.into(),
        bits: state.model.bits(),
        index_size: index.map_or(0, |i| i.len()),
    })
}
