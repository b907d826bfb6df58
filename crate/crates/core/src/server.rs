//! Read-only HTTP search service over a loaded index.
//!
//! `GET /healthz` answers `ok`. `POST /search` takes
//! `{"txt", "img_id", "instruction", "k"}` and returns the ranked
//! `[{"did", "score"}, ...]` list.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;

use crate::encoders::{compose_text, FeatureLookup};
use crate::index::{build_flat, read_embeddings, ClusteredIndex, ClusteredIndexFile, Hit, Searcher};
use crate::model::{embed_item, ItemRef, ModelParams};
use crate::train::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    #[serde(default)]
    pub txt: Option<String>,
    #[serde(default)]
    pub img_id: Option<String>,
    #[serde(default)]
    pub instruction: Option<String>,
    pub k: usize,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("unknown img_id {0:?}")]
    UnknownImage(String),
    #[error("no index loaded")]
    NotLoaded,
    #[error("index and model disagree: {0}")]
    Incompatible(String),
    #[error("cannot load index bundle: {0}")]
    Load(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnknownImage(_) => StatusCode::NOT_FOUND,
            ServiceError::NotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Incompatible(_) | ServiceError::Load(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

/// Index, query encoder and raw image features; immutable once built.
pub struct SearchEngine {
    searcher: Box<dyn Searcher>,
    params: ModelParams,
    features: Box<dyn FeatureLookup + Send + Sync>,
}

impl SearchEngine {
    pub fn new(
        searcher: Box<dyn Searcher>,
        params: ModelParams,
        features: Box<dyn FeatureLookup + Send + Sync>,
    ) -> Result<Self, ServiceError> {
        let store = searcher.store();
        if store.mode() != params.mode {
            return Err(ServiceError::Incompatible(format!("index is {:?}, model is {:?}", store.mode(), params.mode)));
        }
        if store.dim() != params.dim() {
            return Err(ServiceError::Incompatible(format!("index dim {}, model dim {}", store.dim(), params.dim())));
        }
        Ok(Self { searcher, params, features })
    }

    pub fn len(&self) -> usize {
        self.searcher.store().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn search(&self, req: &SearchRequest) -> Result<Vec<Hit>, ServiceError> {
        if req.k == 0 {
            return Err(ServiceError::BadRequest("k must be at least 1".into()));
        }
        let image = match &req.img_id {
            Some(id) => Some(self.features.feature(id).ok_or_else(|| ServiceError::UnknownImage(id.clone()))?),
            None => None,
        };
        let text = compose_text(req.txt.as_deref(), req.instruction.as_deref());
        if text.is_none() && image.is_none() {
            return Err(ServiceError::BadRequest("one of txt, img_id or instruction is required".into()));
        }
        let query = embed_item(&self.params, ItemRef { text: text.as_deref(), image })
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let result = self.searcher.search(&query, req.k).map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(result.entries)
    }
}

/// Searcher layout stored in a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SearcherSpec {
    Flat,
    Clustered(ClusteredIndexFile),
}

/// Everything needed to answer queries: candidate embeddings, the model
/// that encodes queries, the raw image features `img_id` refers to, and the
/// searcher layout. Relative paths resolve against the bundle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexBundle {
    pub store: PathBuf,
    pub checkpoint: PathBuf,
    pub features: PathBuf,
    pub searcher: SearcherSpec,
}

impl IndexBundle {
    pub fn save(&self, path: &Path) -> Result<(), ServiceError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| ServiceError::Internal(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| ServiceError::Load(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Load(format!("{}: {e}", path.display())))?;
        let mut bundle: IndexBundle =
            serde_json::from_str(&text).map_err(|e| ServiceError::Load(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut bundle.store, &mut bundle.checkpoint, &mut bundle.features] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(bundle)
    }

    /// Reads every referenced file and assembles the engine. `n_probe`
    /// overrides the saved probe count of a clustered searcher.
    pub fn open(&self, n_probe: Option<usize>) -> Result<SearchEngine, ServiceError> {
        let load = |p: &Path, e: &dyn std::fmt::Display| ServiceError::Load(format!("{}: {e}", p.display()));
        let store = Arc::new(read_embeddings(&self.store).map_err(|e| load(&self.store, &e))?);
        let features = read_embeddings(&self.features).map_err(|e| load(&self.features, &e))?;
        let params = Checkpoint::load(&self.checkpoint).map_err(|e| load(&self.checkpoint, &e))?.params;
        let searcher: Box<dyn Searcher> = match &self.searcher {
            SearcherSpec::Flat => Box::new(build_flat(store, params.weights)),
            SearcherSpec::Clustered(file) => {
                let mut index =
                    ClusteredIndex::from_file(store, file.clone()).map_err(|e| load(&self.store, &e))?;
                if let Some(p) = n_probe {
                    index = index.with_n_probe(p).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
                }
                Box::new(index)
            }
        };
        SearchEngine::new(searcher, params, Box::new(features))
    }
}

/// Shared service state. The engine slot starts empty until [`ServiceState::load`].
#[derive(Default)]
pub struct ServiceState {
    engine: RwLock<Option<Arc<SearchEngine>>>,
}

impl ServiceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_engine(engine: SearchEngine) -> Self {
        Self { engine: RwLock::new(Some(Arc::new(engine))) }
    }

    pub fn load(&self, engine: SearchEngine) {
        *self.engine.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(engine));
    }

    pub fn engine(&self) -> Option<Arc<SearchEngine>> {
        self.engine.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

async fn healthz() -> &'static str {
    "ok"
}

async fn search(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<Vec<Hit>>, ServiceError> {
    let req: SearchRequest = serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let engine = state.engine().ok_or(ServiceError::NotLoaded)?;
    let hits = tokio::task::spawn_blocking(move || engine.search(&req))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(hits))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new().route("/healthz", get(healthz)).route("/search", post(search)).with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: Arc<ServiceState>) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "serving");
    }
    axum::serve(listener, router(state)).await
}

/// Serves on an already bound std listener with a fresh multi-threaded
/// runtime, blocking the caller.
pub fn serve_blocking(listener: std::net::TcpListener, state: Arc<ServiceState>) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move { serve(TcpListener::from_std(listener)?, state).await })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Vector;
    use crate::fusion::{FusionWeights, ScoreFusionEmbedding};
    use crate::index::{build_flat, EmbeddingStore, StoreMode};
    use std::collections::HashMap;

    fn engine() -> SearchEngine {
        let params = ModelParams::init(4, StoreMode::ScoreFusion, 1);
        let mut store = EmbeddingStore::new_score(4);
        let e = ScoreFusionEmbedding::new(None, Some(Vector::new(vec![1.0, 0.0, 0.0, 0.0]))).unwrap();
        store.push_score("only", &e).unwrap();
        let features: HashMap<String, Vec<f32>> = [("img:a".to_string(), vec![0.5, 0.5, 0.0, 0.0])].into();
        let index = build_flat(Arc::new(store), FusionWeights::default());
        SearchEngine::new(Box::new(index), params, Box::new(features)).unwrap()
    }

    fn req(txt: Option<&str>, img: Option<&str>, k: usize) -> SearchRequest {
        SearchRequest { txt: txt.map(Into::into), img_id: img.map(Into::into), instruction: None, k }
    }

    #[test]
    fn one_candidate_index() {
        let e = engine();
        let hits = e.search(&req(Some("anything"), None, 1)).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].did, "only");
        assert_eq!(e.search(&req(None, Some("img:a"), 3)).unwrap().len(), 1);
    }

    #[test]
    fn request_errors() {
        let e = engine();
        assert!(matches!(e.search(&req(None, Some("img:zz"), 1)), Err(ServiceError::UnknownImage(_))));
        assert!(matches!(e.search(&req(None, None, 1)), Err(ServiceError::BadRequest(_))));
        assert!(matches!(e.search(&req(Some("x"), None, 0)), Err(ServiceError::BadRequest(_))));
        assert_eq!(ServiceError::NotLoaded.status(), StatusCode::SERVICE_UNAVAILABLE);
    }

    #[test]
    fn mismatched_model_rejected() {
        let params = ModelParams::init(8, StoreMode::ScoreFusion, 1);
        let index = build_flat(Arc::new(EmbeddingStore::new_score(4)), FusionWeights::default());
        let features: HashMap<String, Vec<f32>> = HashMap::new();
        assert!(matches!(
            SearchEngine::new(Box::new(index), params, Box::new(features)),
            Err(ServiceError::Incompatible(_))
        ));
    }
}
