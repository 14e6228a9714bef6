//! Local HTTP service wrapping the library operations.
//!
//! Handlers are thin: each one decodes JSON, calls the matching library
//! function and encodes the result. Errors are `{"code", "detail"}` objects.
//! The model, when loaded, is immutable and shared by all requests.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facaid_core::decoder::{infer_with_prefix, Automaton, DecodeConfig};
use facaid_core::generator::{generate_facade, sample_style, StyleParams};
use facaid_core::noise::{inject_noise, NoiseError, MAX_NOISE_LEVEL};
use facaid_core::sizing::{optimize_sizing, OptimizeConfig};
use facaid_core::tokenizer::{Vocabulary, BOS};
use facaid_core::transformer::checkpoint::load_checkpoint;
use facaid_core::transformer::SeqModel;
use facaid_core::{DerivationTree, Grammar, ProductionSpec, RectLayout, Symbol};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::svg::{render_svg, Palette};

/// Inference model with its grammar automaton.
pub struct LoadedModel {
    pub model: SeqModel<f32>,
    pub automaton: Automaton,
}

impl LoadedModel {
    pub fn new(model: SeqModel<f32>, vocab: Vocabulary) -> Self {
        Self { model, automaton: Automaton::new(vocab) }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.automaton.vocab()
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    pub model: Option<Arc<LoadedModel>>,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("could not bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error("could not load checkpoint: {0}")]
    CheckpointLoadFailure(String),
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub detail: String,
    #[serde(skip)]
    status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        Self { code: code.into(), detail: detail.into(), status: status.as_u16() }
    }

    fn unprocessable(code: &str, detail: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, detail.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// `Json` with rejections mapped to [`ApiError`] bodies.
pub struct ApiJson<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(rej) => {
                let code = match &rej {
                    JsonRejection::JsonDataError(_) => "invalid_body",
                    JsonRejection::JsonSyntaxError(_) => "malformed_json",
                    JsonRejection::MissingJsonContentType(_) => "unsupported_media_type",
                    _ if rej.status() == StatusCode::PAYLOAD_TOO_LARGE => "payload_too_large",
                    _ => "bad_request",
                };
                Err(ApiError::new(rej.status(), code, rej.body_text()))
            }
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Serialize)]
pub struct GrammarResponse {
    pub hash: String,
    pub axiom: Symbol,
    pub productions: Vec<ProductionSpec>,
}

async fn grammar() -> Json<GrammarResponse> {
    let g = Grammar::standard();
    Json(GrammarResponse { hash: g.hash(), axiom: g.axiom, productions: g.productions.clone() })
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    model_loaded: bool,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health { status: "ok", model_loaded: state.model.is_some() })
}

#[derive(Debug, Deserialize)]
pub struct GenerateRequest {
    pub seed: u64,
    pub style: Option<StyleParams>,
}

async fn generate(ApiJson(req): ApiJson<GenerateRequest>) -> ApiResult<facaid_core::generator::DatasetRecord> {
    let style = req.style.unwrap_or_else(|| sample_style(req.seed));
    let rec = blocking(move || generate_facade(&style, req.seed).map_err(|e| ApiError::unprocessable("invalid_style", e)))
        .await?;
    Ok(Json(rec))
}

#[derive(Debug, Deserialize)]
pub struct ExecuteRequest {
    pub tree: DerivationTree,
}

fn checked_execute(tree: &DerivationTree) -> Result<RectLayout, ApiError> {
    let report = facaid_core::validate_tree(tree);
    if !report.is_empty() {
        return Err(ApiError::unprocessable("invalid_tree", report));
    }
    facaid_core::execute(tree).map_err(|e| ApiError::unprocessable("invalid_tree", e))
}

async fn execute(ApiJson(req): ApiJson<ExecuteRequest>) -> ApiResult<RectLayout> {
    Ok(Json(checked_execute(&req.tree)?))
}

#[derive(Debug, Deserialize)]
pub struct InferRequest {
    pub layout: RectLayout,
    pub temperature: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Token strings or ids to resume from (BOS optional).
    #[serde(default)]
    pub prefix: Vec<serde_json::Value>,
}

#[derive(Debug, Serialize)]
pub struct InferResponse {
    pub tree: DerivationTree,
    pub tokens: Vec<u32>,
    pub token_strings: Vec<String>,
}

/// Parses a prefix given as token ids or token strings.
pub fn parse_prefix(vocab: &Vocabulary, items: &[serde_json::Value]) -> Result<Vec<u32>, String> {
    let mut out = Vec::with_capacity(items.len() + 1);
    for v in items {
        let t = match v {
            serde_json::Value::Number(n) => n.as_u64().filter(|&t| (t as usize) < vocab.size()).map(|t| t as u32),
            serde_json::Value::String(s) => vocab.token_from_string(s),
            _ => None,
        };
        out.push(t.ok_or_else(|| format!("unknown token {v}"))?);
    }
    if out.first() != Some(&BOS) {
        out.insert(0, BOS);
    }
    Ok(out)
}

async fn infer(State(state): State<AppState>, ApiJson(req): ApiJson<InferRequest>) -> ApiResult<InferResponse> {
    let Some(m) = state.model.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "model_unavailable", "the service was started without a checkpoint"));
    };
    if req.temperature.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
        return Err(ApiError::unprocessable("invalid_temperature", "temperature must be positive"));
    }
    let prefix = parse_prefix(m.vocab(), &req.prefix).map_err(|e| ApiError::unprocessable("invalid_prefix", e))?;
    let cfg = DecodeConfig { temperature: req.temperature, seed: req.seed };
    let out = blocking(move || {
        infer_with_prefix(&m.model, &m.automaton, &req.layout, &prefix, &cfg)
            .map(|inf| InferResponse {
                token_strings: inf.tokens.tokens.iter().map(|&t| m.vocab().token_string(t)).collect(),
                tokens: inf.tokens.tokens.clone(),
                tree: inf.tree,
            })
            .map_err(|e| ApiError::unprocessable("inference_failed", e))
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
pub struct OptimizeRequest {
    pub tree: DerivationTree,
    pub target: RectLayout,
    pub cfg: Option<OptimizeConfig>,
}

#[derive(Debug, Serialize)]
pub struct OptimizeResponse {
    pub tree: DerivationTree,
    pub layout: RectLayout,
    pub loss_trace: facaid_core::sizing::LossTrace,
}

async fn optimize(ApiJson(req): ApiJson<OptimizeRequest>) -> ApiResult<OptimizeResponse> {
    let cfg = req.cfg.unwrap_or_default();
    let out = blocking(move || {
        let (tree, loss_trace) =
            optimize_sizing(&req.tree, &req.target, &cfg).map_err(|e| ApiError::unprocessable("optimize_failed", e))?;
        let layout = facaid_core::execute(&tree).map_err(|e| ApiError::unprocessable("optimize_failed", e))?;
        Ok(OptimizeResponse { tree, layout, loss_trace })
    })
    .await?;
    Ok(Json(out))
}

/// Either a layout or a tree to execute first.
#[derive(Debug, Deserialize)]
pub struct RenderRequest {
    pub layout: Option<RectLayout>,
    pub tree: Option<DerivationTree>,
    pub palette: Option<Palette>,
}

async fn render(ApiJson(req): ApiJson<RenderRequest>) -> Result<Response, ApiError> {
    let layout = match (req.layout, req.tree) {
        (Some(l), None) => l,
        (None, Some(t)) => checked_execute(&t)?,
        _ => return Err(ApiError::unprocessable("invalid_body", "give exactly one of `layout` and `tree`")),
    };
    let svg = render_svg(&layout, &req.palette.unwrap_or_default());
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}

#[derive(Debug, Deserialize)]
pub struct NoiseRequest {
    pub layout: RectLayout,
    pub level: f64,
    pub seed: u64,
    pub resolution: Option<usize>,
}

async fn noise(ApiJson(req): ApiJson<NoiseRequest>) -> ApiResult<facaid_core::noise::NoisyLayout> {
    let res = req.resolution.unwrap_or(256);
    let out = blocking(move || match inject_noise(&req.layout, req.level, req.seed, res) {
        Ok(n) => Ok(n),
        Err(e @ NoiseError::InvalidLevel(_)) => Err(ApiError::unprocessable(
            "invalid_level",
            format!("{e}; levels must lie in [0, {MAX_NOISE_LEVEL}]"),
        )),
        Err(e) => Err(ApiError::unprocessable("unreachable_noise_level", e)),
    })
    .await?;
    Ok(Json(out))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn cors(req: Request, next: Next) -> Response {
    let preflight = req.method() == Method::OPTIONS;
    let mut resp = if preflight { StatusCode::NO_CONTENT.into_response() } else { next.run(req).await };
    let h = resp.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
    h.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
    resp
}

pub fn router(state: AppState, cfg: &ServiceConfig) -> Router {
    let app = Router::new()
        .route("/grammar", get(grammar))
        .route("/health", get(health))
        .route("/generate", post(generate))
        .route("/execute", post(execute))
        .route("/infer", post(infer))
        .route("/optimize", post(optimize))
        .route("/render", post(render))
        .route("/noise", post(noise))
        .layer(DefaultBodyLimit::max(cfg.body_limit))
        .with_state(state);
    let app = match &cfg.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(not_found),
    };
    if cfg.cors {
        app.layer(middleware::from_fn(cors))
    } else {
        app
    }
}

/// Loads the configured checkpoint, if any.
pub fn load_state(cfg: &ServiceConfig) -> Result<AppState, ServeError> {
    let model = match &cfg.model {
        Some(path) => {
            let (model, vocab) =
                load_checkpoint(path).map_err(|e| ServeError::CheckpointLoadFailure(format!("{}: {e}", path.display())))?;
            log::info!("loaded model from {} ({} parameters)", path.display(), model.param_count());
            Some(Arc::new(LoadedModel::new(model, vocab)))
        }
        None => None,
    };
    Ok(AppState { model })
}

/// Binds and serves until interrupted.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServeError> {
    cfg.validate().map_err(|e| ServeError::Config(e.to_string()))?;
    let state = load_state(&cfg)?;
    let addr = format!("{}:{}", cfg.bind, cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServeError::BindFailure { addr: addr.clone(), source })?;
    let local: SocketAddr = listener.local_addr()?;
    log::info!("listening on http://{local}");
    axum::serve(listener, router(state, &cfg))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
