//! HTTP endpoint behaviour, checked against the library calls they wrap.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use facaid_cli::config::ServiceConfig;
use facaid_cli::server::{load_state, router, serve, AppState, LoadedModel, ServeError};
use facaid_core::decoder::{infer_procedure, DecodeConfig};
use facaid_core::eval::pixel_classification_error;
use facaid_core::generator::{generate_facade, record_at, sample_style, DatasetRecord};
use facaid_core::noise::inject_noise;
use facaid_core::tokenizer::Vocabulary;
use facaid_core::transformer::{ModelConfig, SeqModel};
use facaid_core::{default_sizing, execute, DerivationTree, Grammar, RectLayout};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_state() -> AppState {
    let vocab = Vocabulary::standard(100).unwrap();
    let model = SeqModel::new(ModelConfig::tiny(&vocab, 16, 1, 2), 5).unwrap();
    AppState { model: Some(Arc::new(LoadedModel::new(model, vocab))) }
}

fn app(state: AppState) -> Router {
    router(state, &ServiceConfig::default())
}

async fn call(app: &Router, method: &str, path: &str, body: Option<String>) -> (StatusCode, String, Option<String>) {
    let mut req = Request::builder().method(method).uri(path);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap(), ctype)
}

async fn post(app: &Router, path: &str, body: Value) -> (StatusCode, Value) {
    let (status, text, _) = call(app, "POST", path, Some(body.to_string())).await;
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

fn error_code(body: &Value) -> &str {
    assert!(body["detail"].is_string(), "{body}");
    body["code"].as_str().unwrap()
}

#[tokio::test]
async fn grammar_lists_every_production() {
    let (status, text, _) = call(&app(AppState::default()), "GET", "/grammar", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_str(&text).unwrap();
    let g = Grammar::standard();
    assert_eq!(v["hash"], json!(g.hash()));
    assert_eq!(v["productions"], serde_json::to_value(&g.productions).unwrap());
    assert_eq!(v["axiom"], serde_json::to_value(g.axiom).unwrap());
}

#[tokio::test]
async fn health_reports_model_presence() {
    let (_, text, _) = call(&app(AppState::default()), "GET", "/health", None).await;
    assert_eq!(serde_json::from_str::<Value>(&text).unwrap()["model_loaded"], json!(false));
    let (_, text, _) = call(&app(tiny_state()), "GET", "/health", None).await;
    assert_eq!(serde_json::from_str::<Value>(&text).unwrap()["model_loaded"], json!(true));
}

#[tokio::test]
async fn generate_matches_library() {
    let app = app(AppState::default());
    let (status, body) = post(&app, "/generate", json!({"seed": 17})).await;
    assert_eq!(status, StatusCode::OK);
    let rec: DatasetRecord = serde_json::from_value(body).unwrap();
    assert_eq!(rec, generate_facade(&sample_style(17), 17).unwrap());

    let mut style = sample_style(3);
    style.floor_count_range = [2, 2];
    let (status, body) = post(&app, "/generate", json!({"seed": 4, "style": style})).await;
    assert_eq!(status, StatusCode::OK);
    let rec: DatasetRecord = serde_json::from_value(body).unwrap();
    assert_eq!(rec, generate_facade(&style, 4).unwrap());
}

#[tokio::test]
async fn execute_matches_library_and_rejects_invalid_trees() {
    let app = app(AppState::default());
    let rec = record_at(9, 0);
    let (status, body) = post(&app, "/execute", json!({"tree": rec.tree})).await;
    assert_eq!(status, StatusCode::OK);
    let layout: RectLayout = serde_json::from_value(body).unwrap();
    assert_eq!(layout, execute(&rec.tree).unwrap());

    let mut bad = rec.tree.clone();
    bad.root.visit_mut(&mut |n| n.sizing.iter_mut().for_each(|s| *s = -1.0));
    let (status, body) = post(&app, "/execute", json!({ "tree": bad })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_tree");
}

#[tokio::test]
async fn malformed_bodies_get_machine_readable_4xx() {
    let app = app(AppState::default());
    let (status, text, _) = call(&app, "POST", "/execute", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&serde_json::from_str(&text).unwrap()), "malformed_json");

    let (status, body) = post(&app, "/execute", json!({"layout": []})).await;
    assert!(status.is_client_error());
    assert_eq!(error_code(&body), "invalid_body");

    let req = Request::post("/generate").body(Body::from("{\"seed\":1}")).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE);

    let (status, body) = post(&app, "/noise", json!({"layout": record_at(1, 0).layout, "level": 0.9, "seed": 0})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_level");

    let (status, text, _) = call(&app, "GET", "/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&serde_json::from_str(&text).unwrap()), "not_found");
}

#[tokio::test]
async fn oversized_bodies_are_rejected() {
    let cfg = ServiceConfig { body_limit: 64, ..ServiceConfig::default() };
    let app = router(AppState::default(), &cfg);
    let (status, body) = post(&app, "/execute", json!({"tree": record_at(2, 0).tree})).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "payload_too_large");
}

#[tokio::test]
async fn infer_without_model_is_409() {
    let (status, body) = post(&app(AppState::default()), "/infer", json!({"layout": record_at(1, 1).layout})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "model_unavailable");
}

#[tokio::test]
async fn infer_matches_library() {
    let state = tiny_state();
    let app = app(state.clone());
    let m = state.model.unwrap();
    let layout = record_at(4, 2).layout;
    for (temperature, seed) in [(None, 0), (Some(1.0), 7)] {
        let (status, body) = post(&app, "/infer", json!({"layout": layout, "temperature": temperature, "seed": seed})).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let want = infer_procedure(&m.model, &m.automaton, &layout, &DecodeConfig { temperature, seed }).unwrap();
        let tree: DerivationTree = serde_json::from_value(body["tree"].clone()).unwrap();
        assert_eq!(tree, want.tree);
        assert_eq!(body["tokens"], json!(want.tokens.tokens));
        assert_eq!(body["token_strings"].as_array().unwrap().len(), want.tokens.len());
    }

    // Resuming from the first few tokens of a decode, given as strings, reproduces it.
    let (_, body) = post(&app, "/infer", json!({"layout": layout})).await;
    let prefix: Vec<Value> = body["token_strings"].as_array().unwrap()[..6].to_vec();
    let (status, resumed) = post(&app, "/infer", json!({"layout": layout, "prefix": prefix})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resumed["tokens"], body["tokens"]);

    let (status, body) = post(&app, "/infer", json!({"layout": layout, "prefix": ["no-such-token"]})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_prefix");
}

#[tokio::test]
async fn optimize_round_trip_recovers_sizing() {
    let app = app(AppState::default());
    let rec = record_at(11, 3);
    let start = default_sizing(&rec.tree.structure_only()).unwrap();
    let (status, body) = post(&app, "/optimize", json!({"tree": start, "target": rec.layout})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let fitted: DerivationTree = serde_json::from_value(body["tree"].clone()).unwrap();
    assert!(fitted.same_structure(&rec.tree));
    let layout: RectLayout = serde_json::from_value(body["layout"].clone()).unwrap();
    assert_eq!(layout, execute(&fitted).unwrap());
    assert!(!body["loss_trace"]["losses"].as_array().unwrap().is_empty());
    let before = pixel_classification_error(&execute(&start).unwrap(), &rec.layout, 128);
    let after = pixel_classification_error(&layout, &rec.layout, 128);
    assert!(after <= before && after < 0.02, "pixel error {before} -> {after}");
}

#[tokio::test]
async fn noise_matches_library() {
    let app = app(AppState::default());
    let layout = record_at(5, 5).layout;
    let (status, body) = post(&app, "/noise", json!({"layout": layout, "level": 0.1, "seed": 3, "resolution": 64})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body, serde_json::to_value(inject_noise(&layout, 0.1, 3, 64).unwrap()).unwrap());
}

#[tokio::test]
async fn render_accepts_layout_or_tree() {
    let app = app(AppState::default());
    let rec = record_at(6, 1);
    let (status, from_layout, ctype) =
        call(&app, "POST", "/render", Some(json!({"layout": rec.layout}).to_string())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/svg+xml"));
    assert_eq!(from_layout.matches("<rect").count(), rec.layout.len());
    let (_, from_tree, _) = call(&app, "POST", "/render", Some(json!({"tree": rec.tree}).to_string())).await;
    assert_eq!(from_layout, from_tree);

    let (status, body) = post(&app, "/render", json!({})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&body), "invalid_body");
}

#[tokio::test]
async fn cors_headers_only_when_enabled() {
    let plain = app(AppState::default());
    let resp = plain.oneshot(Request::get("/health").body(Body::empty()).unwrap()).await.unwrap();
    assert!(resp.headers().get("access-control-allow-origin").is_none());

    let cfg = ServiceConfig { cors: true, ..ServiceConfig::default() };
    let cors = router(AppState::default(), &cfg);
    let pre = Request::builder().method("OPTIONS").uri("/execute").body(Body::empty()).unwrap();
    let resp = cors.oneshot(pre).await.unwrap();
    assert!(resp.status().is_success());
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

#[tokio::test]
async fn serves_static_assets_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>studio</html>").unwrap();
    let cfg = ServiceConfig { static_dir: Some(dir.path().to_path_buf()), ..ServiceConfig::default() };
    let app = router(AppState::default(), &cfg);
    let (status, text, _) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(text, "<html>studio</html>");
    let (status, _, _) = call(&app, "GET", "/grammar", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_do_not_interfere() {
    // Eight interleaved requests over real TCP, each compared with its sequential answer.
    let state = tiny_state();
    let m = state.model.clone().unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(async move { axum::serve(listener, app(state)).await });

    let mut tasks = Vec::new();
    for i in 0..8u64 {
        let rec = record_at(21, i);
        tasks.push(tokio::spawn(async move {
            let (path, body) = if i % 2 == 0 {
                ("/infer", json!({"layout": rec.layout, "temperature": 1.0, "seed": i}))
            } else {
                ("/execute", json!({"tree": rec.tree}))
            };
            let text = raw_post(addr, path, &body.to_string()).await;
            (i, rec, serde_json::from_str::<Value>(&text).unwrap())
        }));
    }
    for t in tasks {
        let (i, rec, body) = t.await.unwrap();
        if i % 2 == 0 {
            let cfg = DecodeConfig { temperature: Some(1.0), seed: i };
            let want = infer_procedure(&m.model, &m.automaton, &rec.layout, &cfg).unwrap();
            assert_eq!(body["tokens"], json!(want.tokens.tokens), "request {i}");
        } else {
            assert_eq!(body, serde_json::to_value(execute(&rec.tree).unwrap()).unwrap(), "request {i}");
        }
    }
    server.abort();
}

async fn raw_post(addr: std::net::SocketAddr, path: &str, body: &str) -> String {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "POST {path} HTTP/1.1\r\nhost: x\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    let (head, rest) = out.split_once("\r\n\r\n").unwrap();
    assert!(head.starts_with("HTTP/1.1 200"), "{head}");
    rest.to_string()
}

#[tokio::test]
async fn serve_reports_bind_and_checkpoint_failures() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let cfg = ServiceConfig { port, ..ServiceConfig::default() };
    assert!(matches!(serve(cfg).await, Err(ServeError::BindFailure { .. })));

    let cfg = ServiceConfig { model: Some("/nonexistent/model.ckpt".into()), ..ServiceConfig::default() };
    assert!(matches!(load_state(&cfg), Err(ServeError::CheckpointLoadFailure(_))));

    let cfg = ServiceConfig { port: 0, ..ServiceConfig::default() };
    assert!(matches!(serve(cfg).await, Err(ServeError::Config(_))));
}
