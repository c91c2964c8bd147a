//! HTTP front end for a loaded artifact bundle.
//!
//! Routes, all JSON:
//! - `POST /v1/suggest` `{"line": "...", "k": 10}` -> `{"oov": bool, "suggestions": [...]}`
//! - `GET /v1/health` -> `{"status": "ok"}`
//! - `GET /v1/stats` -> vocabulary size, dimension and artifact sizes

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nextline::service::{ArtifactBundle, BundleStats, DEFAULT_K};
use nextline::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

/// Largest `k` a request may ask for.
pub const MAX_K: usize = 1000;

#[derive(Debug, Deserialize, Serialize)]
pub struct SuggestRequest {
    pub line: String,
    #[serde(default)]
    pub k: Option<usize>,
}

struct AppState {
    bundle: Arc<ArtifactBundle>,
    stats: BundleStats,
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Input(msg) => ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg),
            other => {
                log::error!("suggest failed: {other}");
                ApiError(StatusCode::INTERNAL_SERVER_ERROR, other.to_string())
            }
        }
    }
}

pub fn router(bundle: Arc<ArtifactBundle>) -> nextline::Result<Router> {
    let stats = bundle.stats()?;
    let state = Arc::new(AppState { bundle, stats });
    Ok(Router::new()
        .route("/v1/suggest", post(suggest))
        .route("/v1/health", get(health))
        .route("/v1/stats", get(stats_handler))
        .layer(CorsLayer::permissive())
        .with_state(state))
}

async fn suggest(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SuggestRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    let k = req.k.unwrap_or(DEFAULT_K);
    if k == 0 || k > MAX_K {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("k must be in 1..={MAX_K}")));
    }
    let bundle = state.bundle.clone();
    let resp = tokio::task::spawn_blocking(move || bundle.suggest(&req.line, k))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(resp).into_response())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn stats_handler(State(state): State<Arc<AppState>>) -> Json<BundleStats> {
    Json(state.stats.clone())
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(bundle: Arc<ArtifactBundle>, addr: &str) -> anyhow::Result<()> {
    let app = router(bundle)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use nextline::embed::TrainConfig;
    use nextline::eval::SyntheticSpec;
    use nextline::pipeline::{train_from_sequences, PipelineConfig};
    use nextline::service::load_bundle;
    use serde_json::Value;
    use tower::ServiceExt;

    fn app() -> (tempfile::TempDir, Router) {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            chains: 8,
            chain_length: 6,
            repeats: 10,
            seed: 3,
        };
        let cfg = PipelineConfig {
            train: TrainConfig {
                workers: 1,
                epochs: 5,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        };
        train_from_sequences(&spec.sequences().unwrap(), tmp.path(), &cfg, None).unwrap();
        let bundle = Arc::new(load_bundle(tmp.path()).unwrap());
        (tmp, router(bundle).unwrap())
    }

    async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    fn post_suggest(body: &str) -> Request<Body> {
        Request::post("/v1/suggest")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap()
    }

    #[tokio::test]
    async fn health_and_stats() {
        let (_tmp, app) = app();
        let (status, body) = call(&app, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
        assert_eq!((status, body), (StatusCode::OK, json!({ "status": "ok" })));

        let (status, body) = call(&app, Request::get("/v1/stats").body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["vocab"], 48);
        assert_eq!(body["dim"], 128);
        let parts: u64 = ["main_index_bytes", "text_index_bytes", "pca_bytes", "line_to_id_bytes", "id_to_line_bytes"]
            .iter()
            .map(|f| body[f].as_u64().unwrap())
            .sum();
        assert_eq!(body["artifact_bytes"].as_u64().unwrap(), parts);
    }

    #[tokio::test]
    async fn suggest_returns_ranked_lines() {
        let (_tmp, app) = app();
        let spec_line = SyntheticSpec {
            chains: 8,
            chain_length: 6,
            repeats: 10,
            seed: 3,
        }
        .sequences()
        .unwrap()[0]
            .lines()
            .next()
            .unwrap()
            .as_str()
            .to_string();
        let (status, body) = call(&app, post_suggest(&json!({ "line": spec_line, "k": 5 }).to_string())).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["oov"], false);
        let s = body["suggestions"].as_array().unwrap();
        assert_eq!(s.len(), 5);
        for (i, item) in s.iter().enumerate() {
            assert_eq!(item["rank"], i + 1);
            assert_ne!(item["line"], spec_line.as_str());
        }

        // k defaults to 10
        let (status, body) = call(&app, post_suggest(&json!({ "line": spec_line }).to_string())).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["suggestions"].as_array().unwrap().len(), 10);

        let (status, body) = call(&app, post_suggest(r#"{"line": "zzz_unknown = frob(1)"}"#)).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["oov"], true);
    }

    #[tokio::test]
    async fn bad_requests() {
        let (_tmp, app) = app();
        for (body, want) in [
            (r##"{"line": "# just a comment"}"##, StatusCode::UNPROCESSABLE_ENTITY),
            (r##"{"line": "   "}"##, StatusCode::UNPROCESSABLE_ENTITY),
            (r##"{"line": "x = 1", "k": 0}"##, StatusCode::BAD_REQUEST),
            (r##"{"line": "x = 1", "k": 5000}"##, StatusCode::BAD_REQUEST),
            (r##"{"line": "##, StatusCode::BAD_REQUEST),
            (r##"{"k": 3}"##, StatusCode::BAD_REQUEST),
        ] {
            let (status, resp) = call(&app, post_suggest(body)).await;
            assert_eq!(status, want, "{body}: {resp}");
            assert!(resp["error"].as_str().is_some_and(|e| !e.is_empty()), "{resp}");
        }
    }
}
