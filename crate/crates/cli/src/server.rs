//! Read-only HTTP access to a loaded search index.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mrfibp::retrieval::{nearest_names, SearchHit};
use mrfibp::{QueryGroup, QueryTerm, SearchIndex};
use serde::{Deserialize, Serialize};
use tower_http::trace::TraceLayer;

use crate::commands::run_query;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRequest {
    pub factors: Vec<String>,
    /// Defaults to true for groups of two or more factors.
    #[serde(default)]
    pub colocated: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRequest {
    pub groups: Vec<GroupRequest>,
    #[serde(default)]
    pub min_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatMapResponse {
    pub image_id: String,
    pub factor: String,
    pub width: u32,
    pub height: u32,
    pub grid: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

pub struct ApiError(StatusCode, CliError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.1.code,
            message: self.1.message,
        };
        (self.0, Json(body)).into_response()
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e)
    }
}

/// Resolves named groups against the index vocabulary.
pub fn query_from_request(index: &SearchIndex, req: &SearchRequest) -> Result<QueryTerm, CliError> {
    let names = &index.factor_names;
    let groups = req
        .groups
        .iter()
        .map(|g| {
            let factors = g
                .factors
                .iter()
                .map(|n| {
                    names.iter().position(|x| x == n).ok_or_else(|| {
                        CliError::from(mrfibp::Error::UnknownFactor {
                            name: n.clone(),
                            suggestions: nearest_names(n, names, 3),
                        })
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(QueryGroup {
                colocated: g.colocated.unwrap_or(factors.len() > 1),
                factors,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let q = QueryTerm { groups };
    q.validate(names.len())?;
    Ok(q)
}

pub fn router(index: Arc<SearchIndex>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/factors", get(factors))
        .route("/api/search", post(search))
        .route("/api/heatmap/{image}/{factor}", get(heatmap))
        .layer(TraceLayer::new_for_http())
        .with_state(index)
}

async fn health(State(index): State<Arc<SearchIndex>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "images": index.stacks.len(),
        "factors": index.factor_names.len(),
    }))
}

async fn factors(State(index): State<Arc<SearchIndex>>) -> Json<Vec<String>> {
    Json(index.factor_names.clone())
}

async fn search(
    State(index): State<Arc<SearchIndex>>,
    Json(req): Json<SearchRequest>,
) -> Result<Json<Vec<SearchHit>>, ApiError> {
    let q = query_from_request(&index, &req)?;
    let hits = run_query(&index, &q, req.min_score.unwrap_or(0.0))?;
    tracing::info!(groups = q.groups.len(), hits = hits.len(), "search");
    Ok(Json(hits))
}

async fn heatmap(
    State(index): State<Arc<SearchIndex>>,
    Path((image, factor)): Path<(String, String)>,
) -> Result<Json<HeatMapResponse>, ApiError> {
    let stack = index.stack(&image).ok_or_else(|| {
        ApiError(
            StatusCode::NOT_FOUND,
            CliError::new("E_NOT_FOUND", format!("no image '{image}'")),
        )
    })?;
    let k = index.factor_names.iter().position(|n| *n == factor).ok_or_else(|| {
        ApiError(
            StatusCode::NOT_FOUND,
            CliError::from(mrfibp::Error::UnknownFactor {
                suggestions: nearest_names(&factor, &index.factor_names, 3),
                name: factor.clone(),
            }),
        )
    })?;
    let w = (stack.width as usize).max(1);
    Ok(Json(HeatMapResponse {
        image_id: image,
        factor,
        width: stack.width,
        height: stack.height,
        grid: stack.maps[k].chunks(w).map(<[f64]>::to_vec).collect(),
    }))
}

/// Binds `addr` and serves until interrupted.
pub fn serve(index: SearchIndex, addr: &str) -> Result<(), CliError> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::new("E_BIND", format!("{addr}: {e}")))?;
        tracing::info!(addr = %listener.local_addr()?, images = index.stacks.len(), "listening");
        axum::serve(listener, router(Arc::new(index)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
