//! Read-only JSON API consumed by the web UI.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fllm_core::catalog::{item_text, Item};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::engine::{recommend, Engine, RecommendError, RecommendRequest};

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    limiter: Arc<Semaphore>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        let permits = engine.config.service.max_concurrency.max(1);
        AppState {
            engine,
            limiter: Arc::new(Semaphore::new(permits)),
        }
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/api/recommend", post(recommend_handler))
        .route("/api/items", get(list_items))
        .route("/api/items/{id}", get(get_item))
        .route("/api/health", get(health))
        .with_state(AppState::new(engine))
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn unknown_item(id: &str) -> Response {
    (
        StatusCode::NOT_FOUND,
        Json(json!({ "error": format!("unknown item {id}"), "item_id": id })),
    )
        .into_response()
}

async fn recommend_handler(
    State(state): State<AppState>,
    body: Result<Json<RecommendRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let Ok(_permit) = state.limiter.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down");
    };
    let engine = state.engine.clone();
    let result = tokio::task::spawn_blocking(move || recommend(&engine, &req)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(RecommendError::BadRequest(m))) => error(StatusCode::BAD_REQUEST, m),
        Ok(Err(RecommendError::UnknownItem(id))) => unknown_item(&id),
        Ok(Err(RecommendError::Backend { message, fallback })) => {
            let mut body = json!({
                "error": format!("backend failure: {message}"),
                "degraded": fallback.is_some(),
            });
            if let Some(f) = fallback {
                body["fallback"] = serde_json::to_value(*f).unwrap_or_default();
            }
            (StatusCode::BAD_GATEWAY, Json(body)).into_response()
        }
        Ok(Err(e @ RecommendError::Retrieval(_))) => {
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
        Err(e) => {
            log::error!("recommend task failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        }
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ItemsQuery {
    pub query: Option<String>,
    pub category: Option<String>,
    /// 1-based.
    pub page: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemsPage {
    pub items: Vec<Item>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
}

async fn list_items(
    State(state): State<AppState>,
    query: Result<Query<ItemsQuery>, QueryRejection>,
) -> Response {
    let Query(q) = match query {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let page = q.page.unwrap_or(1);
    if page == 0 {
        return error(StatusCode::BAD_REQUEST, "page starts at 1");
    }
    let page_size = state.engine.config.service.page_size;
    let needle = q
        .query
        .as_deref()
        .map(|s| s.trim().to_lowercase())
        .filter(|s| !s.is_empty());
    let category = q.category.as_deref().map(str::trim).filter(|s| !s.is_empty());
    let matching: Vec<&Item> = state
        .engine
        .catalog
        .items
        .values()
        .filter(|it| category.is_none_or(|c| it.semantic_category.eq_ignore_ascii_case(c)))
        .filter(|it| {
            needle.as_deref().is_none_or(|n| {
                it.item_id.to_lowercase().contains(n) || item_text(it).to_lowercase().contains(n)
            })
        })
        .collect();
    let total = matching.len();
    let items = matching
        .into_iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .cloned()
        .collect();
    Json(ItemsPage {
        items,
        page,
        page_size,
        total,
    })
    .into_response()
}

async fn get_item(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.engine.catalog.item(&id) {
        Some(item) => Json(item.clone()).into_response(),
        None => unknown_item(&id),
    }
}

async fn health(State(state): State<AppState>) -> Response {
    let e = &state.engine;
    Json(json!({
        "status": "ok",
        "index_size": e.index.len(),
        "items": e.catalog.items.len(),
        "backend": e.backend.kind(),
        "embedder": e.embedder.fingerprint(),
    }))
    .into_response()
}

/// Serves until Ctrl-C.
pub async fn serve(engine: Arc<Engine>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
