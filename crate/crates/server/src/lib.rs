//! JSON API over an [`AuditStore`]: the label queue, single records, label
//! submission and the live category summary.
//!
//! Reads share a lock; each label write holds it exclusively for one journal
//! append, so concurrent submissions for one record see exactly one success.

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cbqa_core::audit::{AuditError, AuditRecord, AuditStore, BaseScore, Category};
use serde::Serialize;
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("address {0} is already in use")]
    PortInUse(SocketAddr),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

pub type SharedStore = Arc<RwLock<AuditStore>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryResponse {
    pub counts: BTreeMap<Category, usize>,
    pub percentages: BTreeMap<Category, f64>,
    /// `null` until something is labeled.
    pub adjusted_accuracy: Option<f64>,
    pub base: BaseScore,
    pub labeled: usize,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn fields(errors: Vec<FieldError>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": "invalid request body", "fields": errors }),
        }
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        let status = match &e {
            AuditError::UnknownId(_) => StatusCode::NOT_FOUND,
            AuditError::AlreadyLabeled { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/example/{id}", get(example))
        .route("/api/label", post(label))
        .route("/api/summary", get(summary))
        .with_state(store)
}

fn read(store: &SharedStore) -> std::sync::RwLockReadGuard<'_, AuditStore> {
    store.read().unwrap_or_else(|p| p.into_inner())
}

async fn queue(State(store): State<SharedStore>) -> Json<Vec<AuditRecord>> {
    Json(read(&store).queue().into_iter().cloned().collect())
}

async fn example(State(store): State<SharedStore>, Path(id): Path<String>) -> Result<Json<AuditRecord>, ApiError> {
    read(&store)
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| AuditError::UnknownId(id).into())
}

struct LabelRequest {
    example_id: String,
    label: Category,
    reference: Option<String>,
    overwrite: bool,
}

fn parse_label(body: &[u8]) -> Result<LabelRequest, ApiError> {
    let obj: Map<String, Value> = match serde_json::from_slice(body) {
        Ok(Value::Object(o)) => o,
        Ok(_) => return Err(ApiError::fields(vec![field("body", "expected a JSON object")])),
        Err(e) => return Err(ApiError::fields(vec![field("body", &format!("malformed JSON: {e}"))])),
    };
    let mut errors = Vec::new();
    for key in obj.keys() {
        if !["example_id", "label", "reference", "overwrite"].contains(&key.as_str()) {
            errors.push(field(key, "unknown field"));
        }
    }
    let example_id = match obj.get("example_id") {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        Some(Value::String(_)) => {
            errors.push(field("example_id", "must be non-empty"));
            None
        }
        Some(_) => {
            errors.push(field("example_id", "expected a string"));
            None
        }
        None => {
            errors.push(field("example_id", "missing"));
            None
        }
    };
    let label = match obj.get("label") {
        Some(Value::String(s)) => match s.parse::<Category>() {
            Ok(c) => Some(c),
            Err(m) => {
                errors.push(field("label", &m));
                None
            }
        },
        Some(_) => {
            errors.push(field("label", "expected a string"));
            None
        }
        None => {
            errors.push(field("label", "missing"));
            None
        }
    };
    let reference = match obj.get("reference") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            errors.push(field("reference", "expected a string or null"));
            None
        }
    };
    let overwrite = match obj.get("overwrite") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => {
            errors.push(field("overwrite", "expected a boolean"));
            false
        }
    };
    match (example_id, label) {
        (Some(example_id), Some(label)) if errors.is_empty() => Ok(LabelRequest {
            example_id,
            label,
            reference,
            overwrite,
        }),
        _ => Err(ApiError::fields(errors)),
    }
}

fn field(name: &str, message: &str) -> FieldError {
    FieldError {
        field: name.to_string(),
        message: message.to_string(),
    }
}

async fn label(State(store): State<SharedStore>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req = parse_label(&body)?;
    let mut guard = store.write().unwrap_or_else(|p| p.into_inner());
    let revision = guard.record_label(&req.example_id, req.label, req.reference, req.overwrite)?;
    Ok(Json(json!({ "revision": revision })))
}

/// Summary of `store`, with zero counts before the first label.
pub fn summary_of(store: &AuditStore) -> Result<SummaryResponse, AuditError> {
    let zeros = || Category::ALL.iter().map(|&c| (c, 0)).collect::<BTreeMap<_, _>>();
    let (counts, percentages, labeled, adjusted) = match store.summary() {
        Ok(s) => {
            let adjusted = store.adjusted_accuracy()?;
            (s.counts, s.percentages, s.labeled, Some(adjusted))
        }
        Err(AuditError::NoLabels) => (zeros(), zeros().into_keys().map(|c| (c, 0.0)).collect(), 0, None),
        Err(e) => return Err(e),
    };
    Ok(SummaryResponse {
        counts,
        percentages,
        adjusted_accuracy: adjusted,
        base: store.base(),
        labeled,
        revision: store.revision(),
    })
}

async fn summary(State(store): State<SharedStore>) -> Result<Json<SummaryResponse>, ApiError> {
    Ok(Json(summary_of(&read(&store))?))
}

/// Bind `addr` and serve until the process ends.
pub async fn serve(store: AuditStore, addr: SocketAddr) -> Result<(), ServeError> {
    let listener = bind(addr).await?;
    serve_on(listener, Arc::new(RwLock::new(store))).await
}

pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|source| {
        if source.kind() == std::io::ErrorKind::AddrInUse {
            ServeError::PortInUse(addr)
        } else {
            ServeError::Bind { addr, source }
        }
    })
}

pub async fn serve_on(listener: tokio::net::TcpListener, store: SharedStore) -> Result<(), ServeError> {
    axum::serve(listener, router(store)).await?;
    Ok(())
}
