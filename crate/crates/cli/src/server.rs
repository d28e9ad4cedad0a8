//! HTTP prediction service.
//!
//! `GET /health`, `GET /meta` and `POST /predict`. Network weights are
//! immutable once installed; until then `/predict` answers 503.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use formcast_core::dataset::DataSettings;
use formcast_core::fqt::Container;
use formcast_core::params::{Param, ParameterVector};
use formcast_core::pipeline::{PredictSummary, Predictor};
use formcast_core::tensor::Tensor;

pub struct AppState {
    pub settings: DataSettings,
    predictor: OnceLock<Arc<Predictor>>,
    /// One permit per worker thread; surplus requests queue instead of
    /// time-slicing the cores.
    inference: Semaphore,
}

impl AppState {
    pub fn new(settings: DataSettings) -> Arc<Self> {
        Arc::new(Self {
            settings,
            predictor: OnceLock::new(),
            inference: Semaphore::new(rayon::current_num_threads()),
        })
    }

    /// Makes the networks available; later calls are ignored.
    pub fn install(&self, predictor: Predictor) {
        let _ = self.predictor.set(Arc::new(predictor));
    }

    pub fn predictor(&self) -> Option<Arc<Predictor>> {
        self.predictor.get().cloned()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(flatten)]
    pub params: ParameterVector,
    #[serde(default)]
    pub grid: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub grid: usize,
    /// Base64 FQT holding `thinning` `[1, n, n]`.
    pub thinning: String,
    /// Base64 FQT holding `displacement` `[3, n, n]`, divided by 120 mm.
    pub displacement: String,
    /// Base64 FQT holding `mask` `[1, n, n]`.
    pub mask: String,
    pub summary: PredictSummary,
    pub model_id: String,
    pub latency_ms: f64,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/meta", get(meta))
        .route("/predict", post(predict))
        .with_state(state)
}

fn error(status: StatusCode, body: Value) -> Response {
    (status, Json(body)).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "ready": state.predictor().is_some() }))
}

async fn meta(State(state): State<Arc<AppState>>) -> Json<Value> {
    let s = &state.settings;
    let bounds: Vec<Value> = Param::ALL
        .iter()
        .map(|&p| {
            let (min, max) = s.bounds.get(p);
            json!({ "name": p.name(), "unit": p.unit(), "min": min, "max": max })
        })
        .collect();
    let predictor = state.predictor();
    Json(json!({
        "bounds": bounds,
        "resolution": s.resolution,
        "frame_mm": formcast_core::geometry::FRAME_MM,
        "displacement_scale_mm": formcast_core::geometry::HEIGHT_SCALE_MM,
        "thinning_range": [s.thresholds.c2, s.thresholds.c1],
        "model_id": predictor.as_ref().map(|p| p.model_id.clone()),
        "ready": predictor.is_some(),
    }))
}

fn encode(name: &str, t: &Tensor<f32>) -> Result<String, formcast_core::Error> {
    let mut c = Container::new();
    c.push(name, t.clone());
    Ok(B64.encode(c.to_bytes()?))
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let start = Instant::now();
    let Some(predictor) = state.predictor() else {
        return error(
            StatusCode::SERVICE_UNAVAILABLE,
            json!({ "error": "models are not loaded yet" }),
        );
    };
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return error(
                StatusCode::BAD_REQUEST,
                json!({ "error": format!("bad request body: {e}") }),
            )
        }
    };
    if let Some(n) = req.grid {
        if n != state.settings.resolution {
            return error(
                StatusCode::BAD_REQUEST,
                json!({ "error": format!("grid {n} unavailable; the loaded models run at {}", state.settings.resolution) }),
            );
        }
    }
    let report = req.params.validate(&state.settings.bounds);
    if !report.is_ok() {
        return error(
            StatusCode::BAD_REQUEST,
            json!({ "error": "invalid parameters", "violations": report.violations }),
        );
    }
    let pv = req.params;
    let Ok(_permit) = state.inference.acquire().await else {
        return error(
            StatusCode::SERVICE_UNAVAILABLE,
            json!({ "error": "service is shutting down" }),
        );
    };
    let result = tokio::task::spawn_blocking(move || -> Result<PredictResponse, formcast_core::Error> {
        let p = predictor.predict(&pv)?;
        let n = p.grid.n;
        Ok(PredictResponse {
            grid: n,
            thinning: encode("thinning", &p.thinning)?,
            displacement: encode("displacement", &p.displacement)?,
            mask: encode("mask", &Tensor::new(&[1, n, n], p.mask)?)?,
            summary: p.summary,
            model_id: predictor.model_id.clone(),
            latency_ms: 0.0,
        })
    })
    .await;
    match result {
        Ok(Ok(mut r)) => {
            r.latency_ms = start.elapsed().as_secs_f64() * 1e3;
            Json(r).into_response()
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() })),
        Err(e) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({ "error": format!("worker failed: {e}") }),
        ),
    }
}

/// Decodes one tensor from a base64 FQT payload.
pub fn decode_tensor(payload: &str, name: &str) -> Result<Tensor<f32>, formcast_core::Error> {
    let bytes = B64
        .decode(payload)
        .map_err(|e| formcast_core::Error::Format(format!("base64: {e}")))?;
    Container::from_bytes(&bytes)?.take(name)
}
