//! HTTP+JSON inference service over one immutable model.
//!
//! | route              | body                                        | reply               |
//! |--------------------|---------------------------------------------|---------------------|
//! | `GET /model/info`  |                                             | dims and layout     |
//! | `POST /encode`     | `{image}`                                   | `{mu, logvar}`      |
//! | `POST /decode`     | `{latents}`                                 | `{image}`           |
//! | `POST /sweep`      | `{image?, latents?, index, from?, to?, steps}` | `{images}`       |
//!
//! Images are base64 8-bit grayscale PNG. Malformed JSON is a 400, a body
//! that parses but does not fit the model is a 422, and bodies over
//! [`BODY_LIMIT`] are a 413.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::Error;
use crate::eval::sweep_code;
use crate::io::{decode_png, encode_png};
use crate::network::Network;
use crate::tensor::Tensor;

pub const BODY_LIMIT: usize = 4 * 1024 * 1024;

/// Upper bound on `steps` in one sweep request.
pub const MAX_SWEEP_STEPS: usize = 256;

type Model = Arc<Network<f32>>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                message: e.to_string(),
            },
            _ => Self::unprocessable(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// JSON syntax errors are 400; well-formed JSON of the wrong shape is 422.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON: {e}")))?;
    serde_json::from_value(value).map_err(|e| ApiError::unprocessable(format!("invalid request: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub latents: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepRequest {
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub latents: Option<Vec<f64>>,
    pub index: usize,
    #[serde(default)]
    pub from: Option<f64>,
    #[serde(default)]
    pub to: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepResponse {
    pub images: Vec<String>,
}

/// `GET /model/info` body for `net`.
pub fn model_info(net: &Network<f32>) -> Value {
    let layout = net.layout();
    let mut map = Map::new();
    for &(factor, idx) in layout.extrinsic() {
        map.insert(factor.name().to_string(), json!(idx));
    }
    map.insert("intrinsic".into(), json!(layout.intrinsic().collect::<Vec<_>>()));
    json!({
        "latent_dim": net.latent_dim(),
        "layout": map,
        "resolution": net.resolution(),
    })
}

fn image_from_base64(net: &Network<f32>, data: &str) -> Result<Tensor<f32>, ApiError> {
    let bytes = BASE64
        .decode(data.trim())
        .map_err(|e| ApiError::unprocessable(format!("image is not base64: {e}")))?;
    let img = decode_png(&bytes)?;
    let r = net.resolution();
    if img.shape() != [1, r, r] {
        return Err(ApiError::unprocessable(format!(
            "image is {}x{}, the model takes {r}x{r}",
            img.shape()[2],
            img.shape()[1]
        )));
    }
    Ok(img)
}

fn image_to_base64(img: &Tensor<f32>) -> Result<String, ApiError> {
    Ok(BASE64.encode(encode_png(img)?))
}

fn check_latents(net: &Network<f32>, z: &[f64]) -> Result<(), ApiError> {
    if z.len() != net.latent_dim() {
        return Err(ApiError::unprocessable(format!(
            "expected {} latents, got {}",
            net.latent_dim(),
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::unprocessable("latents must be finite"));
    }
    Ok(())
}

fn as_f32(z: &[f64]) -> Vec<f32> {
    z.iter().map(|&v| v as f32).collect()
}

pub fn encode(net: &Network<f32>, req: &EncodeRequest) -> Result<EncodeResponse, ApiError> {
    let img = image_from_base64(net, &req.image)?;
    let (dist, _) = net.encode(&img)?;
    Ok(EncodeResponse {
        mu: dist.mu.iter().map(|&v| v as f64).collect(),
        logvar: dist.logvar.iter().map(|&v| v as f64).collect(),
    })
}

pub fn decode(net: &Network<f32>, req: &DecodeRequest) -> Result<ImageResponse, ApiError> {
    check_latents(net, &req.latents)?;
    let img = net.decode_image(&as_f32(&req.latents))?;
    Ok(ImageResponse {
        image: image_to_base64(&img)?,
    })
}

pub fn sweep(net: &Network<f32>, req: &SweepRequest) -> Result<SweepResponse, ApiError> {
    let base: Vec<f64> = match (&req.image, &req.latents) {
        (Some(image), None) => {
            let img = image_from_base64(net, image)?;
            net.encode_mean(&img)?.iter().map(|&v| v as f64).collect()
        }
        (None, Some(z)) => {
            check_latents(net, z)?;
            // snap to f32 so a sweep from given latents decodes like /decode
            as_f32(z).iter().map(|&v| v as f64).collect()
        }
        _ => return Err(ApiError::unprocessable("give exactly one of image or latents")),
    };
    if req.index >= base.len() {
        return Err(ApiError::unprocessable(format!(
            "index {} out of range for {} latents",
            req.index,
            base.len()
        )));
    }
    if req.steps == 0 || req.steps > MAX_SWEEP_STEPS {
        return Err(ApiError::unprocessable(format!("steps must be in 1..={MAX_SWEEP_STEPS}")));
    }
    let from = req.from.unwrap_or(base[req.index]);
    let to = req.to.unwrap_or(base[req.index]);
    if !from.is_finite() || !to.is_finite() {
        return Err(ApiError::unprocessable("sweep range must be finite"));
    }
    let s = sweep_code(net, &base, req.index, from, to, req.steps)?;
    Ok(SweepResponse {
        images: s.images.iter().map(image_to_base64).collect::<Result<_, _>>()?,
    })
}

/// Runs `f` off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })?
        .map(Json)
}

async fn info_handler(State(net): State<Model>) -> Json<Value> {
    Json(model_info(&net))
}

async fn encode_handler(State(net): State<Model>, body: Bytes) -> ApiResult<EncodeResponse> {
    let req: EncodeRequest = parse_body(&body)?;
    blocking(move || encode(&net, &req)).await
}

async fn decode_handler(State(net): State<Model>, body: Bytes) -> ApiResult<ImageResponse> {
    let req: DecodeRequest = parse_body(&body)?;
    blocking(move || decode(&net, &req)).await
}

async fn sweep_handler(State(net): State<Model>, body: Bytes) -> ApiResult<SweepResponse> {
    let req: SweepRequest = parse_body(&body)?;
    blocking(move || sweep(&net, &req)).await
}

pub fn router(net: Network<f32>) -> Router {
    Router::new()
        .route("/model/info", get(info_handler))
        .route("/encode", post(encode_handler))
        .route("/decode", post(decode_handler))
        .route("/sweep", post(sweep_handler))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(Arc::new(net))
}

/// Serves `net` on `addr` until the process is stopped.
pub async fn serve(net: Network<f32>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(net)).await
}
