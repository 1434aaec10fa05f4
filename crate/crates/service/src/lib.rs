//! HTTP front end over one frozen checkpoint.
//!
//! All state is built once by [`ServeState::build`] and shared read-only
//! between requests. Endpoints:
//!
//! | route | answer |
//! |---|---|
//! | `GET /meta` | config, dimensions, feature and group names, weight hash |
//! | `GET /curve?betas=b1,b2,...` | curve report; the startup grid is cached |
//! | `POST /encode` | bitplane, mask, values and reconstruction of one row |
//! | `GET /mask?beta=b` | visible-bit statistics and per-bit disparity over the sample |
//! | `GET /correlations?beta_from=&beta_to=` | feature correlations of newly visible bits |
//!
//! Every floating-point number in a response is written with at most nine
//! significant digits. Malformed requests get 400, out-of-range `β` 422 and
//! unknown routes 404, each with a JSON body `{"error", "message"}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use sofair_core::data::TabularDataset;
use sofair_core::evaluation::{
    bit_disparity, curve_report, distortion_max, trace_curve, unmasked_bit_correlations, AuditProtocol, CurveReport,
};
use sofair_core::model::{mse, ModelCheckpoint};

/// Startup knobs.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Grid whose curve is computed at startup.
    pub grid: Vec<f64>,
    /// Rows kept for `/mask` and `/correlations`.
    pub sample_rows: usize,
    pub sample_seed: u64,
    pub protocol: AuditProtocol,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            grid: uniform_grid(11),
            sample_rows: 2048,
            sample_seed: 0,
            protocol: AuditProtocol::default(),
            cors_origin: None,
        }
    }
}

/// `n` evenly spaced points on `[0, 1]`, endpoints included.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Immutable server state.
#[derive(Debug)]
pub struct ServeState {
    pub checkpoint: ModelCheckpoint,
    pub data: TabularDataset,
    pub sample: TabularDataset,
    pub curve: CurveReport,
    pub options: ServeOptions,
    pub weight_hash: String,
}

impl ServeState {
    /// Loads the dataset into the checkpoint's preprocessing, traces the
    /// startup curve and caches the sample.
    pub fn build(checkpoint: ModelCheckpoint, data: TabularDataset, options: ServeOptions) -> sofair_core::Result<Self> {
        let model = &checkpoint.model;
        if data.p() != model.input_dim || data.d_s() != model.sensitive_dim {
            return Err(sofair_core::Error::DimensionMismatch(format!(
                "dataset has p={}, d_s={}; checkpoint expects p={}, d_s={}",
                data.p(),
                data.d_s(),
                model.input_dim,
                model.sensitive_dim
            )));
        }
        let curve = curve_report(model, &data, &options.grid, &options.protocol)?;
        let sample = if data.n() > options.sample_rows { data.subsample(options.sample_rows, options.sample_seed) } else { data.clone() };
        let weight_hash = model.weight_hash();
        Ok(Self { checkpoint, data, sample, curve, options, weight_hash })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl From<sofair_core::Error> for ApiError {
    fn from(e: sofair_core::Error) -> Self {
        use sofair_core::Error as E;
        match e {
            E::OutOfRange(_) => Self::Unprocessable(e.to_string()),
            E::DimensionMismatch(_) | E::InvalidArgument(_) => Self::BadRequest(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            Self::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Self::Unprocessable(_) => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_range"),
            Self::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Self::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({ "error": kind, "message": self.to_string() }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// Rounds `v` to nine significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

fn round_numbers(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig9(n.as_f64().unwrap_or(0.0));
            *v = serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number);
        }
        Value::Array(items) => items.iter_mut().for_each(round_numbers),
        Value::Object(map) => map.values_mut().for_each(round_numbers),
        _ => {}
    }
}

fn respond(body: impl Serialize) -> ApiResult {
    let mut v = serde_json::to_value(body).map_err(|e| ApiError::Internal(e.to_string()))?;
    round_numbers(&mut v);
    Ok(Json(v).into_response())
}

fn parse_beta(raw: &str, name: &str) -> Result<f64, ApiError> {
    let b: f64 = raw.trim().parse().map_err(|_| ApiError::BadRequest(format!("{name} = {raw:?} is not a number")))?;
    check_beta(b, name)
}

fn check_beta(b: f64, name: &str) -> Result<f64, ApiError> {
    if !(0.0..=1.0).contains(&b) {
        return Err(ApiError::Unprocessable(format!("{name} = {b} is outside [0, 1]")));
    }
    Ok(b)
}

fn required<'a>(q: &'a HashMap<String, String>, name: &str) -> Result<&'a str, ApiError> {
    q.get(name).map(String::as_str).ok_or_else(|| ApiError::BadRequest(format!("missing query parameter {name}")))
}

async fn meta(State(st): State<Arc<ServeState>>) -> ApiResult {
    let m = &st.checkpoint.model;
    respond(json!({
        "config": m.config,
        "input_dim": m.input_dim,
        "sensitive_dim": m.sensitive_dim,
        "latent_dim": m.latent_dim(),
        "max_bits": m.max_bits(),
        "feature_names": st.checkpoint.feature_names,
        "sensitive_names": st.checkpoint.sensitive_names,
        "weight_hash": st.weight_hash,
        "default_grid": st.options.grid,
        "sample_rows": st.sample.n(),
        "test_rows": st.data.n(),
    }))
}

async fn curve(State(st): State<Arc<ServeState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let betas = match q.get("betas") {
        None => return respond(&st.curve),
        Some(raw) => raw.split(',').map(|b| parse_beta(b, "beta")).collect::<Result<Vec<_>, _>>()?,
    };
    if betas == st.options.grid {
        return respond(&st.curve);
    }
    let st2 = st.clone();
    let report = tokio::task::spawn_blocking(move || -> sofair_core::Result<CurveReport> {
        let model = &st2.checkpoint.model;
        let points = trace_curve(model, &st2.data, &betas, &st2.options.protocol)?;
        let d_max = distortion_max(model, &st2.data, &betas, &points, st2.options.protocol.seed)?;
        CurveReport::from_points(points, d_max, st2.curve.i_max)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    respond(report)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodeRequest {
    /// One row in the model's preprocessed feature space.
    x: Vec<f64>,
    beta: f64,
    /// Sensitive group index; needed when the decoder reads the side channel.
    #[serde(default)]
    sensitive: Option<usize>,
}

#[derive(Debug, Serialize)]
struct EncodeResponse {
    beta: f64,
    bits: Vec<Vec<u8>>,
    mask: Vec<Vec<u8>>,
    values: Vec<f64>,
    active_counts: Vec<usize>,
    /// Visible bits per dimension.
    mean_bits: f64,
    total_bits: usize,
    x_hat: Vec<f64>,
    distortion: f64,
}

async fn encode(State(st): State<Arc<ServeState>>, body: Bytes) -> ApiResult {
    let req: EncodeRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))?;
    let beta = check_beta(req.beta, "beta")?;
    let model = &st.checkpoint.model;
    if req.x.len() != model.input_dim {
        return Err(ApiError::BadRequest(format!("x has {} entries, expected {}", req.x.len(), model.input_dim)));
    }
    let d_s = model.sensitive_dim;
    let group = match (req.sensitive, model.config.mode.uses_side_channel()) {
        (Some(g), _) if g >= d_s => return Err(ApiError::Unprocessable(format!("sensitive = {g} exceeds {} groups", d_s))),
        (Some(g), _) => g,
        (None, true) => return Err(ApiError::BadRequest("this model decodes with the sensitive attribute; pass `sensitive`".into())),
        (None, false) => 0,
    };
    let x = Array2::from_shape_vec((1, model.input_dim), req.x).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let s = Array2::from_shape_fn((1, d_s), |(_, k)| f64::from(u8::from(k == group)));
    let code = model.codes(x.view(), beta)?.remove(0);
    let values = code.values();
    let z = Array2::from_shape_vec((1, values.len()), values.clone()).map_err(|e| ApiError::Internal(e.to_string()))?;
    let x_hat = model.decode(z.view(), s.view(), beta)?;
    let counts = code.active_counts();
    respond(EncodeResponse {
        beta,
        bits: code.bits().outer_iter().map(|r| r.to_vec()).collect(),
        mask: code.mask().outer_iter().map(|r| r.to_vec()).collect(),
        values,
        mean_bits: code.mean_bits(),
        total_bits: counts.iter().sum(),
        active_counts: counts,
        distortion: mse(x.view(), x_hat.view()),
        x_hat: x_hat.row(0).to_vec(),
    })
}

#[derive(Debug, Serialize)]
struct MaskResponse {
    beta: f64,
    rows: usize,
    /// Mean visible bits per dimension.
    active_counts_mean: Vec<f64>,
    /// Mean visible bits per sample.
    mean_bits: f64,
    /// Share of rows where bit `(j, l)` is visible.
    visible_fraction: Vec<Vec<f64>>,
    /// Disparity of bit `(j, l)` over the rows where it is visible; `null`
    /// when it is never visible.
    disparity: Vec<Vec<Option<f64>>>,
}

async fn mask(State(st): State<Arc<ServeState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let beta = parse_beta(required(&q, "beta")?, "beta")?;
    let model = &st.checkpoint.model;
    let codes = model.codes(st.sample.features.view(), beta)?;
    let s = st.sample.sensitive_index();
    let (d, a, n) = (model.latent_dim(), model.max_bits(), codes.len());
    let mut active = vec![0.0; d];
    let mut visible_fraction = vec![vec![0.0; a]; d];
    let mut disparity = vec![vec![None; a]; d];
    for c in &codes {
        for (j, k) in c.active_counts().into_iter().enumerate() {
            active[j] += k as f64;
        }
    }
    for j in 0..d {
        for l in 0..a {
            let (bits, groups): (Vec<u8>, Vec<usize>) = codes
                .iter()
                .zip(&s)
                .filter(|(c, _)| c.mask()[[j, l]] == 1)
                .map(|(c, &g)| (c.bits()[[j, l]], g))
                .unzip();
            visible_fraction[j][l] = bits.len() as f64 / n.max(1) as f64;
            if !bits.is_empty() {
                disparity[j][l] = Some(bit_disparity(&bits, &groups, model.sensitive_dim)?.value);
            }
        }
    }
    let active_counts_mean: Vec<f64> = active.iter().map(|v| v / n.max(1) as f64).collect();
    respond(MaskResponse {
        beta,
        rows: n,
        mean_bits: active_counts_mean.iter().sum(),
        active_counts_mean,
        visible_fraction,
        disparity,
    })
}

async fn correlations(State(st): State<Arc<ServeState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let from = parse_beta(required(&q, "beta_from")?, "beta_from")?;
    let to = parse_beta(required(&q, "beta_to")?, "beta_to")?;
    if to > from {
        return Err(ApiError::Unprocessable(format!("beta_to = {to} exceeds beta_from = {from}; lowering beta reveals bits")));
    }
    respond(unmasked_bit_correlations(&st.checkpoint.model, &st.sample, from, to)?)
}

async fn not_found() -> ApiError {
    ApiError::NotFound("unknown route".into())
}

/// The application router with CORS applied.
pub fn router(state: Arc<ServeState>) -> Router {
    let origin = match &state.options.cors_origin {
        Some(o) => HeaderValue::from_str(o).map(AllowOrigin::exact).unwrap_or_else(|_| AllowOrigin::any()),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(tower_http::cors::Any).allow_headers(tower_http::cors::Any);
    Router::new()
        .route("/meta", get(meta))
        .route("/curve", get(curve))
        .route("/encode", post(encode))
        .route("/mask", get(mask))
        .route("/correlations", get(correlations))
        .fallback(not_found)
        .layer(cors)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ServeState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Blocking wrapper around [`serve`] with its own runtime.
pub fn run(state: ServeState, addr: SocketAddr) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(Arc::new(state), addr))
}
