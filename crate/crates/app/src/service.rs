//! Inference session and HTTP routes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine;
use serde::{Deserialize, Serialize};

use seal_core::events::VoxelGrid;
use seal_core::guidance::{BasisTextEncoder, TextEncoder};
use seal_core::mask::Rle;
use seal_core::model::{classify, Checkpoint, Granularity, Prompt, SealModel};
use seal_core::tensor::Mat;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityFilter {
    #[default]
    Auto,
    Coarse,
    Fine,
}

impl GranularityFilter {
    fn keeps(self, g: Granularity) -> bool {
        match self {
            GranularityFilter::Auto => true,
            GranularityFilter::Coarse => matches!(g, Granularity::Single | Granularity::Coarse),
            GranularityFilter::Fine => matches!(g, Granularity::Single | Granularity::Fine),
        }
    }
}

impl std::str::FromStr for GranularityFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            "coarse" => Ok(Self::Coarse),
            "fine" => Ok(Self::Fine),
            other => Err(format!("granularity must be auto, coarse or fine, got '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub frame_id: String,
    pub prompts: Vec<Prompt>,
    pub queries: Vec<String>,
    #[serde(default)]
    pub granularity: GranularityFilter,
    #[serde(default)]
    pub canonical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResult {
    pub rle: Rle,
    pub granularity: Granularity,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub prompt_index: usize,
    pub masks: Vec<MaskResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub frame_id: String,
    pub height: usize,
    pub width: usize,
    pub results: Vec<PromptResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameInfo {
    pub frame_id: String,
    pub width: usize,
    pub height: usize,
    /// Base64 PNG of the summed voxel bins.
    pub preview: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl From<seal_core::Error> for ServiceError {
    fn from(e: seal_core::Error) -> Self {
        use seal_core::Error as E;
        match e {
            E::NotFound(m) => ServiceError::NotFound(m),
            e @ (E::Validation(_) | E::Precondition(_) | E::Config(_)) => ServiceError::Invalid(e.to_string()),
            e => ServiceError::Internal(e.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code(),
            message: self.to_string(),
        };
        (self.status(), axum::Json(body)).into_response()
    }
}

/// A loaded checkpoint, its text encoder and the frame store. Read-only once built.
pub struct Session {
    pub model: SealModel,
    pub encoder: Arc<dyn TextEncoder>,
    frames: BTreeMap<String, VoxelGrid>,
}

impl Session {
    /// The text encoder is rebuilt from the checkpoint so queries land in the
    /// space the model was trained against.
    pub fn new(ckpt: &Checkpoint, frames: BTreeMap<String, VoxelGrid>) -> anyhow::Result<Self> {
        let spec = ckpt
            .meta
            .text_encoder
            .clone()
            .ok_or_else(|| anyhow::anyhow!("checkpoint carries no text encoder description"))?;
        let encoder = BasisTextEncoder::new(spec)?;
        let model = SealModel::from_checkpoint(ckpt);
        if encoder.dim() != model.config.d {
            anyhow::bail!(
                "text encoder width {} does not match model width {}",
                encoder.dim(),
                model.config.d
            );
        }
        for (id, v) in &frames {
            model
                .check_voxel(v)
                .map_err(|e| anyhow::anyhow!("frame {id}: {e}"))?;
        }
        Ok(Self {
            model,
            encoder: Arc::new(encoder),
            frames,
        })
    }

    /// Loads a checkpoint and every `*.vox` file of `frames_dir`, keyed by file stem.
    pub fn load(ckpt: &Path, frames_dir: &Path) -> anyhow::Result<Self> {
        let ck = Checkpoint::load(ckpt)?;
        Self::new(&ck, load_frame_store(frames_dir)?)
    }

    pub fn frame_ids(&self) -> Vec<String> {
        self.frames.keys().cloned().collect()
    }

    pub fn frames(&self) -> Result<Vec<FrameInfo>, ServiceError> {
        self.frames
            .iter()
            .map(|(id, v)| {
                Ok(FrameInfo {
                    frame_id: id.clone(),
                    width: v.config.width,
                    height: v.config.height,
                    preview: preview_png(v).map_err(|e| ServiceError::Internal(e.to_string()))?,
                })
            })
            .collect()
    }

    pub fn handle_infer(&self, req: &InferRequest) -> Result<InferResponse, ServiceError> {
        if req.prompts.is_empty() {
            return Err(ServiceError::Invalid("at least one prompt is required".into()));
        }
        if req.queries.is_empty() || req.queries.iter().any(|q| q.trim().is_empty()) {
            return Err(ServiceError::Invalid("at least one non-empty query is required".into()));
        }
        let voxel = self
            .frames
            .get(&req.frame_id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown frame '{}'", req.frame_id)))?;
        let queries: Vec<(String, Vec<f64>)> = req
            .queries
            .iter()
            .map(|q| (q.clone(), self.encoder.encode(q)))
            .collect();
        let text = Mat::from_vec(
            queries.len(),
            self.model.config.d,
            queries.iter().flat_map(|(_, v)| v.iter().copied()).collect(),
        );
        let out = self.model.infer(voxel, Some(&text), &req.prompts)?;
        let canonical = req.canonical.then_some(self.encoder.as_ref());
        let mut results: Vec<PromptResult> = (0..req.prompts.len())
            .map(|i| PromptResult {
                prompt_index: i,
                masks: Vec::new(),
            })
            .collect();
        for (pred, bundle) in out {
            if !req.granularity.keeps(pred.granularity) {
                continue;
            }
            let ranked = classify(&bundle.m_hat, &queries, canonical)?;
            results[pred.prompt_index].masks.push(MaskResult {
                rle: pred.mask.to_rle(),
                granularity: pred.granularity,
                label: ranked[0].label.clone(),
                score: ranked[0].score,
            });
        }
        Ok(InferResponse {
            frame_id: req.frame_id.clone(),
            height: self.model.config.height,
            width: self.model.config.width,
            results,
        })
    }
}

pub fn load_frame_store(dir: &Path) -> anyhow::Result<BTreeMap<String, VoxelGrid>> {
    let mut frames = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| anyhow::anyhow!("frame store {}: {e}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("vox") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow::anyhow!("non-utf8 frame name {}", path.display()))?
            .to_string();
        frames.insert(id, VoxelGrid::load(&path)?);
    }
    Ok(frames)
}

/// Grey PNG of the bin-summed grid: mid grey at zero, brighter for positive net polarity.
pub fn preview_png(v: &VoxelGrid) -> anyhow::Result<String> {
    let (h, w) = (v.config.height, v.config.width);
    let mut sum = vec![0f32; h * w];
    for b in 0..v.config.bins {
        for (i, s) in sum.iter_mut().enumerate() {
            *s += v.data[b * h * w + i];
        }
    }
    let m = sum.iter().fold(0f32, |a, &x| a.max(x.abs()));
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let s = sum[y as usize * w + x as usize];
        let g = if m > 0.0 { 128.0 + 127.0 * s / m } else { 128.0 };
        image::Luma([g.round().clamp(0.0, 255.0) as u8])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

/// Shared service state. A checkpoint swap replaces the whole session; requests
/// already running keep the snapshot they started with.
#[derive(Clone)]
pub struct AppState {
    session: Arc<RwLock<Arc<Session>>>,
}

impl AppState {
    pub fn new(session: Session) -> Self {
        Self {
            session: Arc::new(RwLock::new(Arc::new(session))),
        }
    }

    pub fn snapshot(&self) -> Arc<Session> {
        self.session.read().expect("session lock poisoned").clone()
    }

    pub fn replace(&self, session: Session) {
        *self.session.write().expect("session lock poisoned") = Arc::new(session);
    }
}

fn json_response<T: Serialize>(value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(body) => ([(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(e) => ServiceError::Internal(e.to_string()).into_response(),
    }
}

async fn list_frames(State(state): State<AppState>) -> Response {
    let session = state.snapshot();
    match tokio::task::spawn_blocking(move || session.frames()).await {
        Ok(Ok(frames)) => json_response(&frames),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServiceError::Internal(e.to_string()).into_response(),
    }
}

async fn infer(State(state): State<AppState>, body: Bytes) -> Response {
    let req: InferRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ServiceError::Invalid(format!("malformed request: {e}")).into_response(),
    };
    let session = state.snapshot();
    match tokio::task::spawn_blocking(move || session.handle_infer(&req)).await {
        Ok(Ok(resp)) => json_response(&resp),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServiceError::Internal(e.to_string()).into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/frames", get(list_frames))
        .route("/api/infer", post(infer))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
