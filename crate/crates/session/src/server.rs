//! HTTP service for live trainer sessions.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use xtamer_core::cnn::CnnModel;
use xtamer_core::expression::{action_catalog, decode_action, LedLayout};
use xtamer_core::face::{render_face, Emotion, FaceImage, IdentityParams};
use xtamer_core::learner::LearnerConfig;
use xtamer_core::reward::{direct_reward, RewardConfig};
use xtamer_core::som::SomConfig;

use crate::config::{derive_seed, SessionConfig, Stream, UserSource};
use crate::engine::{CalibrationReport, EpochSummary, Feedback, InteractionRecord, Phase, Presentation, Session};
use crate::error::SessionError;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Timeout(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Timeout(m) => (StatusCode::REQUEST_TIMEOUT, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Conflict(m) => ApiError::Conflict(m),
            SessionError::RewardTimeout { .. } => ApiError::Timeout(e.to_string()),
            SessionError::NotCalibrated => ApiError::Conflict(e.to_string()),
            SessionError::Core(
                xtamer_core::Error::InvalidArgument(_) | xtamer_core::Error::Parse { .. } | xtamer_core::Error::Shape { .. },
            )
            | SessionError::Config(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<xtamer_core::Error> for ApiError {
    fn from(e: xtamer_core::Error) -> Self {
        SessionError::from(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::BadRequest(e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Body<T> = Result<Json<T>, JsonRejection>;

struct Live {
    session: Session,
    pending: Option<(Presentation, Instant)>,
    presenter: ChaCha8Rng,
    identity: IdentityParams,
    noise: f64,
    timeout: Duration,
}

impl Live {
    fn render(&mut self, emotion: Emotion) -> Result<FaceImage, ApiError> {
        let seed = self.presenter.random::<u64>();
        Ok(render_face(emotion, &self.identity, self.noise, seed)?)
    }

    /// Drops the pending interaction if its reward window has passed.
    fn expire_pending(&mut self) -> Option<Duration> {
        let (p, started) = self.pending.as_ref()?;
        let waited = started.elapsed();
        if waited > self.timeout {
            self.session.discard(p);
            self.pending = None;
            return Some(waited);
        }
        None
    }
}

pub struct AppState {
    cnn: Arc<CnnModel>,
    base: SessionConfig,
    sessions: RwLock<HashMap<u64, Arc<Mutex<Live>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(base: SessionConfig, cnn: Arc<CnnModel>) -> Arc<Self> {
        Arc::new(Self {
            cnn,
            base,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn live(&self, id: u64) -> Result<Arc<Mutex<Live>>, ApiError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
    }
}

fn lock(live: &Mutex<Live>) -> std::sync::MutexGuard<'_, Live> {
    live.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn decode_image(b64: &str) -> Result<FaceImage, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::BadRequest(format!("image is not base64: {e}")))?;
    Ok(FaceImage::from_pgm(&bytes)?)
}

pub fn encode_image(image: &FaceImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(image.to_pgm())
}

fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Overrides applied to the server's base config when creating a session.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub seed: Option<u64>,
    pub calibration_samples: Option<usize>,
    pub interactions_per_epoch: Option<usize>,
    pub reward_timeout_secs: Option<f64>,
    pub identity_seed: Option<u64>,
    pub expression_noise: Option<f64>,
    pub reward: Option<RewardConfig>,
    pub learner: Option<LearnerConfig>,
    pub som: Option<SomConfig>,
}

#[derive(Debug, Serialize)]
pub struct Created {
    pub id: u64,
    pub phase: Phase,
    pub calibration: Option<CalibrationReport>,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Body<CreateRequest>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req = match body {
        Ok(Json(b)) => b,
        Err(JsonRejection::MissingJsonContentType(_)) => CreateRequest::default(),
        Err(e) => return Err(e.into()),
    };
    let mut config = app.base.clone();
    let (mut identity_seed, mut noise) = match config.user {
        UserSource::Interactive { identity_seed, expression_noise } => (identity_seed, expression_noise),
        UserSource::Simulated { .. } => (1, 0.05),
    };
    identity_seed = req.identity_seed.unwrap_or(identity_seed);
    noise = req.expression_noise.unwrap_or(noise);
    config.user = UserSource::Interactive { identity_seed, expression_noise: noise };
    if let Some(v) = req.seed {
        config.seed = v;
    }
    if let Some(v) = req.calibration_samples {
        config.calibration_samples = v;
    }
    if let Some(v) = req.interactions_per_epoch {
        config.interactions_per_epoch = v;
    }
    if let Some(v) = req.reward_timeout_secs {
        config.reward_timeout_secs = v;
    }
    if let Some(v) = req.reward {
        config.reward = v;
    }
    if let Some(v) = req.learner {
        config.learner = v;
    }
    if let Some(v) = req.som {
        config.som = v;
    }
    config.validate()?;
    let identity = IdentityParams::from_seed(identity_seed);
    if !(0.0..=xtamer_core::face::MAX_NOISE).contains(&noise) {
        return Err(ApiError::BadRequest(format!("expression_noise {noise} out of range")));
    }
    let cnn = app.cnn.clone();
    let live = tokio::task::spawn_blocking(move || -> Result<Live, SessionError> {
        let mut presenter = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::Presenter, 0));
        let mut samples = Vec::with_capacity(config.calibration_samples * Emotion::COUNT);
        for _ in 0..config.calibration_samples {
            for e in Emotion::ALL {
                samples.push((e, render_face(e, &identity, noise, presenter.random())?));
            }
        }
        let timeout = Duration::from_secs_f64(config.reward_timeout_secs);
        let mut session = Session::new(config, cnn)?;
        session.calibrate(&samples)?;
        Ok(Live {
            session,
            pending: None,
            presenter,
            identity,
            noise,
            timeout,
        })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let created = Created {
        id: app.next_id.fetch_add(1, Ordering::Relaxed),
        phase: live.session.phase(),
        calibration: live.session.calibration().map(|c| CalibrationReport {
            label_map: None,
            ..c.clone()
        }),
    };
    app.sessions
        .write()
        .expect("session map lock")
        .insert(created.id, Arc::new(Mutex::new(live)));
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Serialize)]
pub struct StateView {
    pub id: u64,
    pub phase: Phase,
    pub interactions: u64,
    pub discarded: u64,
    pub updates: u64,
    pub epochs_completed: usize,
    pub awaiting_reward: Option<Presentation>,
    pub last_record: Option<InteractionRecord>,
    pub calibration: Option<CalibrationReport>,
}

async fn get_state(State(app): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<StateView> {
    let live = app.live(id)?;
    let mut l = lock(&live);
    l.expire_pending();
    let s = &l.session;
    Ok(Json(StateView {
        id,
        phase: s.phase(),
        interactions: s.interactions(),
        discarded: s.discarded(),
        updates: s.learner().update_count(),
        epochs_completed: s.epochs().len(),
        awaiting_reward: l.pending.as_ref().map(|(p, _)| p.clone()),
        last_record: s.last_record().cloned(),
        calibration: s.calibration().cloned(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresentRequest {
    pub emotion: Option<Emotion>,
    /// Base64 PGM; rendered from `emotion` when absent.
    pub image: Option<String>,
}

async fn present(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
    req: Body<PresentRequest>,
) -> ApiResult<Presentation> {
    let Json(req) = req?;
    let live = app.live(id)?;
    let mut l = lock(&live);
    l.expire_pending();
    if let Some((p, _)) = &l.pending {
        return Err(ApiError::Conflict(format!("interaction {} is awaiting its reward", p.index)));
    }
    let image = match (&req.image, req.emotion) {
        (Some(b64), _) => decode_image(b64)?,
        (None, Some(e)) => l.render(e)?,
        (None, None) => return Err(ApiError::BadRequest("give an emotion or an image".into())),
    };
    let p = l.session.present(&image, req.emotion)?;
    l.pending = Some((p.clone(), Instant::now()));
    Ok(Json(p))
}

#[derive(Debug, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum RewardRequest {
    /// The trainer's re-enactment: a base64 PGM, or an emotion whose
    /// canonical render stands in for it.
    Mimic {
        image: Option<String>,
        emotion: Option<Emotion>,
    },
    Direct {
        value: f64,
    },
}

async fn reward(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
    req: Body<RewardRequest>,
) -> ApiResult<InteractionRecord> {
    let Json(req) = req?;
    let live = app.live(id)?;
    let mut l = lock(&live);
    let limit = l.timeout;
    if let Some(waited) = l.expire_pending() {
        return Err(SessionError::RewardTimeout {
            waited_ms: waited.as_millis(),
            limit_ms: limit.as_millis(),
        }
        .into());
    }
    let Some((p, _)) = l.pending.clone() else {
        return Err(ApiError::Conflict("no interaction is awaiting a reward".into()));
    };
    let feedback = match req {
        RewardRequest::Mimic { image, emotion } => {
            let img = match (image, emotion) {
                (Some(b64), _) => decode_image(&b64)?,
                (None, Some(e)) => render_face(e, &l.identity, 0.0, 0)?,
                (None, None) => return Err(ApiError::BadRequest("mimic needs an image or an emotion".into())),
            };
            Feedback::Mimic {
                outcome: l.session.mimicry(&p, &img)?,
                mimic_emotion: emotion,
            }
        }
        RewardRequest::Direct { value } => Feedback::Direct {
            value: direct_reward(value)?,
        },
    };
    let (record, _) = l.session.complete(&p, feedback, unix_millis())?;
    l.pending = None;
    Ok(Json(record))
}

#[derive(Debug, Serialize)]
pub struct Metrics {
    pub interactions_per_epoch: usize,
    pub interactions: u64,
    pub epochs: Vec<EpochSummary>,
}

async fn metrics(State(app): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Metrics> {
    let live = app.live(id)?;
    let l = lock(&live);
    Ok(Json(Metrics {
        interactions_per_epoch: l.session.config().interactions_per_epoch,
        interactions: l.session.interactions(),
        epochs: l.session.epochs().to_vec(),
    }))
}

async fn catalog() -> Json<Vec<LedLayout>> {
    Json(action_catalog().iter().map(|a| a.led_layout()).collect())
}

async fn render(Path(encoding): Path<String>) -> ApiResult<LedLayout> {
    Ok(Json(decode_action(&encoding)?.led_layout()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/present", post(present))
        .route("/sessions/{id}/reward", post(reward))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/catalog", get(catalog))
        .route("/render/{encoding}", get(render))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}
