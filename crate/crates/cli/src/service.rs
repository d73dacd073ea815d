//! HTTP session service for iterative stem generation.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use stemflow::codec::{self, ActivityMask, StemWaveform, DEFAULT_MIX_DBFS, DEFAULT_SILENCE_CUTOFF_DB};
use stemflow::corpus::{StemType, DEFAULT_CLIP_FRAMES};
use stemflow::io::wav_bytes;
use stemflow::model::Model;
use stemflow::sampler::{
    generate_conditional, generate_from_scratch, mix_stems, ContextStem, SampleConfig, SharedConditions, StemRequest,
};
use tokio::sync::Mutex as AsyncMutex;

use crate::error::ServiceError;
use crate::session::{Event, EventLog, GenerationRecord, SamplerSettings, Session, SessionStem};

pub const DATA_DIR_ENV: &str = "STEMFLOW_DATA_DIR";
pub const MAX_SAMPLER_STEPS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub frames: usize,
    /// Defaults for requests that do not override the sampler.
    pub sample: SampleConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            data_dir: std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("stemflow-data"), PathBuf::from),
            checkpoint: PathBuf::from("checkpoints/final.sfck"),
            frames: DEFAULT_CLIP_FRAMES,
            sample: SampleConfig::default(),
        }
    }
}

struct SessionSlot {
    session: AsyncMutex<Session>,
    generating: AtomicBool,
}

/// Clears the in-flight flag however the generation ends.
struct InFlight<'a>(&'a AtomicBool);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

pub struct AppState {
    model: Arc<Model>,
    checkpoint: String,
    frames: usize,
    sample: SampleConfig,
    log: EventLog,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    wav_cache: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

impl AppState {
    pub fn new(model: Model, checkpoint: String, config: &ServeConfig) -> Result<Self, ServiceError> {
        config.sample.validate()?;
        Ok(Self {
            model: Arc::new(model),
            checkpoint,
            frames: config.frames,
            sample: config.sample.clone(),
            log: EventLog::open(&config.data_dir)?,
            sessions: Mutex::new(HashMap::new()),
            wav_cache: Mutex::new(HashMap::new()),
        })
    }

    fn slot(&self, session_id: &str) -> Result<Arc<SessionSlot>, ServiceError> {
        let missing = || ServiceError::NotFound(format!("unknown session {session_id}"));
        if !EventLog::is_valid_id(session_id) {
            return Err(missing());
        }
        if let Some(s) = self.sessions.lock().expect("session map").get(session_id) {
            return Ok(Arc::clone(s));
        }
        let events = self.log.read(session_id)?.ok_or_else(missing)?;
        let session = Session::replay(&events)?;
        let mut map = self.sessions.lock().expect("session map");
        let slot = map.entry(session_id.to_string()).or_insert_with(|| {
            Arc::new(SessionSlot {
                session: AsyncMutex::new(session),
                generating: AtomicBool::new(false),
            })
        });
        Ok(Arc::clone(slot))
    }

    fn stem_wav(&self, stem: &SessionStem) -> Result<Arc<Vec<u8>>, ServiceError> {
        if let Some(b) = self.wav_cache.lock().expect("wav cache").get(&stem.stem_id) {
            return Ok(Arc::clone(b));
        }
        let bytes = Arc::new(wav_bytes(&render(stem))?);
        self.wav_cache
            .lock()
            .expect("wav cache")
            .insert(stem.stem_id.clone(), Arc::clone(&bytes));
        Ok(bytes)
    }
}

fn render(stem: &SessionStem) -> StemWaveform {
    codec::decode(&stem.latent(), Some(stem.stem_type))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub style_token: usize,
    pub tempo_bpm: u32,
    pub frames: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StemSpecWire {
    pub stem_type: StemType,
    #[serde(default)]
    pub activity_mask: Option<ActivityMask>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationRequest {
    /// Client-chosen key; a retried request with the same id returns the
    /// original result instead of generating again.
    pub request_id: Option<String>,
    pub stems: Vec<StemSpecWire>,
    pub condition_on: Vec<String>,
    pub steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub seed: Option<u64>,
    /// Optional; must match the session when given.
    pub tempo_bpm: Option<u32>,
    pub style_token: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MuteRequest {
    pub muted: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StemView {
    pub stem_id: String,
    pub stem_type: StemType,
    pub muted: bool,
    pub activity_mask: ActivityMask,
    pub requested_mask: Option<ActivityMask>,
    /// Per-frame RMS of the rendered stem.
    pub envelope: Vec<f64>,
    pub latent: Vec<f64>,
    pub wav_url: String,
    pub produced_by: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub style_token: usize,
    pub tempo_bpm: u32,
    pub frames: usize,
    pub checkpoint: String,
    pub seed_counter: u64,
    pub stems: Vec<StemView>,
    pub history: Vec<GenerationRecord>,
    pub generating: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub request_id: String,
    pub stems: Vec<StemView>,
    pub record: GenerationRecord,
}

fn stem_view(session_id: &str, s: &SessionStem) -> StemView {
    StemView {
        stem_id: s.stem_id.clone(),
        stem_type: s.stem_type,
        muted: s.muted,
        activity_mask: s.activity_mask.clone(),
        requested_mask: s.requested_mask.clone(),
        envelope: render(s).frame_rms(),
        latent: s.latent.clone(),
        wav_url: format!("/sessions/{session_id}/stems/{}/audio.wav", s.stem_id),
        produced_by: s.produced_by.clone(),
    }
}

fn session_view(s: &Session, generating: bool) -> SessionView {
    SessionView {
        session_id: s.session_id.clone(),
        style_token: s.style_token,
        tempo_bpm: s.tempo_bpm,
        frames: s.frames,
        checkpoint: s.checkpoint.clone(),
        seed_counter: s.seed_counter,
        stems: s.stems.iter().map(|st| stem_view(&s.session_id, st)).collect(),
        history: s.history.clone(),
        generating,
    }
}

fn wav_response(bytes: Arc<Vec<u8>>) -> Response {
    ([(header::CONTENT_TYPE, "audio/wav")], Body::from(bytes.as_ref().clone())).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/mix.wav", get(get_mix))
        .route("/sessions/{id}/stems/{sid}", delete(remove_stem))
        .route("/sessions/{id}/stems/{sid}/mute", post(mute_stem))
        .route("/sessions/{id}/stems/{sid}/audio.wav", get(get_stem_audio))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionView>), ServiceError> {
    let frames = req.frames.unwrap_or(app.frames);
    Session::validate_create(req.style_token, req.tempo_bpm, frames)?;
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let event = Event::Created {
        session_id: session_id.clone(),
        style_token: req.style_token,
        tempo_bpm: req.tempo_bpm,
        frames,
        seed: req.seed.unwrap_or(app.sample.seed),
        checkpoint: app.checkpoint.clone(),
    };
    app.log.append(&session_id, &event)?;
    let session = Session::replay(&[event])?;
    let view = session_view(&session, false);
    app.sessions.lock().expect("session map").insert(
        session_id,
        Arc::new(SessionSlot {
            session: AsyncMutex::new(session),
            generating: AtomicBool::new(false),
        }),
    );
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ServiceError> {
    let slot = app.slot(&id)?;
    let generating = slot.generating.load(Ordering::Acquire);
    let session = slot.session.lock().await;
    Ok(Json(session_view(&session, generating)))
}

struct Prepared {
    requests: Vec<StemRequest>,
    context: Vec<ContextStem>,
    shared: SharedConditions,
    sample: SampleConfig,
}

fn prepare(app: &AppState, session: &Session, req: &GenerationRequest) -> Result<Prepared, ServiceError> {
    if req.stems.is_empty() {
        return Err(ServiceError::Invalid("request at least one stem".into()));
    }
    if req.tempo_bpm.is_some_and(|t| t != session.tempo_bpm) {
        return Err(ServiceError::Invalid(format!(
            "session tempo is {} bpm; stems in one session share a tempo",
            session.tempo_bpm
        )));
    }
    if req.style_token.is_some_and(|s| s != session.style_token) {
        return Err(ServiceError::Invalid(format!(
            "session style token is {}",
            session.style_token
        )));
    }
    let mut requests = Vec::with_capacity(req.stems.len());
    for s in &req.stems {
        if let Some(m) = &s.activity_mask {
            if m.len() != session.frames {
                return Err(ServiceError::Invalid(format!(
                    "activity mask has {} frames, session has {}",
                    m.len(),
                    session.frames
                )));
            }
        }
        requests.push(StemRequest {
            stem_type: s.stem_type,
            activity: s.activity_mask.clone(),
        });
    }
    let mut context = Vec::with_capacity(req.condition_on.len());
    for (i, id) in req.condition_on.iter().enumerate() {
        if req.condition_on[..i].contains(id) {
            return Err(ServiceError::Invalid(format!("stem {id} listed twice in condition_on")));
        }
        let stem = session
            .stem(id)
            .ok_or_else(|| ServiceError::Invalid(format!("condition_on names unknown stem {id}")))?;
        context.push(ContextStem {
            stem_type: stem.stem_type,
            latent: stem.latent(),
        });
    }
    let steps = req.steps.unwrap_or(app.sample.num_steps);
    if steps > MAX_SAMPLER_STEPS {
        return Err(ServiceError::Invalid(format!("at most {MAX_SAMPLER_STEPS} sampler steps")));
    }
    let sample = SampleConfig {
        num_steps: steps,
        cfg_scale: req.cfg_scale.unwrap_or(app.sample.cfg_scale),
        seed: req.seed.unwrap_or_else(|| session.next_seed()),
        // a custom window is tied to the configured step count
        cfg_window: if steps == app.sample.num_steps { app.sample.cfg_window } else { None },
        ..app.sample.clone()
    };
    sample.validate()?;
    Ok(Prepared {
        requests,
        context,
        shared: SharedConditions::new(session.style_token, session.tempo_bpm, session.frames),
        sample,
    })
}

async fn generate(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<GenerationRequest>,
) -> Result<Response, ServiceError> {
    let slot = app.slot(&id)?;
    let request_id = req
        .request_id
        .clone()
        .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    {
        let session = slot.session.lock().await;
        if let Some(done) = session.generation(&request_id) {
            let stems = done
                .stem_ids
                .iter()
                .filter_map(|sid| session.stem(sid))
                .map(|s| stem_view(&id, s))
                .collect();
            let body = GenerationResponse {
                request_id,
                stems,
                record: done.clone(),
            };
            return Ok((StatusCode::OK, Json(body)).into_response());
        }
    }
    if slot
        .generating
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        return Err(ServiceError::Busy(id));
    }
    let _in_flight = InFlight(&slot.generating);
    let prepared = {
        let session = slot.session.lock().await;
        prepare(&app, &session, &req)?
    };
    let model = Arc::clone(&app.model);
    let settings = SamplerSettings {
        steps: prepared.sample.num_steps,
        cfg_scale: prepared.sample.cfg_scale,
        seed: prepared.sample.seed,
    };
    let output = tokio::task::spawn_blocking(move || {
        let p = prepared;
        if p.context.is_empty() {
            generate_from_scratch(model.as_ref(), &p.requests, &p.shared, &p.sample).map(|(g, _)| g)
        } else {
            generate_conditional(model.as_ref(), &p.context, &p.requests, &p.shared, &p.sample)
        }
    })
    .await
    .map_err(|e| ServiceError::Storage(format!("generation task failed: {e}")))??;

    let mut stems = Vec::with_capacity(output.stems.len());
    for ((latent, wave), spec) in output.latents.into_iter().zip(&output.stems).zip(&req.stems) {
        stems.push(SessionStem {
            stem_id: uuid::Uuid::new_v4().simple().to_string(),
            stem_type: spec.stem_type,
            activity_mask: codec::detect_activity(wave, DEFAULT_SILENCE_CUTOFF_DB)?,
            latent: latent.into_vec(),
            requested_mask: spec.activity_mask.clone(),
            muted: false,
            produced_by: request_id.clone(),
        });
    }
    let record = GenerationRecord {
        request_id: request_id.clone(),
        stem_types: req.stems.iter().map(|s| s.stem_type).collect(),
        condition_on: req.condition_on.clone(),
        sampler: settings,
        stem_ids: stems.iter().map(|s| s.stem_id.clone()).collect(),
    };
    let event = Event::Generated {
        record: record.clone(),
        stems: stems.clone(),
    };
    let mut session = slot.session.lock().await;
    app.log.append(&id, &event)?;
    session.apply(&event)?;
    let body = GenerationResponse {
        request_id,
        stems: stems.iter().map(|s| stem_view(&id, s)).collect(),
        record,
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn mute_stem(
    State(app): State<Arc<AppState>>,
    Path((id, sid)): Path<(String, String)>,
    body: Option<Json<MuteRequest>>,
) -> Result<Json<StemView>, ServiceError> {
    let slot = app.slot(&id)?;
    let muted = body.and_then(|Json(b)| b.muted).unwrap_or(true);
    let mut session = slot.session.lock().await;
    let current = session
        .stem(&sid)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown stem {sid}")))?;
    if current.muted != muted {
        let event = Event::Muted {
            stem_id: sid.clone(),
            muted,
        };
        app.log.append(&id, &event)?;
        session.apply(&event)?;
    }
    Ok(Json(stem_view(&id, session.stem(&sid).expect("stem present"))))
}

async fn remove_stem(
    State(app): State<Arc<AppState>>,
    Path((id, sid)): Path<(String, String)>,
) -> Result<StatusCode, ServiceError> {
    let slot = app.slot(&id)?;
    let mut session = slot.session.lock().await;
    if session.stem(&sid).is_none() {
        return if session.was_removed(&sid) {
            Ok(StatusCode::NO_CONTENT)
        } else {
            Err(ServiceError::NotFound(format!("unknown stem {sid}")))
        };
    }
    let event = Event::Removed { stem_id: sid.clone() };
    app.log.append(&id, &event)?;
    session.apply(&event)?;
    app.wav_cache.lock().expect("wav cache").remove(&sid);
    Ok(StatusCode::NO_CONTENT)
}

async fn get_stem_audio(
    State(app): State<Arc<AppState>>,
    Path((id, sid)): Path<(String, String)>,
) -> Result<Response, ServiceError> {
    let slot = app.slot(&id)?;
    let session = slot.session.lock().await;
    let stem = session
        .stem(&sid)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown stem {sid}")))?;
    Ok(wav_response(app.stem_wav(stem)?))
}

async fn get_mix(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let slot = app.slot(&id)?;
    let session = slot.session.lock().await;
    let audio: Vec<StemWaveform> = session.stems.iter().filter(|s| !s.muted).map(render).collect();
    if audio.is_empty() {
        return Err(ServiceError::Invalid("no unmuted stems to mix".into()));
    }
    let mix = codec::normalize_mix(&mix_stems(&audio)?, DEFAULT_MIX_DBFS)?;
    Ok(wav_response(Arc::new(wav_bytes(&mix)?)))
}

/// Load the checkpoint and serve until interrupted.
pub async fn serve(config: ServeConfig) -> Result<(), Box<dyn std::error::Error>> {
    let bundle = stemflow::checkpoint::CheckpointBundle::load(&config.checkpoint)?;
    let state = AppState::new(bundle.model()?, config.checkpoint.display().to_string(), &config)?;
    let app = router(Arc::new(state));
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", config.port)).await?;
    log::info!(
        "serving on {} with data dir {}",
        listener.local_addr()?,
        config.data_dir.display()
    );
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
