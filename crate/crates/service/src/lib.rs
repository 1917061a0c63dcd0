//! HTTP facade over the retrieval engine: create a session from an incomplete
//! object, page through candidates for the active slot, choose one, repeat.
//!
//! Sessions are persisted as append-only JSON-lines event logs (one file per
//! session) and rebuilt by replay at startup. Each session carries a revision
//! that every mutation bumps; a selection naming an older revision is refused.

pub mod api;
pub mod engine;
pub mod error;

use std::collections::HashMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use partfit_core::geometry::{Normalization, PointCloud};
use partfit_core::retrieval::{advance_session, prepare_query, Session, SlotTarget};

pub use api::*;
pub use engine::Engine;
pub use error::{ApiError, ErrorBody};

/// Points per part sent over the wire.
pub const TRANSPORT_POINTS: usize = 4096;
pub const DEFAULT_K: usize = 10;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Largest page a client may request. A selection is accepted when the
    /// part is within the top `max_k` for the session's current revision,
    /// which covers every page a client could have been shown.
    pub max_k: usize,
    /// Where session event logs live; `None` keeps sessions in memory only.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_k: 100,
            log_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
struct SessionRecord {
    id: String,
    class: String,
    session: Session,
    frame: Normalization,
    /// Slots as the client sent them.
    slots: Vec<SlotTarget>,
    revision: u64,
    created_ms: u64,
    updated_ms: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Event {
    Create { id: String, request: CreateSession, at_ms: u64 },
    Select { part_id: u64, revision: u64, at_ms: u64 },
}

struct Inner {
    engine: Arc<Engine>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionRecord>>>>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn to_caller(frame: &Normalization, p: [f32; 3]) -> [f32; 3] {
    std::array::from_fn(|k| (p[k] as f64 * frame.scale + frame.centroid[k]) as f32)
}

fn slot_to_caller(frame: &Normalization, s: &SlotTarget) -> SlotTarget {
    SlotTarget {
        centroid: to_caller(frame, s.centroid),
        axis: s.axis,
        scale: s.scale.map(|v| (v as f64 * frame.scale) as f32),
    }
}

fn decimate(cloud: &PointCloud) -> Vec<[f32; 3]> {
    cloud.strided(TRANSPORT_POINTS).into_points()
}

fn open_session(engine: &Engine, id: String, req: &CreateSession, at_ms: u64) -> Result<SessionRecord, ApiError> {
    let class_id = engine.labels.class_id(&req.class).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "unknown_class",
            format!("unknown class {:?}; known: {:?}", req.class, engine.labels.classes),
        )
        .field("class")
    })?;
    if req.parts.is_empty() {
        return Err(ApiError::invalid("parts", "at least one part is required"));
    }
    let mut parts = Vec::with_capacity(req.parts.len());
    for (i, p) in req.parts.iter().enumerate() {
        if p.points.is_empty() {
            return Err(ApiError::invalid(format!("parts[{i}].points"), "part has no points"));
        }
        if let Some(j) = p.points.iter().position(|x| !x.iter().all(|v| v.is_finite())) {
            return Err(ApiError::invalid(format!("parts[{i}].points[{j}]"), "coordinates must be finite"));
        }
        let label = match &p.label {
            None => None,
            Some(name) => Some(engine.labels.part_label_id(name).ok_or_else(|| {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_label", format!("unknown part label {name:?}"))
                    .field(format!("parts[{i}].label"))
            })?),
        };
        let cloud = PointCloud::new(p.points.clone()).map_err(|e| ApiError::invalid(format!("parts[{i}].points"), e.to_string()))?;
        parts.push((cloud, label));
    }
    for (i, s) in req.slots.iter().enumerate() {
        s.validate().map_err(|e| ApiError::invalid(format!("slots[{i}]"), e.to_string()))?;
    }
    let q = prepare_query(parts, &req.slots, &engine.encoder).map_err(|e| ApiError::invalid("parts", e.to_string()))?;
    let session = Session::new(class_id, q.parts, q.slots)?;
    Ok(SessionRecord {
        id,
        class: req.class.clone(),
        session,
        frame: q.frame,
        slots: req.slots.clone(),
        revision: 1,
        created_ms: at_ms,
        updated_ms: at_ms,
    })
}

fn apply_selection(engine: &Engine, max_k: usize, rec: &mut SessionRecord, sel: Selection, at_ms: u64) -> Result<(), ApiError> {
    if sel.revision != rec.revision {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "stale_revision",
            format!("session is at revision {}, selection names {}", rec.revision, sel.revision),
        )
        .field("revision"));
    }
    if rec.session.is_complete() {
        return Err(ApiError::new(StatusCode::CONFLICT, "session_complete", "every slot is already filled"));
    }
    let part = engine
        .part(sel.part_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown part {}", sel.part_id)).field("part_id"))?;
    let mut next = rec.session.clone();
    let shown = next.candidates(&engine.index, &engine.relnet, max_k)?;
    next.show(shown);
    advance_session(&mut next, part, &engine.index).map_err(|e| ApiError::from(e).field("part_id"))?;
    rec.session = next;
    rec.revision += 1;
    rec.updated_ms = at_ms;
    Ok(())
}

fn session_view(engine: &Engine, rec: &SessionRecord) -> SessionView {
    let s = &rec.session;
    SessionView {
        id: rec.id.clone(),
        revision: rec.revision,
        class: rec.class.clone(),
        complete: s.is_complete(),
        active_slot: (!s.is_complete()).then_some(s.active),
        parts: s
            .parts
            .iter()
            .map(|p| {
                let pts: Vec<[f32; 3]> = decimate(&p.cloud).into_iter().map(|x| to_caller(&rec.frame, x)).collect();
                SessionPartView {
                    part_id: p.part_id,
                    label: p.part_label.map(|l| engine.part_label(l).to_string()),
                    centroid: to_caller(&rec.frame, p.centroid),
                    points: pts,
                    total_points: p.cloud.len(),
                }
            })
            .collect(),
        slots: rec.slots.clone(),
        history: s.history.iter().map(|h| StepView { slot: h.slot, choice: h.choice }).collect(),
        created_ms: rec.created_ms,
        updated_ms: rec.updated_ms,
    }
}

fn candidate_page(engine: &Engine, rec: &SessionRecord, k: usize) -> Result<CandidatePage, ApiError> {
    let s = &rec.session;
    let ranked = s.candidates(&engine.index, &engine.relnet, k)?;
    let placement = s.active_slot().map(|slot| slot_to_caller(&rec.frame, slot));
    let candidates = ranked
        .into_iter()
        .map(|c| {
            let r = engine.index.get(c.part_id).expect("ranked from the index");
            CandidateView {
                part_id: c.part_id,
                rank: c.rank,
                suitability: c.suitability,
                log_prob: c.log_prob,
                label: engine.part_label(r.part_label).to_string(),
                object_class: engine.class_name(r.object_class).to_string(),
                placement: placement.expect("candidates exist only for an active slot"),
            }
        })
        .collect();
    Ok(CandidatePage {
        id: rec.id.clone(),
        revision: rec.revision,
        slot: (!s.is_complete()).then_some(s.active),
        complete: s.is_complete(),
        candidates,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::invalid(field, e.into_inner().to_string())
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

impl AppState {
    /// In-memory state plus whatever sessions the log directory holds.
    pub fn new(engine: Engine, config: ServiceConfig) -> std::io::Result<Self> {
        let state = AppState {
            inner: Arc::new(Inner {
                engine: Arc::new(engine),
                config,
                sessions: RwLock::new(HashMap::new()),
            }),
        };
        if let Some(dir) = &state.inner.config.log_dir {
            std::fs::create_dir_all(dir)?;
            state.restore(dir)?;
        }
        Ok(state)
    }

    pub fn engine(&self) -> &Engine {
        &self.inner.engine
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.read().expect("session map lock").len()
    }

    fn restore(&self, dir: &Path) -> std::io::Result<()> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        let engine = &self.inner.engine;
        let mut map = self.inner.sessions.write().expect("session map lock");
        for path in files {
            let text = std::fs::read_to_string(&path)?;
            let mut rec: Option<SessionRecord> = None;
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {msg}", path.display(), n + 1));
                let event: Event = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                match (event, rec.as_mut()) {
                    (Event::Create { id, request, at_ms }, None) => {
                        rec = Some(open_session(engine, id, &request, at_ms).map_err(|e| bad(e.body.message))?);
                    }
                    (Event::Select { part_id, revision, at_ms }, Some(r)) => {
                        apply_selection(engine, self.inner.config.max_k, r, Selection { part_id, revision }, at_ms)
                            .map_err(|e| bad(e.body.message))?;
                    }
                    _ => return Err(bad("events out of order".into())),
                }
            }
            if let Some(r) = rec {
                log::info!("restored session {} at revision {}", r.id, r.revision);
                map.insert(r.id.clone(), Arc::new(Mutex::new(r)));
            }
        }
        Ok(())
    }

    fn append(&self, id: &str, event: &Event) -> Result<(), ApiError> {
        let Some(dir) = &self.inner.config.log_dir else {
            return Ok(());
        };
        let mut line = serde_json::to_string(event).map_err(|e| ApiError::internal(e.to_string()))?;
        line.push('\n');
        let io = |e: std::io::Error| ApiError::internal(format!("session log: {e}"));
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(format!("{id}.jsonl")))
            .map_err(io)?;
        f.write_all(line.as_bytes()).map_err(io)?;
        f.sync_data().map_err(io)
    }

    fn record(&self, id: &str) -> Result<Arc<Mutex<SessionRecord>>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }

    /// A consistent copy of the session as of its latest revision.
    async fn snapshot(&self, id: &str) -> Result<SessionRecord, ApiError> {
        let rec = self.record(id)?;
        let guard = rec.lock().await;
        Ok(guard.clone())
    }
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req: CreateSession = parse_json(&body)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let at_ms = now_ms();
    let st = state.clone();
    let view = blocking(move || {
        let engine = &st.inner.engine;
        let rec = open_session(engine, id.clone(), &req, at_ms)?;
        st.append(&id, &Event::Create { id: id.clone(), request: req, at_ms })?;
        let view = session_view(engine, &rec);
        st.inner
            .sessions
            .write()
            .expect("session map lock")
            .insert(id, Arc::new(Mutex::new(rec)));
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let rec = state.snapshot(&id).await?;
    Ok(Json(session_view(state.engine(), &rec)))
}

async fn get_candidates(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<CandidatePage>, ApiError> {
    let max_k = state.inner.config.max_k;
    let k = match q.get("k") {
        None => DEFAULT_K.min(max_k),
        Some(v) => match v.parse::<usize>() {
            Ok(k) if (1..=max_k).contains(&k) => k,
            _ => return Err(ApiError::invalid("k", format!("k must be an integer in 1..={max_k}"))),
        },
    };
    let rec = state.snapshot(&id).await?;
    let st = state.clone();
    let page = blocking(move || candidate_page(st.engine(), &rec, k)).await?;
    Ok(Json(page))
}

async fn post_selection(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let sel: Selection = parse_json(&body)?;
    let rec = state.record(&id)?;
    let mut guard = rec.lock_owned().await;
    let st = state.clone();
    let view = blocking(move || {
        let engine = st.engine();
        let mut next = guard.clone();
        let at_ms = now_ms();
        apply_selection(engine, st.inner.config.max_k, &mut next, sel, at_ms)?;
        st.append(
            &next.id,
            &Event::Select {
                part_id: sel.part_id,
                revision: sel.revision,
                at_ms,
            },
        )?;
        *guard = next;
        Ok(session_view(engine, &guard))
    })
    .await?;
    Ok(Json(view))
}

async fn get_part(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<PartView>, ApiError> {
    let part_id: u64 = id
        .parse()
        .map_err(|_| ApiError::invalid("id", format!("{id:?} is not a part id")))?;
    let engine = state.engine();
    let p = engine
        .part(part_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown part {part_id}")))?;
    Ok(Json(PartView {
        part_id,
        label: engine.part_label(p.part_label).to_string(),
        object_class: engine.class_name(p.object_class).to_string(),
        source_object: p.source_object.clone(),
        pose: p.pose,
        points: decimate(&p.cloud),
        total_points: p.cloud.len(),
    }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/candidates", get(get_candidates))
        .route("/v1/sessions/{id}/selection", post(post_selection))
        .route("/v1/warehouse/parts/{id}", get(get_part))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimation_keeps_the_centroid() {
        // Uneven density: most points in one corner.
        let pts: Vec<[f32; 3]> = (0..20_000)
            .map(|i| {
                let t = i as f32 / 20_000.0;
                [t * t, (i % 97) as f32 / 97.0, ((i * 31) % 89) as f32 / 89.0]
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let small = PointCloud::new(decimate(&cloud)).unwrap();
        assert_eq!(small.len(), TRANSPORT_POINTS);
        let (a, b) = (cloud.centroid(), small.centroid());
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-2, "{a:?} {b:?}");
        }
        let few = PointCloud::new(vec![[1.0, 2.0, 3.0]; 10]).unwrap();
        assert_eq!(decimate(&few), few.points());
    }
}
