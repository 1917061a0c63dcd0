use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use partfit_core::dataprep::{build_datasets, generate_synthetic, DataParams, DatasetPair, ObjectAssembly, Part};
use partfit_core::model::TrainedModel;
use partfit_core::partencoder::{EncoderConfig, PartEncoder};
use partfit_core::relnet::{RelNet, RelNetConfig};
use partfit_core::retrieval::{build_index, own_slot, place_part};
use partfit_service::{router, AppState, CandidatePage, Engine, ErrorBody, ServiceConfig, SessionView};

fn data() -> &'static DatasetPair {
    static D: OnceLock<DatasetPair> = OnceLock::new();
    D.get_or_init(|| {
        let classes: Vec<String> = ["table", "chair", "plane"].iter().map(|s| s.to_string()).collect();
        let raw = generate_synthetic(&classes, 4, 3).unwrap();
        build_datasets(&raw, &DataParams::default(), 3).unwrap()
    })
}

fn engine() -> Engine {
    let data = data();
    let enc_cfg = EncoderConfig {
        point_widths: vec![16, 32],
        head_widths: vec![32],
        d: 16,
        ..Default::default()
    };
    let encoder = PartEncoder::new(enc_cfg, 1).unwrap();
    let relnet = RelNet::new(
        RelNetConfig {
            d: 16,
            classes: data.labels.classes.len(),
            model_width: 16,
            ff_width: 32,
            head_hidden: 16,
            ..RelNetConfig::default()
        },
        2,
    )
    .unwrap();
    let parts: Vec<&Part> = data.warehouse.iter().collect();
    let index = build_index(&parts, &encoder.snapshot()).unwrap();
    let model = TrainedModel {
        labels: data.labels.clone(),
        encoder,
        relnet: Some(relnet),
        stats: None,
    };
    Engine::new(model, index, data.warehouse.clone()).unwrap()
}

fn state(log_dir: Option<std::path::PathBuf>) -> AppState {
    AppState::new(engine(), ServiceConfig { log_dir, ..Default::default() }).unwrap()
}

fn chair() -> &'static ObjectAssembly {
    let d = data();
    let class = d.labels.class_id("chair").unwrap();
    d.items.iter().find(|o| o.object_class == class && o.parts.len() >= 5).unwrap()
}

/// A chair with its last two parts missing, in a shifted and scaled frame.
fn chair_payload() -> Value {
    let o = chair();
    let labels = &data().labels.part_labels;
    let to_caller = |p: [f32; 3]| [p[0] * 2.0 + 1.0, p[1] * 2.0 - 3.0, p[2] * 2.0];
    let n = o.parts.len();
    let parts: Vec<Value> = o.parts[..n - 2]
        .iter()
        .map(|p| {
            let pts: Vec<[f32; 3]> = place_part(p, &own_slot(p)).unwrap().points().iter().map(|x| to_caller(*x)).collect();
            json!({"points": pts, "label": labels[p.part_label as usize]})
        })
        .collect();
    let slots: Vec<Value> = o.parts[n - 2..]
        .iter()
        .map(|p| json!({"centroid": to_caller(p.pose.centroid), "axis": p.pose.axis, "scale": p.pose.scale * 2.0}))
        .collect();
    json!({"class": "chair", "parts": parts, "slots": slots})
}

async fn call(app: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(serde_json::to_vec(&v).unwrap())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    raw(app, req).await
}

async fn raw(app: &AppState, req: Request<Body>) -> (StatusCode, Value) {
    let res = router(app.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn create(app: &AppState) -> SessionView {
    let (s, v) = call(app, "POST", "/v1/sessions", Some(chair_payload())).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn page(app: &AppState, id: &str, k: usize) -> CandidatePage {
    let (s, v) = call(app, "GET", &format!("/v1/sessions/{id}/candidates?k={k}"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn select(app: &AppState, id: &str, part_id: u64, revision: u64) -> (StatusCode, Value) {
    call(app, "POST", &format!("/v1/sessions/{id}/selection"), Some(json!({"part_id": part_id, "revision": revision}))).await
}

fn error(v: Value) -> ErrorBody {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn create_and_rank() {
    let app = state(None);
    let view = create(&app).await;
    assert_eq!(view.revision, 1);
    assert_eq!(view.active_slot, Some(0));
    assert_eq!(view.parts.len(), chair().parts.len() - 2);
    let p = page(&app, &view.id, 10).await;
    assert_eq!(p.candidates.len(), 10);
    assert!(p.candidates.windows(2).all(|w| w[0].suitability >= w[1].suitability));
    assert!(p.candidates.iter().enumerate().all(|(i, c)| c.rank == i));
    assert_eq!(p, page(&app, &view.id, 10).await);
    // A shorter page is a prefix of a longer one.
    assert_eq!(page(&app, &view.id, 3).await.candidates[..], p.candidates[..3]);
    // Placement comes back in the caller's frame.
    let slot = &chair_payload()["slots"][0]["centroid"];
    for k in 0..3 {
        let want = slot[k].as_f64().unwrap();
        assert!((p.candidates[0].placement.centroid[k] as f64 - want).abs() < 1e-4);
    }
    // Query parts come back where the caller put them.
    let sent = &chair_payload()["parts"][0]["points"][0];
    for k in 0..3 {
        assert!((view.parts[0].points[0][k] as f64 - sent[k].as_f64().unwrap()).abs() < 1e-4);
    }
}

#[tokio::test]
async fn payload_validation() {
    let app = state(None);
    let mut empty = chair_payload();
    empty["parts"] = json!([]);
    let (s, v) = call(&app, "POST", "/v1/sessions", Some(empty)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error(v).field.as_deref(), Some("parts"));

    let mut huge = chair_payload();
    huge["parts"][1]["points"][3] = json!([0.0, 1e39, 0.0]);
    let (s, v) = call(&app, "POST", "/v1/sessions", Some(huge)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error(v).field.as_deref(), Some("parts[1].points[3]"));

    let text = serde_json::to_string(&chair_payload()).unwrap();
    let nan = text.replacen("\"points\":[[", "\"points\":[[NaN,", 1);
    let req = Request::post("/v1/sessions").body(Body::from(nan)).unwrap();
    let (s, v) = raw(&app, req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(error(v).field.unwrap().starts_with("parts[0].points"));

    let mut wrong_type = chair_payload();
    wrong_type["slots"][0]["centroid"] = json!("here");
    let (s, v) = call(&app, "POST", "/v1/sessions", Some(wrong_type)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error(v).field.as_deref(), Some("slots[0].centroid"));

    let mut unknown = chair_payload();
    unknown["class"] = json!("sofa");
    let (s, v) = call(&app, "POST", "/v1/sessions", Some(unknown)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let e = error(v);
    assert_eq!((e.code.as_str(), e.field.as_deref()), ("unknown_class", Some("class")));
    assert_eq!(app.session_count(), 0);

    let view = create(&app).await;
    for k in ["0", "101", "x"] {
        let (s, v) = call(&app, "GET", &format!("/v1/sessions/{}/candidates?k={k}", view.id), None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_eq!(error(v).field.as_deref(), Some("k"));
    }
    let (s, _) = call(&app, "GET", "/v1/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/v1/sessions/nope/candidates", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn choose_until_complete() {
    // The toy warehouse is smaller than the default page limit.
    let app = AppState::new(engine(), ServiceConfig { max_k: 20, log_dir: None }).unwrap();
    let view = create(&app).await;
    let id = view.id.clone();
    let first = page(&app, &id, 10).await;

    let top: Vec<u64> = page(&app, &id, 20).await.candidates.iter().map(|c| c.part_id).collect();
    let foreign = data().warehouse.iter().map(|p| p.part_id).find(|p| !top.contains(p)).unwrap();
    let (s, v) = select(&app, &id, foreign, 1).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(error(v).code, "rejected");
    let (s, _) = select(&app, &id, 999_999, 1).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let chosen = first.candidates[2].part_id;
    let (s, v) = select(&app, &id, chosen, 1).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let after: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(after.revision, 2);
    assert_eq!(after.parts.len(), view.parts.len() + 1);
    assert_eq!(after.parts.last().unwrap().part_id, Some(chosen));
    let slot = &chair_payload()["slots"][0]["centroid"];
    for k in 0..3 {
        let placed = after.parts.last().unwrap().centroid[k] as f64;
        assert!((placed - slot[k].as_f64().unwrap()).abs() < 1e-4);
    }
    assert_eq!(after.active_slot, Some(1));
    assert_eq!(after.history[0].choice, Some(chosen));

    let (s, v) = select(&app, &id, chosen, 1).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error(v).code, "stale_revision");
    let (_, v) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(serde_json::from_value::<SessionView>(v).unwrap(), after);

    let second = page(&app, &id, 10).await;
    assert_eq!(second.slot, Some(1));
    assert_ne!(second.candidates, first.candidates);

    let (s, v) = select(&app, &id, second.candidates[0].part_id, 2).await;
    assert_eq!(s, StatusCode::OK);
    let done: SessionView = serde_json::from_value(v).unwrap();
    assert!(done.complete);
    assert_eq!(done.active_slot, None);
    let last = page(&app, &id, 10).await;
    assert!(last.complete && last.candidates.is_empty());
    let (s, v) = select(&app, &id, second.candidates[0].part_id, 3).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error(v).code, "session_complete");
}

#[tokio::test]
async fn gets_do_not_mutate() {
    let app = state(None);
    let view = create(&app).await;
    let id = view.id.clone();
    let snapshot = |v: Value| serde_json::to_string(&v).unwrap();
    let (_, before) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    for k in [1, 10, 100] {
        page(&app, &id, k).await;
    }
    let part = data().warehouse[0].part_id;
    let (s, _) = call(&app, "GET", &format!("/v1/warehouse/parts/{part}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, after) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(snapshot(before), snapshot(after));
}

#[tokio::test]
async fn warehouse_part_round_trip() {
    let app = state(None);
    let p = &data().warehouse[5];
    let (s, v) = call(&app, "GET", &format!("/v1/warehouse/parts/{}", p.part_id), None).await;
    assert_eq!(s, StatusCode::OK);
    let view: partfit_service::PartView = serde_json::from_value(v).unwrap();
    assert_eq!(view.points, p.cloud.points());
    assert_eq!(view.total_points, p.cloud.len());
    assert_eq!(view.pose, p.pose);
    assert_eq!(view.label, data().labels.part_labels[p.part_label as usize]);
    let (s, _) = call(&app, "GET", "/v1/warehouse/parts/123456789", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "GET", "/v1/warehouse/parts/abc", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error(v).field.as_deref(), Some("id"));
}

#[tokio::test]
async fn restart_replays_the_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let app = state(Some(dir.path().to_path_buf()));
    let view = create(&app).await;
    let id = view.id.clone();
    let first = page(&app, &id, 10).await;
    let (s, _) = select(&app, &id, first.candidates[4].part_id, 1).await;
    assert_eq!(s, StatusCode::OK);
    let (_, v) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    let ranking = page(&app, &id, 20).await;
    drop(app);

    let again = state(Some(dir.path().to_path_buf()));
    assert_eq!(again.session_count(), 1);
    let (_, w) = call(&again, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(v, w);
    assert_eq!(page(&again, &id, 20).await, ranking);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn reads_during_a_write_see_whole_revisions() {
    let app = state(None);
    let view = create(&app).await;
    let id = view.id.clone();
    let base = view.parts.len();
    let first = page(&app, &id, 10).await;
    let writer = {
        let app = app.clone();
        let id = id.clone();
        let part = first.candidates[0].part_id;
        tokio::spawn(async move { select(&app, &id, part, 1).await })
    };
    let mut readers = Vec::new();
    for _ in 0..16 {
        let app = app.clone();
        let id = id.clone();
        readers.push(tokio::spawn(async move {
            let (_, v) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
            serde_json::from_value::<SessionView>(v).unwrap()
        }));
    }
    for r in readers {
        let v = r.await.unwrap();
        assert_eq!(v.parts.len(), base + (v.revision as usize - 1));
        assert_eq!(v.history.iter().filter(|h| h.choice.is_some()).count(), v.revision as usize - 1);
    }
    assert_eq!(writer.await.unwrap().0, StatusCode::OK);
}
