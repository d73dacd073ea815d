use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use stemflow::io::read_wav;
use stemflow::model::{Model, ModelConfig};
use stemflow::sampler::SampleConfig;
use stemflow_cli::service::{router, AppState, ServeConfig};
use stemflow_cli::session::{EventLog, Session};
use tower::ServiceExt;

const FRAMES: usize = 16;

fn small_model() -> Model {
    let mut m = Model::init(ModelConfig {
        hidden_width: 16,
        num_blocks: 1,
        embed_dim: 8,
        time_features: 8,
        activity_dim: 4,
        parameter_seed: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    // a nonzero head so generated stems are audible
    for info in m.layout.tensors.clone() {
        if info.name.starts_with("head.") {
            for (i, p) in m.params[info.range()].iter_mut().enumerate() {
                *p = ((i * 7919 % 13) as f64 - 6.0) * 0.05;
            }
        }
    }
    m
}

fn app(data_dir: &std::path::Path) -> Router {
    let config = ServeConfig {
        data_dir: data_dir.to_path_buf(),
        frames: FRAMES,
        sample: SampleConfig {
            num_steps: 4,
            cfg_window: None,
            ..SampleConfig::default()
        },
        ..ServeConfig::default()
    };
    router(Arc::new(AppState::new(small_model(), "test.sfck".into(), &config).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(app: &Router) -> String {
    let (s, v) = call_json(app, "POST", "/sessions", Some(json!({"style_token": 3, "tempo_bpm": 120}))).await;
    assert_eq!(s, StatusCode::CREATED);
    v["session_id"].as_str().unwrap().to_string()
}

fn ids(v: &Value) -> Vec<String> {
    v["stems"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stem_id"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn healthz() {
    let dir = tempfile::tempdir().unwrap();
    let (s, v) = call_json(&app(dir.path()), "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn iterative_session_flow() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = new_session(&app).await;

    let (s, first) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/generate"),
        Some(json!({"stems": [{"stem_type": "drums"}]})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let drums = ids(&first);
    assert_eq!(drums.len(), 1);

    let (s, second) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/generate"),
        Some(json!({"stems": [{"stem_type": "bass"}, {"stem_type": "keys"}], "condition_on": drums})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(second["record"]["condition_on"], json!(drums));

    let (s, view) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(view["stems"].as_array().unwrap().len(), 3);
    assert_eq!(view["history"].as_array().unwrap().len(), 2);
    let stem = &view["stems"][0];
    assert_eq!(stem["stem_type"], "drums");
    assert_eq!(stem["envelope"].as_array().unwrap().len(), FRAMES);
    assert_eq!(stem["activity_mask"].as_str().unwrap().len(), FRAMES);

    let (s, wav) = call(&app, "GET", stem["wav_url"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(read_wav(&wav).unwrap().samples.len(), FRAMES * 128);

    let (s, mix) = call(&app, "GET", &format!("/sessions/{id}/mix.wav"), None).await;
    assert_eq!(s, StatusCode::OK);
    let w = read_wav(&mix).unwrap();
    let db = 20.0 * w.rms().log10();
    assert!((db + 16.0).abs() <= 0.1, "mix at {db} dBFS");

    let all = ids(&view);
    let (s, muted) = call_json(&app, "POST", &format!("/sessions/{id}/stems/{}/mute", all[1]), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(muted["muted"], true);
    let (_, mix2) = call(&app, "GET", &format!("/sessions/{id}/mix.wav"), None).await;
    assert_ne!(mix, mix2);
    let (s, _) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/stems/{}/mute", all[1]),
        Some(json!({"muted": false})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);

    let (s, _) = call(&app, "DELETE", &format!("/sessions/{id}/stems/{}", all[0]), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, "DELETE", &format!("/sessions/{id}/stems/{}", all[0]), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (_, view) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(ids(&view), all[1..].to_vec());
}

#[tokio::test]
async fn replay_matches_live_state() {
    let dir = tempfile::tempdir().unwrap();
    let app1 = app(dir.path());
    let id = new_session(&app1).await;
    let (_, g) = call_json(
        &app1,
        "POST",
        &format!("/sessions/{id}/generate"),
        Some(json!({"stems": [{"stem_type": "drums"}, {"stem_type": "pad"}]})),
    )
    .await;
    let stems = ids(&g);
    call(&app1, "POST", &format!("/sessions/{id}/stems/{}/mute", stems[0]), None).await;
    call(&app1, "DELETE", &format!("/sessions/{id}/stems/{}", stems[1]), None).await;
    let (_, live) = call_json(&app1, "GET", &format!("/sessions/{id}"), None).await;

    // a fresh service instance only has the log on disk
    let app2 = app(dir.path());
    let (s, reloaded) = call_json(&app2, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(live, reloaded);

    let events = EventLog::open(dir.path()).unwrap().read(&id).unwrap().unwrap();
    assert_eq!(events.len(), 4);
    let replayed = Session::replay(&events).unwrap();
    assert_eq!(replayed.stems.len(), 1);
    assert!(replayed.stems[0].muted);
}

#[tokio::test]
async fn retried_request_id_returns_original() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = new_session(&app).await;
    let body = json!({"request_id": "req-1", "stems": [{"stem_type": "lead"}]});
    let (s1, a) = call_json(&app, "POST", &format!("/sessions/{id}/generate"), Some(body.clone())).await;
    let (s2, b) = call_json(&app, "POST", &format!("/sessions/{id}/generate"), Some(body)).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::OK));
    assert_eq!(a, b);
    let (_, view) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(view["history"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn same_seed_same_stems() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let mut latents = Vec::new();
    for _ in 0..2 {
        let id = new_session(&app).await;
        let (_, g) = call_json(
            &app,
            "POST",
            &format!("/sessions/{id}/generate"),
            Some(json!({"stems": [{"stem_type": "guitar"}], "seed": 99})),
        )
        .await;
        latents.push(g["stems"][0]["latent"].clone());
    }
    assert_eq!(latents[0], latents[1]);
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, _) = call(&app, "GET", "/sessions/doesnotexist", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/sessions/..%2Fetc", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"style_token": 0, "tempo_bpm": 100}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"style_token": 99, "tempo_bpm": 120}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let id = new_session(&app).await;
    let gen = format!("/sessions/{id}/generate");
    let cases = [
        json!({"stems": []}),
        json!({"stems": [{"stem_type": "kazoo"}]}),
        json!({"stems": [{"stem_type": "bass"}], "tempo_bpm": 90}),
        json!({"stems": [{"stem_type": "bass"}], "condition_on": ["missing"]}),
        json!({"stems": [{"stem_type": "bass", "activity_mask": "0101"}]}),
        json!({"stems": [{"stem_type": "bass"}], "steps": 0}),
    ];
    for body in cases {
        let (s, _) = call(&app, "POST", &gen, Some(body.clone())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
    let (s, _) = call(&app, "GET", &format!("/sessions/{id}/mix.wav"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/stems/nope/mute"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "DELETE", &format!("/sessions/{id}/stems/nope"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", &format!("/sessions/{id}/stems/nope/audio.wav"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, view) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert!(view["history"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn concurrent_generation_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = new_session(&app).await;
    let gen = format!("/sessions/{id}/generate");
    let slow = json!({"stems": [{"stem_type": "drums"}, {"stem_type": "bass"}], "steps": 400});
    let quick = json!({"stems": [{"stem_type": "keys"}]});
    let (a, b) = tokio::join!(call(&app, "POST", &gen, Some(slow)), call(&app, "POST", &gen, Some(quick)));
    assert_eq!(a.0, StatusCode::CREATED);
    assert_eq!(b.0, StatusCode::CONFLICT);
    let (_, view) = call_json(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(view["history"].as_array().unwrap().len(), 1);
    assert_eq!(view["stems"].as_array().unwrap().len(), 2);
    assert_eq!(view["generating"], false);
    let (s, _) = call(&app, "POST", &gen, Some(json!({"stems": [{"stem_type": "keys"}]}))).await;
    assert_eq!(s, StatusCode::CREATED);
}
