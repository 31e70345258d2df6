use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use distrisk_core::checkpoint::Checkpoint;
use distrisk_core::distill::{init_student, student_checkpoint};
use distrisk_core::envs::{EnvConfig, Task};
use distrisk_core::policy::NetworkConfig;
use distrisk_core::quantile::dist_mean;
use distrisk_core::risk::{distorted_value_slice, Metric, RiskSpec};
use distrisk_core::seed::Seed;
use distrisk_core::trainer::{init_teacher, teacher_checkpoint, TeacherSetup, TrainerConfig};
use distrisk_serve::{router, AppState, Frame, ServeConfig};
use futures::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn teacher(metric: Metric, seed: u64) -> Checkpoint {
    let setup = TeacherSetup {
        env: EnvConfig::for_task(Task::RiskyNav),
        trainer: TrainerConfig {
            metric,
            ..TrainerConfig::for_task(Task::RiskyNav)
        },
        network: NetworkConfig::default(),
        seed,
    };
    let (policy, critic) = init_teacher(&setup).unwrap();
    teacher_checkpoint(&setup, &setup.env, &policy, &critic, 0)
}

fn fixture() -> (TempDir, AppState) {
    let dir = TempDir::new().unwrap();
    let t = teacher(Metric::Wang, 1);
    let sha = t.save(&dir.path().join("teacher.json")).unwrap();
    teacher(Metric::Cvar, 2).save(&dir.path().join("cvar.json")).unwrap();
    let mut rng = Seed(3).stream("student").rng();
    let s = init_student(&t.policy, &t.metadata.env, &NetworkConfig::default(), &mut rng).unwrap();
    student_checkpoint(&t, &sha, &s, 0).save(&dir.path().join("student.json")).unwrap();
    std::fs::write(dir.path().join("notes.json"), "{}").unwrap();
    let state = AppState::new(ServeConfig::new(dir.path()));
    (dir, state)
}

async fn call(state: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn create(state: &AppState, body: Value) -> u64 {
    let (code, v) = call(state, "POST", "/sessions", Some(body)).await;
    assert_eq!(code, StatusCode::OK, "{v}");
    v["id"].as_u64().unwrap()
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(state: &AppState, id: u64) -> Ws {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws"))
        .await
        .unwrap();
    ws
}

async fn next_frame(ws: &mut Ws, wait: Duration) -> Option<Frame> {
    loop {
        match tokio::time::timeout(wait, ws.next()).await {
            Err(_) => return None,
            Ok(Some(Ok(Message::Text(t)))) => return Some(serde_json::from_str(&t).unwrap()),
            Ok(Some(Ok(_))) => continue,
            Ok(other) => panic!("stream ended: {other:?}"),
        }
    }
}

#[tokio::test]
async fn lists_checkpoints_with_metadata() {
    let (_dir, state) = fixture();
    let (code, v) = call(&state, "GET", "/checkpoints", None).await;
    assert_eq!(code, StatusCode::OK);
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["cvar", "student", "teacher"]);
    assert_eq!(v[0]["metric"], "cvar");
    assert_eq!(v[1]["kind"], "student");
    assert_eq!(v[1]["has_critic"], false);
    assert_eq!(v[1]["teacher_sha256"], v[2]["sha256"]);
    assert_eq!(v[2]["beta_range"], json!([-1.0, 1.0]));
}

#[tokio::test]
async fn create_echoes_descriptor_paused_at_zero() {
    let (_dir, state) = fixture();
    let (code, v) = call(&state, "POST", "/sessions", Some(json!({"checkpoint": "teacher", "beta": 0.5}))).await;
    assert_eq!(code, StatusCode::OK, "{v}");
    assert_eq!(v["task"], "riskynav");
    assert_eq!(v["metric"], "wang");
    assert_eq!(v["beta"], 0.5);
    assert_eq!(v["state"], "paused");
    assert_eq!(v["t"], 0);
    let id = v["id"].as_u64().unwrap();
    let (code, got) = call(&state, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(got, v);
}

#[tokio::test]
async fn create_rejects_bad_requests() {
    let (_dir, state) = fixture();
    let cases = [
        (json!({"checkpoint": "teacher", "beta": 2.0}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"checkpoint": "cvar", "beta": 0.01}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"checkpoint": "missing"}), StatusCode::NOT_FOUND),
        (json!({"checkpoint": "../teacher"}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"checkpoint": "notes"}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"checkpoint": "teacher", "hz": 0.0}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"checkpoint": "student", "critic": "student"}), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, want) in cases {
        let (code, v) = call(&state, "POST", "/sessions", Some(body.clone())).await;
        assert_eq!(code, want, "{body} -> {v}");
        if want != StatusCode::NOT_FOUND {
            assert!(v["error"].is_string());
        }
    }
    let (code, _) = call(&state, "POST", "/sessions", Some(json!({"checkpoint": "teacher", "extra": 1}))).await;
    assert!(code.is_client_error());
    let (code, _) = call(&state, "GET", "/sessions/99", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = call(&state, "POST", "/sessions/99/beta", Some(json!({"beta": 0.0}))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn student_session_finds_teacher_critic() {
    let (_dir, state) = fixture();
    let (code, v) = call(&state, "POST", "/sessions", Some(json!({"checkpoint": "student"}))).await;
    assert_eq!(code, StatusCode::OK, "{v}");
    assert_eq!(v["kind"], "student");
    assert_eq!(v["critic"], "teacher");
}

#[tokio::test]
async fn out_of_range_beta_leaves_session_unchanged() {
    let (_dir, state) = fixture();
    let id = create(&state, json!({"checkpoint": "teacher", "beta": -0.25})).await;
    let uri = format!("/sessions/{id}/beta");
    for bad in [1.5, -1.01] {
        let (code, _) = call(&state, "POST", &uri, Some(json!({"beta": bad}))).await;
        assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (_, v) = call(&state, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["beta"], -0.25);
    let (code, v) = call(&state, "POST", &uri, Some(json!({"beta": -0.25}))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["beta"], -0.25);

    let cid = create(&state, json!({"checkpoint": "cvar", "beta": 0.5})).await;
    let (code, _) = call(&state, "POST", &format!("/sessions/{cid}/beta"), Some(json!({"beta": 0.02}))).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, v) = call(&state, "POST", &format!("/sessions/{cid}/beta"), Some(json!({"beta": 0.05}))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["beta"], 0.05);
}

fn check_frame(f: &Frame, metric: Metric) {
    assert!(f.quantiles.windows(2).all(|w| w[0] <= w[1]));
    let spec = RiskSpec::new(metric, f.beta).unwrap();
    assert_eq!(f.distorted.current.to_bits(), distorted_value_slice(&f.quantiles, &spec).to_bits());
    let keys: Vec<&str> = f.distorted.refs.keys().map(String::as_str).collect();
    match metric {
        Metric::Wang => {
            assert_eq!(keys, ["-1.0", "0.0", "1.0"]);
            assert_eq!(f.distorted.refs["0.0"].to_bits(), dist_mean(&f.quantiles).to_bits());
        }
        Metric::Cvar => {
            assert_eq!(keys, ["0.05", "0.5", "1.0"]);
            assert_eq!(f.distorted.refs["1.0"].to_bits(), dist_mean(&f.quantiles).to_bits());
        }
        Metric::Neutral => {}
    }
    for (k, v) in &f.distorted.refs {
        let spec = RiskSpec::new(metric, k.parse().unwrap()).unwrap();
        assert_eq!(v.to_bits(), distorted_value_slice(&f.quantiles, &spec).to_bits());
    }
    let mass: f64 = f.histogram.masses.iter().sum();
    assert!((mass - 1.0).abs() < 1e-12);
    assert_eq!(f.histogram.edges.len(), f.histogram.masses.len() + 1);
    assert!(!f.reward_terms.is_empty());
}

#[tokio::test]
async fn frames_are_ordered_and_recomputable() {
    let (_dir, state) = fixture();
    for (name, metric) in [("teacher", Metric::Wang), ("cvar", Metric::Cvar)] {
        let id = create(&state, json!({"checkpoint": name, "hz": 200.0, "auto_reset": true})).await;
        let mut ws = connect(&state, id).await;
        call(&state, "POST", &format!("/sessions/{id}/resume"), None).await;
        let mut prev: Option<Frame> = None;
        for _ in 0..60 {
            let f = next_frame(&mut ws, Duration::from_secs(5)).await.expect("frame");
            check_frame(&f, metric);
            if let Some(p) = &prev {
                if p.terminated {
                    assert_eq!((f.episode, f.t), (p.episode + 1, 1));
                } else {
                    assert_eq!((f.episode, f.t), (p.episode, p.t + 1));
                }
            } else {
                assert_eq!((f.episode, f.t), (1, 1));
            }
            prev = Some(f);
        }
    }
}

#[tokio::test]
async fn paused_session_emits_nothing() {
    let (_dir, state) = fixture();
    let id = create(&state, json!({"checkpoint": "teacher", "hz": 100.0, "auto_reset": true})).await;
    let mut ws = connect(&state, id).await;
    assert!(next_frame(&mut ws, Duration::from_millis(200)).await.is_none());
    call(&state, "POST", &format!("/sessions/{id}/resume"), None).await;
    assert!(next_frame(&mut ws, Duration::from_secs(5)).await.is_some());
    let (_, st) = call(&state, "POST", &format!("/sessions/{id}/pause"), None).await;
    assert_eq!(st["state"], "paused");
    let (episode, t) = (st["episode"].as_u64().unwrap(), st["t"].as_u64().unwrap() as usize);
    while let Some(f) = next_frame(&mut ws, Duration::from_millis(300)).await {
        assert!((f.episode, f.t) <= (episode, t), "frame after pause");
    }
}

#[tokio::test]
async fn beta_change_applies_at_next_boundary() {
    let (_dir, state) = fixture();
    let id = create(&state, json!({"checkpoint": "teacher", "hz": 50.0, "auto_reset": true, "beta": 0.0})).await;
    let mut ws = connect(&state, id).await;
    call(&state, "POST", &format!("/sessions/{id}/resume"), None).await;
    for _ in 0..3 {
        assert_eq!(next_frame(&mut ws, Duration::from_secs(5)).await.unwrap().beta, 0.0);
    }
    // last writer wins within one step interval
    for b in [0.3, -0.7, 0.9] {
        let (code, _) = call(&state, "POST", &format!("/sessions/{id}/beta"), Some(json!({"beta": b}))).await;
        assert_eq!(code, StatusCode::OK);
    }
    let mut seen = Vec::new();
    while seen.last() != Some(&0.9) {
        seen.push(next_frame(&mut ws, Duration::from_secs(5)).await.unwrap().beta);
        assert!(seen.len() < 10);
    }
    assert!(seen.iter().all(|&b| b == 0.0 || b == 0.9), "{seen:?}");
    for _ in 0..3 {
        assert_eq!(next_frame(&mut ws, Duration::from_secs(5)).await.unwrap().beta, 0.9);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frame_rate_tracks_configured_hz() {
    let (_dir, state) = fixture();
    let hz = 50.0;
    let id = create(&state, json!({"checkpoint": "teacher", "hz": hz, "auto_reset": true})).await;
    let mut ws = connect(&state, id).await;
    call(&state, "POST", &format!("/sessions/{id}/resume"), None).await;
    next_frame(&mut ws, Duration::from_secs(5)).await.unwrap();
    let start = Instant::now();
    for _ in 0..100 {
        next_frame(&mut ws, Duration::from_secs(5)).await.unwrap();
    }
    let rate = 100.0 / start.elapsed().as_secs_f64();
    assert!((rate - hz).abs() <= 0.2 * hz, "measured {rate:.2} Hz");
}

#[tokio::test]
async fn terminated_session_replays_terminal_frame() {
    let (_dir, state) = fixture();
    let id = create(&state, json!({"checkpoint": "teacher", "hz": 1000.0})).await;
    let mut ws = connect(&state, id).await;
    call(&state, "POST", &format!("/sessions/{id}/resume"), None).await;
    let last = loop {
        let f = next_frame(&mut ws, Duration::from_secs(5)).await.expect("frame");
        if f.terminated {
            break f;
        }
    };
    assert_ne!(last.cause, "none");
    let (_, st) = call(&state, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(st["state"], "terminated");
    assert!(next_frame(&mut ws, Duration::from_millis(100)).await.is_none());
    let (_, st) = call(&state, "POST", &format!("/sessions/{id}/resume"), None).await;
    assert_eq!(st["state"], "terminated");
    let replay = next_frame(&mut ws, Duration::from_secs(5)).await.unwrap();
    assert_eq!(replay, last);

    let (_, st) = call(&state, "POST", &format!("/sessions/{id}/reset"), None).await;
    assert_eq!((st["state"].as_str(), st["episode"].as_u64(), st["t"].as_u64()), (Some("paused"), Some(2), Some(0)));
    call(&state, "POST", &format!("/sessions/{id}/resume"), None).await;
    let f = next_frame(&mut ws, Duration::from_secs(5)).await.unwrap();
    assert_eq!((f.episode, f.t, f.terminated), (2, 1, false));
}

#[tokio::test]
async fn sessions_are_independent() {
    let (_dir, state) = fixture();
    let a = create(&state, json!({"checkpoint": "teacher", "hz": 200.0, "beta": -1.0})).await;
    let b = create(&state, json!({"checkpoint": "teacher", "hz": 200.0, "beta": 1.0})).await;
    assert_ne!(a, b);
    let (_, sa) = call(&state, "GET", &format!("/sessions/{a}"), None).await;
    let (_, sb) = call(&state, "GET", &format!("/sessions/{b}"), None).await;
    assert_ne!(sa["seed"], sb["seed"]);
    let mut wa = connect(&state, a).await;
    let mut wb = connect(&state, b).await;
    call(&state, "POST", &format!("/sessions/{a}/resume"), None).await;
    let fa = next_frame(&mut wa, Duration::from_secs(5)).await.unwrap();
    assert_eq!((fa.session, fa.beta), (a, -1.0));
    assert!(next_frame(&mut wb, Duration::from_millis(200)).await.is_none());
    call(&state, "POST", &format!("/sessions/{b}/resume"), None).await;
    let fb = next_frame(&mut wb, Duration::from_secs(5)).await.unwrap();
    assert_eq!((fb.session, fb.beta, fb.t), (b, 1.0, 1));
    assert_ne!(fa.geometry, fb.geometry);
}
