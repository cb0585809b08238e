use std::sync::Arc;

use anmpc::simulation::log::read_jsonl;
use anmpc::simulation::Scenario;
use anmpc_service::protocol::{Mode, ServerMsg};
use anmpc_service::server::SessionCreated;
use anmpc_service::{router, Registry, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

async fn call(reg: &Arc<Registry>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = router(reg.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn post(body: serde_json::Value) -> Request<Body> {
    Request::post("/sessions")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn registry() -> Arc<Registry> {
    Arc::new(Registry::with_builtins(ServiceConfig::default()))
}

#[tokio::test]
async fn scenarios_are_listed() {
    let reg = registry();
    let (status, body) = call(&reg, Request::get("/scenarios").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<Scenario> = serde_json::from_slice(&body).unwrap();
    let names: Vec<_> = list.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["lab_gA", "lab_gB", "open"]);
    assert_eq!(list[0].obstacles.len(), 10);
}

#[tokio::test]
async fn sessions_start_paused_at_the_start_pose() {
    let reg = registry();
    let (status, body) = call(&reg, post(serde_json::json!({"scenario": "lab_gA"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let created: SessionCreated = serde_json::from_slice(&body).unwrap();
    assert_eq!(created.mode, Mode::Paused);
    let h = reg.get(&created.session_id).unwrap();
    let mut rx = h.subscribe();
    h.request_snapshot();
    let ServerMsg::State(f) = rx.recv().await.unwrap() else { panic!() };
    let start = Scenario::builtin("lab_gA").unwrap().start;
    assert_eq!((f.robot.x, f.robot.y, f.robot.yaw), (start.px, start.py, start.yaw));
    assert_eq!((f.tick, f.seq, f.mode), (0, 0, Mode::Paused));
    assert_eq!(f.lambda, 0.35);
}

#[tokio::test]
async fn lambda_override_makes_a_baseline_session() {
    let reg = registry();
    let (status, body) = call(&reg, post(serde_json::json!({"scenario": "open", "overrides": {"lambda": 0.0}}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let created: SessionCreated = serde_json::from_slice(&body).unwrap();
    let h = reg.get(&created.session_id).unwrap();
    let mut rx = h.subscribe();
    h.request_snapshot();
    let ServerMsg::State(f) = rx.recv().await.unwrap() else { panic!() };
    assert_eq!(f.lambda, 0.0);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let reg = registry();
    let (status, body) = call(&reg, post(serde_json::json!({"scenario": "moon"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(err["error"], "UnknownScenario");

    let (status, body) = call(&reg, post(serde_json::json!({"scenario": "open", "overrides": {"lambda": 3.0}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&body).unwrap()["error"], "InvalidValue");

    let (status, _) = call(&reg, post(serde_json::json!({"scenario": "open", "overrides": {"beta": 3.0}}))).await;
    assert!(status.is_client_error());

    let (status, body) = call(&reg, Request::get("/sessions/nope/log").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&body).unwrap()["error"], "UnknownSession");
}

#[tokio::test(flavor = "multi_thread")]
async fn log_downloads_as_json_lines() {
    let reg = registry();
    let h = reg.create("open", &Default::default()).unwrap();
    let uri = format!("/sessions/{}/log", h.id());
    let (status, body) = call(&reg, Request::get(&uri).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.is_empty());

    let mut rx = h.subscribe();
    h.set_paused(false).unwrap();
    let mut ticks = 0;
    while ticks < 3 {
        if let ServerMsg::State(f) = rx.recv().await.unwrap() {
            ticks = f.tick;
        }
    }
    h.set_paused(true).unwrap();
    let (_, body) = call(&reg, Request::get(&uri).body(Body::empty()).unwrap()).await;
    let records = read_jsonl(&body[..]).unwrap();
    assert!(records.len() >= 3);
    assert_eq!(records[..3], h.log()[..3]);
}
