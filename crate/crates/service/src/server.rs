//! HTTP endpoints and the session socket.

use std::sync::Arc;

use anmpc::simulation::log::to_jsonl_string;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::{self, error::RecvError};

use crate::error::ServiceError;
use crate::protocol::{Ack, ClientMsg, ErrorFrame, Mode, ServerMsg};
use crate::session::{Overrides, Registry, SessionHandle};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self {
            Self::UnknownScenario(_) | Self::UnknownSession(_) => StatusCode::NOT_FOUND,
            Self::SessionNotRunning(_) => StatusCode::CONFLICT,
            Self::InvalidValue(_) | Self::Protocol(_) => StatusCode::BAD_REQUEST,
        };
        let body = serde_json::json!({ "error": self.code(), "message": self.to_string() });
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub scenario: String,
    #[serde(default)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub scenario: String,
    pub mode: Mode,
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/scenarios", get(list_scenarios))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/log", get(session_log))
        .route("/ws", get(socket))
        .with_state(registry)
}

async fn list_scenarios(State(reg): State<Arc<Registry>>) -> Response {
    Json(reg.scenarios()).into_response()
}

async fn create_session(
    State(reg): State<Arc<Registry>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ServiceError> {
    let h = reg.create(&req.scenario, &req.overrides)?;
    log::info!("session {} created on {}", h.id(), h.scenario());
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: h.id().to_owned(),
            scenario: h.scenario().to_owned(),
            mode: h.mode(),
        }),
    ))
}

async fn session_log(
    State(reg): State<Arc<Registry>>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let h = reg.get(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], to_jsonl_string(&h.log())).into_response())
}

async fn socket(State(reg): State<Arc<Registry>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |s| serve_socket(s, reg))
}

/// Per-connection protocol state, independent of the transport.
pub struct Connection {
    registry: Arc<Registry>,
    session: Option<Arc<SessionHandle>>,
    seq: u64,
}

impl Connection {
    pub fn new(registry: Arc<Registry>) -> Self {
        Self {
            registry,
            session: None,
            seq: 0,
        }
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    fn error(&mut self, e: ServiceError) -> ServerMsg {
        ServerMsg::Error(ErrorFrame {
            session_id: self.session.as_ref().map(|h| h.id().to_owned()),
            seq: self.next_seq(),
            code: e.code().to_owned(),
            message: e.to_string(),
        })
    }

    fn ack(&mut self, of: &str, client_seq: Option<u64>, dropped: bool) -> ServerMsg {
        ServerMsg::Ack(Ack {
            session_id: self.session.as_ref().map(|h| h.id().to_owned()).unwrap_or_default(),
            seq: self.next_seq(),
            of: of.to_owned(),
            client_seq,
            dropped,
        })
    }

    /// Handles one text message. A `hello` also returns the new telemetry subscription.
    pub fn handle(&mut self, text: &str) -> (ServerMsg, Option<broadcast::Receiver<ServerMsg>>) {
        let msg = match serde_json::from_str::<ClientMsg>(text) {
            Ok(m) => m,
            Err(e) => return (self.error(ServiceError::Protocol(e.to_string())), None),
        };
        if let ClientMsg::Hello { session } = &msg {
            return match self.registry.get(session) {
                Ok(h) => {
                    let rx = h.subscribe();
                    h.request_snapshot();
                    self.session = Some(h);
                    (self.ack("hello", None, false), Some(rx))
                }
                Err(e) => (self.error(e), None),
            };
        }
        let Some(h) = self.session.clone() else {
            return (
                self.error(ServiceError::UnknownSession("no hello received".into())),
                None,
            );
        };
        let outcome = match msg {
            ClientMsg::Hello { .. } => unreachable!(),
            ClientMsg::Cmd { v, omega, seq } => h.command(v, omega, seq).map(|d| ("cmd", Some(seq), d)),
            ClientMsg::Set { key, value } => match key.as_str() {
                "lambda" => value
                    .as_f64()
                    .ok_or_else(|| ServiceError::InvalidValue("lambda must be a number".into()))
                    .and_then(|l| h.set_lambda(l)),
                "paused" => value
                    .as_bool()
                    .ok_or_else(|| ServiceError::InvalidValue("paused must be a boolean".into()))
                    .and_then(|p| h.set_paused(p)),
                other => Err(ServiceError::Protocol(format!("unknown setting `{other}`"))),
            }
            .map(|()| ("set", None, false)),
            ClientMsg::Reset => {
                h.reset();
                Ok(("reset", None, false))
            }
        };
        match outcome {
            Ok((of, client_seq, dropped)) => (self.ack(of, client_seq, dropped), None),
            Err(e) => (self.error(e), None),
        }
    }
}

async fn next_frame(rx: &mut Option<broadcast::Receiver<ServerMsg>>) -> Option<ServerMsg> {
    let Some(rx) = rx else {
        return std::future::pending().await;
    };
    loop {
        match rx.recv().await {
            Ok(m) => return Some(m),
            Err(RecvError::Lagged(n)) => log::warn!("slow client skipped {n} frames"),
            Err(RecvError::Closed) => return None,
        }
    }
}

async fn serve_socket(socket: WebSocket, registry: Arc<Registry>) {
    let (mut sink, mut stream) = socket.split();
    let mut conn = Connection::new(registry);
    let mut frames = None;
    loop {
        let out = tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let (reply, rx) = conn.handle(&text);
                    if rx.is_some() {
                        frames = rx;
                    }
                    reply
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => continue,
            },
            frame = next_frame(&mut frames) => match frame {
                Some(m) => m,
                None => {
                    frames = None;
                    continue;
                }
            },
        };
        let text = serde_json::to_string(&out).expect("frames serialize");
        if sink.send(Message::Text(text.into())).await.is_err() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::ServiceConfig;

    fn conn() -> Connection {
        Connection::new(Arc::new(Registry::with_builtins(ServiceConfig::default())))
    }

    fn code(m: &ServerMsg) -> &str {
        match m {
            ServerMsg::Error(e) => &e.code,
            _ => "",
        }
    }

    #[test]
    fn messages_before_hello_are_refused() {
        let mut c = conn();
        let (reply, _) = c.handle(r#"{"type":"cmd","v":0.1,"omega":0,"seq":1}"#);
        assert_eq!(code(&reply), "UnknownSession");
        let (reply, _) = c.handle(r#"{"type":"hello","session":"nope"}"#);
        assert_eq!(code(&reply), "UnknownSession");
        let (reply, _) = c.handle("not json");
        assert_eq!(code(&reply), "Protocol");
        assert_eq!(reply.seq(), 2);
    }

    #[test]
    fn paused_session_refuses_commands_until_resumed() {
        let mut c = conn();
        let h = c.registry.create("open", &Overrides::default()).unwrap();
        let (reply, rx) = c.handle(&format!(r#"{{"type":"hello","session":"{}"}}"#, h.id()));
        assert!(matches!(reply, ServerMsg::Ack(ref a) if a.of == "hello"));
        assert!(rx.is_some());
        let (reply, _) = c.handle(r#"{"type":"cmd","v":0.3,"omega":0,"seq":1}"#);
        assert_eq!(code(&reply), "SessionNotRunning");
        c.handle(r#"{"type":"set","key":"paused","value":false}"#);
        let (reply, _) = c.handle(r#"{"type":"cmd","v":0.3,"omega":0,"seq":1}"#);
        assert!(matches!(reply, ServerMsg::Ack(ref a) if a.client_seq == Some(1) && !a.dropped));
        let (reply, _) = c.handle(r#"{"type":"cmd","v":0.3,"omega":0,"seq":1}"#);
        assert!(matches!(reply, ServerMsg::Ack(ref a) if a.dropped));
        c.handle(r#"{"type":"set","key":"paused","value":true}"#);
    }

    #[test]
    fn settings_are_checked() {
        let mut c = conn();
        let h = c.registry.create("open", &Overrides::default()).unwrap();
        c.handle(&format!(r#"{{"type":"hello","session":"{}"}}"#, h.id()));
        for (msg, want) in [
            (r#"{"type":"set","key":"lambda","value":2.0}"#, "InvalidValue"),
            (r#"{"type":"set","key":"lambda","value":"high"}"#, "InvalidValue"),
            (r#"{"type":"set","key":"paused","value":1}"#, "InvalidValue"),
            (r#"{"type":"set","key":"gamma","value":0.2}"#, "Protocol"),
        ] {
            assert_eq!(code(&c.handle(msg).0), want, "{msg}");
        }
        assert!(matches!(
            c.handle(r#"{"type":"set","key":"lambda","value":0.5}"#).0,
            ServerMsg::Ack(_)
        ));
        assert!(matches!(c.handle(r#"{"type":"reset"}"#).0, ServerMsg::Ack(_)));
    }
}
