#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anmpc_service::protocol::ServerMsg;
use anmpc_service::{router, Registry, ServiceConfig};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

/// Serves the router on an ephemeral port.
pub async fn serve() -> (SocketAddr, Arc<Registry>) {
    let registry = Arc::new(Registry::with_builtins(ServiceConfig::default()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(registry.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (addr, registry)
}

/// Socket client that keeps every telemetry frame it sees.
pub struct Client {
    pub ws: Socket,
    pub telemetry: Vec<ServerMsg>,
}

impl Client {
    pub async fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
        Self {
            ws,
            telemetry: Vec::new(),
        }
    }

    pub async fn send(&mut self, msg: serde_json::Value) {
        self.ws.send(Message::text(msg.to_string())).await.unwrap();
    }

    pub async fn recv(&mut self) -> ServerMsg {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(5), self.ws.next())
                .await
                .expect("frame within 5 s")
                .expect("socket open")
                .unwrap();
            if let Message::Text(t) = msg {
                let m: ServerMsg = serde_json::from_str(&t).unwrap();
                if matches!(m, ServerMsg::State(_) | ServerMsg::Result(_)) {
                    self.telemetry.push(m.clone());
                }
                return m;
            }
        }
    }

    /// Next acknowledgement or error, recording telemetry on the way.
    pub async fn reply(&mut self) -> ServerMsg {
        loop {
            match self.recv().await {
                ServerMsg::State(_) | ServerMsg::Result(_) => continue,
                m => return m,
            }
        }
    }

    pub async fn request(&mut self, msg: serde_json::Value) -> ServerMsg {
        self.send(msg).await;
        self.reply().await
    }

    pub async fn hello(&mut self, session: &str) {
        let r = self.request(serde_json::json!({"type": "hello", "session": session})).await;
        assert!(matches!(r, ServerMsg::Ack(ref a) if a.of == "hello"), "{r:?}");
    }

    pub async fn set(&mut self, key: &str, value: serde_json::Value) -> ServerMsg {
        self.request(serde_json::json!({"type": "set", "key": key, "value": value})).await
    }

    pub async fn cmd(&mut self, v: f64, omega: f64, seq: u64) -> ServerMsg {
        self.request(serde_json::json!({"type": "cmd", "v": v, "omega": omega, "seq": seq})).await
    }

    /// Reads until the result frame arrives.
    pub async fn until_result(&mut self) {
        while !matches!(self.recv().await, ServerMsg::Result(_)) {}
    }

    pub fn seqs(&self) -> Vec<u64> {
        self.telemetry.iter().map(|m| m.seq()).collect()
    }
}
