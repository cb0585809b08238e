//! Wall-clock pacing. Kept in its own binary so nothing else competes for the CPU.

mod common;

use std::time::Instant;

use anmpc_service::protocol::ServerMsg;
use anmpc_service::Overrides;
use common::*;
use serde_json::json;

#[tokio::test(flavor = "multi_thread")]
async fn telemetry_arrives_every_100_ms() {
    let (addr, reg) = serve().await;
    let h = reg
        .create(
            "lab_gA",
            &Overrides {
                duration_limit: Some(8.0),
                ..Overrides::default()
            },
        )
        .unwrap();
    let mut c = Client::connect(addr).await;
    c.hello(h.id()).await;
    c.set("paused", json!(false)).await;
    let mut arrivals = Vec::new();
    loop {
        match c.recv().await {
            ServerMsg::State(f) if f.tick > 0 => arrivals.push(Instant::now()),
            ServerMsg::Result(_) => break,
            _ => {}
        }
    }
    assert_eq!(arrivals.len(), 80);
    let gaps: Vec<f64> = arrivals.windows(2).map(|w| (w[1] - w[0]).as_secs_f64() * 1e3).collect();
    let worst = gaps.iter().map(|g| (g - 100.0).abs()).fold(0.0, f64::max);
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    println!("frame spacing: mean {mean:.2} ms, worst deviation {worst:.2} ms");
    assert!(worst <= 10.0, "spacing {gaps:?}");
    assert!((mean - 100.0).abs() <= 1.0);
}
