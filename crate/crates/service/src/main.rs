use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anmpc::simulation::{load_scenario, Scenario, BUILTIN_SCENARIOS};
use anmpc_service::{router, Registry, ServiceConfig};
use clap::Parser;

#[derive(Parser)]
#[command(about = "Serve live shared-autonomy sessions over HTTP and WebSocket")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Extra scenario documents to offer next to the built-in ones.
    #[arg(long = "scenario")]
    scenarios: Vec<PathBuf>,
    /// Solve deadline in seconds; 0 disables it.
    #[arg(long, default_value_t = 0.1)]
    solve_deadline: f64,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut catalogue: Vec<Scenario> = BUILTIN_SCENARIOS
        .iter()
        .map(|n| Scenario::builtin(n))
        .collect::<Result<_, _>>()?;
    for path in &args.scenarios {
        catalogue.push(load_scenario(path)?);
    }
    let cfg = ServiceConfig {
        solve_deadline: (args.solve_deadline > 0.0).then_some(args.solve_deadline),
        ..ServiceConfig::default()
    };
    let app = router(Arc::new(Registry::new(catalogue, cfg)));
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
