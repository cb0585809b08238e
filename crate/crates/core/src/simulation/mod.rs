//! Scenarios, synthetic operators, the closed-loop episode runner and its metrics.

pub mod batch;
pub mod episode;
pub mod log;
pub mod metrics;
pub mod operator;
pub mod scenario;

pub use batch::{
    config_grid, run_batch, summarize, BatchRow, BatchSpec, ConfigSummary, NamedConfig,
};
pub use episode::{run_episode, ClosedLoop, EpisodeMetrics, EpisodeResult, SimConfig, TickRecord};
pub use metrics::{compute_metrics, TraceMetrics};
pub use operator::{Operator, OperatorModel, PursuitGains, Waypoint};
pub use scenario::{
    load_scenario, random_scenario, resolve_scenario, Bounds, Scenario, BUILTIN_SCENARIOS,
};
