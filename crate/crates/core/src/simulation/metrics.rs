//! Episode metrics computed from a tick trace.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::episode::TickRecord;
use crate::adaptation::SkipReason;
use crate::error::{Error, Result};
use crate::human_model::ObstacleSet;

/// Averaging window for the early and late prediction-cost means, in seconds.
pub const PREDICTION_WINDOW: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    /// Closest approach of the piecewise-linear path to any obstacle center.
    pub min_obstacle_distance: Option<f64>,
    pub path_length: f64,
    /// `Σ ‖uH_meas‖² ts`.
    pub human_effort: f64,
    /// Mean prediction cost over active (non-deadband) ticks of the first window.
    pub mean_prediction_cost_first10s: Option<f64>,
    pub mean_prediction_cost_last10s: Option<f64>,
}

pub fn point_segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + s * ab - p).norm()
}

/// Minimum over every segment of the analytic point-to-segment distance.
pub fn min_path_distance(path: &[Vector2<f64>], obstacles: &ObstacleSet) -> Option<f64> {
    let first = path.first()?;
    let pairs: Vec<_> = if path.len() == 1 {
        vec![(*first, *first)]
    } else {
        path.windows(2).map(|w| (w[0], w[1])).collect()
    };
    obstacles
        .iter()
        .flat_map(|o| {
            pairs
                .iter()
                .map(move |(a, b)| point_segment_distance(o, *a, *b))
        })
        .reduce(f64::min)
}

pub fn path_length(path: &[Vector2<f64>]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Positions visited by a trace: every tick's start state plus the final successor.
pub fn trace_path(trace: &[TickRecord]) -> Vec<Vector2<f64>> {
    let mut path: Vec<_> = trace.iter().map(|r| r.state.position()).collect();
    if let Some(last) = trace.last() {
        path.push(last.next_state.position());
    }
    path
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn compute_metrics(
    trace: &[TickRecord],
    obstacles: &ObstacleSet,
    ts: f64,
) -> Result<TraceMetrics> {
    let last = trace.last().ok_or(Error::EmptyTrace)?;
    let path = trace_path(trace);
    let end = last.t + ts;
    let active = || {
        trace
            .iter()
            .filter(|r| r.adaptation.skip_reason != SkipReason::Deadband)
    };
    Ok(TraceMetrics {
        min_obstacle_distance: min_path_distance(&path, obstacles),
        path_length: path_length(&path),
        human_effort: trace.iter().map(|r| r.u_h_meas.norm().powi(2) * ts).sum(),
        mean_prediction_cost_first10s: mean(
            active()
                .filter(|r| r.t < PREDICTION_WINDOW)
                .map(|r| r.adaptation.cost_j),
        ),
        mean_prediction_cost_last10s: mean(
            active()
                .filter(|r| r.t >= end - PREDICTION_WINDOW)
                .map(|r| r.adaptation.cost_j),
        ),
    })
}
