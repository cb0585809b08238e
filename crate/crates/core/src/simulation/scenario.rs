//! Arena descriptions: start pose, goal, obstacles and bounds.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::RobotState;
use crate::error::{Error, Result};
use crate::human_model::{GoalPose, Obstacle, ObstacleSet};
use crate::safety::is_safe;

const LAB: &str = include_str!("../../scenarios/lab.json");
const OPEN: &str = include_str!("../../scenarios/open.json");

/// Names accepted by [`Scenario::builtin`].
pub const BUILTIN_SCENARIOS: [&str; 3] = ["lab_gA", "lab_gB", "open"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// On-disk JSON layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDocument {
    name: String,
    start: RobotState,
    goal: GoalPose,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    goals: BTreeMap<String, GoalPose>,
    d_th: f64,
    obstacles: Vec<Obstacle>,
    bounds: Bounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inflate_obstacles: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioDocument", into = "ScenarioDocument")]
pub struct Scenario {
    pub name: String,
    pub start: RobotState,
    pub goal: GoalPose,
    /// Obstacle centers with the keep-out radius already inflated.
    pub obstacles: ObstacleSet,
    pub bounds: Bounds,
    pub inflate_obstacles: Option<f64>,
    /// Alternative named goals in the same arena.
    pub goals: BTreeMap<String, GoalPose>,
}

impl TryFrom<ScenarioDocument> for Scenario {
    type Error = Error;

    fn try_from(doc: ScenarioDocument) -> Result<Self> {
        let inflate = doc.inflate_obstacles.unwrap_or(0.0);
        if !(inflate >= 0.0 && inflate.is_finite()) {
            return Err(Error::validation(
                "inflate_obstacles",
                format!("must be non-negative, got {inflate}"),
            ));
        }
        let obstacles = ObstacleSet::new(doc.obstacles, doc.d_th + inflate)?;
        let s = Scenario {
            name: doc.name,
            start: doc.start,
            goal: doc.goal,
            obstacles,
            bounds: doc.bounds,
            inflate_obstacles: doc.inflate_obstacles,
            goals: doc.goals,
        };
        s.validate()?;
        Ok(s)
    }
}

impl From<Scenario> for ScenarioDocument {
    fn from(s: Scenario) -> Self {
        let d_th = s.nominal_d_th();
        ScenarioDocument {
            name: s.name,
            start: s.start,
            goal: s.goal,
            goals: s.goals,
            d_th,
            obstacles: s.obstacles.centers,
            bounds: s.bounds,
            inflate_obstacles: s.inflate_obstacles,
        }
    }
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        start: RobotState,
        goal: GoalPose,
        obstacles: ObstacleSet,
        bounds: Bounds,
    ) -> Result<Self> {
        let s = Self {
            name: name.into(),
            start,
            goal,
            obstacles,
            bounds,
            inflate_obstacles: None,
            goals: BTreeMap::new(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Keep-out radius before inflation.
    pub fn nominal_d_th(&self) -> f64 {
        self.obstacles.d_th - self.inflate_obstacles.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        if !(b.x_min < b.x_max && b.y_min < b.y_max)
            || ![b.x_min, b.x_max, b.y_min, b.y_max]
                .iter()
                .all(|v| v.is_finite())
        {
            return Err(Error::validation(
                "bounds",
                "need finite x_min < x_max and y_min < y_max",
            ));
        }
        if !self.start.is_finite() {
            return Err(Error::validation("start", "must be finite"));
        }
        if ![self.goal.gx, self.goal.gy, self.goal.gyaw]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::validation("goal", "must be finite"));
        }
        for (i, o) in self.obstacles.centers.iter().enumerate() {
            if !(o.x.is_finite() && o.y.is_finite()) || !b.contains(o.x, o.y) {
                return Err(Error::validation(
                    format!("obstacles[{i}]"),
                    format!("center ({}, {}) lies outside the bounds", o.x, o.y),
                ));
            }
        }
        if !is_safe(self.start, &self.obstacles) {
            let (i, d) = self.nearest(self.start.px, self.start.py);
            return Err(Error::validation(
                "start",
                format!(
                    "{d:.3} m from obstacles[{i}], inside the keep-out radius {}",
                    self.obstacles.d_th
                ),
            ));
        }
        let mut all_goals = vec![("goal".to_string(), self.goal)];
        all_goals.extend(self.goals.iter().map(|(k, g)| (format!("goals.{k}"), *g)));
        for (field, g) in all_goals {
            let (i, d) = self.nearest(g.gx, g.gy);
            if d < self.obstacles.d_th {
                return Err(Error::validation(
                    field,
                    format!(
                        "{d:.3} m from obstacles[{i}], inside the keep-out radius {}",
                        self.obstacles.d_th
                    ),
                ));
            }
        }
        Ok(())
    }

    fn nearest(&self, x: f64, y: f64) -> (usize, f64) {
        self.obstacles
            .centers
            .iter()
            .enumerate()
            .map(|(i, o)| (i, (o.x - x).hypot(o.y - y)))
            .fold(
                (usize::MAX, f64::INFINITY),
                |a, b| if b.1 < a.1 { b } else { a },
            )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScenarioDocument =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Scenario::try_from(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ScenarioDocument::from(self.clone()))
            .expect("scenario serializes")
    }

    /// Same arena with one of the named alternative goals.
    pub fn with_goal(&self, key: &str) -> Result<Self> {
        let goal = *self
            .goals
            .get(key)
            .ok_or_else(|| Error::validation("goals", format!("no goal named `{key}`")))?;
        let mut s = self.clone();
        s.goal = goal;
        s.name = format!("{}_{key}", self.name);
        Ok(s)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "lab_gA" => Self::from_json(LAB)?.with_goal("gA"),
            "lab_gB" => Self::from_json(LAB)?.with_goal("gB"),
            "open" => Self::from_json(OPEN),
            other => Err(Error::InvalidConfig(format!("unknown scenario `{other}`"))),
        }
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    Scenario::from_json(&std::fs::read_to_string(path)?)
}

/// Resolves a built-in name first, then a file path.
pub fn resolve_scenario(name_or_path: &str) -> Result<Scenario> {
    if BUILTIN_SCENARIOS.contains(&name_or_path) {
        Scenario::builtin(name_or_path)
    } else {
        load_scenario(name_or_path)
    }
}

/// Seeded 8 × 5 m arena with `n_obstacles` centers scattered between start and goal.
pub fn random_scenario(seed: u64, n_obstacles: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_th = 0.5;
    let bounds = Bounds {
        x_min: 0.0,
        x_max: 8.0,
        y_min: 0.0,
        y_max: 5.0,
    };
    let start = RobotState::new(0.6, rng.random_range(1.0..4.0), rng.random_range(-0.5..0.5));
    let goal = GoalPose::new(7.4, rng.random_range(1.0..4.0), rng.random_range(-0.5..0.5));
    let mut centers: Vec<Obstacle> = Vec::with_capacity(n_obstacles);
    let mut attempts = 0;
    while centers.len() < n_obstacles && attempts < 10_000 {
        attempts += 1;
        let c = Obstacle::new(rng.random_range(1.6..6.6), rng.random_range(0.4..4.6));
        let clear_of = |x: f64, y: f64, r: f64| (c.x - x).hypot(c.y - y) >= r;
        if clear_of(start.px, start.py, d_th + 0.4)
            && clear_of(goal.gx, goal.gy, d_th + 0.4)
            && centers.iter().all(|o| clear_of(o.x, o.y, 0.9))
        {
            centers.push(c);
        }
    }
    let obstacles = ObstacleSet::new(centers, d_th).expect("positive radius");
    Scenario::new(format!("random_{seed}"), start, goal, obstacles, bounds)
        .expect("generator keeps start and goal clear")
}
