//! Domain data model shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval after resampling to 2.5 Hz.
pub const DT: f64 = 0.4;
pub const TARGET_FPS: f64 = 2.5;
pub const HISTORY_LEN: usize = 8;
pub const HORIZON: usize = 12;
pub const WINDOW_LEN: usize = HISTORY_LEN + HORIZON;
pub const NEIGHBOR_RADIUS: f64 = 15.0;
pub const CROP_METERS: f64 = 10.0;
pub const CROP_CELLS: usize = 64;
pub const NUM_MAP_CLASSES: usize = 6;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Pedestrian,
    Bicycle,
    Car,
    Truck,
    Bus,
}

impl AgentClass {
    pub const ALL: [AgentClass; 5] =
        [AgentClass::Pedestrian, AgentClass::Bicycle, AgentClass::Car, AgentClass::Truck, AgentClass::Bus];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Bicycle => "bicycle",
            AgentClass::Car => "car",
            AgentClass::Truck => "truck",
            AgentClass::Bus => "bus",
        }
    }
}

impl fmt::Display for AgentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgentClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        AgentClass::ALL.iter().copied().find(|c| c.label() == s).ok_or_else(|| s.to_string())
    }
}

/// Kinematic state of one agent at one timestamp (meters, m/s, seconds).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub t: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, vx: f64, vy: f64, t: f64) -> Self {
        AgentState { x, y, vx, vy, t }
    }

    pub fn at(x: f64, y: f64, t: f64) -> Self {
        AgentState { x, y, vx: 0.0, vy: 0.0, t }
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> Point {
        [self.vx, self.vy]
    }

    pub fn features(&self) -> [f64; 4] {
        [self.x, self.y, self.vx, self.vy]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.vx.is_finite() && self.vy.is_finite() && self.t.is_finite()
    }

    /// Index of this state on the 0.4 s grid, if `t` lies on it.
    pub fn step_index(&self) -> Option<i64> {
        let k = (self.t / DT).round();
        ((self.t - k * DT).abs() <= 1e-9).then_some(k as i64)
    }

    pub fn distance_to(&self, other: &AgentState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Time-ordered states of one agent. Gaps are allowed; duplicates and
/// reversals are rejected on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: String,
    pub cls: AgentClass,
    states: Vec<AgentState>,
}

impl Trajectory {
    pub fn new(agent_id: impl Into<String>, cls: AgentClass, states: Vec<AgentState>) -> Result<Self> {
        let agent_id = agent_id.into();
        for s in &states {
            if !s.is_finite() {
                return Err(Error::Invalid(format!("agent {agent_id}: non-finite state at t={}", s.t)));
            }
        }
        for w in states.windows(2) {
            if w[1].t <= w[0].t + 1e-12 {
                return Err(Error::NonMonotonicFrames { agent: agent_id, frame: (w[1].t * 1e3).round() as i64 });
            }
        }
        Ok(Trajectory { agent_id, cls, states })
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at 0.4 s grid step `k`, if present.
    pub fn state_at_step(&self, k: i64) -> Option<&AgentState> {
        let t = k as f64 * DT;
        let i = self.states.partition_point(|s| s.t < t - 1e-6);
        self.states.get(i).filter(|s| (s.t - t).abs() <= 1e-6)
    }
}

/// Per-cell semantic class grid anchored in world coordinates.
///
/// Cell `(col, row)` covers `[origin.x + col*scale, origin.x + (col+1)*scale)`
/// by the analogous y interval; storage is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticMask {
    pub width: usize,
    pub height: usize,
    grid: Vec<u8>,
    pub scale: f64,
    pub origin: Point,
}

impl SemanticMask {
    pub fn new(width: usize, height: usize, grid: Vec<u8>, scale: f64, origin: Point) -> Result<Self> {
        if grid.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height} cells"),
                got: format!("{} cells", grid.len()),
            });
        }
        if let Some(bad) = grid.iter().find(|&&c| c as usize >= NUM_MAP_CLASSES) {
            return Err(Error::Invalid(format!("mask class {bad} outside [0, {NUM_MAP_CLASSES})")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Invalid(format!("mask scale must be positive, got {scale}")));
        }
        Ok(SemanticMask { width, height, grid, scale, origin })
    }

    pub fn uniform(width: usize, height: usize, class: u8, scale: f64, origin: Point) -> Result<Self> {
        Self::new(width, height, vec![class; width * height], scale, origin)
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.grid[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, class: u8) {
        assert!((class as usize) < NUM_MAP_CLASSES);
        self.grid[row * self.width + col] = class;
    }

    /// Cell containing world point `p`, if inside the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let c = ((p[0] - self.origin[0]) / self.scale).floor();
        let r = ((p[1] - self.origin[1]) / self.scale).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height).then(|| (c as usize, r as usize))
    }

    pub fn class_at(&self, p: Point) -> Option<u8> {
        self.cell_of(p).map(|(c, r)| self.get(c, r))
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Point {
        [self.origin[0] + (col as f64 + 0.5) * self.scale, self.origin[1] + (row as f64 + 0.5) * self.scale]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    /// Frame rate of the stored trajectories.
    pub fps: f64,
    pub mask: SemanticMask,
    pub trajectories: Vec<Trajectory>,
}

/// One neighbor of the ego over the history window; `states[k]` is the
/// neighbor in the ego frame of history step `k`, or `None` where it is
/// absent or farther than the neighbor radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub agent_id: String,
    pub cls: AgentClass,
    pub states: Vec<Option<AgentState>>,
}

impl Neighbor {
    pub fn present_steps(&self) -> usize {
        self.states.iter().filter(|s| s.is_some()).count()
    }
}

/// One training/evaluation instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub sample_id: String,
    pub ego: Vec<AgentState>,
    pub future: Vec<AgentState>,
    pub ego_cls: AgentClass,
    pub neighbors: Vec<Neighbor>,
    pub map_patch: SemanticMask,
    pub goal: Point,
    pub center: Point,
    /// Whether positions are centered and scaled (see `preprocess::normalize`).
    #[serde(default)]
    pub normalized: bool,
}

impl TrajectorySample {
    pub fn validate(&self) -> Result<()> {
        if self.ego.len() != HISTORY_LEN {
            return Err(Error::LengthMismatch { expected: HISTORY_LEN, got: self.ego.len() });
        }
        if self.future.len() != HORIZON {
            return Err(Error::LengthMismatch { expected: HORIZON, got: self.future.len() });
        }
        if self.goal != self.future[HORIZON - 1].position() {
            return Err(Error::Invalid(format!("{}: goal differs from final future position", self.sample_id)));
        }
        for n in &self.neighbors {
            if n.states.len() != HISTORY_LEN {
                return Err(Error::LengthMismatch { expected: HISTORY_LEN, got: n.states.len() });
            }
        }
        if self.map_patch.width != CROP_CELLS || self.map_patch.height != CROP_CELLS {
            return Err(Error::ShapeMismatch {
                expected: format!("{CROP_CELLS}x{CROP_CELLS}"),
                got: format!("{}x{}", self.map_patch.width, self.map_patch.height),
            });
        }
        Ok(())
    }

    pub fn last_observed(&self) -> &AgentState {
        &self.ego[HISTORY_LEN - 1]
    }

    pub fn future_positions(&self) -> Vec<Point> {
        self.future.iter().map(AgentState::position).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrajectory {
    pub positions: Vec<Point>,
    pub velocities: Vec<Point>,
}

/// `K` sampled futures plus sampled goals for one ego, in world frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub sample_id: String,
    pub trajectories: Vec<PredictedTrajectory>,
    pub goals: Vec<Point>,
    pub z_goal: Vec<Vec<f64>>,
    pub z_waypoint: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    pub fn validate(&self) -> Result<()> {
        for tr in &self.trajectories {
            if tr.positions.len() != HORIZON {
                return Err(Error::LengthMismatch { expected: HORIZON, got: tr.positions.len() });
            }
            if tr.positions.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("{}: non-finite predicted position", self.sample_id)));
            }
        }
        Ok(())
    }
}
