//! Deterministic toy environments.
//!
//! - [`TableSim`]: continuous 2D pick-and-place. Actions are end-effector
//!   deltas plus a gripper channel.
//! - [`GridNav`]: discrete grid navigation with `MoveAhead`, `TurnLeft`,
//!   `TurnRight` and `Done`.

mod grid;
mod table;

use serde::{Deserialize, Serialize};

pub use grid::{Cell, GridAction, GridLayout, GridNav, GridNavState, Heading};
pub use table::{TableSim, TableSimState, TABLE_OBS_DIM};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{Action, ActionBounds, Observation, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    TableSim,
    GridNav,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::TableSim => "table_sim",
            EnvName::GridNav => "grid_nav",
        }
    }
}

impl std::str::FromStr for EnvName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table_sim" => Ok(EnvName::TableSim),
            "grid_nav" => Ok(EnvName::GridNav),
            _ => Err(Error::invalid(format!("unknown environment {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    pub t_max: usize,
    /// Per-axis limit on effector deltas (TableSim).
    pub action_limit: f32,
    pub grasp_radius: f32,
    pub target_radius: f32,
    pub grid_size: usize,
    pub n_targets: usize,
    pub layout_seed: u64,
    /// ASCII layout ('#' wall, '.' free, digits = target ids). Overrides
    /// `grid_size`, `n_targets` and `layout_seed` when present.
    pub grid_map: Option<String>,
    /// GridNav observes a 5x5 egocentric raster instead of one-hot features.
    pub raster: bool,
}

impl EnvConfig {
    pub fn table_sim() -> Self {
        EnvConfig {
            name: EnvName::TableSim,
            t_max: 120,
            action_limit: 0.05,
            grasp_radius: 0.05,
            target_radius: 0.07,
            grid_size: 9,
            n_targets: 3,
            layout_seed: 0,
            grid_map: None,
            raster: false,
        }
    }

    pub fn grid_nav() -> Self {
        EnvConfig { name: EnvName::GridNav, t_max: 40, ..Self::table_sim() }
    }

    pub fn default_for(name: EnvName) -> Self {
        match name {
            EnvName::TableSim => Self::table_sim(),
            EnvName::GridNav => Self::grid_nav(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::invalid("t_max must be >= 1"));
        }
        if !(self.grasp_radius > 0.0 && self.target_radius > 0.0 && self.action_limit > 0.0) {
            return Err(Error::invalid("radii and action limit must be > 0"));
        }
        if self.name == EnvName::GridNav && self.grid_map.is_none() {
            if self.grid_size < 4 {
                return Err(Error::invalid("grid_size must be >= 4"));
            }
            if self.n_targets == 0 || self.n_targets > 10 {
                return Err(Error::invalid("n_targets must be in 1..=10"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Continuous(ActionBounds),
    Discrete(usize),
}

impl ActionSpace {
    /// Continuous dimension, or 1 for discrete spaces.
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Continuous(b) => b.dim(),
            ActionSpace::Discrete(_) => 1,
        }
    }

    pub fn null_action(&self) -> Action {
        match self {
            ActionSpace::Continuous(b) => Action::Continuous(vec![0.0; b.dim()]),
            ActionSpace::Discrete(_) => Action::Discrete(Action::DISCRETE_NOOP),
        }
    }

    pub fn bounds(&self) -> Option<&ActionBounds> {
        match self {
            ActionSpace::Continuous(b) => Some(b),
            ActionSpace::Discrete(_) => None,
        }
    }

    pub fn n_discrete(&self) -> Option<usize> {
        match self {
            ActionSpace::Discrete(n) => Some(*n),
            ActionSpace::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

/// One environment instance. Single-owner; clone for parallel rollouts.
#[derive(Debug, Clone)]
pub enum Env {
    Table(TableSim),
    Grid(GridNav),
}

impl Env {
    pub fn new(cfg: &EnvConfig) -> Result<Env> {
        cfg.validate()?;
        Ok(match cfg.name {
            EnvName::TableSim => Env::Table(TableSim::new(cfg.clone())?),
            EnvName::GridNav => Env::Grid(GridNav::new(cfg.clone())?),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        match self {
            Env::Table(e) => e.config(),
            Env::Grid(e) => e.config(),
        }
    }

    pub fn name(&self) -> EnvName {
        self.config().name
    }

    pub fn tasks(&self) -> Vec<Task> {
        match self {
            Env::Table(e) => e.tasks(),
            Env::Grid(e) => e.tasks(),
        }
    }

    pub fn task(&self, id: u32) -> Result<Task> {
        self.tasks()
            .into_iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::invalid(format!("unknown task id {id}")))
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Table(_) => TABLE_OBS_DIM,
            Env::Grid(e) => e.obs_dim(),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::Table(e) => ActionSpace::Continuous(e.bounds().clone()),
            Env::Grid(_) => ActionSpace::Discrete(GridAction::COUNT),
        }
    }

    pub fn reset(&mut self, task: &Task, rng: &mut RngStream) -> Result<Observation> {
        match self {
            Env::Table(e) => e.reset(task, rng),
            Env::Grid(e) => e.reset(task, rng),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        match self {
            Env::Table(e) => e.step(action),
            Env::Grid(e) => e.step(action),
        }
    }

    pub fn observe(&self) -> Observation {
        match self {
            Env::Table(e) => e.observe(),
            Env::Grid(e) => e.observe(),
        }
    }

    pub fn is_done(&self) -> bool {
        match self {
            Env::Table(e) => e.is_done(),
            Env::Grid(e) => e.is_done(),
        }
    }

    pub fn is_success(&self) -> bool {
        match self {
            Env::Table(e) => e.is_success(),
            Env::Grid(e) => e.is_success(),
        }
    }

    pub fn step_count(&self) -> usize {
        match self {
            Env::Table(e) => e.state().step_count,
            Env::Grid(e) => e.state().step_count,
        }
    }

    /// Set the state decoded from `obs`, pursuing `task`. The step counter
    /// restarts at zero.
    pub fn restore(&mut self, task: &Task, obs: &Observation) -> Result<()> {
        match self {
            Env::Table(e) => e.restore(task, obs),
            Env::Grid(e) => e.restore(task, obs),
        }
    }

    /// L-infinity distance over the position components of two observations.
    pub fn position_distance(&self, a: &Observation, b: &Observation) -> f32 {
        let idx: &[usize] = match self {
            Env::Table(_) => &[0, 1, 3, 4],
            Env::Grid(e) => return e.position_distance(a, b),
        };
        idx.iter().map(|&i| (a.0[i] - b.0[i]).abs()).fold(0.0, f32::max)
    }

    /// Grasp primitive. Always false outside TableSim.
    pub fn grasp_trigger(&self, p_grasp: f64, rng: &mut RngStream) -> bool {
        match self {
            Env::Table(e) => table::grasp_trigger(e.state(), e.config().grasp_radius, p_grasp, rng),
            Env::Grid(_) => false,
        }
    }

    /// True when a closed gripper holding nothing sits within grasp range.
    pub fn empty_grip_near_object(&self) -> bool {
        match self {
            Env::Table(e) => {
                let s = e.state();
                s.gripper_closed && !s.attached && s.effector_object_distance() <= e.config().grasp_radius
            }
            Env::Grid(_) => false,
        }
    }
}
