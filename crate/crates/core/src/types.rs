//! Shared domain types.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-dimension action limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    low: Vec<f32>,
    high: Vec<f32>,
}

impl ActionBounds {
    pub fn new(low: Vec<f32>, high: Vec<f32>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::invalid("bounds dimension mismatch"));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid("bounds require low < high"));
        }
        Ok(ActionBounds { low, high })
    }

    pub fn symmetric(half_widths: &[f32]) -> Result<Self> {
        Self::new(half_widths.iter().map(|h| -h).collect(), half_widths.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f32] {
        &self.low
    }

    pub fn high(&self) -> &[f32] {
        &self.high
    }

    /// Map a raw action component into [-1, 1].
    pub fn normalize(&self, k: usize, v: f32) -> f32 {
        (2.0 * v - (self.high[k] + self.low[k])) / (self.high[k] - self.low[k])
    }

    pub fn denormalize(&self, k: usize, v: f32) -> f32 {
        0.5 * (v * (self.high[k] - self.low[k]) + (self.high[k] + self.low[k]))
    }

    pub fn clamp_in_place(&self, values: &mut [f32]) {
        for (k, v) in values.iter_mut().enumerate() {
            *v = v.clamp(self.low[k], self.high[k]);
        }
    }
}

/// Continuous delta action or discrete action index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Continuous(Vec<f32>),
    Discrete(u8),
}

impl Action {
    /// Discrete no-op, used only to pad chunks.
    pub const DISCRETE_NOOP: u8 = 4;

    pub fn as_continuous(&self) -> Option<&[f32]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }

    pub fn as_discrete(&self) -> Option<u8> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }

    /// Null action of the same kind and dimension.
    pub fn null_like(&self) -> Action {
        match self {
            Action::Continuous(v) => Action::Continuous(vec![0.0; v.len()]),
            Action::Discrete(_) => Action::Discrete(Self::DISCRETE_NOOP),
        }
    }
}

/// Clamp a continuous action into `bounds`. Discrete actions pass through.
pub fn clamp_action(a: &Action, bounds: &ActionBounds) -> Result<Action> {
    match a {
        Action::Continuous(v) => {
            if v.len() != bounds.dim() {
                return Err(Error::invalid(format!(
                    "action has {} dims, bounds have {}",
                    v.len(),
                    bounds.dim()
                )));
            }
            let mut out = v.clone();
            bounds.clamp_in_place(&mut out);
            Ok(Action::Continuous(out))
        }
        Action::Discrete(i) => Ok(Action::Discrete(*i)),
    }
}

/// `h` actions with a padding mask. Entries past `valid_len` are null actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    actions: Vec<Action>,
    valid_len: usize,
}

impl ActionChunk {
    /// Pads `actions` with `null` up to `horizon`.
    pub fn padded(mut actions: Vec<Action>, horizon: usize, null: &Action) -> Result<Self> {
        let valid_len = actions.len();
        if valid_len == 0 || valid_len > horizon {
            return Err(Error::invalid(format!(
                "chunk needs 1..={horizon} actions, got {valid_len}"
            )));
        }
        actions.resize(horizon, null.clone());
        Ok(ActionChunk { actions, valid_len })
    }

    pub fn full(actions: Vec<Action>) -> Result<Self> {
        let h = actions.len();
        let null = actions
            .first()
            .map(Action::null_like)
            .ok_or_else(|| Error::invalid("empty chunk"))?;
        Self::padded(actions, h, &null)
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn valid(&self) -> &[Action] {
        &self.actions[..self.valid_len]
    }
}

/// Fixed-length feature vector; doubles as state and goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f32>);

impl Observation {
    pub fn features(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: u32,
    pub description: String,
    pub env_name: String,
}

impl Task {
    pub fn new(id: u32, description: impl Into<String>, env_name: impl Into<String>) -> Self {
        Task { id, description: description.into(), env_name: env_name.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeSource {
    Random,
    VideoGuided,
    Expert,
}

impl EpisodeSource {
    pub const ALL: [EpisodeSource; 3] =
        [EpisodeSource::Random, EpisodeSource::VideoGuided, EpisodeSource::Expert];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EpisodeSource::Random => "random",
            EpisodeSource::VideoGuided => "video_guided",
            EpisodeSource::Expert => "expert",
        }
    }
}

/// A completed rollout: `T + 1` observations and `T` actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    task: Task,
    observations: Vec<Observation>,
    actions: Vec<Action>,
    success: bool,
    source: EpisodeSource,
}

impl Episode {
    pub fn new(
        task: Task,
        observations: Vec<Observation>,
        actions: Vec<Action>,
        success: bool,
        source: EpisodeSource,
    ) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::invalid("episode needs at least one action"));
        }
        if observations.len() != actions.len() + 1 {
            return Err(Error::invalid(format!(
                "episode has {} observations for {} actions",
                observations.len(),
                actions.len()
            )));
        }
        let dim = observations[0].len();
        if observations.iter().any(|o| o.len() != dim || !o.is_finite()) {
            return Err(Error::invalid("observations must be finite and of equal length"));
        }
        let continuous = matches!(actions[0], Action::Continuous(_));
        let adim = actions[0].as_continuous().map_or(0, <[f32]>::len);
        let consistent = actions.iter().all(|a| match a {
            Action::Continuous(v) => continuous && v.len() == adim,
            Action::Discrete(_) => !continuous,
        });
        if !consistent {
            return Err(Error::invalid("actions must share kind and dimension"));
        }
        Ok(Episode { task, observations, actions, success, source })
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Number of actions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn source(&self) -> EpisodeSource {
        self.source
    }

    pub fn obs_dim(&self) -> usize {
        self.observations[0].len()
    }

    /// Content hash over the serialized record.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        crate::codec::write_episode(&mut buf, self).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Incrementally records a rollout.
#[derive(Debug, Clone)]
pub struct EpisodeRecorder {
    task: Task,
    observations: Vec<Observation>,
    actions: Vec<Action>,
}

impl EpisodeRecorder {
    pub fn new(task: Task, first: Observation) -> Self {
        EpisodeRecorder { task, observations: vec![first], actions: Vec::new() }
    }

    pub fn push(&mut self, action: Action, next: Observation) {
        self.actions.push(action);
        self.observations.push(next);
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn last_observation(&self) -> &Observation {
        self.observations.last().expect("recorder always holds the first observation")
    }

    pub fn finish(self, success: bool, source: EpisodeSource) -> Result<Episode> {
        Episode::new(self.task, self.observations, self.actions, success, source)
    }
}
