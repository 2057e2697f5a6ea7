//! Action-supervised baselines trained on scripted expert demonstrations.
//!
//! BC maps the observation to the next action; GCBC also sees a hindsight
//! goal from later in the same demonstration. Both reuse [`Policy`]: BC feeds
//! a constant zero goal, so it never depends on one. A diffusion policy
//! config gives the DP-BC / DP-GCBC variants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{load_episodes, save_episodes};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::oracle::expert_rollout;
use crate::par::Exec;
use crate::policy::{ChunkPolicy, Init, Policy, PolicyConfig, Window};
use crate::rng::RngStream;
use crate::types::{ActionChunk, Episode, EpisodeSource, Observation, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Bc,
    Gcbc,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Bc => "bc",
            BaselineKind::Gcbc => "gcbc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub demos_per_task: usize,
    pub steps: usize,
    /// GCBC goals are drawn `1..=goal_horizon` steps ahead.
    pub goal_horizon: usize,
    /// Evaluate GCBC with only the final oracle frame as goal.
    pub final_goal_only: bool,
    /// Chunk executions per oracle frame at evaluation.
    pub k_sub: usize,
    pub policy: PolicyConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kind: BaselineKind::Gcbc,
            demos_per_task: 20,
            steps: 20_000,
            goal_horizon: 16,
            final_goal_only: false,
            k_sub: 16,
            policy: PolicyConfig { horizon: 1, exec_horizon: 1, ..PolicyConfig::default() },
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos_per_task == 0 || self.steps == 0 || self.goal_horizon == 0 || self.k_sub == 0 {
            return Err(Error::invalid("baseline counts must be >= 1"));
        }
        self.policy.validate()
    }
}

/// Expert episodes only.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    episodes: Vec<Episode>,
    seed: u64,
}

impl DemoDataset {
    pub fn new(episodes: Vec<Episode>, seed: u64) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::invalid("empty demo dataset"));
        }
        if let Some(ep) = episodes.iter().find(|e| e.source() != EpisodeSource::Expert || !e.success()) {
            return Err(Error::invalid(format!(
                "demo dataset accepts successful expert episodes only, got {} (success={})",
                ep.source().name(),
                ep.success()
            )));
        }
        Ok(DemoDataset { episodes, seed })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn count_for(&self, task_id: u32) -> usize {
        self.episodes.iter().filter(|e| e.task().id == task_id).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_episodes(path, &format!("demos seed={}", self.seed), &self.episodes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, eps) = load_episodes(path)?;
        let seed = meta
            .strip_prefix("demos seed=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("not a demo file: {meta:?}")))?;
        Self::new(eps, seed)
    }
}

/// `n_per_task` successful expert episodes per task. Failed expert runs are
/// retried from a fresh reset, up to `10 * n_per_task` attempts per task.
pub fn generate_demos(env: &Env, tasks: &[Task], n_per_task: usize, seed: u64) -> Result<DemoDataset> {
    if n_per_task == 0 {
        return Err(Error::invalid("n_per_task must be >= 1"));
    }
    let root = RngStream::new(seed).fork("demos");
    let mut episodes = Vec::with_capacity(tasks.len() * n_per_task);
    for task in tasks {
        let mut got = 0;
        let mut attempt = 0;
        while got < n_per_task {
            if attempt >= 10 * n_per_task {
                return Err(Error::PlanningFailure(format!(
                    "only {got}/{n_per_task} demos for task {} after {attempt} attempts",
                    task.id
                )));
            }
            let mut e = env.clone();
            let mut rng = root.fork_indexed("task", u64::from(task.id)).fork_indexed("attempt", attempt as u64);
            attempt += 1;
            match expert_rollout(&mut e, task, &mut rng) {
                Ok(ep) => {
                    episodes.push(ep);
                    got += 1;
                }
                Err(Error::PlanningFailure(msg)) => log::debug!("demo retry for task {}: {msg}", task.id),
                Err(e) => return Err(e),
            }
        }
    }
    DemoDataset::new(episodes, seed)
}

/// A policy trained on demonstrations.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub policy: Policy,
}

impl ChunkPolicy for Baseline {
    fn predict_chunk(&self, _task: &Task, obs: &Observation, goal: &Observation, rng: &mut RngStream) -> Result<ActionChunk> {
        match self.kind {
            BaselineKind::Bc => self.policy.predict(obs, &zero_goal(obs), rng),
            BaselineKind::Gcbc => self.policy.predict(obs, goal, rng),
        }
    }

    fn exec_horizon(&self) -> usize {
        self.policy.config().exec_horizon
    }
}

fn zero_goal(obs: &Observation) -> Observation {
    Observation(vec![0.0; obs.len()])
}

/// BC window: the chunk starting at `i` with a zero goal.
fn bc_window(ep: &Episode, i: usize, horizon: usize) -> Result<Window> {
    let end = (i + horizon).min(ep.len());
    let acts = ep.actions()[i..end].to_vec();
    let null = acts[0].null_like();
    let obs = ep.observations()[i].clone();
    Ok(Window { goal: zero_goal(&obs), obs, chunk: ActionChunk::padded(acts, horizon, &null)? })
}

/// GCBC window: goal `k >= 1` steps after `i`.
fn gcbc_window(ep: &Episode, i: usize, k: usize, horizon: usize) -> Result<Window> {
    let mut w = bc_window(ep, i, horizon)?;
    w.goal = ep.observations()[(i + k).min(ep.len())].clone();
    Ok(w)
}

fn sample_batch(data: &DemoDataset, cfg: &BaselineConfig, rng: &mut RngStream) -> Result<Vec<Window>> {
    let h = cfg.policy.horizon;
    (0..cfg.policy.batch_size)
        .map(|_| {
            let ep = &data.episodes[rng.below(data.episodes.len())];
            let i = rng.below(ep.len());
            match cfg.kind {
                BaselineKind::Bc => bc_window(ep, i, h),
                BaselineKind::Gcbc => gcbc_window(ep, i, 1 + rng.below(cfg.goal_horizon), h),
            }
        })
        .collect()
}

fn train(data: &DemoDataset, env: &Env, cfg: &BaselineConfig, kind: BaselineKind, seed: u64, exec: Exec) -> Result<(Baseline, Vec<f32>)> {
    let cfg = BaselineConfig { kind, ..cfg.clone() };
    cfg.validate()?;
    let root = RngStream::new(seed).fork(kind.as_str());
    let mut policy = Policy::new(cfg.policy.clone(), env.obs_dim(), env.action_space(), Init::Random, &mut root.fork("init"))?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = root.fork_indexed("batch", step as u64);
        let batch = sample_batch(data, &cfg, &mut rng)?;
        match policy.train_step(&batch, &mut rng.fork("noise"), exec) {
            Ok(l) => losses.push(l),
            Err(e @ Error::NumericFault(_)) => log::warn!("{} step {step}: {e}", kind.as_str()),
            Err(e) => return Err(e),
        }
    }
    Ok((Baseline { kind, policy }, losses))
}

/// Behavior cloning: observation to next action(s). Returns per-step losses.
pub fn train_bc(data: &DemoDataset, env: &Env, cfg: &BaselineConfig, seed: u64, exec: Exec) -> Result<(Baseline, Vec<f32>)> {
    train(data, env, cfg, BaselineKind::Bc, seed, exec)
}

/// Goal-conditioned behavior cloning with hindsight goals from the demos.
pub fn train_gcbc(data: &DemoDataset, env: &Env, cfg: &BaselineConfig, seed: u64, exec: Exec) -> Result<(Baseline, Vec<f32>)> {
    train(data, env, cfg, BaselineKind::Gcbc, seed, exec)
}
