//! Frozen subgoal oracle.
//!
//! Plans are produced by decoding the start observation into an environment
//! state, running a scripted expert to completion and keeping `H` frames at
//! uniformly spaced indices along its trajectory. The same experts produce
//! demonstrations for the action-supervised baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::envs::{Env, GridAction};
use crate::error::{Error, Result};
use crate::policy::ChunkPolicy;
use crate::rng::RngStream;
use crate::types::{Action, ActionChunk, Episode, EpisodeRecorder, EpisodeSource, Observation, Task};

pub const DEFAULT_PLAN_HORIZON: usize = 7;

/// Injected oracle failure.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CorruptionMode {
    #[default]
    None,
    /// Frames `k..H` come from a plan for a different task.
    Hallucinate(usize),
    /// Gaussian noise on effector/object coordinates.
    Jitter(f32),
    /// The whole plan is for a different task.
    Mismatch,
}

impl fmt::Display for CorruptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorruptionMode::None => write!(f, "none"),
            CorruptionMode::Hallucinate(k) => write!(f, "hallucinate:{k}"),
            CorruptionMode::Jitter(s) => write!(f, "jitter:{s}"),
            CorruptionMode::Mismatch => write!(f, "mismatch"),
        }
    }
}

impl FromStr for CorruptionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let bad = || Error::invalid(format!("bad corruption mode {s:?}"));
        match (kind, arg) {
            ("none", None) => Ok(CorruptionMode::None),
            ("mismatch", None) => Ok(CorruptionMode::Mismatch),
            ("hallucinate", Some(a)) => Ok(CorruptionMode::Hallucinate(a.parse().map_err(|_| bad())?)),
            ("jitter", Some(a)) => {
                let sigma: f32 = a.parse().map_err(|_| bad())?;
                if !(sigma >= 0.0) {
                    return Err(bad());
                }
                Ok(CorruptionMode::Jitter(sigma))
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for CorruptionMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CorruptionMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered subgoal frames, start to goal.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgoalPlan {
    pub frames: Vec<Observation>,
    pub task: Task,
    pub start: Observation,
    pub corruption_applied: CorruptionMode,
}

/// Scripted TableSim controller: approach, grasp, carry, release.
fn table_expert_action(env: &Env) -> Action {
    let Env::Table(sim) = env else { unreachable!("table expert on a non-table env") };
    let s = sim.state();
    let cfg = sim.config();
    let toward = |from: [f32; 2], to: [f32; 2]| {
        let v = [to[0] - from[0], to[1] - from[1]];
        let linf = v[0].abs().max(v[1].abs());
        let scale = if linf > cfg.action_limit { cfg.action_limit / linf } else { 1.0 };
        [v[0] * scale, v[1] * scale]
    };
    if s.attached {
        if s.object_target_distance() <= 0.5 * cfg.target_radius {
            return Action::Continuous(vec![0.0, 0.0, -1.0]);
        }
        let d = toward(s.effector, s.target);
        return Action::Continuous(vec![d[0], d[1], 1.0]);
    }
    if !s.gripper_closed && s.effector_object_distance() <= cfg.grasp_radius {
        return Action::Continuous(vec![0.0, 0.0, 1.0]);
    }
    let d = toward(s.effector, s.object);
    Action::Continuous(vec![d[0], d[1], -1.0])
}

/// Drive the expert from the environment's current state until done.
/// Returns the visited observations and the actions taken.
fn run_expert(env: &mut Env) -> Result<(Vec<Observation>, Vec<Action>)> {
    let mut obs = vec![env.observe()];
    let mut acts = Vec::new();
    if env.is_done() {
        return Ok((obs, acts));
    }
    let grid_plan = match env {
        Env::Grid(g) => Some(g.plan_to_target()?),
        Env::Table(_) => None,
    };
    let mut k = 0;
    while !env.is_done() {
        let a = match &grid_plan {
            Some(plan) => {
                let a = plan.get(k).copied().unwrap_or(GridAction::Done);
                k += 1;
                a.action()
            }
            None => table_expert_action(env),
        };
        let out = env.step(&a)?;
        acts.push(a);
        obs.push(out.observation);
    }
    if !env.is_success() {
        return Err(Error::PlanningFailure(format!(
            "expert failed to finish within {} steps",
            env.config().t_max
        )));
    }
    Ok((obs, acts))
}

/// Expert demonstration from a randomized start.
pub fn expert_rollout(env: &mut Env, task: &Task, rng: &mut RngStream) -> Result<Episode> {
    env.reset(task, rng)?;
    expert_from_current(env, task)
}

/// Expert demonstration from the environment's current state.
pub fn expert_from_current(env: &mut Env, task: &Task) -> Result<Episode> {
    let (obs, acts) = run_expert(env)?;
    if acts.is_empty() {
        return Err(Error::PlanningFailure("start state already satisfies the task".into()));
    }
    let mut rec = EpisodeRecorder::new(task.clone(), obs[0].clone());
    for (a, o) in acts.into_iter().zip(obs.into_iter().skip(1)) {
        rec.push(a, o);
    }
    rec.finish(true, EpisodeSource::Expert)
}

/// Frame indices `round(j*T/H)` for `j = 1..=H`, halves rounded up.
pub fn plan_indices(t: usize, h: usize) -> Vec<usize> {
    assert!(h >= 1);
    (1..=h).map(|j| (2 * j * t + h) / (2 * h)).collect()
}

/// Subgoal plan for `task` from `start_obs`, with `mode` applied afterwards.
/// `env` is a template; it is cloned, not mutated.
pub fn generate_plan(
    env: &Env,
    task: &Task,
    start_obs: &Observation,
    horizon: usize,
    mode: CorruptionMode,
    rng: &mut RngStream,
) -> Result<SubgoalPlan> {
    let plan = clean_plan(env, task, start_obs, horizon)?;
    corrupt(env, plan, mode, rng)
}

fn clean_plan(env: &Env, task: &Task, start_obs: &Observation, horizon: usize) -> Result<SubgoalPlan> {
    if horizon == 0 {
        return Err(Error::invalid("plan horizon must be >= 1"));
    }
    let mut sim = env.clone();
    sim.restore(task, start_obs)?;
    let (obs, _) = run_expert(&mut sim)?;
    let t = obs.len() - 1;
    let frames = plan_indices(t, horizon).into_iter().map(|i| obs[i].clone()).collect();
    Ok(SubgoalPlan {
        frames,
        task: task.clone(),
        start: start_obs.clone(),
        corruption_applied: CorruptionMode::None,
    })
}

fn other_task(env: &Env, task: &Task, rng: &mut RngStream) -> Result<Task> {
    let others: Vec<Task> = env.tasks().into_iter().filter(|t| t.id != task.id).collect();
    if others.is_empty() {
        return Err(Error::invalid("corruption needs at least two tasks"));
    }
    Ok(others[rng.below(others.len())].clone())
}

/// Apply `mode` to an uncorrupted plan.
pub fn corrupt(env: &Env, plan: SubgoalPlan, mode: CorruptionMode, rng: &mut RngStream) -> Result<SubgoalPlan> {
    let h = plan.frames.len();
    match mode {
        CorruptionMode::None => Ok(plan),
        CorruptionMode::Hallucinate(k) => {
            if k >= h {
                return Err(Error::invalid(format!("hallucinate({k}) needs k < H = {h}")));
            }
            let alt = other_task(env, &plan.task, rng)?;
            let alt_plan = clean_plan(env, &alt, &plan.start, h)?;
            let mut frames = plan.frames;
            frames[k..].clone_from_slice(&alt_plan.frames[k..]);
            Ok(SubgoalPlan { frames, corruption_applied: mode, ..plan })
        }
        CorruptionMode::Jitter(sigma) => {
            if !(sigma >= 0.0) {
                return Err(Error::invalid("jitter sigma must be >= 0"));
            }
            let Env::Table(_) = env else {
                return Err(Error::invalid("jitter needs continuous coordinates"));
            };
            let mut frames = plan.frames;
            for f in &mut frames {
                for i in [0, 1, 3, 4] {
                    f.0[i] = (f.0[i] + sigma * rng.normal() as f32).clamp(0.0, 1.0);
                }
            }
            Ok(SubgoalPlan { frames, corruption_applied: mode, ..plan })
        }
        CorruptionMode::Mismatch => {
            let alt = other_task(env, &plan.task, rng)?;
            let alt_plan = clean_plan(env, &alt, &plan.start, h)?;
            Ok(SubgoalPlan { frames: alt_plan.frames, corruption_applied: mode, ..plan })
        }
    }
}

/// Reference policy that ignores the goal and replays the scripted expert
/// from the current observation.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    env: Env,
    horizon: usize,
    exec_horizon: usize,
}

impl ExpertPolicy {
    pub fn new(env: &Env, horizon: usize, exec_horizon: usize) -> Result<Self> {
        if exec_horizon == 0 || exec_horizon > horizon {
            return Err(Error::invalid("need 1 <= exec_horizon <= horizon"));
        }
        Ok(ExpertPolicy { env: env.clone(), horizon, exec_horizon })
    }
}

impl ChunkPolicy for ExpertPolicy {
    fn predict_chunk(&self, task: &Task, obs: &Observation, _goal: &Observation, _rng: &mut RngStream) -> Result<ActionChunk> {
        let mut sim = self.env.clone();
        sim.restore(task, obs)?;
        let null = sim.action_space().null_action();
        let (_, mut acts) = run_expert(&mut sim)?;
        acts.truncate(self.horizon);
        if acts.is_empty() {
            acts.push(null.clone());
        }
        ActionChunk::padded(acts, self.horizon, &null)
    }

    fn exec_horizon(&self) -> usize {
        self.exec_horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, GridNavState, Heading, TableSimState};

    fn table() -> Env {
        Env::new(&EnvConfig::table_sim()).unwrap()
    }

    #[test]
    fn plan_index_formula() {
        // Enumerated independently: round(j*60/7) with halves up.
        let expect: Vec<usize> = (1..=7).map(|j| (j as f64 * 60.0 / 7.0 + 0.5).floor() as usize).collect();
        assert_eq!(plan_indices(60, 7), expect);
        assert_eq!(plan_indices(60, 7), vec![9, 17, 26, 34, 43, 51, 60]);
        assert_eq!(plan_indices(10, 4), vec![3, 5, 8, 10]); // 2.5 -> 3, 7.5 -> 8
        assert_eq!(plan_indices(5, 1), vec![5]);
    }

    #[test]
    fn corruption_mode_parse() {
        for s in ["none", "mismatch", "hallucinate:3", "jitter:0.02"] {
            assert_eq!(s.parse::<CorruptionMode>().unwrap().to_string(), s);
        }
        assert!("jitter:-1".parse::<CorruptionMode>().is_err());
        assert!("wobble".parse::<CorruptionMode>().is_err());
    }

    #[test]
    fn goal_adjacent_table_expert_is_short() {
        let mut env = table();
        let task = env.task(0).unwrap();
        let Env::Table(sim) = &mut env else { unreachable!() };
        sim.set_state(
            task.clone(),
            TableSimState {
                effector: [0.34, 0.5],
                gripper_closed: false,
                object: [0.34, 0.5],
                attached: false,
                target: [0.2, 0.5],
                step_count: 0,
            },
        );
        let ep = expert_from_current(&mut env, &task).unwrap();
        assert!(ep.len() <= 5, "{}", ep.len());
        assert!(ep.success());
        assert_eq!(ep.source(), EpisodeSource::Expert);
    }

    #[test]
    fn grid_expert_facing_target_is_single_done() {
        let mut cfg = EnvConfig::grid_nav();
        cfg.grid_map = Some("#####\n#..0#\n#...#\n#...#\n#####".into());
        let mut env = Env::new(&cfg).unwrap();
        let task = env.task(0).unwrap();
        let Env::Grid(g) = &mut env else { unreachable!() };
        g.set_state(GridNavState { agent: (1, 2), heading: Heading::East, target_id: 0, step_count: 0 })
            .unwrap();
        let ep = expert_from_current(&mut env, &task).unwrap();
        assert_eq!(ep.actions(), &[GridAction::Done.action()]);
    }

    #[test]
    fn experts_always_succeed() {
        for cfg in [EnvConfig::table_sim(), EnvConfig::grid_nav()] {
            let mut env = Env::new(&cfg).unwrap();
            let tasks = env.tasks();
            let base = RngStream::new(0);
            for i in 0..500 {
                let t = &tasks[i % tasks.len()];
                let ep = expert_rollout(&mut env, t, &mut base.fork_indexed("demo", i as u64)).unwrap();
                assert!(ep.success());
                assert!(ep.len() <= cfg.t_max);
            }
        }
    }

    #[test]
    fn plans_end_in_success_and_are_deterministic() {
        let mut env = table();
        let task = env.task(1).unwrap();
        let start = env.reset(&task, &mut RngStream::new(5)).unwrap();
        let p1 = generate_plan(&env, &task, &start, 7, CorruptionMode::None, &mut RngStream::new(1)).unwrap();
        let p2 = generate_plan(&env, &task, &start, 7, CorruptionMode::None, &mut RngStream::new(1)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.frames.len(), 7);
        let mut check = env.clone();
        check.restore(&task, p1.frames.last().unwrap()).unwrap();
        assert!(check.is_success());
        let p1h = generate_plan(&env, &task, &start, 1, CorruptionMode::None, &mut RngStream::new(1)).unwrap();
        assert_eq!(p1h.frames, vec![p1.frames[6].clone()]);
    }

    #[test]
    fn corruption_modes() {
        let mut env = table();
        let task = env.task(0).unwrap();
        let start = env.reset(&task, &mut RngStream::new(9)).unwrap();
        let clean = generate_plan(&env, &task, &start, 7, CorruptionMode::None, &mut RngStream::new(0)).unwrap();
        let j0 = generate_plan(&env, &task, &start, 7, CorruptionMode::Jitter(0.0), &mut RngStream::new(0)).unwrap();
        assert_eq!(j0.frames, clean.frames);
        let j = generate_plan(&env, &task, &start, 7, CorruptionMode::Jitter(0.05), &mut RngStream::new(0)).unwrap();
        assert_ne!(j.frames, clean.frames);
        assert!(j.frames.iter().flat_map(|f| f.0.iter()).all(|v| (0.0..=1.0).contains(v)));
        let h = generate_plan(&env, &task, &start, 7, CorruptionMode::Hallucinate(3), &mut RngStream::new(0)).unwrap();
        assert_eq!(h.frames[..3], clean.frames[..3]);
        assert_ne!(h.frames[6], clean.frames[6]);
        assert_eq!(h.corruption_applied, CorruptionMode::Hallucinate(3));
        let m = generate_plan(&env, &task, &start, 7, CorruptionMode::Mismatch, &mut RngStream::new(0)).unwrap();
        assert_eq!(&m.frames[6].0[5..], &[0.8, 0.5]);
        assert!(generate_plan(&env, &task, &start, 7, CorruptionMode::Hallucinate(7), &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn single_task_hallucination_is_invalid() {
        let mut cfg = EnvConfig::grid_nav();
        cfg.grid_map = Some("#####\n#..0#\n#...#\n#...#\n#####".into());
        let mut env = Env::new(&cfg).unwrap();
        let task = env.task(0).unwrap();
        let start = env.reset(&task, &mut RngStream::new(1)).unwrap();
        let r = generate_plan(&env, &task, &start, 3, CorruptionMode::Hallucinate(1), &mut RngStream::new(0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn bad_start_obs_is_invalid() {
        let env = table();
        let task = env.task(0).unwrap();
        let r = generate_plan(&env, &task, &Observation(vec![0.0; 3]), 7, CorruptionMode::None, &mut RngStream::new(0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
