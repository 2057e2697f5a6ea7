//! Replay buffer, hindsight windows, chunked random exploration,
//! video-guided rollouts and the training loop that ties them together.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::envs::{ActionSpace, Env, EnvName};
use crate::error::{Error, Result};
use crate::harness::{self, EvalReport, RunConfig};
use crate::nn::MlpParams;
use crate::oracle::{generate_plan, CorruptionMode, DEFAULT_PLAN_HORIZON};
use crate::par::Exec;
use crate::policy::{ChunkPolicy, Init, Policy, Window};
use crate::rng::RngStream;
use crate::types::{Action, ActionChunk, Episode, EpisodeRecorder, EpisodeSource, Task};

/// An iteration period; `Never` disables the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Period {
    Every(usize),
    Never,
}

impl Period {
    pub fn fires(self, i: usize) -> bool {
        match self {
            Period::Every(q) => i.is_multiple_of(q),
            Period::Never => false,
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Period::Every(q) => write!(f, "{q}"),
            Period::Never => write!(f, "never"),
        }
    }
}

impl FromStr for Period {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "never" | "inf" => Ok(Period::Never),
            _ => match s.parse::<usize>() {
                Ok(q) if q >= 1 => Ok(Period::Every(q)),
                _ => Err(Error::invalid(format!("period must be >= 1 or \"never\", got {s:?}"))),
            },
        }
    }
}

impl Serialize for Period {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Period::Every(q) => s.serialize_u64(*q as u64),
            Period::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for Period {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(q) if q >= 1 => Ok(Period::Every(q as usize)),
            Raw::Int(_) => Err(serde::de::Error::custom("period must be >= 1")),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    /// Random episodes per task before training (`n_r`).
    pub n_random: usize,
    /// Video-guided rollout period (`q_v`).
    pub video_period: Period,
    /// Extra random exploration period (`q_r`).
    pub extra_random_period: Period,
    /// Random episodes per task added each extra period (`n_e`).
    pub n_extra: usize,
    /// Actions sharing one sampled mean (`l_c`).
    pub chunk_len: usize,
    pub chunk_sigma: f32,
    pub p_grasp: f64,
    /// Chunk executions allotted to each subgoal frame.
    pub k_sub: usize,
    pub tau_goal: f32,
    pub iterations: usize,
    pub capacity: usize,
    pub plan_horizon: usize,
    pub corruption: CorruptionMode,
    /// Unset means on for GridNav and off for TableSim.
    pub replan_on_exhaust: Option<bool>,
    /// Keep the grasp primitive active during video-guided rollouts.
    pub rollout_grasp: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            n_random: 50,
            video_period: Period::Every(200),
            extra_random_period: Period::Every(1000),
            n_extra: 2,
            chunk_len: 8,
            chunk_sigma: 0.01,
            p_grasp: 0.5,
            k_sub: 2,
            tau_goal: 0.05,
            iterations: 20_000,
            capacity: 2000,
            plan_horizon: DEFAULT_PLAN_HORIZON,
            corruption: CorruptionMode::None,
            replan_on_exhaust: None,
            rollout_grasp: true,
        }
    }
}

impl ExploreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.k_sub == 0 || self.plan_horizon == 0 || self.capacity == 0 {
            return Err(Error::invalid("chunk_len, k_sub, plan_horizon and capacity must be >= 1"));
        }
        if !(self.chunk_sigma >= 0.0) {
            return Err(Error::invalid("chunk_sigma must be >= 0"));
        }
        if !(self.tau_goal > 0.0) {
            return Err(Error::invalid("tau_goal must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.p_grasp) {
            return Err(Error::invalid("p_grasp must be in [0, 1]"));
        }
        if let CorruptionMode::Hallucinate(k) = self.corruption {
            if k >= self.plan_horizon {
                return Err(Error::invalid("hallucinate(k) needs k < plan_horizon"));
            }
        }
        Ok(())
    }

    pub fn rollout_settings(&self, env: EnvName) -> RolloutSettings {
        RolloutSettings {
            plan_horizon: self.plan_horizon,
            k_sub: self.k_sub,
            tau_goal: self.tau_goal,
            corruption: self.corruption,
            replan_on_exhaust: self.replan_on_exhaust.unwrap_or(env == EnvName::GridNav),
            p_grasp: if self.rollout_grasp { self.p_grasp } else { 0.0 },
        }
    }
}

#[derive(Debug, Default)]
struct BufferInner {
    episodes: VecDeque<Arc<Episode>>,
    appended: [u64; 3],
    successes: [u64; 3],
    evicted: u64,
    obs_dim: Option<usize>,
    discrete: Option<bool>,
}

/// FIFO ring of episodes. Appends and samples are atomic per episode.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    inner: RwLock<BufferInner>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be >= 1"));
        }
        Ok(ReplayBuffer { capacity, inner: RwLock::new(BufferInner::default()) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.read().episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, BufferInner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn append(&self, episode: Episode) -> Result<()> {
        let discrete = matches!(episode.actions()[0], Action::Discrete(_));
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        if inner.obs_dim.is_some_and(|d| d != episode.obs_dim()) {
            return Err(Error::invalid(format!(
                "episode obs_dim {} does not match buffer obs_dim {}",
                episode.obs_dim(),
                inner.obs_dim.unwrap_or_default()
            )));
        }
        if inner.discrete.is_some_and(|d| d != discrete) {
            return Err(Error::invalid("episode action kind does not match buffer"));
        }
        inner.obs_dim = Some(episode.obs_dim());
        inner.discrete = Some(discrete);
        let src = episode.source().index();
        inner.appended[src] += 1;
        if episode.success() {
            inner.successes[src] += 1;
        }
        if inner.episodes.len() == self.capacity {
            inner.episodes.pop_front();
            inner.evicted += 1;
        }
        inner.episodes.push_back(Arc::new(episode));
        Ok(())
    }

    /// Episodes of `source` ever appended, including evicted ones.
    pub fn appended(&self, source: EpisodeSource) -> u64 {
        self.read().appended[source.index()]
    }

    pub fn successes(&self, source: EpisodeSource) -> u64 {
        self.read().successes[source.index()]
    }

    pub fn evicted(&self) -> u64 {
        self.read().evicted
    }

    /// Episodes currently held, oldest first.
    pub fn snapshot(&self) -> Vec<Arc<Episode>> {
        self.read().episodes.iter().cloned().collect()
    }

    /// Uniform episode, then a uniform hindsight window inside it.
    pub fn sample_window(&self, horizon: usize, rng: &mut RngStream) -> Result<Window> {
        let ep = {
            let inner = self.read();
            if inner.episodes.is_empty() {
                return Err(Error::illegal("sample from an empty replay buffer"));
            }
            Arc::clone(&inner.episodes[rng.below(inner.episodes.len())])
        };
        let i = rng.below(ep.len().saturating_sub(horizon) + 1);
        window_at(&ep, i, horizon)
    }

    pub fn sample_batch(&self, n: usize, horizon: usize, rng: &mut RngStream) -> Result<Vec<Window>> {
        (0..n).map(|_| self.sample_window(horizon, rng)).collect()
    }
}

/// The hindsight window starting at index `i`: goal `x_{min(i+h, T)}` and the
/// actions in between, padded to `h` with the null action.
pub fn window_at(ep: &Episode, i: usize, horizon: usize) -> Result<Window> {
    let t = ep.len();
    if horizon == 0 || i > t.saturating_sub(horizon) {
        return Err(Error::invalid(format!("window start {i} out of range for T={t}, h={horizon}")));
    }
    let end = (i + horizon).min(t);
    let acts = ep.actions()[i..end].to_vec();
    let null = acts[0].null_like();
    Ok(Window {
        obs: ep.observations()[i].clone(),
        goal: ep.observations()[end].clone(),
        chunk: ActionChunk::padded(acts, horizon, &null)?,
    })
}

/// One random episode from the environment's current reset state: chunks of
/// `l_c` actions drawn around a uniform mean, with the grasp primitive
/// forcing the gripper closed for the rest of a chunk once it fires.
pub fn random_chunk_episode(env: &mut Env, task: &Task, cfg: &ExploreConfig, rng: &mut RngStream) -> Result<Episode> {
    let first = env.reset(task, &mut rng.fork("reset"))?;
    let mut rng = rng.fork("actions");
    let mut rec = EpisodeRecorder::new(task.clone(), first);
    let space = env.action_space();
    'episode: while !env.is_done() {
        match &space {
            ActionSpace::Continuous(bounds) => {
                let mean: Vec<f64> = bounds
                    .low()
                    .iter()
                    .zip(bounds.high())
                    .map(|(lo, hi)| rng.uniform_range(f64::from(*lo), f64::from(*hi)))
                    .collect();
                let grip = bounds.dim() - 1;
                let mut grasping = false;
                for _ in 0..cfg.chunk_len {
                    let mut a: Vec<f32> = mean
                        .iter()
                        .map(|m| (m + f64::from(cfg.chunk_sigma) * rng.normal()) as f32)
                        .collect();
                    bounds.clamp_in_place(&mut a);
                    grasping = grasping || env.grasp_trigger(cfg.p_grasp, &mut rng);
                    if grasping {
                        a[grip] = bounds.high()[grip];
                    }
                    let a = Action::Continuous(a);
                    let out = env.step(&a)?;
                    rec.push(a, out.observation);
                    if out.done {
                        break 'episode;
                    }
                }
            }
            ActionSpace::Discrete(n) => {
                let a = Action::Discrete(rng.below(*n) as u8);
                for _ in 0..cfg.chunk_len {
                    let out = env.step(&a)?;
                    rec.push(a.clone(), out.observation);
                    if out.done {
                        break 'episode;
                    }
                }
            }
        }
    }
    rec.finish(env.is_success(), EpisodeSource::Random)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub plan_horizon: usize,
    pub k_sub: usize,
    pub tau_goal: f32,
    pub corruption: CorruptionMode,
    pub replan_on_exhaust: bool,
    /// Grasp primitive rate while following a plan; 0 disables it.
    pub p_grasp: f64,
}

/// Reset, ask the oracle for a plan, and chase its frames in order.
pub fn video_guided_rollout(
    env: &mut Env,
    task: &Task,
    policy: &dyn ChunkPolicy,
    settings: &RolloutSettings,
    rng: &mut RngStream,
) -> Result<Episode> {
    env.reset(task, &mut rng.fork("reset"))?;
    video_guided_from_current(env, task, policy, settings, rng)
}

/// Video-guided rollout from the environment's current state.
pub fn video_guided_from_current(
    env: &mut Env,
    task: &Task,
    policy: &dyn ChunkPolicy,
    settings: &RolloutSettings,
    rng: &mut RngStream,
) -> Result<Episode> {
    if env.is_done() {
        return Err(Error::illegal("rollout from a finished episode"));
    }
    let mut plan_rng = rng.fork("plan");
    let mut act_rng = rng.fork("policy");
    let mut grasp_rng = rng.fork("grasp");
    let grip = match env.action_space() {
        ActionSpace::Continuous(b) => Some((b.dim() - 1, b.low()[b.dim() - 1], b.high()[b.dim() - 1])),
        ActionSpace::Discrete(_) => None,
    };
    let mut rec = EpisodeRecorder::new(task.clone(), env.observe());
    let mut plan = generate_plan(env, task, &env.observe(), settings.plan_horizon, settings.corruption, &mut plan_rng)?;
    'episode: loop {
        let last = plan.frames.len() - 1;
        for (f, frame) in plan.frames.iter().enumerate() {
            for _ in 0..settings.k_sub {
                let chunk = policy.predict_chunk(task, rec.last_observation(), frame, &mut act_rng)?;
                let mut grasping = false;
                for a in chunk.valid().iter().take(policy.exec_horizon()) {
                    let mut a = a.clone();
                    if let (Some((g, low, high)), Action::Continuous(v)) = (grip, &mut a) {
                        if env.empty_grip_near_object() && grasp_rng.bernoulli(settings.p_grasp) {
                            // A grasp attempt from a closed empty gripper opens it first.
                            v[g] = low;
                            grasping = false;
                        } else {
                            grasping = grasping || env.grasp_trigger(settings.p_grasp, &mut grasp_rng);
                            if grasping {
                                v[g] = high;
                            }
                        }
                    }
                    let out = env.step(&a)?;
                    rec.push(a, out.observation);
                    if out.done {
                        break 'episode;
                    }
                }
                if f < last && env.position_distance(rec.last_observation(), frame) <= settings.tau_goal {
                    break;
                }
            }
        }
        if !settings.replan_on_exhaust {
            break;
        }
        let start = rec.last_observation().clone();
        match generate_plan(env, task, &start, settings.plan_horizon, settings.corruption, &mut plan_rng) {
            Ok(p) => plan = p,
            Err(Error::PlanningFailure(_)) => break,
            Err(e) => return Err(e),
        }
    }
    rec.finish(env.is_success(), EpisodeSource::VideoGuided)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub iter: usize,
    pub event: &'static str,
    pub task_id: Option<u32>,
    pub source: Option<EpisodeSource>,
    pub success: Option<bool>,
    pub episode_len: Option<usize>,
    pub loss: Option<f64>,
    pub buffer_size: usize,
    pub cum_video_rollouts: u64,
    pub cum_video_successes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Evaluation taken at a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub iter: usize,
    pub cum_video_rollouts: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iter: usize,
    pub params: MlpParams<f32>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub metrics: Vec<MetricRow>,
    pub evals: Vec<EvalPoint>,
    pub checkpoints: Vec<Checkpoint>,
    pub buffer: ReplayBuffer,
    pub numeric_faults: u64,
}

impl TrainOutcome {
    /// Mean overall success of the last `k` evaluations.
    pub fn final_success(&self, k: usize) -> f64 {
        let tail = &self.evals[self.evals.len().saturating_sub(k.max(1))..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|e| e.report.overall_rate()).sum::<f64>() / tail.len() as f64
    }
}

struct Log<'a> {
    rows: Vec<MetricRow>,
    buffer: &'a ReplayBuffer,
}

impl Log<'_> {
    fn push(&mut self, iter: usize, event: &'static str) -> &mut MetricRow {
        self.rows.push(MetricRow {
            iter,
            event,
            task_id: None,
            source: None,
            success: None,
            episode_len: None,
            loss: None,
            buffer_size: self.buffer.len(),
            cum_video_rollouts: self.buffer.appended(EpisodeSource::VideoGuided),
            cum_video_successes: self.buffer.successes(EpisodeSource::VideoGuided),
            rate: None,
            message: None,
        });
        self.rows.last_mut().unwrap()
    }

    fn episode(&mut self, iter: usize, event: &'static str, task: &Task, result: Result<Episode>) -> Result<()> {
        match result {
            Ok(ep) => {
                let (src, ok, len) = (ep.source(), ep.success(), ep.len());
                self.buffer.append(ep)?;
                let row = self.push(iter, event);
                row.task_id = Some(task.id);
                row.source = Some(src);
                row.success = Some(ok);
                row.episode_len = Some(len);
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                log::warn!("iter {iter}: {event} for task {} skipped: {e}", task.id);
                let row = self.push(iter, "error");
                row.task_id = Some(task.id);
                row.message = Some(format!("{event}: {e}"));
            }
        }
        Ok(())
    }
}

const LOSS_LOG_EVERY: usize = 100;

/// Run the full exploration loop for one seed.
///
/// Every iteration trains on one batch of hindsight windows; video-guided and
/// extra random rollouts are interleaved at their periods; every
/// `eval_every` iterations the parameters are checkpointed and evaluated.
pub fn run_training(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env = Env::new(&cfg.env)?;
    let tasks = cfg.tasks_for(&env)?;
    let ex = &cfg.explore;
    let settings = ex.rollout_settings(env.name());
    let root = RngStream::new(seed);
    let mut policy = Policy::new(cfg.policy.clone(), env.obs_dim(), env.action_space(), Init::Random, &mut root.fork("init"))?;
    let buffer = ReplayBuffer::new(ex.capacity)?;
    let mut log = Log { rows: Vec::new(), buffer: &buffer };
    let eval_rng = harness::eval_rng(seed);
    let horizon = cfg.policy.horizon;

    let random_batch = |rng: RngStream, per_task: usize| -> Vec<(usize, Result<Episode>)> {
        let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|t| (0..per_task).map(move |k| (t, k))).collect();
        exec.map(&jobs, |&(t, k)| {
            let mut e = env.clone();
            let mut r = rng.fork_indexed("task", t as u64).fork_indexed("episode", k as u64);
            (t, random_chunk_episode(&mut e, &tasks[t], ex, &mut r))
        })
    };

    for (t, ep) in random_batch(root.fork("seed_random"), ex.n_random) {
        log.episode(0, "random", &tasks[t], ep)?;
    }

    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    let mut evaluate_now = |iter: usize, policy: &Policy, log: &mut Log| -> Result<()> {
        let report = harness::evaluate(policy, &env, &tasks, cfg.run.eval_episodes, &settings, &eval_rng, exec)?;
        let row = log.push(iter, "eval");
        row.rate = Some(report.overall_rate());
        evals.push(EvalPoint { iter, cum_video_rollouts: buffer.appended(EpisodeSource::VideoGuided), report });
        checkpoints.push(Checkpoint { iter, params: policy.params()?.clone() });
        Ok(())
    };
    evaluate_now(0, &policy, &mut log)?;

    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    for i in 1..=ex.iterations {
        if ex.video_period.fires(i) {
            let rng = root.fork_indexed("video", i as u64);
            let results = exec.map(&tasks, |task| {
                let mut e = env.clone();
                video_guided_rollout(&mut e, task, &policy, &settings, &mut rng.fork_indexed("task", u64::from(task.id)))
            });
            for (task, ep) in tasks.iter().zip(results) {
                log.episode(i, "video", task, ep)?;
            }
        }
        if ex.extra_random_period.fires(i) && ex.n_extra > 0 {
            for (t, ep) in random_batch(root.fork_indexed("extra_random", i as u64), ex.n_extra) {
                log.episode(i, "extra_random", &tasks[t], ep)?;
            }
        }
        if !buffer.is_empty() {
            let mut rng = root.fork_indexed("batch", i as u64);
            let batch = buffer.sample_batch(cfg.policy.batch_size, horizon, &mut rng)?;
            match policy.train_step(&batch, &mut rng.fork("noise"), exec) {
                Ok(loss) => {
                    loss_sum += f64::from(loss);
                    loss_n += 1;
                }
                Err(e @ Error::NumericFault(_)) => {
                    log::warn!("iter {i}: {e}");
                    log.push(i, "error").message = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        if i % LOSS_LOG_EVERY == 0 && loss_n > 0 {
            log.push(i, "train").loss = Some(loss_sum / loss_n as f64);
            loss_sum = 0.0;
            loss_n = 0;
        }
        if i % cfg.run.eval_every == 0 {
            evaluate_now(i, &policy, &mut log)?;
        }
    }
    let metrics = log.rows;
    Ok(TrainOutcome {
        numeric_faults: policy.numeric_faults(),
        policy,
        metrics,
        evals,
        checkpoints,
        buffer,
    })
}
