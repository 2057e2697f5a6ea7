//! Goal-conditioned action-chunk policies `pi(a_{i:i+h} | x_i, x_{i+h})`.
//!
//! Two heads share one MLP kernel:
//!
//! - `Regression`: `trunk(obs ‖ goal)` emits `h*d` normalized actions, trained
//!   with a masked MSE. With a discrete action space it emits logits for a
//!   single action and trains with cross-entropy.
//! - `Diffusion`: an epsilon-prediction DDPM over the flattened normalized
//!   chunk, conditioned on `obs ‖ goal ‖ timestep_embedding(t)`.
//!
//! Continuous actions are normalized to `[-1, 1]` per dimension using the
//! action bounds; emitted chunks are denormalized and clamped.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::write_atomic;
use crate::envs::ActionSpace;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, MlpParams, MlpSpec};
use crate::par::Exec;
use crate::rng::RngStream;
use crate::types::{Action, ActionChunk, Observation, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Regression,
    Diffusion,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Regression => "regression",
            PolicyKind::Diffusion => "diffusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampler {
    #[default]
    Ancestral,
    /// Every `k`-th timestep of the training chain.
    Strided(usize),
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Ancestral => write!(f, "ancestral"),
            Sampler::Strided(k) => write!(f, "strided:{k}"),
        }
    }
}

impl FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "ancestral" => Ok(Sampler::Ancestral),
            Some(("strided", k)) => match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(Sampler::Strided(k)),
                _ => Err(Error::invalid(format!("bad stride in {s:?}"))),
            },
            _ => Err(Error::invalid(format!("unknown sampler {s:?}"))),
        }
    }
}

impl Serialize for Sampler {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Sampler {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Prediction horizon `h`.
    pub horizon: usize,
    /// Actions executed per prediction.
    pub exec_horizon: usize,
    pub diffusion_steps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
    pub sampler: Sampler,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::Regression,
            horizon: 16,
            exec_horizon: 8,
            diffusion_steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            sampler: Sampler::Ancestral,
            hidden: vec![256, 256],
            time_embed_dim: 32,
            lr: Adam::DEFAULT_LR,
            batch_size: 64,
        }
    }
}

impl PolicyConfig {
    pub fn diffusion() -> Self {
        PolicyConfig { kind: PolicyKind::Diffusion, hidden: vec![256, 256, 256], ..Self::default() }
    }

    /// Single-step discrete head for GridNav.
    pub fn grid() -> Self {
        PolicyConfig { horizon: 1, exec_horizon: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.exec_horizon == 0 || self.exec_horizon > self.horizon {
            return Err(Error::invalid("need 1 <= exec_horizon <= horizon"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::invalid("diffusion_steps must be >= 1"));
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(Error::invalid("need 0 < beta_start < beta_end < 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("need at least one nonempty hidden layer"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be even"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("lr and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Linear beta schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid("bad diffusion schedule"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Descending timesteps visited by `sampler`.
    pub fn timesteps(&self, sampler: Sampler) -> Vec<usize> {
        let k = match sampler {
            Sampler::Ancestral => 1,
            Sampler::Strided(k) => k.max(1),
        };
        (0..self.steps()).rev().step_by(k).collect()
    }
}

/// Noise predictor interface for the reverse chain.
pub trait NoisePredictor {
    /// `noisy` is the flattened normalized chunk at timestep `t`.
    fn predict_noise(&self, noisy: &[f32], obs: &[f32], goal: &[f32], t: usize) -> Result<Vec<f32>>;
}

/// Reverse diffusion from `N(0, I)`, returning a normalized flat chunk.
///
/// Strided sampling runs the ancestral update on the respaced chain whose
/// cumulative products are `alpha_bar` at the visited timesteps.
pub fn ddpm_sample_with(
    predictor: &impl NoisePredictor,
    schedule: &DiffusionSchedule,
    sampler: Sampler,
    dim: usize,
    obs: &[f32],
    goal: &[f32],
    rng: &mut RngStream,
) -> Result<Vec<f32>> {
    let mut x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let ts = schedule.timesteps(sampler);
    for (i, &t) in ts.iter().enumerate() {
        let ab_t = schedule.alpha_bars[t];
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alpha_bars[p]);
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let xf: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        let eps = predictor.predict_noise(&xf, obs, goal, t)?;
        let coef = beta / (1.0 - ab_t).sqrt();
        let last = i + 1 == ts.len();
        let sigma = if last { 0.0 } else { (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt() };
        for (xv, e) in x.iter_mut().zip(&eps) {
            let mean = (*xv - coef * f64::from(*e)) / alpha.sqrt();
            *xv = if last { mean } else { mean + sigma * rng.normal() };
        }
    }
    Ok(x.into_iter().map(|v| v as f32).collect())
}

/// Observation features live in `[0, 1]`; the networks see them in `[-1, 1]`.
fn centered(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// Anything that can propose a chunk toward a goal frame.
pub trait ChunkPolicy: Sync {
    /// Learned policies ignore `task`; scripted reference policies use it.
    fn predict_chunk(
        &self,
        task: &Task,
        obs: &Observation,
        goal: &Observation,
        rng: &mut RngStream,
    ) -> Result<ActionChunk>;

    fn exec_horizon(&self) -> usize;
}

/// Training example: observation, hindsight goal and the chunk between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub obs: Observation,
    pub goal: Observation,
    pub chunk: ActionChunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Random,
    Zero,
}

#[derive(Debug, Clone)]
pub struct Policy {
    cfg: PolicyConfig,
    obs_dim: usize,
    space: ActionSpace,
    spec: MlpSpec,
    params: Option<MlpParams<f32>>,
    adam: Adam,
    schedule: DiffusionSchedule,
    numeric_faults: u64,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, obs_dim: usize, space: ActionSpace, init: Init, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::unloaded(cfg, obs_dim, space)?;
        let params = match init {
            Init::Zero => MlpParams::zeros(&p.spec),
            Init::Random => {
                let mut params = MlpParams::init(&p.spec, rng);
                if p.cfg.kind == PolicyKind::Diffusion {
                    // Zero output layer: the untrained denoiser predicts no noise.
                    let last = *params.layers().last().unwrap();
                    params.as_mut_slice()[last.weight_offset..].fill(0.0);
                }
                params
            }
        };
        p.params = Some(params);
        Ok(p)
    }

    /// A policy shell without parameters; prediction fails until loaded.
    pub fn unloaded(cfg: PolicyConfig, obs_dim: usize, space: ActionSpace) -> Result<Self> {
        cfg.validate()?;
        if obs_dim == 0 {
            return Err(Error::invalid("obs_dim must be >= 1"));
        }
        if let ActionSpace::Discrete(_) = space {
            if cfg.horizon != 1 || cfg.kind != PolicyKind::Regression {
                return Err(Error::invalid("discrete actions need a regression head with horizon 1"));
            }
        }
        let chunk_dim = cfg.horizon * space.dim();
        let (input, output) = match (&space, cfg.kind) {
            (ActionSpace::Discrete(n), _) => (2 * obs_dim, *n),
            (ActionSpace::Continuous(_), PolicyKind::Regression) => (2 * obs_dim, chunk_dim),
            (ActionSpace::Continuous(_), PolicyKind::Diffusion) => {
                (chunk_dim + 2 * obs_dim + cfg.time_embed_dim, chunk_dim)
            }
        };
        let spec = MlpSpec::with_hidden(input, &cfg.hidden, output)?;
        let schedule =
            DiffusionSchedule::linear(cfg.diffusion_steps, f64::from(cfg.beta_start), f64::from(cfg.beta_end))?;
        let adam = Adam::new(spec.param_count(), cfg.lr);
        Ok(Policy { cfg, obs_dim, space, spec, params: None, adam, schedule, numeric_faults: 0 })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn params(&self) -> Result<&MlpParams<f32>> {
        self.params.as_ref().ok_or_else(|| Error::illegal("policy parameters are not loaded"))
    }

    pub fn load_params(&mut self, params: MlpParams<f32>) -> Result<()> {
        if *params.spec() != self.spec {
            return Err(Error::ConfigMismatch("parameter layout does not match policy".into()));
        }
        self.params = Some(params);
        self.adam = Adam::new(self.spec.param_count(), self.cfg.lr);
        Ok(())
    }

    pub fn param_hash(&self) -> Result<String> {
        Ok(self.params()?.content_hash())
    }

    pub fn numeric_faults(&self) -> u64 {
        self.numeric_faults
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.step_count()
    }

    fn chunk_dim(&self) -> usize {
        self.cfg.horizon * self.space.dim()
    }

    fn check_obs(&self, obs: &Observation, goal: &Observation) -> Result<()> {
        if obs.len() != self.obs_dim || goal.len() != self.obs_dim {
            return Err(Error::invalid(format!(
                "policy expects observations of length {}, got {} and {}",
                self.obs_dim,
                obs.len(),
                goal.len()
            )));
        }
        Ok(())
    }

    /// Normalized flat chunk and its per-entry mask.
    fn encode_chunk(&self, chunk: &ActionChunk) -> Result<(Vec<f32>, Vec<bool>)> {
        let bounds = self.space.bounds().ok_or_else(|| Error::invalid("continuous head needs bounds"))?;
        let d = bounds.dim();
        if chunk.horizon() != self.cfg.horizon {
            return Err(Error::invalid(format!(
                "chunk horizon {} != policy horizon {}",
                chunk.horizon(),
                self.cfg.horizon
            )));
        }
        let mut flat = Vec::with_capacity(self.chunk_dim());
        let mut mask = Vec::with_capacity(self.chunk_dim());
        for (j, a) in chunk.actions().iter().enumerate() {
            let v = a.as_continuous().filter(|v| v.len() == d).ok_or_else(|| Error::invalid("chunk action shape"))?;
            for (k, x) in v.iter().enumerate() {
                flat.push(bounds.normalize(k, *x));
                mask.push(j < chunk.valid_len());
            }
        }
        Ok((flat, mask))
    }

    fn decode_chunk(&self, flat: &[f32]) -> ActionChunk {
        let bounds = self.space.bounds().expect("continuous");
        let d = bounds.dim();
        let actions = flat
            .chunks_exact(d)
            .map(|c| {
                let mut v: Vec<f32> = c.iter().enumerate().map(|(k, x)| bounds.denormalize(k, *x)).collect();
                bounds.clamp_in_place(&mut v);
                Action::Continuous(v)
            })
            .collect();
        ActionChunk::full(actions).expect("horizon >= 1")
    }

    fn regression_input(obs: &Observation, goal: &Observation) -> Vec<f32> {
        let mut x = Vec::with_capacity(obs.len() * 2);
        x.extend(obs.features().iter().chain(goal.features()).map(|v| centered(*v)));
        x
    }

    fn diffusion_input(&self, noisy: &[f32], obs: &[f32], goal: &[f32], t: usize) -> Vec<f32> {
        let mut x = Vec::with_capacity(self.spec.input_width());
        x.extend_from_slice(noisy);
        x.extend(obs.iter().chain(goal).map(|v| centered(*v)));
        x.extend(nn::timestep_embedding(t, self.cfg.diffusion_steps, self.cfg.time_embed_dim));
        x
    }

    /// Predict a chunk of `horizon` actions, all within bounds.
    pub fn predict(&self, obs: &Observation, goal: &Observation, rng: &mut RngStream) -> Result<ActionChunk> {
        let params = self.params()?;
        self.check_obs(obs, goal)?;
        match (&self.space, self.cfg.kind) {
            (ActionSpace::Discrete(n), _) => {
                let (logits, _) = nn::forward(&self.spec, params, &Self::regression_input(obs, goal))?;
                let best = (0..*n).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
                ActionChunk::full(vec![Action::Discrete(best as u8)])
            }
            (ActionSpace::Continuous(_), PolicyKind::Regression) => {
                let (out, _) = nn::forward(&self.spec, params, &Self::regression_input(obs, goal))?;
                Ok(self.decode_chunk(&out))
            }
            (ActionSpace::Continuous(_), PolicyKind::Diffusion) => self.ddpm_sample(obs, goal, rng),
        }
    }

    pub fn ddpm_sample(&self, obs: &Observation, goal: &Observation, rng: &mut RngStream) -> Result<ActionChunk> {
        self.check_obs(obs, goal)?;
        let flat = ddpm_sample_with(
            self,
            &self.schedule,
            self.cfg.sampler,
            self.chunk_dim(),
            obs.features(),
            goal.features(),
            rng,
        )?;
        Ok(self.decode_chunk(&flat))
    }

    /// One optimizer step for whichever head this policy has.
    pub fn train_step(&mut self, batch: &[Window], rng: &mut RngStream, exec: Exec) -> Result<f32> {
        match self.cfg.kind {
            PolicyKind::Regression => self.regression_train_step(batch, exec),
            PolicyKind::Diffusion => self.ddpm_train_step(batch, rng, exec),
        }
    }

    fn apply(&mut self, loss: f64, grads: Vec<f32>) -> Result<f32> {
        if !loss.is_finite() {
            self.numeric_faults += 1;
            return Err(Error::NumericFault(format!("loss is {loss}; update skipped")));
        }
        let params = self.params.as_mut().ok_or_else(|| Error::illegal("policy parameters are not loaded"))?;
        if let Err(e) = self.adam.step(params, &grads) {
            self.numeric_faults += 1;
            return Err(e);
        }
        Ok(loss as f32)
    }

    /// Loss and gradient of the regression objective without updating.
    pub fn regression_loss_grad(&self, batch: &[Window], exec: Exec) -> Result<(f64, Vec<f32>)> {
        let params = self.params()?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut input = Vec::with_capacity(batch.len() * self.spec.input_width());
        for w in batch {
            self.check_obs(&w.obs, &w.goal)?;
            input.extend(Self::regression_input(&w.obs, &w.goal));
        }
        if let ActionSpace::Discrete(n) = self.space {
            let labels = batch
                .iter()
                .map(|w| match w.chunk.actions()[0] {
                    Action::Discrete(a) if (a as usize) < n => Ok(a as usize),
                    _ => Err(Error::invalid("discrete window needs a valid first action")),
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            return nn::loss_and_grad(&self.spec, params, &input, exec, |r0, out, g| {
                let mut loss = 0.0;
                for (row, logits) in out.chunks_exact(n).enumerate() {
                    let y = labels[r0 + row];
                    let m = logits.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
                    let exps: Vec<f64> = logits.iter().map(|l| f64::from(l - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    loss += (z.ln() - f64::from(logits[y] - m)) * scale;
                    for k in 0..n {
                        let p = exps[k] / z;
                        let target = if k == y { 1.0 } else { 0.0 };
                        g[row * n + k] = ((p - target) * scale) as f32;
                    }
                }
                loss
            });
        }
        let mut targets = Vec::with_capacity(batch.len() * self.chunk_dim());
        let mut mask = Vec::with_capacity(batch.len() * self.chunk_dim());
        for w in batch {
            let (t, m) = self.encode_chunk(&w.chunk)?;
            targets.extend(t);
            mask.extend(m);
        }
        let n_valid = mask.iter().filter(|m| **m).count().max(1) as f64;
        let width = self.chunk_dim();
        nn::loss_and_grad(&self.spec, params, &input, exec, |r0, out, g| {
            let base = r0 * width;
            let mut loss = 0.0;
            for (j, o) in out.iter().enumerate() {
                if mask[base + j] {
                    let diff = f64::from(*o - targets[base + j]);
                    loss += diff * diff;
                    g[j] = (2.0 * diff / n_valid) as f32;
                }
            }
            loss / n_valid
        })
    }

    /// Masked MSE (or cross-entropy for discrete actions) and one Adam step.
    /// Returns the loss before the update.
    pub fn regression_train_step(&mut self, batch: &[Window], exec: Exec) -> Result<f32> {
        let (loss, grads) = self.regression_loss_grad(batch, exec)?;
        self.apply(loss, grads)
    }

    /// Epsilon-prediction loss with the noise draws fixed by `rng`.
    pub fn ddpm_loss_grad(&self, batch: &[Window], rng: &mut RngStream, exec: Exec) -> Result<(f64, Vec<f32>)> {
        let params = self.params()?;
        if self.cfg.kind != PolicyKind::Diffusion {
            return Err(Error::illegal("ddpm step on a regression policy"));
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let width = self.chunk_dim();
        let mut input = Vec::with_capacity(batch.len() * self.spec.input_width());
        let mut noise = Vec::with_capacity(batch.len() * width);
        let mut mask = Vec::with_capacity(batch.len() * width);
        for w in batch {
            self.check_obs(&w.obs, &w.goal)?;
            let (x0, m) = self.encode_chunk(&w.chunk)?;
            let t = rng.below(self.cfg.diffusion_steps);
            let ab = self.schedule.alpha_bars[t];
            let eps: Vec<f32> = (0..width).map(|_| rng.normal() as f32).collect();
            let noisy: Vec<f32> = x0
                .iter()
                .zip(&eps)
                .map(|(x, e)| (ab.sqrt() * f64::from(*x) + (1.0 - ab).sqrt() * f64::from(*e)) as f32)
                .collect();
            input.extend(self.diffusion_input(&noisy, w.obs.features(), w.goal.features(), t));
            noise.extend(eps);
            mask.extend(m);
        }
        let n_valid = mask.iter().filter(|m| **m).count().max(1) as f64;
        nn::loss_and_grad(&self.spec, params, &input, exec, |r0, out, g| {
            let base = r0 * width;
            let mut loss = 0.0;
            for (j, o) in out.iter().enumerate() {
                if mask[base + j] {
                    let diff = f64::from(*o - noise[base + j]);
                    loss += diff * diff;
                    g[j] = (2.0 * diff / n_valid) as f32;
                }
            }
            loss / n_valid
        })
    }

    pub fn ddpm_train_step(&mut self, batch: &[Window], rng: &mut RngStream, exec: Exec) -> Result<f32> {
        let (loss, grads) = self.ddpm_loss_grad(batch, rng, exec)?;
        self.apply(loss, grads)
    }

    fn header(&self, env_name: &str) -> String {
        let c = &self.cfg;
        format!(
            "env={env_name}\nkind={}\nh={}\nh_exec={}\nd={}\nn_actions={}\nobs_dim={}\nT_d={}\nbeta={},{}\nsampler={}\ntime_embed_dim={}\n",
            c.kind.as_str(),
            c.horizon,
            c.exec_horizon,
            self.space.dim(),
            self.space.n_discrete().unwrap_or(0),
            self.obs_dim,
            c.diffusion_steps,
            c.beta_start,
            c.beta_end,
            c.sampler,
            c.time_embed_dim,
        )
    }

    /// `VGP1` bytes with a policy header. `extra` lines are appended verbatim.
    pub fn checkpoint_bytes(&self, env_name: &str, extra: &str) -> Result<Vec<u8>> {
        let mut header = self.header(env_name);
        header.push_str(extra);
        Ok(nn::encode_checkpoint(self.params()?, &header))
    }

    pub fn save_checkpoint(&self, path: &Path, env_name: &str, extra: &str) -> Result<()> {
        write_atomic(path, &self.checkpoint_bytes(env_name, extra)?)
    }

    /// Load parameters saved for the same environment and policy shape.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8], env_name: &str) -> Result<()> {
        let (params, header) = nn::decode_checkpoint(bytes)?;
        let expected = self.header(env_name);
        let keys = ["env", "kind", "h", "d", "n_actions", "obs_dim", "T_d"];
        let field = |text: &str, key: &str| -> Option<String> {
            text.lines().find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        };
        for key in keys {
            let got = field(&header, key);
            let want = field(&expected, key);
            if got != want {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint {key}={} but policy expects {key}={}",
                    got.unwrap_or_default(),
                    want.unwrap_or_default()
                )));
            }
        }
        self.load_params(params)
    }

    pub fn load_checkpoint(&mut self, path: &Path, env_name: &str) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.load_checkpoint_bytes(&bytes, env_name)
    }
}

impl NoisePredictor for Policy {
    fn predict_noise(&self, noisy: &[f32], obs: &[f32], goal: &[f32], t: usize) -> Result<Vec<f32>> {
        let x = self.diffusion_input(noisy, obs, goal, t);
        let (out, _) = nn::forward(&self.spec, self.params()?, &x)?;
        Ok(out)
    }
}

impl ChunkPolicy for Policy {
    fn predict_chunk(&self, _task: &Task, obs: &Observation, goal: &Observation, rng: &mut RngStream) -> Result<ActionChunk> {
        self.predict(obs, goal, rng)
    }

    fn exec_horizon(&self) -> usize {
        self.cfg.exec_horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ActionBounds;

    fn table_space() -> ActionSpace {
        ActionSpace::Continuous(ActionBounds::new(vec![-0.05, -0.05, -1.0], vec![0.05, 0.05, 1.0]).unwrap())
    }

    fn small(kind: PolicyKind, h: usize) -> PolicyConfig {
        PolicyConfig {
            kind,
            horizon: h,
            exec_horizon: h.min(2),
            hidden: vec![32, 32],
            time_embed_dim: 8,
            diffusion_steps: 20,
            ..PolicyConfig::default()
        }
    }

    fn window(rng: &mut RngStream, h: usize, valid: usize) -> Window {
        let obs = Observation((0..7).map(|_| rng.uniform() as f32).collect());
        let goal = Observation((0..7).map(|_| rng.uniform() as f32).collect());
        let acts = (0..valid)
            .map(|_| {
                Action::Continuous(vec![
                    rng.uniform_range(-0.05, 0.05) as f32,
                    rng.uniform_range(-0.05, 0.05) as f32,
                    rng.uniform_range(-1.0, 1.0) as f32,
                ])
            })
            .collect();
        Window { obs, goal, chunk: ActionChunk::padded(acts, h, &Action::Continuous(vec![0.0; 3])).unwrap() }
    }

    #[test]
    fn default_config_matches_training_table() {
        let c = PolicyConfig::default();
        assert_eq!((c.horizon, c.exec_horizon, c.diffusion_steps, c.batch_size), (16, 8, 100, 64));
        assert_eq!(c.lr, 1e-4);
        c.validate().unwrap();
        let bad = PolicyConfig { exec_horizon: 17, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schedule_properties() {
        let c = PolicyConfig::default();
        let s = DiffusionSchedule::linear(100, f64::from(c.beta_start), f64::from(c.beta_end)).unwrap();
        assert_eq!(s.alpha_bars[0], s.alphas[0]);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars.iter().all(|a| *a > 0.0 && *a < 1.0));
        assert!(s.alpha_bars[99] < 0.02);
        assert_eq!(s.timesteps(Sampler::Strided(10)), vec![99, 89, 79, 69, 59, 49, 39, 29, 19, 9]);
        assert_eq!(s.timesteps(Sampler::Ancestral).len(), 100);
    }

    #[test]
    fn zero_policy_predicts_zero_chunk() {
        let p = Policy::new(small(PolicyKind::Regression, 4), 7, table_space(), Init::Zero, &mut RngStream::new(0))
            .unwrap();
        let o = Observation(vec![0.3; 7]);
        let c = p.predict(&o, &o, &mut RngStream::new(1)).unwrap();
        assert_eq!(c.valid_len(), 4);
        assert!(c.actions().iter().all(|a| a.as_continuous().unwrap().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn unloaded_policy_is_illegal() {
        let p = Policy::unloaded(small(PolicyKind::Regression, 4), 7, table_space()).unwrap();
        let o = Observation(vec![0.3; 7]);
        assert!(matches!(p.predict(&o, &o, &mut RngStream::new(1)), Err(Error::IllegalState(_))));
    }

    #[test]
    fn outputs_respect_bounds() {
        let mut rng = RngStream::new(4);
        for kind in [PolicyKind::Regression, PolicyKind::Diffusion] {
            let p = Policy::new(small(kind, 4), 7, table_space(), Init::Random, &mut rng).unwrap();
            for _ in 0..200 {
                let o = Observation((0..7).map(|_| rng.normal() as f32 * 5.0).collect());
                let g = Observation((0..7).map(|_| rng.normal() as f32 * 5.0).collect());
                let c = p.predict(&o, &g, &mut rng).unwrap();
                for a in c.actions() {
                    let v = a.as_continuous().unwrap();
                    assert!(v[0].abs() <= 0.05 && v[1].abs() <= 0.05 && v[2].abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn fixed_point_batch_has_zero_loss_and_no_update() {
        let mut rng = RngStream::new(2);
        let mut p = Policy::new(small(PolicyKind::Regression, 2), 7, table_space(), Init::Zero, &mut rng).unwrap();
        let null = Action::Continuous(vec![0.0; 3]);
        let w = Window {
            obs: Observation(vec![0.1; 7]),
            goal: Observation(vec![0.6; 7]),
            chunk: ActionChunk::full(vec![null.clone(), null]).unwrap(),
        };
        let before = p.param_hash().unwrap();
        let loss = p.regression_train_step(&[w], Exec::Sequential).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(p.param_hash().unwrap(), before);
    }

    #[test]
    fn own_prediction_as_target_has_negligible_loss() {
        let mut rng = RngStream::new(2);
        let p = Policy::new(small(PolicyKind::Regression, 2), 7, table_space(), Init::Random, &mut rng).unwrap();
        let o = Observation(vec![0.1; 7]);
        let g = Observation(vec![0.6; 7]);
        let (raw, _) = nn::forward(p.spec(), p.params().unwrap(), &Policy::regression_input(&o, &g)).unwrap();
        let bounds = p.action_space().bounds().unwrap().clone();
        let acts = raw
            .chunks(3)
            .map(|c| Action::Continuous(c.iter().enumerate().map(|(k, v)| bounds.denormalize(k, *v)).collect()))
            .collect();
        let w = Window { obs: o, goal: g, chunk: ActionChunk::full(acts).unwrap() };
        let (loss, grads) = p.regression_loss_grad(&[w], Exec::Sequential).unwrap();
        assert!(loss < 1e-10, "{loss}");
        assert!(grads.iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn padded_targets_do_not_affect_loss() {
        let mut rng = RngStream::new(3);
        let p = Policy::new(small(PolicyKind::Regression, 4), 7, table_space(), Init::Random, &mut rng).unwrap();
        let w = window(&mut rng, 4, 2);
        let mut garbage = w.clone();
        let mut acts = w.chunk.valid().to_vec();
        acts.extend([Action::Continuous(vec![0.04, -0.03, 0.9]), Action::Continuous(vec![-0.01, 0.02, -0.5])]);
        // Same valid prefix, different padded tail.
        garbage.chunk = ActionChunk::full(acts).unwrap();
        let garbage = Window {
            chunk: ActionChunk::padded(garbage.chunk.actions()[..2].to_vec(), 4, &Action::Continuous(vec![0.0; 3])).unwrap(),
            ..garbage
        };
        let (l1, g1) = p.regression_loss_grad(std::slice::from_ref(&w), Exec::Sequential).unwrap();
        let (l2, g2) = p.regression_loss_grad(&[garbage], Exec::Sequential).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn memorizes_single_window() {
        let mut rng = RngStream::new(5);
        let cfg = PolicyConfig { lr: 1e-3, ..small(PolicyKind::Regression, 4) };
        let mut p = Policy::new(cfg, 7, table_space(), Init::Random, &mut rng).unwrap();
        let w = window(&mut rng, 4, 4);
        let batch = vec![w; 8];
        let mut loss = f32::MAX;
        for _ in 0..2000 {
            loss = p.regression_train_step(&batch, Exec::Sequential).unwrap();
        }
        assert!(loss < 1e-4, "{loss}");
    }

    #[test]
    fn ddpm_initial_loss_is_unit_noise() {
        let mut rng = RngStream::new(6);
        let p = Policy::new(small(PolicyKind::Diffusion, 4), 7, table_space(), Init::Random, &mut rng).unwrap();
        let batch: Vec<Window> = (0..64).map(|_| window(&mut rng, 4, 4)).collect();
        let mut total = 0.0;
        for i in 0..20 {
            total += p.ddpm_loss_grad(&batch, &mut rng.fork_indexed("b", i), Exec::Sequential).unwrap().0;
        }
        let mean = total / 20.0;
        assert!((mean - 1.0).abs() < 0.1, "{mean}");
    }

    struct PointMass(Vec<f32>, DiffusionSchedule);

    impl NoisePredictor for PointMass {
        fn predict_noise(&self, noisy: &[f32], _: &[f32], _: &[f32], t: usize) -> Result<Vec<f32>> {
            let ab = self.1.alpha_bars[t];
            Ok(noisy
                .iter()
                .zip(&self.0)
                .map(|(x, c)| ((f64::from(*x) - ab.sqrt() * f64::from(*c)) / (1.0 - ab).sqrt()) as f32)
                .collect())
        }
    }

    #[test]
    fn perfect_predictor_recovers_target_with_both_samplers() {
        let s = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
        let target = vec![0.3, -0.7, 0.9, 0.0];
        let oracle = PointMass(target.clone(), s.clone());
        for sampler in [Sampler::Ancestral, Sampler::Strided(10)] {
            let x = ddpm_sample_with(&oracle, &s, sampler, 4, &[], &[], &mut RngStream::new(1)).unwrap();
            for (a, b) in x.iter().zip(&target) {
                assert!((a - b).abs() < 1e-4, "{sampler}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn diffusion_sampling_is_seeded() {
        let mut rng = RngStream::new(7);
        let p = Policy::new(small(PolicyKind::Diffusion, 4), 7, table_space(), Init::Random, &mut rng).unwrap();
        let o = Observation(vec![0.2; 7]);
        let a = p.predict(&o, &o, &mut RngStream::new(9)).unwrap();
        let b = p.predict(&o, &o, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn discrete_head() {
        let mut rng = RngStream::new(8);
        let mut p = Policy::new(PolicyConfig { lr: 1e-2, ..small(PolicyKind::Regression, 1) }, 5, ActionSpace::Discrete(4), Init::Random, &mut rng)
            .unwrap();
        let o = Observation(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let g = Observation(vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        let w = Window { obs: o.clone(), goal: g.clone(), chunk: ActionChunk::full(vec![Action::Discrete(2)]).unwrap() };
        for _ in 0..200 {
            p.regression_train_step(std::slice::from_ref(&w), Exec::Sequential).unwrap();
        }
        assert_eq!(p.predict(&o, &g, &mut rng).unwrap().actions()[0], Action::Discrete(2));
        assert!(Policy::unloaded(small(PolicyKind::Regression, 4), 5, ActionSpace::Discrete(4)).is_err());
    }

    #[test]
    fn checkpoint_guards() {
        let mut rng = RngStream::new(10);
        let p = Policy::new(small(PolicyKind::Regression, 4), 7, table_space(), Init::Random, &mut rng).unwrap();
        let bytes = p.checkpoint_bytes("table_sim", "").unwrap();
        let mut q = Policy::unloaded(small(PolicyKind::Regression, 4), 7, table_space()).unwrap();
        q.load_checkpoint_bytes(&bytes, "table_sim").unwrap();
        assert_eq!(q.param_hash().unwrap(), p.param_hash().unwrap());
        let mut grid = Policy::unloaded(small(PolicyKind::Regression, 1), 88, ActionSpace::Discrete(4)).unwrap();
        assert!(matches!(grid.load_checkpoint_bytes(&bytes, "grid_nav"), Err(Error::ConfigMismatch(_))));
        assert!(matches!(q.load_checkpoint_bytes(&bytes[..bytes.len() - 3], "table_sim"), Err(Error::CorruptCheckpoint(_))));
    }
}
