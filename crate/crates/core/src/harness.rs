//! Run configuration, evaluation, ablations, sweeps, reports and plots.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{generate_demos, train_bc, train_gcbc, Baseline, BaselineConfig, BaselineKind};
use crate::codec::write_atomic;
use crate::envs::{Env, EnvConfig, EnvName};
use crate::error::{Error, Result};
use crate::explore::{run_training, video_guided_rollout, ExploreConfig, MetricRow, Period, RolloutSettings, TrainOutcome};
use crate::par::Exec;
use crate::policy::{ChunkPolicy, Policy, PolicyConfig};
use crate::rng::RngStream;
use crate::types::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    /// Task ids to train and evaluate on; empty means all.
    pub tasks: Vec<u32>,
    /// Checkpoint and evaluation cadence `C`.
    pub eval_every: usize,
    /// Evaluation episodes per task `E`.
    pub eval_episodes: usize,
    /// Checkpoints averaged for the final success rate.
    pub final_window: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seeds: vec![0, 1, 2], tasks: Vec::new(), eval_every: 1000, eval_episodes: 25, final_window: 5 }
    }
}

/// Everything one experiment needs. Parsed from TOML with one table per
/// module; missing keys take the defaults for the chosen environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub explore: ExploreConfig,
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn default_for(env: EnvName) -> Self {
        let mut baseline = BaselineConfig::default();
        let policy = match env {
            EnvName::TableSim => PolicyConfig::default(),
            EnvName::GridNav => {
                baseline.k_sub = 2;
                PolicyConfig::grid()
            }
        };
        RunConfig {
            run: RunSection::default(),
            env: EnvConfig::default_for(env),
            policy,
            explore: ExploreConfig::default(),
            baseline,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let env_name = match user.get("env").and_then(|e| e.get("name")) {
            None => EnvName::TableSim,
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::Config("env.name must be a string".into()))?
                .parse()
                .map_err(|e: Error| Error::Config(e.to_string()))?,
        };
        let defaults = toml::Table::try_from(Self::default_for(env_name)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(defaults, user);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// sha256 of the canonical TOML form.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.eval_every == 0 || r.eval_episodes == 0 || r.final_window == 0 {
            return Err(Error::invalid("eval_every, eval_episodes and final_window must be >= 1"));
        }
        if r.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        self.env.validate()?;
        self.policy.validate()?;
        self.explore.validate()?;
        self.baseline.validate()?;
        let env = Env::new(&self.env)?;
        self.tasks_for(&env)?;
        Policy::unloaded(self.policy.clone(), env.obs_dim(), env.action_space())?;
        Ok(())
    }

    pub fn tasks_for(&self, env: &Env) -> Result<Vec<Task>> {
        if self.run.tasks.is_empty() {
            return Ok(env.tasks());
        }
        self.run.tasks.iter().map(|id| env.task(*id)).collect()
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// Git-style blob hash (sha256 over `"blob <len>\0" ‖ bytes`).
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRate {
    pub task_id: u32,
    pub successes: usize,
    pub episodes: usize,
    /// Episodes lost to oracle or rollout errors, counted as failures.
    pub errors: usize,
}

impl TaskRate {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskRate>,
    /// Not part of [`EvalReport::report_hash`].
    pub wall_clock_s: f64,
}

impl EvalReport {
    pub fn overall_rate(&self) -> f64 {
        let s: usize = self.per_task.iter().map(|t| t.successes).sum();
        let n: usize = self.per_task.iter().map(|t| t.episodes).sum();
        if n == 0 {
            0.0
        } else {
            s as f64 / n as f64
        }
    }

    pub fn rate(&self, task_id: u32) -> Option<f64> {
        self.per_task.iter().find(|t| t.task_id == task_id).map(TaskRate::rate)
    }

    pub fn report_hash(&self) -> String {
        let body = serde_json::to_string(&self.per_task).expect("serializes");
        content_hash(body.as_bytes())
    }
}

/// `episodes` randomized-start video-guided rollouts per task. The starts
/// depend only on `rng`, so every call with the same stream sees the same
/// test problems.
pub fn evaluate(
    policy: &dyn ChunkPolicy,
    env: &Env,
    tasks: &[Task],
    episodes: usize,
    settings: &RolloutSettings,
    rng: &RngStream,
    exec: Exec,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::invalid("need at least one evaluation episode"));
    }
    let clock = Instant::now();
    let settings = RolloutSettings { corruption: crate::oracle::CorruptionMode::None, ..*settings };
    let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|t| (0..episodes).map(move |e| (t, e))).collect();
    let outcomes = exec.map(&jobs, |&(t, e)| {
        let mut sim = env.clone();
        let mut r = rng.fork_indexed("task", u64::from(tasks[t].id)).fork_indexed("episode", e as u64);
        video_guided_rollout(&mut sim, &tasks[t], policy, &settings, &mut r)
    });
    let mut per_task: Vec<TaskRate> =
        tasks.iter().map(|t| TaskRate { task_id: t.id, successes: 0, episodes, errors: 0 }).collect();
    for ((t, _), out) in jobs.iter().zip(outcomes) {
        match out {
            Ok(ep) if ep.success() => per_task[*t].successes += 1,
            Ok(_) => {}
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                log::debug!("evaluation episode failed: {e}");
                per_task[*t].errors += 1;
            }
        }
    }
    Ok(EvalReport { per_task, wall_clock_s: clock.elapsed().as_secs_f64() })
}

/// Evaluation stream shared by every run with the same seed.
pub fn eval_rng(seed: u64) -> RngStream {
    RngStream::new(seed).fork("eval")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    WoRand,
    WoVideo,
    WoExtraRand,
    SingleAction,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::WoRand, Variant::WoVideo, Variant::WoExtraRand, Variant::SingleAction];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoRand => "wo_rand",
            Variant::WoVideo => "wo_video",
            Variant::WoExtraRand => "wo_extra_rand",
            Variant::SingleAction => "single_action",
        }
    }

    /// The variant as pure config switches on `base`. Single-action keeps
    /// the per-frame step budget by scaling `k_sub`.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::WoRand => {
                cfg.explore.n_random = 0;
                cfg.explore.extra_random_period = Period::Never;
            }
            Variant::WoVideo => cfg.explore.video_period = Period::Never,
            Variant::WoExtraRand => cfg.explore.extra_random_period = Period::Never,
            Variant::SingleAction => {
                cfg.explore.k_sub *= cfg.policy.exec_horizon;
                cfg.policy.horizon = 1;
                cfg.policy.exec_horizon = 1;
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// Summary of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub final_success: f64,
    pub final_per_task: Vec<(u32, f64)>,
    /// `(iter, cumulative video rollouts, success rate)` per evaluation.
    pub curve: Vec<(usize, u64, f64)>,
    pub metrics: Vec<MetricRow>,
}

impl SeedRun {
    pub fn from_outcome(seed: u64, out: &TrainOutcome, final_window: usize) -> Self {
        let tail = &out.evals[out.evals.len().saturating_sub(final_window)..];
        let final_per_task = tail
            .first()
            .map(|e| {
                e.report
                    .per_task
                    .iter()
                    .map(|t| {
                        let mean = tail.iter().filter_map(|p| p.report.rate(t.task_id)).sum::<f64>() / tail.len() as f64;
                        (t.task_id, mean)
                    })
                    .collect()
            })
            .unwrap_or_default();
        SeedRun {
            seed,
            final_success: out.final_success(final_window),
            final_per_task,
            curve: out.evals.iter().map(|e| (e.iter, e.cum_video_rollouts, e.report.overall_rate())).collect(),
            metrics: out.metrics.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub variant: String,
    pub runs: Vec<SeedRun>,
}

impl AblationResult {
    pub fn mean_final(&self) -> f64 {
        mean(&self.runs.iter().map(|r| r.final_success).collect::<Vec<_>>())
    }

    /// Report rows: one per task plus `all`, aggregated over seeds.
    pub fn rows(&self) -> Vec<ReportRow> {
        let seed_list = self.runs.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(";");
        let mut rows = Vec::new();
        if let Some(first) = self.runs.first() {
            for (k, (task_id, _)) in first.final_per_task.iter().enumerate() {
                let v: Vec<f64> = self.runs.iter().map(|r| r.final_per_task[k].1).collect();
                rows.push(ReportRow::new(&self.variant, &task_id.to_string(), &v, &seed_list));
            }
        }
        let v: Vec<f64> = self.runs.iter().map(|r| r.final_success).collect();
        rows.push(ReportRow::new(&self.variant, "all", &v, &seed_list));
        rows
    }

    /// Curve averaged across seeds, evaluation by evaluation.
    pub fn mean_curve(&self) -> Vec<(f64, f64)> {
        let n = self.runs.iter().map(|r| r.curve.len()).min().unwrap_or(0);
        (0..n)
            .map(|k| {
                let xs: Vec<f64> = self.runs.iter().map(|r| r.curve[k].1 as f64).collect();
                let ys: Vec<f64> = self.runs.iter().map(|r| r.curve[k].2).collect();
                (mean(&xs), mean(&ys))
            })
            .collect()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; `None` with fewer than two samples.
pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub task_id: String,
    /// Empty when the cell failed.
    pub rate: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub seed_list: String,
}

impl ReportRow {
    fn new(variant: &str, task_id: &str, samples: &[f64], seed_list: &str) -> Self {
        ReportRow {
            variant: variant.to_string(),
            task_id: task_id.to_string(),
            rate: Some(round6(mean(samples))),
            std: sample_std(samples).map(round6),
            n: samples.len(),
            seed_list: seed_list.to_string(),
        }
    }

    fn failed(variant: &str, seed_list: &str) -> Self {
        ReportRow {
            variant: variant.to_string(),
            task_id: "all".into(),
            rate: None,
            std: None,
            n: 0,
            seed_list: seed_list.to_string(),
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Train every seed of `variant` applied to `base`.
pub fn run_ablation(base: &RunConfig, variant: Variant, exec: Exec) -> Result<AblationResult> {
    let cfg = variant.apply(base);
    let mut runs = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        let out = run_training(&cfg, seed, exec)
            .map_err(|e| tag(e, &format!("variant {variant}, seed {seed}")))?;
        log::info!("{variant} seed {seed}: final success {:.3}", out.final_success(cfg.run.final_window));
        runs.push(SeedRun::from_outcome(seed, &out, cfg.run.final_window));
    }
    Ok(AblationResult { variant: variant.as_str().to_string(), runs })
}

fn tag(e: Error, what: &str) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{what}: {m}")),
        Error::IllegalState(m) => Error::IllegalState(format!("{what}: {m}")),
        Error::NumericFault(m) => Error::NumericFault(format!("{what}: {m}")),
        Error::PlanningFailure(m) => Error::PlanningFailure(format!("{what}: {m}")),
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        other => other,
    }
}

/// Rollout settings for evaluating a demo-trained baseline.
pub fn baseline_settings(cfg: &RunConfig, kind: BaselineKind) -> RolloutSettings {
    let mut s = cfg.explore.rollout_settings(cfg.env.name);
    s.k_sub = cfg.baseline.k_sub;
    if kind == BaselineKind::Bc || cfg.baseline.final_goal_only {
        // One final-frame goal and the whole step budget.
        s.plan_horizon = 1;
        s.k_sub = cfg.env.t_max.div_ceil(cfg.baseline.policy.exec_horizon);
    }
    s
}

/// Generate demos, train the configured baseline and evaluate it on the
/// same test problems as an exploration run with this seed.
pub fn run_baseline(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<(Baseline, EvalReport)> {
    let env = Env::new(&cfg.env)?;
    let tasks = cfg.tasks_for(&env)?;
    let demos = generate_demos(&env, &tasks, cfg.baseline.demos_per_task, seed)?;
    let (baseline, _) = match cfg.baseline.kind {
        BaselineKind::Bc => train_bc(&demos, &env, &cfg.baseline, seed, exec)?,
        BaselineKind::Gcbc => train_gcbc(&demos, &env, &cfg.baseline, seed, exec)?,
    };
    let settings = baseline_settings(cfg, baseline.kind);
    let report = evaluate(&baseline, &env, &tasks, cfg.run.eval_episodes, &settings, &eval_rng(seed), exec)?;
    Ok((baseline, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    VideoPeriod,
    PlanHorizon,
    PolicyHorizon,
    Demos,
    Checkpoints,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::VideoPeriod => "q_v",
            SweepAxis::PlanHorizon => "H",
            SweepAxis::PolicyHorizon => "h",
            SweepAxis::Demos => "demos",
            SweepAxis::Checkpoints => "checkpoints",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::VideoPeriod, SweepAxis::PlanHorizon, SweepAxis::PolicyHorizon, SweepAxis::Demos, SweepAxis::Checkpoints]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sweep axis {s:?}")))
    }
}

/// Config for one sweep cell.
pub fn sweep_cell(base: &RunConfig, axis: SweepAxis, value: usize) -> Result<RunConfig> {
    if value == 0 {
        return Err(Error::invalid("sweep values must be >= 1"));
    }
    let mut cfg = base.clone();
    match axis {
        SweepAxis::VideoPeriod => cfg.explore.video_period = Period::Every(value),
        SweepAxis::PlanHorizon => cfg.explore.plan_horizon = value,
        SweepAxis::PolicyHorizon => {
            cfg.policy.horizon = value;
            cfg.policy.exec_horizon = cfg.policy.exec_horizon.min(value);
        }
        SweepAxis::Demos => cfg.baseline.demos_per_task = value,
        SweepAxis::Checkpoints => {
            if !value.is_multiple_of(cfg.run.eval_every) || value > cfg.explore.iterations {
                return Err(Error::invalid(format!(
                    "checkpoint {value} is not on the eval cadence {} within {} iterations",
                    cfg.run.eval_every, cfg.explore.iterations
                )));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One row per value, aggregated over the base config's seeds. Failed cells
/// produce a row with an empty rate and the sweep continues.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[usize], exec: Exec) -> Result<Vec<ReportRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let seed_list = base.run.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
    let label = |v: usize| format!("{}={v}", axis.as_str());
    let mut rows = Vec::new();
    if axis == SweepAxis::Checkpoints {
        // One training run per seed; every value reads its checkpoint.
        let mut outcomes = Vec::new();
        for &seed in &base.run.seeds {
            outcomes.push(run_training(base, seed, exec)?);
        }
        for &v in values {
            if let Err(e) = sweep_cell(base, axis, v) {
                log::warn!("sweep cell {}: {e}", label(v));
                rows.push(ReportRow::failed(&label(v), &seed_list));
                continue;
            }
            let samples: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| o.evals.iter().find(|p| p.iter == v).map(|p| p.report.overall_rate()))
                .collect();
            rows.push(ReportRow::new(&label(v), "all", &samples, &seed_list));
        }
        return Ok(rows);
    }
    for &v in values {
        let cell = sweep_cell(base, axis, v).and_then(|cfg| {
            let mut samples = Vec::new();
            for &seed in &cfg.run.seeds {
                let rate = if axis == SweepAxis::Demos {
                    run_baseline(&cfg, seed, exec)?.1.overall_rate()
                } else {
                    run_training(&cfg, seed, exec)?.final_success(cfg.run.final_window)
                };
                samples.push(rate);
            }
            Ok(samples)
        });
        match cell {
            Ok(samples) => rows.push(ReportRow::new(&label(v), "all", &samples, &seed_list)),
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                log::warn!("sweep cell {}: {e}", label(v));
                rows.push(ReportRow::failed(&label(v), &seed_list));
            }
        }
    }
    Ok(rows)
}

/// Prefix `body` with a header line carrying the config and content hashes.
pub fn with_header(comment: &str, config_hash: &str, body: &str) -> String {
    format!("{comment} config_hash={config_hash} content_hash={}\n{body}", content_hash(body.as_bytes()))
}

pub fn metrics_jsonl(rows: &[MetricRow], config_hash: &str) -> String {
    let mut body = String::new();
    for r in rows {
        body.push_str(&serde_json::to_string(r).expect("metric rows serialize"));
        body.push('\n');
    }
    let header = serde_json::json!({
        "config_hash": config_hash,
        "content_hash": content_hash(body.as_bytes()),
    });
    format!("{header}\n{body}")
}

pub fn report_csv(rows: &[ReportRow], config_hash: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(with_header("#", config_hash, &body))
}

pub fn read_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Files written by [`write_ablation`].
#[derive(Debug, Clone, PartialEq)]
pub struct AblationArtifacts {
    pub report: PathBuf,
    pub metrics: Vec<PathBuf>,
    pub plot: PathBuf,
}

/// Metrics per variant and seed, one CSV report, and the success-vs-rollouts plot.
pub fn write_ablation(out_dir: &Path, results: &[AblationResult], config_hash: &str) -> Result<AblationArtifacts> {
    let mut metrics = Vec::new();
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for res in results {
        for run in &res.runs {
            let p = out_dir.join(&res.variant).join(format!("metrics_seed{}.jsonl", run.seed));
            write_atomic(&p, metrics_jsonl(&run.metrics, config_hash).as_bytes())?;
            metrics.push(p);
        }
        rows.extend(res.rows());
        series.push(Series { label: res.variant.clone(), points: cumulative_success_series(res) });
    }
    let report = out_dir.join("report.csv");
    write_atomic(&report, report_csv(&rows, config_hash)?.as_bytes())?;
    let plot = out_dir.join("success_vs_rollouts.svg");
    let series: Vec<Series> = series.into_iter().filter(|s| !s.points.is_empty()).collect();
    if !series.is_empty() {
        emit_plot(&series, PlotKind::SuccessVsRollouts, &plot, config_hash)?;
    }
    Ok(AblationArtifacts { report, metrics, plot })
}

/// Cumulative video-guided successes against video-guided rollouts, from the
/// first seed's metrics.
pub fn cumulative_success_series(res: &AblationResult) -> Vec<(f64, f64)> {
    let Some(run) = res.runs.first() else { return Vec::new() };
    let mut pts = vec![(0.0, 0.0)];
    for r in run.metrics.iter().filter(|r| r.event == "video") {
        pts.push((r.cum_video_rollouts as f64, r.cum_video_successes as f64));
    }
    pts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Lines with markers; x must increase within a series.
    SuccessVsRollouts,
    /// One bar per series from its first point's y.
    RateBars,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const M: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 50.0); // left, right, top, bottom

fn axis_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|c| *c >= v).unwrap_or(10.0 * mag)
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Deterministic standalone SVG.
pub fn render_svg(series: &[Series], kind: PlotKind) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::invalid("plot needs nonempty series"));
    }
    if series.iter().flat_map(|s| &s.points).any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("plot values must be finite"));
    }
    let (pw, ph) = (W - M.0 - M.1, H - M.2 - M.3);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x_label, y_label) = match kind {
        PlotKind::SuccessVsRollouts => ("video-guided rollouts", "successes"),
        PlotKind::RateBars => ("variant", "success rate"),
    };
    let y_max = axis_max(series.iter().flat_map(|s| &s.points).map(|p| p.1).fold(0.0, f64::max));
    let sy = |y: f64| M.2 + ph - y / y_max * ph;
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/></g>"#,
        l = M.0,
        r = W - M.1,
        t = M.2,
        b = M.2 + ph
    );
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#,
            M.0 - 6.0,
            sy(v) + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{x_label}</text>"#,
        M.0 + pw / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 15 {:.2})">{y_label}</text>"#,
        M.2 + ph / 2.0,
        M.2 + ph / 2.0
    );
    match kind {
        PlotKind::SuccessVsRollouts => {
            for ser in series {
                if ser.points.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err(Error::invalid(format!("series {:?} has decreasing x", ser.label)));
                }
            }
            let x_max = axis_max(series.iter().flat_map(|s| &s.points).map(|p| p.0).fold(0.0, f64::max));
            let sx = |x: f64| M.0 + x / x_max * pw;
            for k in 0..=4 {
                let v = x_max * k as f64 / 4.0;
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
                    sx(v),
                    M.2 + ph + 16.0,
                    fmt_tick(v)
                );
            }
            for (i, ser) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let pts: Vec<String> = ser.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
                for (x, y) in &ser.points {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(*x), sy(*y));
                }
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{}</text>"#,
                    M.0 + 10.0,
                    M.2 + 14.0 * (i + 1) as f64,
                    escape(&ser.label)
                );
            }
        }
        PlotKind::RateBars => {
            let slot = pw / series.len() as f64;
            for (i, ser) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let y = ser.points[0].1;
                let x = M.0 + slot * i as f64 + slot * 0.15;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                    sy(y),
                    slot * 0.7,
                    M.2 + ph - sy(y)
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
                    x + slot * 0.35,
                    M.2 + ph + 16.0,
                    escape(&ser.label)
                );
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// The plotted numbers as `series,x,y` rows.
pub fn plot_csv(series: &[Series]) -> String {
    let mut out = String::from("series,x,y\n");
    for s in series {
        for (x, y) in &s.points {
            let _ = writeln!(out, "{},{x},{y}", s.label);
        }
    }
    out
}

/// Write `path` (SVG) and a CSV sidecar next to it.
pub fn emit_plot(series: &[Series], kind: PlotKind, path: &Path, config_hash: &str) -> Result<()> {
    let svg = render_svg(series, kind)?;
    let svg = format!(
        "<!-- config_hash={config_hash} content_hash={} -->\n{svg}",
        content_hash(svg.as_bytes())
    );
    write_atomic(path, svg.as_bytes())?;
    write_atomic(&path.with_extension("csv"), with_header("#", config_hash, &plot_csv(series)).as_bytes())
}

/// Save with the run's config hash in the header.
pub fn save_checkpoint(policy: &Policy, cfg: &RunConfig, path: &Path) -> Result<()> {
    policy.save_checkpoint(path, cfg.env.name.as_str(), &format!("config_hash={}\n", cfg.config_hash()))
}

/// A policy shaped by `cfg` with parameters from `path`.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Policy> {
    let env = Env::new(&cfg.env)?;
    let mut p = Policy::unloaded(cfg.policy.clone(), env.obs_dim(), env.action_space())?;
    p.load_checkpoint(path, cfg.env.name.as_str())?;
    Ok(p)
}
