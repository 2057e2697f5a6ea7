//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use vidguide::envs::{ActionSpace, Env, EnvConfig};
use vidguide::explore::{random_chunk_episode, ExploreConfig, ReplayBuffer};
use vidguide::nn::{backward, forward, MlpParams, MlpSpec};
use vidguide::policy::{ddpm_sample_with, DiffusionSchedule, NoisePredictor, Policy, PolicyConfig, Sampler};
use vidguide::types::{Action, Episode, EpisodeRecorder, EpisodeSource};
use vidguide::{Observation, RngStream, Task};

/// Every network shape the crate trains, named for messages.
pub fn architectures() -> Vec<(String, MlpSpec, Loss)> {
    let table = Env::new(&EnvConfig::table_sim()).unwrap();
    let grid = Env::new(&EnvConfig::grid_nav()).unwrap();
    let raster = Env::new(&EnvConfig { raster: true, ..EnvConfig::grid_nav() }).unwrap();
    let spec = |cfg: PolicyConfig, env: &Env| {
        Policy::unloaded(cfg, env.obs_dim(), env.action_space()).unwrap().spec().clone()
    };
    let n_grid = match grid.action_space() {
        ActionSpace::Discrete(n) => n,
        ActionSpace::Continuous(_) => unreachable!(),
    };
    vec![
        ("table regression".into(), spec(PolicyConfig::default(), &table), Loss::Mse),
        ("table diffusion".into(), spec(PolicyConfig::diffusion(), &table), Loss::Mse),
        (
            "table single-step baseline".into(),
            spec(PolicyConfig { horizon: 1, exec_horizon: 1, ..PolicyConfig::default() }, &table),
            Loss::Mse,
        ),
        ("grid one-hot".into(), spec(PolicyConfig::grid(), &grid), Loss::CrossEntropy(n_grid)),
        ("grid raster".into(), spec(PolicyConfig::grid(), &raster), Loss::CrossEntropy(n_grid)),
    ]
}

#[derive(Debug, Clone, Copy)]
pub enum Loss {
    Mse,
    /// Softmax cross-entropy over this many logits per row.
    CrossEntropy(usize),
}

/// Scalar loss and its gradient with respect to the outputs.
pub fn loss_f64(loss: Loss, out: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    match loss {
        Loss::Mse => {
            let n = out.len() as f64;
            let l = out.iter().zip(target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / n;
            (l, out.iter().zip(target).map(|(o, t)| 2.0 * (o - t) / n).collect())
        }
        Loss::CrossEntropy(k) => {
            let rows = out.len() / k;
            let mut l = 0.0;
            let mut g = vec![0.0; out.len()];
            for r in 0..rows {
                let z = &out[r * k..(r + 1) * k];
                let y = target[r] as usize;
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                l += (s.ln() + m - z[y]) / rows as f64;
                for j in 0..k {
                    let p = (z[j] - m).exp() / s;
                    g[r * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / rows as f64;
                }
            }
            (l, g)
        }
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over `n_coords` random parameters plus one random direction.
pub fn fd_max_rel_error(spec: &MlpSpec, loss: Loss, seed: u64, rows: usize, n_coords: usize) -> f64 {
    let mut rng = RngStream::new(seed).fork("fd");
    let params: MlpParams<f64> = MlpParams::<f32>::init(spec, &mut rng).cast();
    let input: Vec<f64> = (0..rows * spec.input_width()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let target: Vec<f64> = match loss {
        Loss::Mse => (0..rows * spec.output_width()).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        Loss::CrossEntropy(k) => (0..rows).map(|_| rng.below(k) as f64).collect(),
    };
    let eval = |p: &MlpParams<f64>| {
        let (out, _) = forward(spec, p, &input).unwrap();
        loss_f64(loss, &out, &target).0
    };
    let (out, cache) = forward(spec, &params, &input).unwrap();
    let (_, g_out) = loss_f64(loss, &out, &target);
    let grad = backward(spec, &params, &cache, &g_out).unwrap();

    let eps = 1e-5;
    let rel = |a: f64, f: f64| (a - f).abs() / (a.abs().max(f.abs())).max(1e-7);
    let mut worst: f64 = 0.0;
    for _ in 0..n_coords {
        let k = rng.below(params.len());
        let mut plus = params.clone();
        plus.as_mut_slice()[k] += eps;
        let mut minus = params.clone();
        minus.as_mut_slice()[k] -= eps;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        worst = worst.max(rel(grad[k], fd));
    }
    let mut dir: Vec<f64> = (0..params.len()).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|d| *d /= norm);
    let step = |s: f64| {
        let mut p = params.clone();
        for (v, d) in p.as_mut_slice().iter_mut().zip(&dir) {
            *v += s * d;
        }
        eval(&p)
    };
    let fd = (step(eps) - step(-eps)) / (2.0 * eps);
    let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
    worst.max(rel(analytic, fd))
}

/// Plain triple-loop dense layer stack, ReLU between layers.
pub fn naive_forward(spec: &MlpSpec, params: &MlpParams<f64>, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = params.layers().len();
    for li in 0..n {
        let w = params.weights(li);
        let b = params.biases(li);
        let (n_in, n_out) = (spec.widths()[li], spec.widths()[li + 1]);
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            z[o] = b[o];
            for i in 0..n_in {
                z[o] += w[o * n_in + i] * h[i];
            }
        }
        if li + 1 < n {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = z;
    }
    h
}

/// Every `(episode, start)` pair a uniform window sampler may return.
pub fn brute_force_windows(episodes: &[Episode], h: usize) -> BTreeSet<(usize, usize)> {
    let mut set = BTreeSet::new();
    for (e, ep) in episodes.iter().enumerate() {
        let t = ep.len();
        for i in 0..=t {
            if i + h <= t || (i == 0 && t < h) {
                set.insert((e, i));
            }
        }
    }
    set
}

/// Scalar observation `e * 1000 + k` at step `k` of episode `e`; action `k`
/// leads into step `k`.
pub fn tagged_episode(e: usize, t: usize) -> Episode {
    let task = Task::new(0, "place-left", "table_sim");
    let tag = |k: usize| Observation(vec![(e * 1000 + k) as f32]);
    let mut rec = EpisodeRecorder::new(task, tag(0));
    for k in 1..=t {
        rec.push(Action::Continuous(vec![k as f32]), tag(k));
    }
    rec.finish(false, EpisodeSource::Random).unwrap()
}

/// Windows reachable by sampling `draws` times from a buffer of `episodes`,
/// decoded from the tags of [`tagged_episode`].
pub fn sampled_windows(episodes: &[Episode], h: usize, draws: usize, rng: &mut RngStream) -> BTreeSet<(usize, usize)> {
    let buffer = ReplayBuffer::new(episodes.len()).unwrap();
    for ep in episodes {
        buffer.append(ep.clone()).unwrap();
    }
    (0..draws)
        .map(|_| {
            let tag = buffer.sample_window(h, rng).unwrap().obs.0[0] as usize;
            (tag / 1000, tag % 1000)
        })
        .collect()
}

/// Replay `n_windows` sampled windows from fresh random episodes and count
/// goals that are not reproduced bit for bit.
pub fn replay_mismatches(cfg: EnvConfig, n_windows: usize, seed: u64) -> usize {
    let mut env = Env::new(&cfg).unwrap();
    let tasks = env.tasks();
    let ex = ExploreConfig::default();
    let buffer = ReplayBuffer::new(200).unwrap();
    for k in 0..60 {
        let task = &tasks[k % tasks.len()];
        let ep = random_chunk_episode(&mut env, task, &ex, &mut RngStream::new(seed).fork_indexed("ep", k as u64)).unwrap();
        buffer.append(ep).unwrap();
    }
    let mut rng = RngStream::new(seed).fork("windows");
    let snapshot = buffer.snapshot();
    let bits = |o: &Observation| o.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut bad = 0;
    for _ in 0..n_windows {
        let w = buffer.sample_window(16, &mut rng).unwrap();
        let task = snapshot.iter().find(|ep| ep.observations().contains(&w.obs)).unwrap().task().clone();
        env.restore(&task, &w.obs).unwrap();
        let mut last = w.obs.clone();
        for a in w.chunk.valid() {
            last = env.step(a).unwrap().observation;
        }
        if bits(&last) != bits(&w.goal) {
            bad += 1;
        }
    }
    bad
}

/// Exact noise for a point mass at `target`.
pub struct PointMass<'a> {
    pub target: &'a [f32],
    pub schedule: &'a DiffusionSchedule,
}

impl NoisePredictor for PointMass<'_> {
    fn predict_noise(&self, noisy: &[f32], _: &[f32], _: &[f32], t: usize) -> vidguide::Result<Vec<f32>> {
        let ab = self.schedule.alpha_bars[t];
        Ok(noisy
            .iter()
            .zip(self.target)
            .map(|(x, c)| ((f64::from(*x) - ab.sqrt() * f64::from(*c)) / (1.0 - ab).sqrt()) as f32)
            .collect())
    }
}

/// A random target chunk in normalized units and the mean of `n` samples
/// drawn with the exact noise oracle for it.
pub fn point_mass_samples(sampler: Sampler, n: usize) -> (Vec<f32>, Vec<f64>) {
    let cfg = PolicyConfig::diffusion();
    let schedule =
        DiffusionSchedule::linear(cfg.diffusion_steps, f64::from(cfg.beta_start), f64::from(cfg.beta_end)).unwrap();
    let mut rng = RngStream::new(3);
    let target: Vec<f32> = (0..48).map(|_| rng.uniform_range(-0.9, 0.9) as f32).collect();
    let oracle = PointMass { target: &target, schedule: &schedule };
    let mut mean = vec![0.0f64; target.len()];
    for k in 0..n {
        let s = ddpm_sample_with(&oracle, &schedule, sampler, target.len(), &[], &[], &mut rng.fork_indexed("s", k as u64))
            .unwrap();
        for (m, v) in mean.iter_mut().zip(&s) {
            *m += f64::from(*v) / n as f64;
        }
    }
    (target, mean)
}

/// Effector cells visited on a `cells x cells` grid, per episode.
pub fn visited_cells(ep: &Episode, cells: usize) -> BTreeSet<(usize, usize)> {
    ep.observations()
        .iter()
        .map(|o| {
            let c = |v: f32| ((v * cells as f32) as usize).min(cells - 1);
            (c(o.0[0]), c(o.0[1]))
        })
        .collect()
}

/// Zero-mean i.i.d. Gaussian actions from the same reset as
/// [`random_chunk_episode`] with this stream.
pub fn iid_episode(env: &mut Env, task: &Task, sigma: f64, rng: &RngStream) -> Episode {
    let first = env.reset(task, &mut rng.fork("reset")).unwrap();
    let mut r = rng.fork("iid");
    let bounds = match env.action_space() {
        ActionSpace::Continuous(b) => b,
        ActionSpace::Discrete(_) => unreachable!(),
    };
    let mut rec = EpisodeRecorder::new(task.clone(), first);
    while !env.is_done() {
        let mut a: Vec<f32> = (0..bounds.dim()).map(|_| (sigma * r.normal()) as f32).collect();
        bounds.clamp_in_place(&mut a);
        let a = Action::Continuous(a);
        let out = env.step(&a).unwrap();
        rec.push(a, out.observation);
    }
    let ok = env.is_success();
    rec.finish(ok, EpisodeSource::Random).unwrap()
}

/// Mean cells per episode for chunked and i.i.d. exploration over
/// `episodes` shared resets.
pub fn coverage_pair(episodes: usize, cells: usize, seed: u64) -> (f64, f64) {
    let mut env = Env::new(&EnvConfig::table_sim()).unwrap();
    let tasks = env.tasks();
    let cfg = ExploreConfig::default();
    let root = RngStream::new(seed);
    let (mut chunked, mut iid) = (0usize, 0usize);
    for k in 0..episodes {
        let task = &tasks[k % tasks.len()];
        let rng = root.fork_indexed("episode", k as u64);
        let ep = random_chunk_episode(&mut env, task, &cfg, &mut rng.clone()).unwrap();
        chunked += visited_cells(&ep, cells).len();
        let ep = iid_episode(&mut env, task, 0.025, &rng);
        iid += visited_cells(&ep, cells).len();
    }
    (chunked as f64 / episodes as f64, iid as f64 / episodes as f64)
}
