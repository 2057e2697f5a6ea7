mod common;

use common::{architectures, fd_max_rel_error, naive_forward};
use vidguide::envs::{Env, EnvConfig};
use vidguide::explore::{random_chunk_episode, window_at, ExploreConfig};
use vidguide::nn::{forward, MlpParams};
use vidguide::par::Exec;
use vidguide::policy::{Init, Policy, PolicyConfig, PolicyKind, Window};
use vidguide::RngStream;

#[test]
fn backprop_matches_finite_differences_on_every_architecture() {
    for (name, spec, loss) in architectures() {
        for seed in 0..3 {
            let err = fd_max_rel_error(&spec, loss, seed, 3, 20);
            assert!(err <= 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn forward_matches_naive_matmul() {
    for (name, spec, _) in architectures() {
        let mut rng = RngStream::new(11);
        let params: MlpParams<f64> = MlpParams::<f32>::init(&spec, &mut rng).cast();
        let x: Vec<f64> = (0..2 * spec.input_width()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let (out, _) = forward(&spec, &params, &x).unwrap();
        let w = spec.input_width();
        for r in 0..2 {
            let want = naive_forward(&spec, &params, &x[r * w..(r + 1) * w]);
            let got = &out[r * spec.output_width()..(r + 1) * spec.output_width()];
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{name}: {a} vs {b}");
            }
        }
    }
}

fn table_windows(n: usize) -> (Env, Vec<Window>) {
    let mut env = Env::new(&EnvConfig::table_sim()).unwrap();
    let task = env.task(0).unwrap();
    let cfg = ExploreConfig::default();
    let mut windows = Vec::new();
    let mut k = 0;
    while windows.len() < n {
        let ep = random_chunk_episode(&mut env, &task, &cfg, &mut RngStream::new(k)).unwrap();
        windows.push(window_at(&ep, (k as usize * 7) % (ep.len() - 16), 16).unwrap());
        k += 1;
    }
    (env, windows)
}

/// The shipped f32 loss agrees with its own gradient along a random direction.
#[test]
fn policy_regression_gradient_is_a_descent_direction() {
    let (env, batch) = table_windows(8);
    let cfg = PolicyConfig { hidden: vec![32, 32], ..PolicyConfig::default() };
    let mut p = Policy::new(cfg, env.obs_dim(), env.action_space(), Init::Random, &mut RngStream::new(1)).unwrap();
    let (l0, g) = p.regression_loss_grad(&batch, Exec::Sequential).unwrap();
    let norm2: f64 = g.iter().map(|v| f64::from(*v).powi(2)).sum();
    let step = 1e-3 / norm2.sqrt();
    let mut params = p.params().unwrap().clone();
    for (v, gv) in params.as_mut_slice().iter_mut().zip(&g) {
        *v -= (step * f64::from(*gv)) as f32;
    }
    p.load_params(params).unwrap();
    let (l1, _) = p.regression_loss_grad(&batch, Exec::Sequential).unwrap();
    let predicted = step * norm2;
    assert!(((l0 - l1) - predicted).abs() <= 0.05 * predicted, "decrease {} vs {predicted}", l0 - l1);
}

#[test]
fn sequential_and_parallel_gradients_are_bit_identical() {
    let (env, batch) = table_windows(64);
    for cfg in [PolicyConfig::default(), PolicyConfig::diffusion()] {
        let p = Policy::new(cfg, env.obs_dim(), env.action_space(), Init::Random, &mut RngStream::new(2)).unwrap();
        let a = grad_bits(&p, &batch, Exec::Sequential);
        let b = grad_bits(&p, &batch, Exec::Parallel);
        assert_eq!(a, b);
    }
}

fn grad_bits(p: &Policy, batch: &[Window], exec: Exec) -> (u64, Vec<u32>) {
    let (l, g) = match p.config().kind {
        PolicyKind::Regression => p.regression_loss_grad(batch, exec).unwrap(),
        PolicyKind::Diffusion => p.ddpm_loss_grad(batch, &mut RngStream::new(5), exec).unwrap(),
    };
    (l.to_bits(), g.iter().map(|v| v.to_bits()).collect())
}
