use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vidguide::baselines::{generate_demos, BaselineKind};
use vidguide::codec::write_atomic;
use vidguide::envs::Env;
use vidguide::explore::run_training;
use vidguide::harness::{
    self, emit_plot, read_report_csv, report_csv, run_ablation, run_baseline, save_checkpoint, sweep,
    write_ablation, AblationResult, PlotKind, ReportRow, RunConfig, SeedRun, Series, SweepAxis, Variant,
};
use vidguide::par::{self, Exec};
use vidguide::Error;

#[derive(Parser, Debug)]
#[command(name = "vidguide", version, about = "Video-guided goal-conditioned exploration")]
struct Cli {
    /// Run config (TOML, one table per module). Defaults to TableSim.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train one variant and save the final policy per seed.
    Train {
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate a saved policy checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episodes per task; defaults to the config's eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and report several variants.
    Ablate {
        /// Comma-separated; defaults to all variants.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// One cell per value along an axis (q_v, H, h, demos, checkpoints).
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Write scripted expert demonstrations.
    DemoGen {
        /// Defaults to the config's baseline.demos_per_task.
        #[arg(long)]
        per_task: Option<usize>,
    },
    /// Train and evaluate a demo-supervised baseline.
    TrainBaseline {
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Render report CSVs or metrics logs as SVG with a CSV sidecar.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotArg,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Defaults to `<out-dir>/<kind>.svg`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Bc,
    Gcbc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PlotArg {
    SuccessVsRollouts,
    RateBars,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::ConfigMismatch(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml_str("")?,
    };
    if let Some(s) = cli.seed {
        cfg.run.seeds = vec![s];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let exec = match cli.workers {
        Some(0) => return Err(Error::Config("--workers must be >= 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            par::set_workers(n);
            Exec::Parallel
        }
        None => Exec::default(),
    };
    let out = cli.out_dir.as_path();
    match &cli.cmd {
        Cmd::Train { variant } => {
            let cfg = load_config(&cli)?;
            let variant: Variant = variant.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let cfg = variant.apply(&cfg);
            let hash = cfg.config_hash();
            let mut runs = Vec::new();
            for &seed in &cfg.run.seeds {
                let res = run_training(&cfg, seed, exec)?;
                let path = out.join(variant.as_str()).join(format!("policy_seed{seed}.vgp"));
                save_checkpoint(&res.policy, &cfg, &path)?;
                let run = SeedRun::from_outcome(seed, &res, cfg.run.final_window);
                println!("{variant} seed {seed}: final success {:.3}", run.final_success);
                runs.push(run);
            }
            let arts = write_ablation(out, &[AblationResult { variant: variant.as_str().into(), runs }], &hash)?;
            println!("wrote {}", arts.report.display());
        }
        Cmd::Eval { checkpoint, episodes } => {
            let cfg = load_config(&cli)?;
            let policy = harness::load_checkpoint(&cfg, checkpoint)?;
            let env = Env::new(&cfg.env)?;
            let tasks = cfg.tasks_for(&env)?;
            let settings = cfg.explore.rollout_settings(env.name());
            let e = episodes.unwrap_or(cfg.run.eval_episodes);
            let mut rows = Vec::new();
            for &seed in &cfg.run.seeds {
                let report = harness::evaluate(&policy, &env, &tasks, e, &settings, &harness::eval_rng(seed), exec)?;
                println!("seed {seed}: success {:.3}", report.overall_rate());
                rows.extend(report.per_task.iter().map(|t| ReportRow {
                    variant: "eval".into(),
                    task_id: t.task_id.to_string(),
                    rate: Some(t.rate()),
                    std: None,
                    n: t.episodes,
                    seed_list: seed.to_string(),
                }));
            }
            let path = out.join("eval.csv");
            write_atomic(&path, report_csv(&rows, &cfg.config_hash())?.as_bytes())?;
            println!("wrote {}", path.display());
        }
        Cmd::Ablate { variants } => {
            let cfg = load_config(&cli)?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
                    .iter()
                    .map(|v| v.parse().map_err(|e: Error| Error::Config(e.to_string())))
                    .collect::<Result<_, _>>()?
            };
            let mut results = Vec::new();
            for v in variants {
                let res = run_ablation(&cfg, v, exec)?;
                println!("{v}: mean final success {:.3}", res.mean_final());
                results.push(res);
            }
            let arts = write_ablation(out, &results, &cfg.config_hash())?;
            println!("wrote {}", arts.report.display());
        }
        Cmd::Sweep { axis, values } => {
            let cfg = load_config(&cli)?;
            let axis: SweepAxis = axis.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let rows = sweep(&cfg, axis, values, exec)?;
            for r in &rows {
                match r.rate {
                    Some(rate) => println!("{}: {rate:.3}", r.variant),
                    None => println!("{}: failed", r.variant),
                }
            }
            let path = out.join(format!("sweep_{}.csv", axis.as_str()));
            write_atomic(&path, report_csv(&rows, &cfg.config_hash())?.as_bytes())?;
            let bars: Vec<Series> = rows
                .iter()
                .filter_map(|r| r.rate.map(|y| Series { label: r.variant.clone(), points: vec![(0.0, y)] }))
                .collect();
            if !bars.is_empty() {
                emit_plot(&bars, PlotKind::RateBars, &path.with_extension("svg"), &cfg.config_hash())?;
            }
            println!("wrote {}", path.display());
        }
        Cmd::DemoGen { per_task } => {
            let cfg = load_config(&cli)?;
            let env = Env::new(&cfg.env)?;
            let tasks = cfg.tasks_for(&env)?;
            let n = per_task.unwrap_or(cfg.baseline.demos_per_task);
            for &seed in &cfg.run.seeds {
                let demos = generate_demos(&env, &tasks, n, seed)?;
                let path = out.join(format!("demos_seed{seed}.vge"));
                demos.save(&path)?;
                println!("wrote {} ({} episodes)", path.display(), demos.episodes().len());
            }
        }
        Cmd::TrainBaseline { kind } => {
            let mut cfg = load_config(&cli)?;
            if let Some(k) = kind {
                cfg.baseline.kind = match k {
                    KindArg::Bc => BaselineKind::Bc,
                    KindArg::Gcbc => BaselineKind::Gcbc,
                };
            }
            let name = cfg.baseline.kind.as_str();
            let mut samples = Vec::new();
            for &seed in &cfg.run.seeds {
                let (baseline, report) = run_baseline(&cfg, seed, exec)?;
                let path = out.join(name).join(format!("policy_seed{seed}.vgp"));
                baseline.policy.save_checkpoint(&path, cfg.env.name.as_str(), &format!("config_hash={}\n", cfg.config_hash()))?;
                println!("{name} seed {seed}: success {:.3}", report.overall_rate());
                samples.push(report.overall_rate());
            }
            let row = ReportRow {
                variant: name.into(),
                task_id: "all".into(),
                rate: Some(harness::mean(&samples)),
                std: harness::sample_std(&samples),
                n: samples.len(),
                seed_list: cfg.run.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
            };
            let path = out.join(name).join("report.csv");
            write_atomic(&path, report_csv(&[row], &cfg.config_hash())?.as_bytes())?;
            println!("wrote {}", path.display());
        }
        Cmd::Plot { kind, input, output } => {
            let (series, kind, stem) = match kind {
                PlotArg::RateBars => (rate_series(input)?, PlotKind::RateBars, "rate_bars"),
                PlotArg::SuccessVsRollouts => (rollout_series(input)?, PlotKind::SuccessVsRollouts, "success_vs_rollouts"),
            };
            let path = output.clone().unwrap_or_else(|| out.join(format!("{stem}.svg")));
            let hash = inputs_hash(input)?;
            emit_plot(&series, kind, &path, &hash)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

/// The config hash recorded in the first input's header.
fn inputs_hash(inputs: &[PathBuf]) -> Result<String, Error> {
    let text = read(&inputs[0])?;
    let first = text.lines().next().unwrap_or_default();
    let hash = first
        .split([' ', '"', ','])
        .skip_while(|t| !t.starts_with("config_hash"))
        .find_map(|t| {
            let v = t.trim_start_matches("config_hash").trim_start_matches(['=', ':']);
            (!v.is_empty()).then(|| v.to_string())
        });
    Ok(hash.unwrap_or_else(|| harness::content_hash(text.as_bytes())))
}

/// One bar per `all` row across the report CSVs.
fn rate_series(inputs: &[PathBuf]) -> Result<Vec<Series>, Error> {
    let mut series = Vec::new();
    for p in inputs {
        for row in read_report_csv(&read(p)?)? {
            if let (Some(rate), "all") = (row.rate, row.task_id.as_str()) {
                series.push(Series { label: row.variant, points: vec![(0.0, rate)] });
            }
        }
    }
    if series.is_empty() {
        return Err(Error::Config("no `all` rows with a rate in the inputs".into()));
    }
    Ok(series)
}

/// Cumulative video-guided successes per metrics log.
fn rollout_series(inputs: &[PathBuf]) -> Result<Vec<Series>, Error> {
    let mut series = Vec::new();
    for p in inputs {
        let mut points = vec![(0.0, 0.0)];
        for line in read(p)?.lines().skip(1) {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            if v["event"] == "video" {
                let x = v["cum_video_rollouts"].as_f64().unwrap_or(0.0);
                let y = v["cum_video_successes"].as_f64().unwrap_or(0.0);
                points.push((x, y));
            }
        }
        let label = p
            .parent()
            .and_then(Path::file_name)
            .map(|d| format!("{}/{}", d.to_string_lossy(), p.file_stem().unwrap_or_default().to_string_lossy()))
            .unwrap_or_else(|| p.display().to_string());
        series.push(Series { label, points });
    }
    Ok(series)
}
