use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use quadred_smpc::harness::{
    compare_methods, format_table, run_episode, train_agent, write_comparison, write_telemetry,
    HarnessConfig, MethodEntry, Predictor,
};
use quadred_smpc::nn_core::Checkpoint;
use quadred_smpc::quadred::{write_learning_curve, QuadredAgent};
use quadred_smpc::sadf_smpc::TrackingController;
use quadred_smpc::wind::WindScenario;

const OUT_DIR_ENV: &str = "QUADRED_OUT_DIR";

#[derive(Parser)]
#[command(name = "quadred", version, about = "Quadrotor tracking with a distributional disturbance estimator and stochastic MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults are used for absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to $QUADRED_OUT_DIR, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    /// Option-based distributional estimator.
    Quadred,
    /// Single option over all quantiles (mean critic).
    MeanCritic,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Quadred => "quadred",
            Variant::MeanCritic => "mean_critic",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an estimator and write its checkpoint and learning curve.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "quadred")]
        variant: Variant,
        /// Overrides training.episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run one episode and write per-step telemetry.
    Track {
        #[command(flatten)]
        common: Common,
        /// Constant aerodynamic effect "x,y,z" in m/s^2.
        #[arg(long)]
        wind: Option<String>,
        /// Estimator checkpoint; without one the controller plans with a zero mean.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare the configured methods over the configured forces.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Overrides bench.trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Print the full default configuration.
    Defaults,
}

fn load(common: &Common) -> Result<(HarnessConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => HarnessConfig::load(path)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    eprintln!("# effective configuration\n{}", cfg.to_toml());
    Ok((cfg, out))
}

fn parse_wind(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("--wind expects three comma-separated components, got {text:?}");
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().with_context(|| format!("--wind component {p:?}"))?;
    }
    Ok(out)
}

fn load_agent(path: &Path, cfg: &HarnessConfig) -> Result<QuadredAgent> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    QuadredAgent::from_checkpoint(&ckpt, cfg.agent.clone()).with_context(|| format!("loading {}", path.display()))
}

fn resolve(path: &Path, out: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        out.join(path)
    } else {
        path.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Defaults => {
            print!("{}", HarnessConfig::default().to_toml());
        }
        Command::Train {
            common,
            variant,
            episodes,
        } => {
            let (cfg, out) = load(&common)?;
            let mut agent_cfg = cfg.agent.clone();
            agent_cfg.use_options = matches!(variant, Variant::Quadred);
            let episodes = episodes.unwrap_or(cfg.training.episodes);
            let params = cfg.vehicle.params()?;
            let (agent, report) = train_agent(&cfg.training.scenario, episodes, agent_cfg, &cfg.smpc, params, cfg.seed)?;
            let ckpt_path = out.join(format!("{}.ckpt", variant.name()));
            agent.to_checkpoint().save(&ckpt_path)?;
            let curve_path = out.join(format!("{}_learning_curve.csv", variant.name()));
            write_learning_curve(&curve_path, &report.curve)?;
            let returns = report.returns();
            let tail = &returns[returns.len().saturating_sub(100)..];
            println!(
                "trained {} for {} episodes ({} updates{}); final-100 mean return {:.4}",
                variant.name(),
                returns.len(),
                report.updates,
                if report.stopped_early { ", stopped early" } else { "" },
                tail.iter().sum::<f64>() / tail.len().max(1) as f64
            );
            println!("wrote {} and {}", ckpt_path.display(), curve_path.display());
        }
        Command::Track {
            common,
            wind,
            checkpoint,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(w) = wind {
                let force = parse_wind(&w)?;
                cfg.episode.wind = WindScenario {
                    segments: WindScenario::constant(force).segments,
                    ..cfg.episode.wind.clone()
                };
                if cfg.episode.wind.noise_std == 0.0 {
                    cfg.episode.wind.noise_std = cfg.bench.noise_std;
                }
            }
            let agent = checkpoint.map(|p| load_agent(&p, &cfg)).transpose()?;
            let predictor = agent.as_ref().map(Predictor::Agent).unwrap_or(Predictor::None);
            let params = cfg.vehicle.params()?;
            let mut ctrl = TrackingController::new(cfg.smpc.clone(), params)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let result = run_episode(&cfg.episode, &mut ctrl, &predictor, &mut rng)?;
            let path = out.join("telemetry.csv");
            write_telemetry(&path, &result.telemetry)?;
            let m = &result.metrics;
            println!(
                "success {} | cumulative error {:.4} m s | max error {:.4} m | final error {:.4} m | completion {} | mean solve {:.3} ms | fallbacks {}",
                m.success,
                m.cumulative_error,
                m.max_error,
                m.final_error,
                m.completion_time.map(|t| format!("{t:.2} s")).unwrap_or_else(|| "never".into()),
                1e3 * m.mean_solve_time,
                m.fallbacks
            );
            if let Some(f) = &m.failure {
                println!("failure: {f}");
            }
            println!("wrote {}", path.display());
        }
        Command::Bench { common, trials } => {
            let (cfg, out) = load(&common)?;
            let trials = trials.unwrap_or(cfg.bench.trials);
            let mut agents = Vec::new();
            for spec in &cfg.bench.methods {
                let agent = match &spec.checkpoint {
                    Some(p) => Some(load_agent(&resolve(p, &out), &cfg).with_context(|| format!("method {}", spec.name))?),
                    None => None,
                };
                agents.push((spec.name.clone(), agent));
            }
            let methods: Vec<MethodEntry> = agents
                .iter()
                .map(|(name, agent)| MethodEntry {
                    name: name.clone(),
                    predictor: agent.as_ref().map(Predictor::Agent).unwrap_or(Predictor::None),
                })
                .collect();
            let params = cfg.vehicle.params()?;
            let rows = compare_methods(
                &cfg.episode,
                &cfg.bench.forces,
                cfg.bench.noise_std,
                &methods,
                trials,
                cfg.seed,
                &cfg.smpc,
                params,
            )?;
            print!("{}", format_table(&rows));
            let path = out.join("comparison.csv");
            write_comparison(&path, &rows)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
