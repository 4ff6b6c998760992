use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use ptcf_core::analytics::{brute_force_optimal, optimal_rewards, OracleGrid, DEFAULT_TOL};
use ptcf_core::harness::plan::{load_policy, write_cell, CellOutput, CellSummary};
use ptcf_core::harness::{
    plan_reports, render_table, run_cell, run_plan, sweep_csv, Algorithm, ExperimentConfig, ExperimentPlan, Sweep,
    SweepParam,
};
use ptcf_core::market::{ContractMenu, EnvState, PTParams};
use ptcf_core::rl::{evaluate, EvalSet, MetricsRow};

#[derive(Parser)]
#[command(
    name = "ptcf",
    version,
    about = "Prospect-theoretic contract design for edge AIGC markets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Price a non-decreasing latency vector with the closed-form optimal rewards.
    SolveAnalytic {
        /// Environment as a JSON file or an inline JSON object.
        #[arg(long)]
        env: String,
        /// Comma-separated latencies, one per type.
        #[arg(long = "L", value_delimiter = ',', required = true)]
        latencies: Vec<f64>,
    },
    /// Grid-search the asymmetric-information optimum.
    BruteForce {
        #[arg(long)]
        env: String,
        /// Search rewards jointly instead of pricing each latency grid point.
        #[arg(long)]
        joint: bool,
        #[arg(long, default_value_t = 100)]
        grid_l: usize,
        #[arg(long, default_value_t = 100)]
        grid_r: usize,
        /// Largest reward searched in joint mode.
        #[arg(long)]
        r_max: Option<f64>,
        /// Client preferences as a JSON file or inline object.
        #[arg(long)]
        pt: Option<String>,
    },
    /// Train one learned algorithm and write its metrics, menus and checkpoint.
    Train {
        #[arg(long)]
        algo: Algorithm,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Eval-set seed; defaults to the training seed.
        #[arg(long)]
        eval_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved checkpoint on a frozen eval set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a plan and print the ordering table of each eval set.
    Compare {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Run a plan over a grid of reference points or loss-aversion values.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        plan: PathBuf,
    },
}

fn read_json_arg<T: serde::de::DeserializeOwned>(arg: &str) -> Result<T> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
    };
    serde_json::from_str(&text).with_context(|| format!("parsing {arg}"))
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("PTCF_THREADS") {
        Ok(v) => Ok(Some(v.parse().with_context(|| format!("PTCF_THREADS={v}"))?)),
        Err(_) => Ok(None),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn compare(plan: &ExperimentPlan) -> Result<()> {
    let cells = run_plan(plan, threads()?)?;
    let reports = plan_reports(&cells)?;
    for r in &reports {
        println!("{}", render_table(r));
    }
    write_json(&plan.output_dir.join("summary.json"), &reports)?;
    if plan.sweep.is_some() {
        let path = plan.output_dir.join("sweep.csv");
        fs::write(&path, sweep_csv(&cells)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SolveAnalytic { env, latencies } => {
            let env: EnvState = read_json_arg(&env)?;
            let rewards = optimal_rewards(&env, &latencies)?;
            print_json(&ContractMenu::new(latencies, rewards)?)
        }
        Command::BruteForce {
            env,
            joint,
            grid_l,
            grid_r,
            r_max,
            pt,
        } => {
            let env: EnvState = read_json_arg(&env)?;
            let pt: PTParams = match pt {
                Some(p) => read_json_arg(&p)?,
                None => PTParams::default(),
            };
            let grid = OracleGrid {
                latency_steps: grid_l,
                reward_steps: grid_r,
                joint,
            };
            print_json(&brute_force_optimal(&env, &pt, &grid, r_max, DEFAULT_TOL)?)
        }
        Command::Train {
            algo,
            config,
            seed,
            eval_seed,
            out,
        } => {
            if !algo.is_learned() {
                bail!("train expects diffusion_sac, sac or ppo, got {algo}");
            }
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.trainer.seed = s;
            }
            let seed = cfg.trainer.seed;
            let set = EvalSet::build(
                &cfg.sampling,
                &cfg.pt,
                eval_seed.unwrap_or(seed),
                cfg.trainer.eval_set_size,
            )?;
            info!("training {algo} for {} steps", cfg.trainer.total_steps());
            let output = run_cell(algo, &cfg, seed, &set, None)?;
            write_cell(&out, &output, &cfg)?;
            print_json(&brief(&output.summary))
        }
        Command::Evaluate {
            checkpoint,
            eval_seed,
            out,
        } => {
            let (policy, record) = load_policy(&checkpoint, None)?;
            let cfg = &record.config;
            let set = EvalSet::build(&cfg.sampling, &cfg.pt, eval_seed, cfg.trainer.eval_set_size)?;
            let report = evaluate(&policy, &set, &cfg.pt, cfg.trainer.feasibility_tol)?;
            let steps = cfg.trainer.total_steps();
            let output = CellOutput {
                summary: CellSummary {
                    algorithm: record.algorithm,
                    seed: record.seed,
                    eval_seed,
                    eval_hash: set.hash.clone(),
                    sweep: None,
                    steps,
                    gradient_updates: 0,
                    mean_test_reward: report.mean_test_reward,
                    mean_client_utility: report.mean_client_utility,
                    feasibility_rate: report.feasibility_rate,
                    optimality_ratio: report.optimality_ratio,
                    per_env_utility: report.per_env_utility.clone(),
                    per_env_reward: report.per_env_reward.clone(),
                },
                metrics: vec![MetricsRow::new(steps, record.algorithm.as_str(), &report)],
                menus: report.per_env_menus,
                policy: None,
            };
            write_cell(&out, &output, cfg)?;
            print_json(&brief(&output.summary))
        }
        Command::Compare { plan } => compare(&ExperimentPlan::load(&plan)?),
        Command::Sweep { param, values, plan } => {
            let mut plan = ExperimentPlan::load(&plan)?;
            plan.sweep = Some(Sweep { param, values });
            compare(&plan)
        }
    }
}

fn brief(s: &CellSummary) -> serde_json::Value {
    serde_json::json!({
        "algorithm": s.algorithm,
        "seed": s.seed,
        "eval_seed": s.eval_seed,
        "eval_hash": s.eval_hash,
        "mean_test_reward": s.mean_test_reward,
        "mean_client_utility": s.mean_client_utility,
        "feasibility_rate": s.feasibility_rate,
        "optimality_ratio": s.optimality_ratio,
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PTCF_LOG", "warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
