use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::analytics::{check_feasibility, complete_info_optimal};
use crate::error::{domain, io_err, Error, Result};
use crate::market::ContractMenu;
use crate::nn::{read_checkpoint, write_checkpoint};
use crate::rl::diffusion_sac::{train_diffusion_sac, DiffusionSacAgent};
use crate::rl::ppo::{train_ppo_baseline, PpoAgent};
use crate::rl::random::RandomPolicy;
use crate::rl::reward::contract_reward;
use crate::rl::sac::{train_sac_baseline, SacAgent};
use crate::rl::{evaluate, evaluate_menus, write_metrics_csv, EvalReport, EvalSet, MetricsRow, Policy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    DiffusionSac,
    Sac,
    Ppo,
    Random,
    CompleteInfo,
    Oracle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::DiffusionSac,
        Algorithm::Sac,
        Algorithm::Ppo,
        Algorithm::Random,
        Algorithm::CompleteInfo,
        Algorithm::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::DiffusionSac => "diffusion_sac",
            Algorithm::Sac => "sac",
            Algorithm::Ppo => "ppo",
            Algorithm::Random => "random",
            Algorithm::CompleteInfo => "complete_info",
            Algorithm::Oracle => "oracle",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Algorithm::DiffusionSac | Algorithm::Sac | Algorithm::Ppo)
    }

    /// Position in the expected utility chain
    /// complete_info ≥ oracle ≥ learned ≥ random.
    pub fn rank(self) -> u8 {
        match self {
            Algorithm::CompleteInfo => 3,
            Algorithm::Oracle => 2,
            Algorithm::DiffusionSac | Algorithm::Sac | Algorithm::Ppo => 1,
            Algorithm::Random => 0,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    URef,
    Eta,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::URef => "u_ref",
            SweepParam::Eta => "eta",
        }
    }

    /// Copy of `base` with the swept parameter set to `value`. A reference
    /// point moves both the client preferences and the observed state.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            SweepParam::URef => {
                cfg.pt.reference_point = value;
                cfg.sampling.reference_point = value;
            }
            SweepParam::Eta => cfg.pt.loss_aversion = value,
        }
        cfg
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u_ref" => Ok(SweepParam::URef),
            "eta" => Ok(SweepParam::Eta),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub config: ExperimentConfig,
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Reads a plan; a relative `output_dir` is resolved against the plan's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut plan = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if plan.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                plan.output_dir = dir.join(&plan.output_dir);
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Config("plan lists no algorithms".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("plan lists no seeds".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep lists no values".into()));
            }
            for &v in &s.values {
                s.param.apply(&self.config, v).validate()?;
            }
        }
        self.config.validate()
    }

    pub fn sweep_points(&self) -> Vec<Option<SweepPoint>> {
        match &self.sweep {
            None => vec![None],
            Some(s) => s
                .values
                .iter()
                .map(|&value| Some(SweepPoint { param: s.param, value }))
                .collect(),
        }
    }

    pub fn config_at(&self, point: Option<SweepPoint>) -> ExperimentConfig {
        match point {
            None => self.config.clone(),
            Some(p) => p.param.apply(&self.config, p.value),
        }
    }

    pub fn cell_dir(&self, algorithm: Algorithm, point: Option<SweepPoint>, seed: u64) -> PathBuf {
        let mut dir = self.output_dir.clone();
        if let Some(p) = point {
            dir.push(format!("{}_{}", p.param.as_str(), p.value));
        }
        dir.push(algorithm.as_str());
        dir.push(format!("seed_{seed}"));
        dir
    }
}

/// Aggregates written to each cell's `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub eval_seed: u64,
    pub eval_hash: String,
    pub sweep: Option<SweepPoint>,
    pub steps: usize,
    pub gradient_updates: usize,
    pub mean_test_reward: f64,
    pub mean_client_utility: f64,
    pub feasibility_rate: f64,
    pub optimality_ratio: Option<f64>,
    pub per_env_utility: Vec<f64>,
    pub per_env_reward: Vec<f64>,
}

/// A trained policy together with what is needed to rebuild it.
#[derive(Clone, Debug)]
pub enum TrainedPolicy {
    DiffusionSac(Box<DiffusionSacAgent>),
    Sac(Box<SacAgent>),
    Ppo(Box<PpoAgent>),
}

impl TrainedPolicy {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            TrainedPolicy::DiffusionSac(_) => Algorithm::DiffusionSac,
            TrainedPolicy::Sac(_) => Algorithm::Sac,
            TrainedPolicy::Ppo(_) => Algorithm::Ppo,
        }
    }

    /// Parameters of the acting network, in layer order.
    pub fn policy_params(&self) -> &[f64] {
        match self {
            TrainedPolicy::DiffusionSac(a) => &a.actor.mlp.params.values,
            TrainedPolicy::Sac(a) => &a.policy.params.values,
            TrainedPolicy::Ppo(a) => &a.policy.params.values,
        }
    }

    /// Fresh agent for `config` carrying the given acting-network parameters.
    pub fn restore(algorithm: Algorithm, config: &ExperimentConfig, values: Vec<f64>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        let spec = &config.sampling;
        let trainer = &config.trainer;
        let r_cap = config.r_cap();
        let install = |slot: &mut Vec<f64>, values: Vec<f64>| {
            if slot.len() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds {} parameters, {algorithm} network needs {}",
                    values.len(),
                    slot.len()
                )));
            }
            *slot = values;
            Ok(())
        };
        match algorithm {
            Algorithm::DiffusionSac => {
                let mut a = DiffusionSacAgent::new(spec, config.diffusion.schedule()?, r_cap, trainer, &mut rng)?;
                install(&mut a.actor.mlp.params.values, values)?;
                Ok(TrainedPolicy::DiffusionSac(Box::new(a)))
            }
            Algorithm::Sac => {
                let mut a = SacAgent::new(spec, r_cap, trainer, &mut rng)?;
                install(&mut a.policy.params.values, values)?;
                Ok(TrainedPolicy::Sac(Box::new(a)))
            }
            Algorithm::Ppo => {
                let mut a = PpoAgent::new(spec, r_cap, trainer, &mut rng)?;
                install(&mut a.policy.params.values, values)?;
                Ok(TrainedPolicy::Ppo(Box::new(a)))
            }
            other => Err(Error::Config(format!("{other} has no checkpoint"))),
        }
    }
}

impl Policy for TrainedPolicy {
    fn act(&self, env: &crate::market::EnvState, rng: &mut ChaCha8Rng) -> Result<ContractMenu> {
        match self {
            TrainedPolicy::DiffusionSac(a) => a.act(env, rng),
            TrainedPolicy::Sac(a) => a.act(env, rng),
            TrainedPolicy::Ppo(a) => a.act(env, rng),
        }
    }
}

/// Everything one cell produces.
#[derive(Clone, Debug)]
pub struct CellOutput {
    pub summary: CellSummary,
    pub metrics: Vec<MetricsRow>,
    pub menus: Vec<ContractMenu>,
    pub policy: Option<TrainedPolicy>,
}

/// Scores the complete-information menus by the utility they give when
/// types are observed.
pub fn complete_info_report(set: &EvalSet, config: &ExperimentConfig) -> Result<EvalReport> {
    let pt = &config.pt;
    let tol = config.trainer.feasibility_tol;
    let mut utilities = Vec::with_capacity(set.len());
    let mut rewards = Vec::with_capacity(set.len());
    let mut menus = Vec::with_capacity(set.len());
    let mut feasible = 0usize;
    for env in &set.envs {
        let best = complete_info_optimal(env, pt)?;
        rewards.push(contract_reward(env, pt, &best.best_menu, tol)?);
        if check_feasibility(env, &best.best_menu, tol)?.feasible() {
            feasible += 1;
        }
        utilities.push(best.best_value);
        menus.push(best.best_menu);
    }
    let n = set.len() as f64;
    let achieved: f64 = utilities.iter().sum();
    let optimum: f64 = set.oracle.iter().map(|o| o.best_value).sum();
    Ok(EvalReport {
        mean_test_reward: rewards.iter().sum::<f64>() / n,
        mean_client_utility: achieved / n,
        feasibility_rate: feasible as f64 / n,
        optimality_ratio: (optimum > 0.0).then(|| achieved / optimum),
        per_env_utility: utilities,
        per_env_reward: rewards,
        per_env_menus: menus,
    })
}

fn summarize(
    algorithm: Algorithm,
    seed: u64,
    set: &EvalSet,
    sweep: Option<SweepPoint>,
    steps: usize,
    gradient_updates: usize,
    report: &EvalReport,
) -> CellSummary {
    CellSummary {
        algorithm,
        seed,
        eval_seed: set.seed,
        eval_hash: set.hash.clone(),
        sweep,
        steps,
        gradient_updates,
        mean_test_reward: report.mean_test_reward,
        mean_client_utility: report.mean_client_utility,
        feasibility_rate: report.feasibility_rate,
        optimality_ratio: report.optimality_ratio,
        per_env_utility: report.per_env_utility.clone(),
        per_env_reward: report.per_env_reward.clone(),
    }
}

/// Trains or evaluates one algorithm on a frozen eval set. Learned
/// algorithms train with `seed` as their root seed.
pub fn run_cell(
    algorithm: Algorithm,
    config: &ExperimentConfig,
    seed: u64,
    set: &EvalSet,
    sweep: Option<SweepPoint>,
) -> Result<CellOutput> {
    let pt = &config.pt;
    let tol = config.trainer.feasibility_tol;
    let mut trainer = config.trainer.clone();
    trainer.seed = seed;
    let r_cap = config.r_cap();
    let spec = &config.sampling;
    let learned = |metrics: Vec<MetricsRow>, report: EvalReport, updates: usize, policy: TrainedPolicy| CellOutput {
        summary: summarize(algorithm, seed, set, sweep, trainer.total_steps(), updates, &report),
        metrics,
        menus: report.per_env_menus,
        policy: Some(policy),
    };
    let fixed = |report: EvalReport| CellOutput {
        summary: summarize(algorithm, seed, set, sweep, 0, 0, &report),
        metrics: vec![MetricsRow::new(0, algorithm.as_str(), &report)],
        menus: report.per_env_menus,
        policy: None,
    };
    Ok(match algorithm {
        Algorithm::DiffusionSac => {
            let o = train_diffusion_sac(spec, pt, config.diffusion.schedule()?, r_cap, &trainer, set)?;
            learned(
                o.metrics,
                o.final_report,
                o.gradient_updates,
                TrainedPolicy::DiffusionSac(Box::new(o.agent)),
            )
        }
        Algorithm::Sac => {
            let o = train_sac_baseline(spec, pt, r_cap, &trainer, set)?;
            learned(
                o.metrics,
                o.final_report,
                o.gradient_updates,
                TrainedPolicy::Sac(Box::new(o.agent)),
            )
        }
        Algorithm::Ppo => {
            let o = train_ppo_baseline(spec, pt, r_cap, &trainer, set)?;
            learned(
                o.metrics,
                o.final_report,
                o.gradient_updates,
                TrainedPolicy::Ppo(Box::new(o.agent)),
            )
        }
        Algorithm::Random => fixed(evaluate(&RandomPolicy::PerEnv { r_cap }, set, pt, tol)?),
        Algorithm::CompleteInfo => fixed(complete_info_report(set, config)?),
        Algorithm::Oracle => {
            let menus = set.oracle.iter().map(|o| o.best_menu.clone()).collect();
            fixed(evaluate_menus(set, pt, menus, tol)?)
        }
    })
}

/// Checkpoint file name inside a cell directory.
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
/// Configuration stored next to a checkpoint so it can be rebuilt.
pub const RUN_FILE: &str = "run.json";

/// What `run.json` records about a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub config: ExperimentConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes `metrics.csv`, `menus.json`, `summary.json` and, for learned
/// policies, the checkpoint with its `run.json`.
pub fn write_cell(dir: &Path, output: &CellOutput, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_metrics_csv(&dir.join("metrics.csv"), &output.metrics)?;
    write_json(&dir.join("menus.json"), &output.menus)?;
    write_json(&dir.join("summary.json"), &output.summary)?;
    if let Some(policy) = &output.policy {
        write_checkpoint(&dir.join(CHECKPOINT_FILE), policy.policy_params())?;
        let mut config = config.clone();
        config.trainer.seed = output.summary.seed;
        let record = RunRecord {
            algorithm: policy.algorithm(),
            seed: output.summary.seed,
            config,
        };
        write_json(&dir.join(RUN_FILE), &record)?;
    }
    Ok(())
}

/// Loads a checkpoint written by [`write_cell`]; the run record is looked up
/// next to it unless given.
pub fn load_policy(checkpoint: &Path, record: Option<RunRecord>) -> Result<(TrainedPolicy, RunRecord)> {
    let record = match record {
        Some(r) => r,
        None => {
            let path = checkpoint.with_file_name(RUN_FILE);
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            serde_json::from_str(&text)?
        }
    };
    let values = read_checkpoint(checkpoint)?;
    let policy = TrainedPolicy::restore(record.algorithm, &record.config, values)?;
    Ok((policy, record))
}

/// Runs a closure on a pool with `threads` workers, or the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(domain("thread count must be positive")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Every cell of a plan, run in parallel, outputs written per cell.
pub fn run_plan(plan: &ExperimentPlan, threads: Option<usize>) -> Result<Vec<CellSummary>> {
    plan.validate()?;
    fs::create_dir_all(&plan.output_dir).map_err(|e| io_err(&plan.output_dir, e))?;
    let points = plan.sweep_points();
    let groups: Vec<(Option<SweepPoint>, u64)> = points
        .iter()
        .flat_map(|&p| plan.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let cells: Vec<(usize, Algorithm)> = (0..groups.len())
        .flat_map(|g| plan.algorithms.iter().map(move |&a| (g, a)))
        .collect();
    with_threads(threads, || {
        let sets = groups
            .par_iter()
            .map(|&(p, seed)| {
                let cfg = plan.config_at(p);
                EvalSet::build(&cfg.sampling, &cfg.pt, seed, cfg.trainer.eval_set_size)
            })
            .collect::<Result<Vec<_>>>()?;
        cells
            .par_iter()
            .map(|&(g, algorithm)| {
                let (point, seed) = groups[g];
                let cfg = plan.config_at(point);
                info!("{}: {algorithm} seed {seed} {:?}", plan.name, point);
                let out = run_cell(algorithm, &cfg, seed, &sets[g], point)?;
                write_cell(&plan.cell_dir(algorithm, point, seed), &out, &cfg)?;
                Ok(out.summary)
            })
            .collect::<Result<Vec<_>>>()
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::TrainerConfig;

    pub(crate) fn quick_config() -> ExperimentConfig {
        ExperimentConfig {
            trainer: TrainerConfig {
                max_steps: 40,
                batch_size: 8,
                buffer_capacity: 100,
                eval_interval: 20,
                eval_set_size: 6,
                actor_hidden: vec![8],
                critic_hidden: vec![8],
                ppo: crate::rl::PpoConfig {
                    rollout_len: 16,
                    minibatch_size: 8,
                    ..Default::default()
                },
                ..TrainerConfig::desk_scale()
            },
            ..ExperimentConfig::default()
        }
    }

    fn plan(dir: &Path, algorithms: Vec<Algorithm>) -> ExperimentPlan {
        ExperimentPlan {
            name: "t".into(),
            algorithms,
            sweep: None,
            seeds: vec![3],
            output_dir: dir.to_path_buf(),
            config: quick_config(),
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{a}\""));
        }
        assert!("dqn".parse::<Algorithm>().is_err());
    }

    #[test]
    fn empty_plans_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = plan(dir.path(), vec![]);
        assert!(matches!(run_plan(&p, None), Err(Error::Config(_))));
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
        let mut p = plan(dir.path(), vec![Algorithm::Random]);
        p.seeds.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn plan_json_defaults() {
        let p = ExperimentPlan::from_json(
            r#"{"name": "x", "algorithms": ["random", "oracle"], "seeds": [1], "output_dir": "out"}"#,
        )
        .unwrap();
        assert_eq!(p.config, ExperimentConfig::default());
        assert_eq!(p.sweep_points(), vec![None]);
        assert!(
            ExperimentPlan::from_json(r#"{"name": "x", "algorithms": [], "seeds": [1], "output_dir": "o"}"#).is_err()
        );
    }

    #[test]
    fn sweep_sets_both_reference_points() {
        let base = ExperimentConfig::default();
        let c = SweepParam::URef.apply(&base, 250.0);
        assert_eq!(c.pt.reference_point, 250.0);
        assert_eq!(c.sampling.reference_point, 250.0);
        let c = SweepParam::Eta.apply(&base, 1.0);
        assert_eq!(c.pt.loss_aversion, 1.0);
        assert_eq!(c.pt.reference_point, 200.0);
    }

    #[test]
    fn every_cell_writes_its_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = plan(dir.path(), Algorithm::ALL.to_vec());
        p.sweep = Some(Sweep {
            param: SweepParam::Eta,
            values: vec![0.5, 1.0],
        });
        let cells = run_plan(&p, Some(1)).unwrap();
        assert_eq!(cells.len(), 12);
        for c in &cells {
            let d = p.cell_dir(c.algorithm, c.sweep, c.seed);
            for f in ["metrics.csv", "menus.json", "summary.json"] {
                assert!(d.join(f).is_file(), "{}", d.join(f).display());
            }
            assert_eq!(d.join(CHECKPOINT_FILE).is_file(), c.algorithm.is_learned());
            assert_eq!(c.per_env_utility.len(), 6);
        }
        let hashes: std::collections::BTreeSet<_> = cells.iter().map(|c| &c.eval_hash).collect();
        assert_eq!(hashes.len(), 1);
    }

    #[test]
    fn checkpoints_restore_the_same_policy() {
        let dir = tempfile::tempdir().unwrap();
        let p = plan(
            dir.path(),
            vec![Algorithm::DiffusionSac, Algorithm::Sac, Algorithm::Ppo],
        );
        let cells = run_plan(&p, None).unwrap();
        for c in cells {
            let d = p.cell_dir(c.algorithm, None, 3);
            let (policy, record) = load_policy(&d.join(CHECKPOINT_FILE), None).unwrap();
            assert_eq!(record.algorithm, c.algorithm);
            let set = EvalSet::build(&p.config.sampling, &p.config.pt, 3, 6).unwrap();
            let r = evaluate(&policy, &set, &p.config.pt, p.config.trainer.feasibility_tol).unwrap();
            assert_eq!(r.per_env_utility, c.per_env_utility, "{}", c.algorithm);
        }
    }

    #[test]
    fn wrong_checkpoint_size_is_rejected() {
        let cfg = quick_config();
        assert!(matches!(
            TrainedPolicy::restore(Algorithm::Sac, &cfg, vec![0.0; 3]),
            Err(Error::Checkpoint(_))
        ));
        assert!(TrainedPolicy::restore(Algorithm::Random, &cfg, vec![]).is_err());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let algs = vec![Algorithm::DiffusionSac, Algorithm::Random];
        run_plan(&plan(a.path(), algs.clone()), None).unwrap();
        run_plan(&plan(b.path(), algs.clone()), Some(1)).unwrap();
        for alg in algs {
            for f in ["metrics.csv", "menus.json", "summary.json"] {
                let rel = Path::new(alg.as_str()).join("seed_3").join(f);
                assert_eq!(
                    std::fs::read(a.path().join(&rel)).unwrap(),
                    std::fs::read(b.path().join(&rel)).unwrap(),
                    "{}",
                    rel.display()
                );
            }
        }
    }
}
