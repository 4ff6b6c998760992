//! Constraint-gated reward, the diffusion actor-critic trainer and its
//! baselines, plus the shared evaluation protocol.

pub mod buffer;
pub mod diffusion_sac;
pub mod ppo;
pub mod random;
pub mod reward;
pub mod sac;

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{
    brute_force_optimal, check_feasibility, optimal_rewards, realized_client_utility, OracleGrid, OracleResult,
    DEFAULT_TOL,
};
use crate::diffusion::{ActionBounds, StateNormalizer};
use crate::error::{check_dim, domain, io_err, Error, Result};
use crate::harness::sampling::SamplingSpec;
use crate::market::{ContractMenu, EnvState, PTParams};
use crate::nn::{ForwardCache, Mlp};

pub use buffer::{ReplayBuffer, ReplayRecord};
pub use reward::{contract_reward, contract_reward_gated, RewardGate};

/// What the actor emits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionMode {
    /// Full `(L, R)` menu, `2K` coordinates.
    #[default]
    #[serde(rename = "joint_LR")]
    JointLR,
    /// Latencies only; rewards follow from the closed form.
    #[serde(rename = "latency_only_analytic_R")]
    LatencyOnlyAnalyticR,
}

impl ActionMode {
    pub fn action_dim(self, num_types: usize) -> usize {
        match self {
            ActionMode::JointLR => 2 * num_types,
            ActionMode::LatencyOnlyAnalyticR => num_types,
        }
    }

    pub fn bounds(self, env: &EnvState, r_cap: f64) -> Result<ActionBounds> {
        match self {
            ActionMode::JointLR => ActionBounds::joint(env, r_cap),
            ActionMode::LatencyOnlyAnalyticR => ActionBounds::latency_only(env),
        }
    }

    /// Builds the posted menu. Latency-only actions are sorted before the
    /// closed-form rewards are attached.
    pub fn menu(self, env: &EnvState, action: &[f64]) -> Result<ContractMenu> {
        match self {
            ActionMode::JointLR => ContractMenu::from_action(action),
            ActionMode::LatencyOnlyAnalyticR => {
                let mut latencies = action.to_vec();
                latencies.sort_by(f64::total_cmp);
                let rewards = optimal_rewards(env, &latencies)?;
                ContractMenu::new(latencies, rewards)
            }
        }
    }
}

/// Clipped-surrogate settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    /// Environment steps per policy update.
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub clip: f64,
    pub initial_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            rollout_len: 512,
            epochs: 4,
            minibatch_size: 64,
            clip: 0.2,
            initial_log_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub max_episodes: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub soft_tau: f64,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coeff: f64,
    /// Tune the entropy coefficient toward `-dim(action)` (Gaussian
    /// baselines only).
    pub auto_entropy: bool,
    pub eval_interval: usize,
    pub eval_set_size: usize,
    pub action_mode: ActionMode,
    pub seed: u64,
    /// Keep one environment for a whole episode instead of drawing a fresh
    /// one every step.
    pub episodic_env: bool,
    pub reward_gate: RewardGate,
    /// Multiplier applied to rewards before they become critic targets.
    pub reward_scale: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub feasibility_tol: f64,
    pub ppo: PpoConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            max_episodes: 1,
            max_steps: 10_000,
            batch_size: 512,
            gamma: 0.99,
            soft_tau: 0.005,
            buffer_capacity: 1_000_000,
            actor_lr: 2e-7,
            critic_lr: 2e-6,
            entropy_coeff: 0.0,
            auto_entropy: false,
            eval_interval: 1000,
            eval_set_size: 100,
            action_mode: ActionMode::JointLR,
            seed: 0,
            episodic_env: false,
            reward_gate: RewardGate::Strict,
            reward_scale: 1e-3,
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            feasibility_tol: DEFAULT_TOL,
            ppo: PpoConfig::default(),
        }
    }
}

impl TrainerConfig {
    /// Default hyperparameters with both learning rates raised ×100.
    pub fn desk_scale() -> Self {
        let base = Self::default();
        Self {
            actor_lr: base.actor_lr * 100.0,
            critic_lr: base.critic_lr * 100.0,
            ..base
        }
    }

    pub fn total_steps(&self) -> usize {
        self.max_episodes * self.max_steps
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return fail("need 1 <= batch_size <= buffer_capacity");
        }
        if self.eval_set_size == 0 {
            return fail("eval_set_size must be at least 1");
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if !(self.soft_tau > 0.0 && self.soft_tau <= 1.0) {
            return fail("soft_tau must lie in (0, 1]");
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("reward_scale", self.reward_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.entropy_coeff >= 0.0) {
            return fail("entropy_coeff must be >= 0");
        }
        if self.actor_hidden.is_empty() || self.critic_hidden.is_empty() {
            return fail("hidden layer lists must be non-empty");
        }
        if let RewardGate::SoftPenalty { lambda } = self.reward_gate {
            if !(lambda >= 0.0) {
                return fail("soft penalty lambda must be >= 0");
            }
        }
        let p = &self.ppo;
        if p.rollout_len == 0 || p.epochs == 0 || p.minibatch_size == 0 || !(p.clip > 0.0) {
            return fail("ppo settings must be positive");
        }
        Ok(())
    }
}

/// Independent random streams of one trainer.
pub(crate) struct Streams {
    pub env: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub batch: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |n| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(n);
            r
        };
        Self {
            env: stream(1),
            policy: stream(2),
            batch: stream(3),
        }
    }
}

/// Frozen evaluation environments with their oracle solutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub seed: u64,
    pub envs: Vec<EnvState>,
    pub oracle: Vec<OracleResult>,
    /// SHA-256 of the serialized environment list.
    pub hash: String,
}

impl EvalSet {
    pub fn build(spec: &SamplingSpec, pt: &PTParams, seed: u64, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(domain("evaluation set must be non-empty"));
        }
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let envs = (0..size)
            .map(|_| spec.sample_env(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_envs(seed, envs, pt)
    }

    pub fn from_envs(seed: u64, envs: Vec<EnvState>, pt: &PTParams) -> Result<Self> {
        let grid = OracleGrid::default();
        let oracle = envs
            .iter()
            .map(|e| brute_force_optimal(e, pt, &grid, None, DEFAULT_TOL))
            .collect::<Result<Vec<_>>>()?;
        let hash = hash_envs(&envs)?;
        Ok(Self {
            seed,
            envs,
            oracle,
            hash,
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }
}

pub fn hash_envs(envs: &[EnvState]) -> Result<String> {
    let bytes = serde_json::to_vec(envs)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_test_reward: f64,
    /// Mean client utility actually obtained once every ASP picks its
    /// favourite item.
    pub mean_client_utility: f64,
    pub feasibility_rate: f64,
    /// `Σ achieved / Σ oracle` over the eval set; absent when the oracle
    /// total is not positive.
    pub optimality_ratio: Option<f64>,
    pub per_env_utility: Vec<f64>,
    pub per_env_reward: Vec<f64>,
    pub per_env_menus: Vec<ContractMenu>,
}

/// Anything that posts a menu for an environment.
pub trait Policy {
    fn act(&self, env: &EnvState, rng: &mut ChaCha8Rng) -> Result<ContractMenu>;
}

/// Scores fixed menus on the eval set.
pub fn evaluate_menus(set: &EvalSet, pt: &PTParams, menus: Vec<ContractMenu>, tol: f64) -> Result<EvalReport> {
    check_dim("menus per eval env", set.len(), menus.len())?;
    let mut rewards = Vec::with_capacity(menus.len());
    let mut utilities = Vec::with_capacity(menus.len());
    let mut feasible = 0usize;
    for (env, menu) in set.envs.iter().zip(&menus) {
        rewards.push(contract_reward(env, pt, menu, tol)?);
        utilities.push(realized_client_utility(env, pt, menu, tol)?);
        if check_feasibility(env, menu, tol)?.feasible() {
            feasible += 1;
        }
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

/// Runs `policy` once per eval env with a stream derived from the set seed.
pub fn evaluate<P: Policy + ?Sized>(policy: &P, set: &EvalSet, pt: &PTParams, tol: f64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(set.seed);
    rng.set_stream(7);
    let menus = set
        .envs
        .iter()
        .map(|e| policy.act(e, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    evaluate_menus(set, pt, menus, tol)
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub algorithm: String,
    pub mean_test_reward: f64,
    pub mean_client_utility: f64,
    pub feasibility_rate: f64,
    pub optimality_ratio: Option<f64>,
}

impl MetricsRow {
    pub fn new(step: usize, algorithm: &str, report: &EvalReport) -> Self {
        Self {
            step,
            algorithm: algorithm.to_string(),
            mean_test_reward: report.mean_test_reward,
            mean_client_utility: report.mean_client_utility,
            feasibility_rate: report.feasibility_rate,
            optimality_ratio: report.optimality_ratio,
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record([
        "step",
        "algorithm",
        "mean_test_reward",
        "mean_client_utility",
        "feasibility_rate",
        "optimality_ratio",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.algorithm.clone(),
            r.mean_test_reward.to_string(),
            r.mean_client_utility.to_string(),
            r.feasibility_rate.to_string(),
            r.optimality_ratio.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| domain(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    domain(format!("csv: {e}"))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let bytes = metrics_csv(rows)?;
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// Result of any trainer.
#[derive(Debug)]
pub struct TrainOutcome<A> {
    pub agent: A,
    pub metrics: Vec<MetricsRow>,
    pub final_report: EvalReport,
    pub gradient_updates: usize,
    pub records_stored: usize,
}

/// Critic input features: each action coordinate mapped onto `[-1, 1]`
/// within its box (degenerate coordinates map to 0).
pub fn action_features(action: &[f64], bounds: &ActionBounds) -> Vec<f64> {
    action
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(&y, (&l, &u))| if u > l { 2.0 * (y - l) / (u - l) - 1.0 } else { 0.0 })
        .collect()
}

/// A critic that can report `∂q/∂features` for the actor update.
pub trait ActionCritic {
    /// Values (one per row) and their gradient with respect to the action
    /// feature columns.
    fn value_and_action_grad(
        &self,
        states: ArrayView2<'_, f64>,
        features: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)>;
}

pub(crate) fn critic_input(states: ArrayView2<'_, f64>, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_dim("critic rows", states.nrows(), features.nrows())?;
    let (n, sd, ad) = (states.nrows(), states.ncols(), features.ncols());
    let mut x = Array2::zeros((n, sd + ad));
    x.slice_mut(s![.., ..sd]).assign(&states);
    x.slice_mut(s![.., sd..]).assign(&features);
    Ok(x)
}

impl ActionCritic for Mlp {
    fn value_and_action_grad(
        &self,
        states: ArrayView2<'_, f64>,
        features: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let x = critic_input(states, features)?;
        let cache = self.forward_batch(x.view())?;
        let q = cache.output().column(0).to_owned();
        let ones = Array2::ones((x.nrows(), 1));
        let mut scratch = vec![0.0; self.num_params()];
        let dx = self.backward_into(&cache, ones.view(), &mut scratch, 1.0)?;
        Ok((q, dx.slice(s![.., states.ncols()..]).to_owned()))
    }
}

/// Twin online critics with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinCritics {
    pub q1: Mlp,
    pub q2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
}

impl TwinCritics {
    pub fn new(q1: Mlp, q2: Mlp) -> Self {
        Self {
            target1: q1.clone(),
            target2: q2.clone(),
            q1,
            q2,
        }
    }

    /// `min(target1, target2)` per row.
    pub fn target_min(&self, states: ArrayView2<'_, f64>, features: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let x = critic_input(states, features)?;
        let a = self.target1.forward_batch_nocache(x.view())?;
        let b = self.target2.forward_batch_nocache(x.view())?;
        Ok(a.column(0).iter().zip(b.column(0)).map(|(x, y)| x.min(*y)).collect())
    }

    /// Regresses both critics toward `targets`; returns
    /// `Σ_i Σ_j (y_i - q_j(s_i, a_i))²` before the step.
    pub fn regress(
        &mut self,
        states: ArrayView2<'_, f64>,
        features: ArrayView2<'_, f64>,
        targets: &Array1<f64>,
        lr: f64,
        adam: &crate::nn::AdamConfig,
    ) -> Result<f64> {
        let x = critic_input(states, features)?;
        let n = x.nrows() as f64;
        let mut loss = 0.0;
        for net in [&mut self.q1, &mut self.q2] {
            let cache: ForwardCache = net.forward_batch(x.view())?;
            let diff = &cache.output().column(0) - targets;
            loss += diff.iter().map(|d| d * d).sum::<f64>();
            let upstream = (diff * (2.0 / n)).insert_axis(ndarray::Axis(1));
            let (grad, _) = net.backward(&cache, upstream.view())?;
            crate::nn::optimizer_step(&mut net.params, &grad, lr, adam)?;
        }
        Ok(loss)
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        crate::nn::soft_update(&mut self.target1.params, &self.q1.params, tau)?;
        crate::nn::soft_update(&mut self.target2.params, &self.q2.params, tau)
    }
}

/// Stacks row vectors into a matrix.
pub(crate) fn stack_rows<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I, cols: usize) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        check_dim("row width", cols, r.len())?;
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, cols), data).map_err(|e| domain(e.to_string()))
}

/// Bellman targets `scale·r + γ(1-d)·next`, where `next` is computed only
/// when some record bootstraps.
pub(crate) fn bellman_targets(
    batch: &[&ReplayRecord],
    cfg: &TrainerConfig,
    next_values: impl FnOnce() -> Result<Array1<f64>>,
) -> Result<Array1<f64>> {
    let mut targets: Array1<f64> = batch.iter().map(|r| cfg.reward_scale * r.reward).collect();
    if cfg.gamma > 0.0 && batch.iter().any(|r| !r.done) {
        let next = next_values()?;
        for (i, r) in batch.iter().enumerate() {
            if !r.done {
                targets[i] += cfg.gamma * next[i];
            }
        }
    }
    Ok(targets)
}

/// An agent trained from replayed transitions.
pub(crate) trait OffPolicyAgent: Policy {
    fn normalizer(&self) -> &StateNormalizer;

    fn reward_cap(&self) -> f64;

    /// Exploratory action in menu units.
    fn explore(&self, state: &[f64], bounds: &ActionBounds, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;

    /// Critic and actor updates plus target tracking on one minibatch.
    fn update(&mut self, batch: &[&ReplayRecord], cfg: &TrainerConfig, rng: &mut ChaCha8Rng) -> Result<()>;
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { step, what },
        other => other,
    }
}

/// Shared observe / store / update / evaluate loop.
pub(crate) fn run_off_policy<A: OffPolicyAgent>(
    mut agent: A,
    algorithm: &str,
    spec: &SamplingSpec,
    pt: &PTParams,
    cfg: &TrainerConfig,
    eval_set: &EvalSet,
) -> Result<TrainOutcome<A>> {
    cfg.validate()?;
    spec.validate()?;
    pt.validate()?;
    let mut streams = Streams::new(cfg.seed);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut metrics = Vec::new();
    let mut updates = 0;
    let mut step = 0;
    let mode = cfg.action_mode;
    let tol = cfg.feasibility_tol;
    for _ in 0..cfg.max_episodes {
        let mut env = spec.sample_env(&mut streams.env)?;
        for z in 0..cfg.max_steps {
            let state = agent.normalizer().env_features(&env)?;
            let bounds = mode.bounds(&env, agent.reward_cap())?;
            let action = agent.explore(&state, &bounds, &mut streams.policy)?;
            let menu = mode.menu(&env, &action)?;
            let reward = contract_reward_gated(&env, pt, &menu, tol, cfg.reward_gate)?;
            let last = z + 1 == cfg.max_steps;
            let next_env = if cfg.episodic_env && !last {
                env.clone()
            } else {
                spec.sample_env(&mut streams.env)?
            };
            buffer.push(ReplayRecord {
                state,
                action_features: action_features(&action, &bounds),
                action,
                bounds,
                reward,
                next_state: agent.normalizer().env_features(&next_env)?,
                next_bounds: mode.bounds(&next_env, agent.reward_cap())?,
                done: !cfg.episodic_env || last,
            });
            if buffer.len() >= cfg.batch_size {
                let batch = buffer.sample(cfg.batch_size, &mut streams.batch)?;
                agent
                    .update(&batch, cfg, &mut streams.batch)
                    .map_err(|e| at_step(e, step))?;
                updates += 1;
            }
            step += 1;
            if step % cfg.eval_interval == 0 {
                let report = evaluate(&agent, eval_set, pt, tol)?;
                log::info!(
                    "{algorithm} step {step}: reward {:.3} utility {:.3} feasible {:.2}",
                    report.mean_test_reward,
                    report.mean_client_utility,
                    report.feasibility_rate
                );
                metrics.push(MetricsRow::new(step, algorithm, &report));
            }
            env = next_env;
        }
    }
    let final_report = evaluate(&agent, eval_set, pt, tol)?;
    if metrics.last().map(|m: &MetricsRow| m.step) != Some(step) {
        metrics.push(MetricsRow::new(step, algorithm, &final_report));
    }
    Ok(TrainOutcome {
        agent,
        metrics,
        final_report,
        gradient_updates: updates,
        records_stored: buffer.len(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::market::tests::worked_env;
    use crate::nn::{Activation, FinalActivation, NetSpec};

    /// Network that outputs the constant `c` everywhere.
    pub fn constant_net(input_dim: usize, c: f64) -> Mlp {
        let spec = NetSpec {
            input_dim,
            hidden_dims: vec![2],
            output_dim: 1,
            activation: Activation::Relu,
            final_activation: FinalActivation::None,
        };
        let mut values = vec![0.0; spec.num_params()];
        *values.last_mut().unwrap() = c;
        Mlp::from_values(spec, values).unwrap()
    }

    #[test]
    fn config_json_roundtrip_and_names() {
        let cfg = TrainerConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["action_mode"], "joint_LR");
        assert_eq!(v["batch_size"], 512);
        let back: TrainerConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainerConfig =
            serde_json::from_str(r#"{"action_mode": "latency_only_analytic_R", "seed": 4}"#).unwrap();
        assert_eq!(partial.action_mode, ActionMode::LatencyOnlyAnalyticR);
        assert_eq!(partial.gamma, 0.99);
    }

    #[test]
    fn config_validation() {
        TrainerConfig::default().validate().unwrap();
        let bad = TrainerConfig {
            batch_size: 10,
            buffer_capacity: 5,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainerConfig {
            eval_set_size: 0,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().is_err());
        let d = TrainerConfig::desk_scale();
        assert!((d.actor_lr / 2e-5 - 1.0).abs() < 1e-12 && (d.critic_lr / 2e-4 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn latency_mode_sorts_and_prices() {
        let env = worked_env();
        let menu = ActionMode::LatencyOnlyAnalyticR.menu(&env, &[20.0, 10.0]).unwrap();
        assert_eq!(menu.latencies(), &[10.0, 20.0]);
        assert!((menu.rewards()[0] - 16.0).abs() < 1e-12);
        assert!((menu.rewards()[1] - 17.6).abs() < 1e-12);
    }

    #[test]
    fn action_features_map_box_to_unit() {
        let b = ActionBounds::new(vec![0.0, 5.0, 1.0], vec![10.0, 15.0, 1.0]).unwrap();
        assert_eq!(action_features(&[0.0, 15.0, 1.0], &b), vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn metrics_csv_format() {
        let rows = vec![MetricsRow {
            step: 10,
            algorithm: "random".into(),
            mean_test_reward: 1.5,
            mean_client_utility: -2.0,
            feasibility_rate: 0.25,
            optimality_ratio: None,
        }];
        let text = String::from_utf8(metrics_csv(&rows).unwrap()).unwrap();
        assert_eq!(
            text,
            "step,algorithm,mean_test_reward,mean_client_utility,feasibility_rate,optimality_ratio\n10,random,1.5,-2,0.25,\n"
        );
    }

    #[test]
    fn zero_menu_evaluation() {
        let env = worked_env();
        let pt = PTParams::default();
        let set = EvalSet::from_envs(0, vec![env.clone()], &pt).unwrap();
        let report = evaluate_menus(&set, &pt, vec![ContractMenu::zeros(2)], DEFAULT_TOL).unwrap();
        assert_eq!(report.feasibility_rate, 1.0);
        let expected = crate::market::client_subjective_utility(&env, &pt, &ContractMenu::zeros(2)).unwrap();
        assert!((report.mean_test_reward - expected).abs() < 1e-9);
    }

    #[test]
    fn oracle_replay_has_unit_ratio() {
        let pt = PTParams::default();
        let set = EvalSet::build(&SamplingSpec::default(), &pt, 5, 20).unwrap();
        let menus = set.oracle.iter().map(|o| o.best_menu.clone()).collect();
        let report = evaluate_menus(&set, &pt, menus, DEFAULT_TOL).unwrap();
        assert!((report.optimality_ratio.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(report.feasibility_rate, 1.0);
    }

    #[test]
    fn infeasible_policy_earns_nothing() {
        struct Greedy;
        impl Policy for Greedy {
            fn act(&self, env: &EnvState, _rng: &mut ChaCha8Rng) -> Result<ContractMenu> {
                ContractMenu::new(vec![env.max_latency; 2], vec![0.0; 2])
            }
        }
        let pt = PTParams::default();
        let set = EvalSet::build(&SamplingSpec::default(), &pt, 6, 10).unwrap();
        let report = evaluate(&Greedy, &set, &pt, DEFAULT_TOL).unwrap();
        assert_eq!(report.mean_test_reward, 0.0);
        assert_eq!(report.feasibility_rate, 0.0);
    }

    #[test]
    fn eval_set_is_reproducible() {
        let pt = PTParams::default();
        let a = EvalSet::build(&SamplingSpec::default(), &pt, 9, 5).unwrap();
        let b = EvalSet::build(&SamplingSpec::default(), &pt, 9, 5).unwrap();
        let c = EvalSet::build(&SamplingSpec::default(), &pt, 10, 5).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        assert_eq!(a.hash.len(), 64);
    }
}
