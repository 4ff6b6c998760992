//! Actor-critic with a denoising-chain actor.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    action_features, bellman_targets, run_off_policy, stack_rows, ActionCritic, EvalSet, OffPolicyAgent, Policy,
    ReplayRecord, TrainOutcome, TrainerConfig, TwinCritics,
};
use crate::diffusion::{
    chain_backward, sample_action, sample_batch, ActionBounds, BatchBounds, DenoiserNet, DiffusionSchedule,
    StateNormalizer,
};
use crate::error::{domain, Result};
use crate::harness::sampling::SamplingSpec;
use crate::market::{ContractMenu, EnvState, PTParams};
use crate::nn::{optimizer_step, Activation, AdamConfig, FinalActivation, Mlp, NetSpec};

pub const ALGORITHM: &str = "diffusion_sac";

/// Denoising actor, twin critics and everything needed to act.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSacAgent {
    pub actor: DenoiserNet,
    pub critics: TwinCritics,
    pub schedule: DiffusionSchedule,
    pub normalizer: StateNormalizer,
    pub config: TrainerConfig,
    pub r_cap: f64,
    pub adam: AdamConfig,
}

pub fn critic_spec(state_dim: usize, action_dim: usize, hidden: Vec<usize>) -> NetSpec {
    NetSpec {
        input_dim: state_dim + action_dim,
        hidden_dims: hidden,
        output_dim: 1,
        activation: Activation::Relu,
        final_activation: FinalActivation::None,
    }
}

impl DiffusionSacAgent {
    pub fn new<R: Rng + ?Sized>(
        spec: &SamplingSpec,
        schedule: DiffusionSchedule,
        r_cap: f64,
        cfg: &TrainerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let normalizer = spec.normalizer();
        let state_dim = normalizer.dim();
        let action_dim = cfg.action_mode.action_dim(spec.num_types());
        let actor = DenoiserNet::new(state_dim, action_dim, cfg.actor_hidden.clone(), rng)?;
        let cspec = critic_spec(state_dim, action_dim, cfg.critic_hidden.clone());
        let q1 = Mlp::new(cspec.clone(), rng, false)?;
        let q2 = Mlp::new(cspec, rng, false)?;
        Ok(Self {
            actor,
            critics: TwinCritics::new(q1, q2),
            schedule,
            normalizer,
            config: cfg.clone(),
            r_cap,
            adam: AdamConfig::default(),
        })
    }
}

impl Policy for DiffusionSacAgent {
    fn act(&self, env: &EnvState, rng: &mut ChaCha8Rng) -> Result<ContractMenu> {
        let state = self.normalizer.env_features(env)?;
        let bounds = self.config.action_mode.bounds(env, self.r_cap)?;
        let action = sample_action(&state, &self.actor, &self.schedule, &bounds, rng)?;
        self.config.action_mode.menu(env, &action)
    }
}

impl OffPolicyAgent for DiffusionSacAgent {
    fn normalizer(&self) -> &StateNormalizer {
        &self.normalizer
    }

    fn reward_cap(&self) -> f64 {
        self.r_cap
    }

    fn explore(&self, state: &[f64], bounds: &ActionBounds, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        sample_action(state, &self.actor, &self.schedule, bounds, rng)
    }

    fn update(&mut self, batch: &[&ReplayRecord], cfg: &TrainerConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        critic_update(
            &mut self.critics,
            &self.actor,
            &self.schedule,
            batch,
            cfg,
            &self.adam,
            rng,
        )?;
        let states = stack_rows(batch.iter().map(|r| r.state.as_slice()), self.normalizer.dim())?;
        let rows: Vec<ActionBounds> = batch.iter().map(|r| r.bounds.clone()).collect();
        let bounds = BatchBounds::from_rows(&rows)?;
        actor_update(
            &mut self.actor,
            &self.critics.q1,
            states.view(),
            &bounds,
            &self.schedule,
            cfg,
            &self.adam,
            rng,
        )?;
        self.critics.soft_update(cfg.soft_tau)
    }
}

/// Twin-critic regression toward `scale·r + γ(1-d)·min target`, with next
/// actions drawn from the current actor. Returns the summed squared error.
pub fn critic_update(
    critics: &mut TwinCritics,
    actor: &DenoiserNet,
    schedule: &DiffusionSchedule,
    batch: &[&ReplayRecord],
    cfg: &TrainerConfig,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(domain("critic update needs a non-empty batch"));
    }
    let sd = batch[0].state.len();
    let ad = batch[0].action_features.len();
    let states = stack_rows(batch.iter().map(|r| r.state.as_slice()), sd)?;
    let features = stack_rows(batch.iter().map(|r| r.action_features.as_slice()), ad)?;
    let targets = bellman_targets(batch, cfg, || {
        let next = stack_rows(batch.iter().map(|r| r.next_state.as_slice()), sd)?;
        let rows: Vec<ActionBounds> = batch.iter().map(|r| r.next_bounds.clone()).collect();
        let bounds = BatchBounds::from_rows(&rows)?;
        let (actions, _) = sample_batch(actor, next.view(), &bounds, schedule, rng, false)?;
        let next_features = stack_rows(
            actions
                .outer_iter()
                .zip(&rows)
                .map(|(a, b)| action_features(a.as_slice().expect("row"), b))
                .collect::<Vec<_>>()
                .iter()
                .map(Vec::as_slice),
            ad,
        )?;
        critics.target_min(next.view(), next_features.view())
    })?;
    critics.regress(states.view(), features.view(), &targets, cfg.critic_lr, adam)
}

/// Gaussian entropy of the last reverse step, `½·A·ln(2πe·δ_1)`.
pub fn entropy_surrogate(schedule: &DiffusionSchedule, action_dim: usize) -> f64 {
    0.5 * action_dim as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E * schedule.delta(1)).ln()
}

/// One ascent step on `mean q(s, Φ(ω)) + ς·H` through the full chain.
/// Returns the objective before the step.
#[allow(clippy::too_many_arguments)]
pub fn actor_update<C: ActionCritic + ?Sized>(
    actor: &mut DenoiserNet,
    critic: &C,
    states: ArrayView2<'_, f64>,
    bounds: &BatchBounds,
    schedule: &DiffusionSchedule,
    cfg: &TrainerConfig,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = states.nrows();
    if n == 0 {
        return Err(domain("actor update needs a non-empty batch"));
    }
    let (actions, tape) = sample_batch(actor, states, bounds, schedule, rng, true)?;
    let span = &bounds.upper - &bounds.lower;
    let features = Array2::from_shape_fn(actions.dim(), |(i, j)| {
        let w = span[[i, j]];
        if w > 0.0 {
            2.0 * (actions[[i, j]] - bounds.lower[[i, j]]) / w - 1.0
        } else {
            0.0
        }
    });
    let (q, dq) = critic.value_and_action_grad(states, features.view())?;
    let objective = q.mean().unwrap_or(0.0) + cfg.entropy_coeff * entropy_surrogate(schedule, actions.ncols());
    let upstream = Array2::from_shape_fn(actions.dim(), |(i, j)| {
        let w = span[[i, j]];
        if w > 0.0 {
            dq[[i, j]] * 2.0 / w / n as f64
        } else {
            0.0
        }
    });
    let mut grad = vec![0.0; actor.mlp.num_params()];
    chain_backward(
        actor,
        tape.as_ref().expect("recorded"),
        schedule,
        upstream.view(),
        &mut grad,
    )?;
    for g in grad.iter_mut() {
        *g = -*g;
    }
    optimizer_step(&mut actor.mlp.params, &grad, cfg.actor_lr, adam)?;
    Ok(objective)
}

/// Trains the diffusion actor-critic on environments drawn from `spec`.
pub fn train_diffusion_sac(
    spec: &SamplingSpec,
    pt: &PTParams,
    schedule: DiffusionSchedule,
    r_cap: f64,
    cfg: &TrainerConfig,
    eval_set: &EvalSet,
) -> Result<TrainOutcome<DiffusionSacAgent>> {
    cfg.validate()?;
    let mut init = super::Streams::new(cfg.seed).policy;
    init.set_stream(10);
    let agent = DiffusionSacAgent::new(spec, schedule, r_cap, cfg, &mut init)?;
    run_off_policy(agent, ALGORITHM, spec, pt, cfg, eval_set)
}
