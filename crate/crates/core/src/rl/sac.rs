//! Soft actor-critic with a tanh-squashed Gaussian policy head.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::diffusion_sac::critic_spec;
use super::{
    bellman_targets, run_off_policy, stack_rows, ActionCritic, EvalSet, OffPolicyAgent, Policy, ReplayRecord,
    TrainOutcome, TrainerConfig, TwinCritics,
};
use crate::diffusion::{ActionBounds, StateNormalizer};
use crate::error::{domain, Result};
use crate::harness::sampling::SamplingSpec;
use crate::market::{ContractMenu, EnvState, PTParams};
use crate::nn::{optimizer_step, Activation, AdamConfig, FinalActivation, Mlp, NetSpec, ParamSet};

pub const ALGORITHM: &str = "sac";

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const TANH_EPS: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct SacAgent {
    /// State → `[μ, log σ]`.
    pub policy: Mlp,
    pub critics: TwinCritics,
    pub log_alpha: ParamSet,
    pub normalizer: StateNormalizer,
    pub config: TrainerConfig,
    pub r_cap: f64,
    pub adam: AdamConfig,
    action_dim: usize,
}

/// Reparameterized draw from the squashed Gaussian.
struct Draw {
    log_std: Array2<f64>,
    clamped: Array2<bool>,
    xi: Array2<f64>,
    /// `tanh(u)`, i.e. the critic features.
    features: Array2<f64>,
    log_prob: Array1<f64>,
}

pub(crate) fn squash_to_box(features: &[f64], bounds: &ActionBounds) -> Vec<f64> {
    features
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(&f, (&l, &u))| l + (u - l) * (f + 1.0) / 2.0)
        .collect()
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(spec: &SamplingSpec, r_cap: f64, cfg: &TrainerConfig, rng: &mut R) -> Result<Self> {
        let normalizer = spec.normalizer();
        let state_dim = normalizer.dim();
        let action_dim = cfg.action_mode.action_dim(spec.num_types());
        let policy = Mlp::new(
            NetSpec {
                input_dim: state_dim,
                hidden_dims: cfg.actor_hidden.clone(),
                output_dim: 2 * action_dim,
                activation: Activation::Relu,
                final_activation: FinalActivation::None,
            },
            rng,
            false,
        )?;
        let cspec = critic_spec(state_dim, action_dim, cfg.critic_hidden.clone());
        let q1 = Mlp::new(cspec.clone(), rng, false)?;
        let q2 = Mlp::new(cspec, rng, false)?;
        let alpha0 = if cfg.entropy_coeff > 0.0 {
            cfg.entropy_coeff
        } else {
            0.01
        };
        Ok(Self {
            policy,
            critics: TwinCritics::new(q1, q2),
            log_alpha: ParamSet::new(vec![alpha0.ln()]),
            normalizer,
            config: cfg.clone(),
            r_cap,
            adam: AdamConfig::default(),
            action_dim,
        })
    }

    /// Current entropy coefficient.
    pub fn alpha(&self) -> f64 {
        if self.config.auto_entropy {
            self.log_alpha.values[0].exp()
        } else {
            self.config.entropy_coeff
        }
    }

    fn heads(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<bool>) {
        let a = self.action_dim;
        let mu = out.slice(s![.., ..a]).to_owned();
        let raw = out.slice(s![.., a..]);
        let clamped = raw.mapv(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
        (mu, raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)), clamped)
    }

    fn draw<R: Rng + ?Sized>(&self, out: &Array2<f64>, rng: &mut R) -> Draw {
        let (mu, log_std, clamped) = self.heads(out);
        let xi = Array2::from_shape_simple_fn(mu.dim(), || rng.sample::<f64, _>(StandardNormal));
        let u = &mu + &(&log_std.mapv(f64::exp) * &xi);
        let features = u.mapv(f64::tanh);
        let log_prob = (0..mu.nrows())
            .map(|i| {
                (0..self.action_dim)
                    .map(|j| {
                        let f = features[[i, j]];
                        -0.5 * xi[[i, j]].powi(2) - log_std[[i, j]] - HALF_LN_2PI - (1.0 - f * f + TANH_EPS).ln()
                    })
                    .sum()
            })
            .collect();
        Draw {
            log_std,
            clamped,
            xi,
            features,
            log_prob,
        }
    }

    fn row_out(&self, state: &[f64]) -> Result<Array2<f64>> {
        let out = self.policy.forward(state)?;
        Array2::from_shape_vec((1, out.len()), out).map_err(|e| domain(e.to_string()))
    }
}

impl Policy for SacAgent {
    /// Deterministic: the squashed mean.
    fn act(&self, env: &EnvState, _rng: &mut ChaCha8Rng) -> Result<ContractMenu> {
        let state = self.normalizer.env_features(env)?;
        let bounds = self.config.action_mode.bounds(env, self.r_cap)?;
        let out = self.row_out(&state)?;
        let (mu, _, _) = self.heads(&out);
        let features: Vec<f64> = mu.iter().map(|m| m.tanh()).collect();
        self.config.action_mode.menu(env, &squash_to_box(&features, &bounds))
    }
}

impl OffPolicyAgent for SacAgent {
    fn normalizer(&self) -> &StateNormalizer {
        &self.normalizer
    }

    fn reward_cap(&self) -> f64 {
        self.r_cap
    }

    fn explore(&self, state: &[f64], bounds: &ActionBounds, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let out = self.row_out(state)?;
        let d = self.draw(&out, rng);
        Ok(squash_to_box(d.features.as_slice().expect("row"), bounds))
    }

    fn update(&mut self, batch: &[&ReplayRecord], cfg: &TrainerConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        critic_update(self, batch, cfg, rng)?;
        let states = stack_rows(batch.iter().map(|r| r.state.as_slice()), self.normalizer.dim())?;
        actor_update(self, states.view(), cfg, rng)?;
        self.critics.soft_update(cfg.soft_tau)
    }
}

/// Twin-critic regression toward `scale·r + γ(1-d)(min q' - ς log π')`.
pub fn critic_update(
    agent: &mut SacAgent,
    batch: &[&ReplayRecord],
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(domain("critic update needs a non-empty batch"));
    }
    let sd = agent.normalizer.dim();
    let ad = agent.action_dim;
    let states = stack_rows(batch.iter().map(|r| r.state.as_slice()), sd)?;
    let features = stack_rows(batch.iter().map(|r| r.action_features.as_slice()), ad)?;
    let alpha = agent.alpha();
    let targets = {
        let agent_ref = &*agent;
        bellman_targets(batch, cfg, || {
            let next = stack_rows(batch.iter().map(|r| r.next_state.as_slice()), sd)?;
            let out = agent_ref.policy.forward_batch_nocache(next.view())?;
            let d = agent_ref.draw(&out, rng);
            let q = agent_ref.critics.target_min(next.view(), d.features.view())?;
            Ok(q - &(d.log_prob * alpha))
        })?
    };
    agent
        .critics
        .regress(states.view(), features.view(), &targets, cfg.critic_lr, &agent.adam)
}

/// One descent step on `mean(ς log π - q1)`; with `auto_entropy`, also
/// adapts `log ς` toward the target entropy `-dim(action)`. Returns the
/// loss before the step.
pub fn actor_update(
    agent: &mut SacAgent,
    states: ArrayView2<'_, f64>,
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = states.nrows();
    if n == 0 {
        return Err(domain("actor update needs a non-empty batch"));
    }
    let a = agent.action_dim;
    let alpha = agent.alpha();
    let cache = agent.policy.forward_batch(states)?;
    let d = agent.draw(cache.output(), rng);
    let (q, dq) = agent.critics.q1.value_and_action_grad(states, d.features.view())?;
    let loss = (alpha * &d.log_prob - &q).mean().unwrap_or(0.0);
    let mut upstream = Array2::zeros((n, 2 * a));
    for i in 0..n {
        for j in 0..a {
            let f = d.features[[i, j]];
            let one_minus = 1.0 - f * f;
            let dlogp_du = 2.0 * f * one_minus / (one_minus + TANH_EPS);
            let dl_du = (alpha * dlogp_du - dq[[i, j]] * one_minus) / n as f64;
            upstream[[i, j]] = dl_du;
            if !d.clamped[[i, j]] {
                let sigma_xi = d.log_std[[i, j]].exp() * d.xi[[i, j]];
                upstream[[i, a + j]] = -alpha / n as f64 + dl_du * sigma_xi;
            }
        }
    }
    let (grad, _) = agent.policy.backward(&cache, upstream.view())?;
    optimizer_step(&mut agent.policy.params, &grad, cfg.actor_lr, &agent.adam)?;
    if cfg.auto_entropy {
        let target = -(a as f64);
        let g = -(d.log_prob.mean().unwrap_or(0.0) + target);
        optimizer_step(&mut agent.log_alpha, &[g], cfg.actor_lr, &agent.adam)?;
    }
    Ok(loss)
}

pub fn train_sac_baseline(
    spec: &SamplingSpec,
    pt: &PTParams,
    r_cap: f64,
    cfg: &TrainerConfig,
    eval_set: &EvalSet,
) -> Result<TrainOutcome<SacAgent>> {
    cfg.validate()?;
    let mut init = super::Streams::new(cfg.seed).policy;
    init.set_stream(11);
    let agent = SacAgent::new(spec, r_cap, cfg, &mut init)?;
    run_off_policy(agent, ALGORITHM, spec, pt, cfg, eval_set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::action_features;
    use rand::SeedableRng;

    fn cfg() -> TrainerConfig {
        TrainerConfig {
            batch_size: 64,
            gamma: 0.0,
            actor_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            reward_scale: 1.0,
            eval_set_size: 5,
            eval_interval: 50,
            max_steps: 100,
            ..TrainerConfig::default()
        }
    }

    fn agent(seed: u64, cfg: &TrainerConfig) -> SacAgent {
        SacAgent::new(
            &SamplingSpec::default(),
            400.0,
            cfg,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    /// Fixed state, rewards from `reward(features)`.
    fn bandit_batch(
        agent: &SacAgent,
        rng: &mut ChaCha8Rng,
        n: usize,
        reward: impl Fn(&[f64]) -> f64,
    ) -> Vec<ReplayRecord> {
        let state = vec![0.3; agent.normalizer.dim()];
        let bounds = ActionBounds::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
        (0..n)
            .map(|_| {
                let action = agent.explore(&state, &bounds, rng).unwrap();
                let features = action_features(&action, &bounds);
                ReplayRecord {
                    state: state.clone(),
                    reward: reward(&features),
                    action_features: features,
                    action,
                    bounds: bounds.clone(),
                    next_state: state.clone(),
                    next_bounds: bounds.clone(),
                    done: true,
                }
            })
            .collect()
    }

    #[test]
    fn bandit_mean_moves_to_rewarded_corner() {
        let cfg = cfg();
        let mut a = agent(1, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut buffer = Vec::new();
        for _ in 0..300 {
            buffer.extend(bandit_batch(&a, &mut rng, 4, |f| f.iter().sum()));
            let start = buffer.len().saturating_sub(512);
            let batch: Vec<&ReplayRecord> = (0..cfg.batch_size)
                .map(|_| &buffer[rng.random_range(start..buffer.len())])
                .collect();
            a.update(&batch, &cfg, &mut rng).unwrap();
        }
        let out = a.policy.forward(&[0.3; 9]).unwrap();
        for m in &out[..4] {
            assert!(m.tanh() > 0.9, "{out:?}");
        }
    }

    #[test]
    fn zero_reward_critic_loss_decays() {
        let cfg = cfg();
        let mut a = agent(3, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let recs = bandit_batch(&a, &mut rng, 64, |_| 0.0);
        let batch: Vec<&ReplayRecord> = recs.iter().collect();
        let first = critic_update(&mut a, &batch, &cfg, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = critic_update(&mut a, &batch, &cfg, &mut rng).unwrap();
        }
        assert!(last < 1e-3 * first.max(1e-3), "{first} -> {last}");
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let spec = SamplingSpec::default();
        let pt = PTParams::default();
        let cfg = TrainerConfig {
            batch_size: 16,
            ..cfg()
        };
        let set = EvalSet::build(&spec, &pt, 3, 5).unwrap();
        let a = train_sac_baseline(&spec, &pt, 400.0, &cfg, &set).unwrap();
        let b = train_sac_baseline(&spec, &pt, 400.0, &cfg, &set).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.gradient_updates > 0);
    }

    #[test]
    fn auto_entropy_moves_alpha() {
        let cfg = TrainerConfig {
            auto_entropy: true,
            ..cfg()
        };
        let mut a = agent(5, &cfg);
        let before = a.alpha();
        let states = Array2::from_elem((8, 9), 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        actor_update(&mut a, states.view(), &cfg, &mut rng).unwrap();
        assert_ne!(a.alpha(), before);
    }
}
