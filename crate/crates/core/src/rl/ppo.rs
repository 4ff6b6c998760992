//! Clipped-surrogate policy gradient with a Gaussian policy.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::sac::squash_to_box;
use super::{
    contract_reward_gated, evaluate, stack_rows, EvalSet, MetricsRow, Policy, Streams, TrainOutcome, TrainerConfig,
};
use crate::diffusion::StateNormalizer;
use crate::error::{domain, Error, Result};
use crate::harness::sampling::SamplingSpec;
use crate::market::{ContractMenu, EnvState, PTParams};
use crate::nn::{optimizer_step, Activation, AdamConfig, FinalActivation, Mlp, NetSpec, ParamSet};

pub const ALGORITHM: &str = "ppo";

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct PpoAgent {
    /// State → Gaussian mean in pre-squash coordinates.
    pub policy: Mlp,
    /// State-independent `log σ` per action coordinate.
    pub log_std: ParamSet,
    pub value: Mlp,
    pub normalizer: StateNormalizer,
    pub config: TrainerConfig,
    pub r_cap: f64,
    pub adam: AdamConfig,
}

/// One on-policy transition.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub state: Vec<f64>,
    /// Pre-squash Gaussian sample.
    pub raw_action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoLosses {
    pub policy: f64,
    pub value: f64,
    pub minibatch_steps: usize,
}

fn gaussian_log_prob(u: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((&u, &m), &ls)| {
            let z = (u - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

impl PpoAgent {
    pub fn new<R: Rng + ?Sized>(spec: &SamplingSpec, r_cap: f64, cfg: &TrainerConfig, rng: &mut R) -> Result<Self> {
        let normalizer = spec.normalizer();
        let state_dim = normalizer.dim();
        let action_dim = cfg.action_mode.action_dim(spec.num_types());
        let net = |out, hidden: &Vec<usize>, rng: &mut R| {
            Mlp::new(
                NetSpec {
                    input_dim: state_dim,
                    hidden_dims: hidden.clone(),
                    output_dim: out,
                    activation: Activation::Tanh,
                    final_activation: FinalActivation::None,
                },
                rng,
                false,
            )
        };
        let policy = net(action_dim, &cfg.actor_hidden, rng)?;
        let value = net(1, &cfg.critic_hidden, rng)?;
        Ok(Self {
            policy,
            log_std: ParamSet::new(vec![cfg.ppo.initial_log_std; action_dim]),
            value,
            normalizer,
            config: cfg.clone(),
            r_cap,
            adam: AdamConfig::default(),
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Samples a pre-squash action and its log-density.
    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mu = self.policy.forward(state)?;
        let u: Vec<f64> = mu
            .iter()
            .zip(&self.log_std.values)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_prob(&u, &mu, &self.log_std.values);
        Ok((u, lp))
    }

    fn menu(&self, env: &EnvState, raw: &[f64]) -> Result<ContractMenu> {
        let bounds = self.config.action_mode.bounds(env, self.r_cap)?;
        let features: Vec<f64> = raw.iter().map(|u| u.tanh()).collect();
        self.config.action_mode.menu(env, &squash_to_box(&features, &bounds))
    }
}

impl Policy for PpoAgent {
    /// Deterministic: the squashed mean.
    fn act(&self, env: &EnvState, _rng: &mut ChaCha8Rng) -> Result<ContractMenu> {
        let state = self.normalizer.env_features(env)?;
        let mu = self.policy.forward(&state)?;
        self.menu(env, &mu)
    }
}

/// Discounted returns within episodes, scaled like critic targets.
pub fn discounted_returns(rollout: &[RolloutStep], gamma: f64, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; rollout.len()];
    let mut running = 0.0;
    for (i, step) in rollout.iter().enumerate().rev() {
        if step.done {
            running = 0.0;
        }
        running = scale * step.reward + gamma * running;
        out[i] = running;
    }
    out
}

/// Several epochs of clipped-surrogate and value regression over one rollout.
pub fn ppo_update(
    agent: &mut PpoAgent,
    rollout: &[RolloutStep],
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoLosses> {
    if rollout.is_empty() {
        return Err(domain("ppo update needs a non-empty rollout"));
    }
    let sd = agent.normalizer.dim();
    let ad = agent.action_dim();
    let states = stack_rows(rollout.iter().map(|r| r.state.as_slice()), sd)?;
    let returns = Array1::from(discounted_returns(rollout, cfg.gamma, cfg.reward_scale));
    let baseline = agent.value.forward_batch_nocache(states.view())?.column(0).to_owned();
    let mut adv = &returns - &baseline;
    let mean = adv.mean().unwrap_or(0.0);
    let std = adv.mapv(|a| (a - mean).powi(2)).mean().unwrap_or(0.0).sqrt();
    adv.mapv_inplace(|a| (a - mean) / (std + 1e-8));

    let clip = cfg.ppo.clip;
    let mut order: Vec<usize> = (0..rollout.len()).collect();
    let mut losses = PpoLosses {
        policy: 0.0,
        value: 0.0,
        minibatch_steps: 0,
    };
    for _ in 0..cfg.ppo.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.ppo.minibatch_size) {
            let b = chunk.len() as f64;
            let mb_states = stack_rows(chunk.iter().map(|&i| rollout[i].state.as_slice()), sd)?;
            let cache = agent.policy.forward_batch(mb_states.view())?;
            let mu = cache.output();
            let log_std = agent.log_std.values.clone();
            let mut up_mu = Array2::zeros((chunk.len(), ad));
            let mut g_log_std = vec![0.0; ad];
            let mut policy_loss = 0.0;
            for (row, &i) in chunk.iter().enumerate() {
                let step = &rollout[i];
                let mu_row = mu.row(row);
                let lp = gaussian_log_prob(&step.raw_action, mu_row.as_slice().expect("row"), &log_std);
                let ratio = (lp - step.log_prob).exp();
                let a = adv[i];
                let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
                policy_loss -= (ratio * a).min(clipped * a) / b;
                let active = if a >= 0.0 {
                    ratio < 1.0 + clip
                } else {
                    ratio > 1.0 - clip
                };
                if !active {
                    continue;
                }
                let d_lp = -ratio * a / b;
                for j in 0..ad {
                    let sigma = log_std[j].exp();
                    let z = (step.raw_action[j] - mu_row[j]) / sigma;
                    up_mu[[row, j]] = d_lp * z / sigma;
                    g_log_std[j] += d_lp * (z * z - 1.0);
                }
            }
            let (grad, _) = agent.policy.backward(&cache, up_mu.view())?;
            optimizer_step(&mut agent.policy.params, &grad, cfg.actor_lr, &agent.adam)?;
            optimizer_step(&mut agent.log_std, &g_log_std, cfg.actor_lr, &agent.adam)?;

            let vcache = agent.value.forward_batch(mb_states.view())?;
            let mut up_v = Array2::zeros((chunk.len(), 1));
            let mut value_loss = 0.0;
            for (row, &i) in chunk.iter().enumerate() {
                let d = vcache.output()[[row, 0]] - returns[i];
                value_loss += d * d / b;
                up_v[[row, 0]] = 2.0 * d / b;
            }
            let (vgrad, _) = agent.value.backward(&vcache, up_v.view())?;
            optimizer_step(&mut agent.value.params, &vgrad, cfg.critic_lr, &agent.adam)?;
            losses = PpoLosses {
                policy: policy_loss,
                value: value_loss,
                minibatch_steps: losses.minibatch_steps + 1,
            };
        }
    }
    Ok(losses)
}

pub fn train_ppo_baseline(
    spec: &SamplingSpec,
    pt: &PTParams,
    r_cap: f64,
    cfg: &TrainerConfig,
    eval_set: &EvalSet,
) -> Result<TrainOutcome<PpoAgent>> {
    cfg.validate()?;
    spec.validate()?;
    pt.validate()?;
    let mut streams = Streams::new(cfg.seed);
    let mut init = Streams::new(cfg.seed).policy;
    init.set_stream(12);
    let mut agent = PpoAgent::new(spec, r_cap, cfg, &mut init)?;
    let tol = cfg.feasibility_tol;
    let mut rollout = Vec::with_capacity(cfg.ppo.rollout_len);
    let mut metrics = Vec::new();
    let mut updates = 0;
    let mut stored = 0;
    let mut step = 0;
    for _ in 0..cfg.max_episodes {
        let mut env = spec.sample_env(&mut streams.env)?;
        for z in 0..cfg.max_steps {
            let state = agent.normalizer.env_features(&env)?;
            let (raw, log_prob) = agent.sample(&state, &mut streams.policy)?;
            let menu = agent.menu(&env, &raw)?;
            let reward = contract_reward_gated(&env, pt, &menu, tol, cfg.reward_gate)?;
            let last = z + 1 == cfg.max_steps;
            rollout.push(RolloutStep {
                state,
                raw_action: raw,
                log_prob,
                reward,
                done: !cfg.episodic_env || last,
            });
            stored += 1;
            if rollout.len() == cfg.ppo.rollout_len {
                let l = ppo_update(&mut agent, &rollout, cfg, &mut streams.batch).map_err(|e| match e {
                    Error::NonFinite { what, .. } => Error::NonFinite { step, what },
                    other => other,
                })?;
                updates += l.minibatch_steps;
                rollout.clear();
            }
            step += 1;
            if step % cfg.eval_interval == 0 {
                let report = evaluate(&agent, eval_set, pt, tol)?;
                metrics.push(MetricsRow::new(step, ALGORITHM, &report));
            }
            if !cfg.episodic_env || last {
                env = spec.sample_env(&mut streams.env)?;
            }
        }
    }
    let final_report = evaluate(&agent, eval_set, pt, tol)?;
    if metrics.last().map(|m: &MetricsRow| m.step) != Some(step) {
        metrics.push(MetricsRow::new(step, ALGORITHM, &final_report));
    }
    Ok(TrainOutcome {
        agent,
        metrics,
        final_report,
        gradient_updates: updates,
        records_stored: stored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> TrainerConfig {
        TrainerConfig {
            gamma: 0.0,
            actor_hidden: vec![16, 16],
            critic_hidden: vec![16, 16],
            actor_lr: 1e-2,
            critic_lr: 1e-2,
            reward_scale: 1.0,
            eval_set_size: 5,
            eval_interval: 100,
            max_steps: 200,
            ppo: crate::rl::PpoConfig {
                rollout_len: 64,
                ..Default::default()
            },
            ..TrainerConfig::default()
        }
    }

    fn rollout(agent: &PpoAgent, rng: &mut ChaCha8Rng, n: usize, reward: impl Fn(&[f64]) -> f64) -> Vec<RolloutStep> {
        let state = vec![0.2; agent.normalizer.dim()];
        (0..n)
            .map(|_| {
                let (raw, log_prob) = agent.sample(&state, rng).unwrap();
                let f: Vec<f64> = raw.iter().map(|u| u.tanh()).collect();
                RolloutStep {
                    state: state.clone(),
                    reward: reward(&f),
                    raw_action: raw,
                    log_prob,
                    done: true,
                }
            })
            .collect()
    }

    #[test]
    fn returns_respect_episode_ends() {
        let mk = |r, done| RolloutStep {
            state: vec![],
            raw_action: vec![],
            log_prob: 0.0,
            reward: r,
            done,
        };
        let r = discounted_returns(&[mk(1.0, false), mk(2.0, true), mk(4.0, true)], 0.5, 1.0);
        assert_eq!(r, vec![2.0, 2.0, 4.0]);
    }

    #[test]
    fn bandit_mean_moves_to_rewarded_corner() {
        let cfg = cfg();
        let mut agent =
            PpoAgent::new(&SamplingSpec::default(), 400.0, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..60 {
            let r = rollout(&agent, &mut rng, 64, |f| f.iter().sum());
            ppo_update(&mut agent, &r, &cfg, &mut rng).unwrap();
        }
        let mu = agent.policy.forward(&[0.2; 9]).unwrap();
        for m in mu {
            assert!(m.tanh() > 0.9, "{m}");
        }
    }

    #[test]
    fn zero_reward_value_loss_decays() {
        let cfg = cfg();
        let mut agent =
            PpoAgent::new(&SamplingSpec::default(), 400.0, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = rollout(&agent, &mut rng, 64, |_| 0.0);
        let first = ppo_update(&mut agent, &r, &cfg, &mut rng).unwrap().value;
        let mut last = first;
        for _ in 0..30 {
            last = ppo_update(&mut agent, &r, &cfg, &mut rng).unwrap().value;
        }
        assert!(last < 1e-2 * first.max(1e-6), "{first} -> {last}");
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let spec = SamplingSpec::default();
        let pt = PTParams::default();
        let cfg = cfg();
        let set = EvalSet::build(&spec, &pt, 4, 5).unwrap();
        let a = train_ppo_baseline(&spec, &pt, 400.0, &cfg, &set).unwrap();
        let b = train_ppo_baseline(&spec, &pt, 400.0, &cfg, &set).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.gradient_updates > 0);
        assert_eq!(a.metrics.len(), 2);
    }

    #[test]
    fn empty_rollout_is_rejected() {
        let cfg = cfg();
        let mut agent =
            PpoAgent::new(&SamplingSpec::default(), 400.0, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(ppo_update(&mut agent, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(6)).is_err());
    }
}
