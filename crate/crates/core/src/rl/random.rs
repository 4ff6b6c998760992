use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, EvalReport, EvalSet, Policy};
use crate::analytics::DEFAULT_TOL;
use crate::diffusion::ActionBounds;
use crate::error::{domain, Result};
use crate::harness::sampling::SamplingSpec;
use crate::market::{ContractMenu, EnvState, PTParams};

pub const ALGORITHM: &str = "random";

/// Menus drawn uniformly from the joint box, ignoring the types.
#[derive(Clone, Debug, PartialEq)]
pub enum RandomPolicy {
    /// `L ∈ [0, L_max]`, `R ∈ [0, r_cap]` per environment.
    PerEnv { r_cap: f64 },
    /// One fixed box for every environment.
    Fixed(ActionBounds),
}

impl Policy for RandomPolicy {
    fn act(&self, env: &EnvState, rng: &mut ChaCha8Rng) -> Result<ContractMenu> {
        let bounds = match self {
            RandomPolicy::PerEnv { r_cap } => ActionBounds::joint(env, *r_cap)?,
            RandomPolicy::Fixed(b) => b.clone(),
        };
        let action: Vec<f64> = bounds
            .lower
            .iter()
            .zip(&bounds.upper)
            .map(|(&l, &u)| if u > l { rng.random_range(l..u) } else { l })
            .collect();
        ContractMenu::from_action(&action)
    }
}

/// Scores the random policy on `n` environments drawn with `seed`.
pub fn random_policy_eval(
    spec: &SamplingSpec,
    pt: &PTParams,
    policy: &RandomPolicy,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(domain("random evaluation needs at least one environment"));
    }
    let set = EvalSet::build(spec, pt, seed, n)?;
    evaluate(policy, &set, pt, DEFAULT_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_box_gives_one_menu() {
        let spec = SamplingSpec::default();
        let pt = PTParams::default();
        let fixed = [10.0, 20.0, 16.0, 17.6];
        let policy = RandomPolicy::Fixed(ActionBounds::new(fixed.to_vec(), fixed.to_vec()).unwrap());
        let report = random_policy_eval(&spec, &pt, &policy, 20, 3).unwrap();
        for m in &report.per_env_menus {
            assert_eq!(m.to_action(), fixed.to_vec());
        }
    }

    #[test]
    fn random_menus_are_rarely_feasible_and_never_negative() {
        let spec = SamplingSpec::default();
        let pt = PTParams::default();
        let policy = RandomPolicy::PerEnv {
            r_cap: spec.reward_cap(),
        };
        let report = random_policy_eval(&spec, &pt, &policy, 1000, 4).unwrap();
        assert!(report.feasibility_rate < 1.0, "{}", report.feasibility_rate);
        assert!(report.mean_test_reward >= 0.0);
        assert!(report.per_env_reward.iter().all(|&r| r >= 0.0));
    }
}
