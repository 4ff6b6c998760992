use serde::{Deserialize, Serialize};

use crate::analytics::check_feasibility;
use crate::error::Result;
use crate::market::{asp_utility, client_subjective_utility, ContractMenu, EnvState, PTParams};

/// What an infeasible menu earns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardGate {
    /// Zero reward.
    #[default]
    Strict,
    /// `-λ · (total IR and IC violation)`.
    SoftPenalty { lambda: f64 },
}

/// Constraint-gated reward of a posted menu.
///
/// Feasible menus earn the client's subjective utility plus every ASP's own
/// utility plus all pairwise incentive surpluses; infeasible menus earn 0.
pub fn contract_reward(env: &EnvState, pt: &PTParams, menu: &ContractMenu, tol: f64) -> Result<f64> {
    contract_reward_gated(env, pt, menu, tol, RewardGate::Strict)
}

pub fn contract_reward_gated(
    env: &EnvState,
    pt: &PTParams,
    menu: &ContractMenu,
    tol: f64,
    gate: RewardGate,
) -> Result<f64> {
    let report = check_feasibility(env, menu, tol)?;
    if !report.feasible() {
        return Ok(match gate {
            RewardGate::Strict => 0.0,
            RewardGate::SoftPenalty { lambda } => -lambda * violation(env, menu)?,
        });
    }
    let k_types = env.num_types();
    let utility = asp_matrix(env, menu)?;
    let mut reward = client_subjective_utility(env, pt, menu)?;
    for k in 0..k_types {
        reward += utility[k][k];
        for n in 0..k_types {
            reward += utility[k][k] - utility[k][n];
        }
    }
    Ok(reward)
}

/// `utility[k][n]`: type `k` serving item `n`.
fn asp_matrix(env: &EnvState, menu: &ContractMenu) -> Result<Vec<Vec<f64>>> {
    let k_types = env.num_types();
    (0..k_types)
        .map(|k| (0..k_types).map(|n| asp_utility(env, k, menu.item(n))).collect())
        .collect()
}

/// Sum of IR shortfalls and IC regrets.
pub fn violation(env: &EnvState, menu: &ContractMenu) -> Result<f64> {
    let utility = asp_matrix(env, menu)?;
    let mut total = 0.0;
    for (k, row) in utility.iter().enumerate() {
        total += (-row[k]).max(0.0);
        for &u in row {
            total += (u - row[k]).max(0.0);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{check_feasibility, optimal_rewards, DEFAULT_TOL};
    use crate::market::tests::{paper_market, worked_env, worked_menu};
    use crate::market::{asp_utility, client_subjective_utility, ContractItem};
    use proptest::prelude::*;

    #[test]
    fn worked_menu_reward() {
        let env = worked_env();
        let pt = PTParams::default();
        let menu = worked_menu();
        // Client: 5·(0.5·PT(19) + 0.5·PT(292.4)) = 5·(-45.25 + 46.2).
        let client = client_subjective_utility(&env, &pt, &menu).unwrap();
        let u11 = asp_utility(&env, 0, menu.item(0)).unwrap();
        let u22 = asp_utility(&env, 1, menu.item(1)).unwrap();
        let u12 = asp_utility(&env, 0, menu.item(1)).unwrap();
        let u21 = asp_utility(&env, 1, menu.item(0)).unwrap();
        assert!((u11 - 0.0).abs() < 1e-12);
        assert!((u22 - 72.0).abs() < 1e-12);
        let surplus = (u11 - u12) + (u22 - u21);
        assert!((surplus - 7.2).abs() < 1e-12);
        assert!((client - 4.75).abs() < 1e-9);
        let r = contract_reward(&env, &pt, &menu, DEFAULT_TOL).unwrap();
        assert!((r - 83.95).abs() < 1e-9, "{r}");
    }

    #[test]
    fn infeasible_menu_earns_zero() {
        let env = worked_env();
        let pt = PTParams::default();
        let menu = ContractMenu::new(vec![50.0, 60.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(contract_reward(&env, &pt, &menu, DEFAULT_TOL).unwrap(), 0.0);
        let soft =
            contract_reward_gated(&env, &pt, &menu, DEFAULT_TOL, RewardGate::SoftPenalty { lambda: 2.0 }).unwrap();
        // IR shortfalls a·L/L_max are 40 and 48; type 2 regrets 8 against item 1.
        assert!((soft + 2.0 * 96.0).abs() < 1e-9, "{soft}");
    }

    #[test]
    fn single_type_reward() {
        let market = paper_market(1, 80.0);
        let env = EnvState::new(market, 100.0, 200.0, vec![1.0], vec![40.0]).unwrap();
        let pt = PTParams::default();
        let menu = ContractMenu::new(vec![30.0], vec![15.0]).unwrap();
        let expected = client_subjective_utility(&env, &pt, &menu).unwrap()
            + asp_utility(&env, 0, ContractItem::new(30.0, 15.0)).unwrap();
        let r = contract_reward(&env, &pt, &menu, DEFAULT_TOL).unwrap();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let env = worked_env();
        let menu = ContractMenu::new(vec![1.0], vec![1.0]).unwrap();
        assert!(contract_reward(&env, &PTParams::default(), &menu, DEFAULT_TOL).is_err());
    }

    proptest! {
        #[test]
        fn reward_gate_is_sound(
            l in proptest::collection::vec(0.0..100.0f64, 2),
            r in proptest::collection::vec(0.0..60.0f64, 2),
        ) {
            let env = worked_env();
            let pt = PTParams::default();
            let menu = ContractMenu::new(l, r).unwrap();
            let reward = contract_reward(&env, &pt, &menu, DEFAULT_TOL).unwrap();
            let feasible = check_feasibility(&env, &menu, DEFAULT_TOL).unwrap().feasible();
            if reward != 0.0 {
                prop_assert!(feasible);
            }
            if !feasible {
                prop_assert!(violation(&env, &menu).unwrap() > 0.0);
            }
        }

        #[test]
        fn feasible_reward_lower_bound(mut l in proptest::collection::vec(0.0..100.0f64, 2)) {
            l.sort_by(f64::total_cmp);
            let env = worked_env();
            let pt = PTParams::default();
            let r = optimal_rewards(&env, &l).unwrap();
            let menu = ContractMenu::new(l, r).unwrap();
            let reward = contract_reward(&env, &pt, &menu, DEFAULT_TOL).unwrap();
            let base = client_subjective_utility(&env, &pt, &menu).unwrap()
                + (0..2).map(|k| asp_utility(&env, k, menu.item(k)).unwrap()).sum::<f64>();
            prop_assert!(reward >= base - 4.0 * DEFAULT_TOL);
        }
    }
}
