//! Feasibility calculus for contract menus under information asymmetry.
//!
//! IR/IC verification, the monotone structure every feasible menu has, the
//! closed-form optimal rewards for a given latency profile, the
//! complete-information baseline, and an exhaustive grid oracle for the full
//! constrained problem on small instances.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, domain, Error, Result};
use crate::market::{
    asp_utility_unchecked, client_subjective_utility, client_type_eut_unchecked, pt_transform, ContractItem,
    ContractMenu, EnvState, PTParams,
};

/// Absolute slack used by feasibility checks unless the caller overrides it.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Largest number of candidate menus the grid oracle will enumerate.
const MAX_ORACLE_CANDIDATES: u128 = 20_000_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub ir_satisfied: Vec<bool>,
    /// `ic_satisfied[k][n]`: type `k` weakly prefers its own item to item `n`.
    pub ic_satisfied: Vec<Vec<bool>>,
    pub monotone_r: bool,
    pub monotone_l: bool,
    /// `f θ_1 R_1 - a L_1 / L_max`.
    pub ir_binding_slack_type1: f64,
    /// `U_{i+1}(item_{i+1}) - U_{i+1}(item_i)` for adjacent types.
    pub ldic_slacks: Vec<f64>,
}

impl FeasibilityReport {
    pub fn ir_ok(&self) -> bool {
        self.ir_satisfied.iter().all(|&b| b)
    }

    pub fn ic_ok(&self) -> bool {
        self.ic_satisfied.iter().flatten().all(|&b| b)
    }

    /// A menu is feasible iff every IR and IC constraint holds.
    pub fn feasible(&self) -> bool {
        self.ir_ok() && self.ic_ok()
    }
}

/// Checks IR, IC and monotonicity of `menu` at absolute slack `tol`.
pub fn check_feasibility(env: &EnvState, menu: &ContractMenu, tol: f64) -> Result<FeasibilityReport> {
    let k_types = env.num_types();
    check_dim("contract menu", k_types, menu.len())?;
    for k in 0..k_types {
        crate::market::asp_utility(env, k, menu.item(k))?;
    }
    Ok(feasibility_unchecked(env, menu, tol))
}

pub(crate) fn feasibility_unchecked(env: &EnvState, menu: &ContractMenu, tol: f64) -> FeasibilityReport {
    let k_types = env.num_types();
    // utility[k][n]: type k taking item n.
    let utility: Vec<Vec<f64>> = (0..k_types)
        .map(|k| {
            (0..k_types)
                .map(|n| asp_utility_unchecked(env, k, menu.item(n)))
                .collect()
        })
        .collect();
    let ir_satisfied = (0..k_types).map(|k| utility[k][k] >= -tol).collect();
    let ic_satisfied = (0..k_types)
        .map(|k| {
            (0..k_types)
                .map(|n| n == k || utility[k][k] >= utility[k][n] - tol)
                .collect()
        })
        .collect();
    let theta = &env.type_values;
    let monotone = |v: &[f64]| (0..k_types).all(|i| (0..k_types).all(|j| theta[i] < theta[j] || v[i] >= v[j] - tol));
    FeasibilityReport {
        ir_satisfied,
        ic_satisfied,
        monotone_r: monotone(menu.rewards()),
        monotone_l: monotone(menu.latencies()),
        ir_binding_slack_type1: utility[0][0],
        ldic_slacks: (1..k_types).map(|i| utility[i][i] - utility[i][i - 1]).collect(),
    }
}

/// Minimal rewards implementing a non-decreasing latency profile.
///
/// Type 1's IR and every local downward IC bind:
/// `R_k = a/(f L_max) · (L_1/θ_1 + Σ_{i=2..k} (L_i - L_{i-1})/θ_i)`.
pub fn optimal_rewards(env: &EnvState, latencies: &[f64]) -> Result<Vec<f64>> {
    check_dim("latency profile", env.num_types(), latencies.len())?;
    for (k, &l) in latencies.iter().enumerate() {
        if !(l.is_finite() && l >= 0.0 && l <= env.max_latency * (1.0 + 1e-12)) {
            return Err(domain(format!("latency L_{} = {l} outside [0, L_max]", k + 1)));
        }
    }
    if latencies.windows(2).any(|w| w[1] < w[0]) {
        return Err(domain("latency profile must be non-decreasing"));
    }
    Ok(optimal_rewards_unchecked(env, latencies))
}

pub(crate) fn optimal_rewards_unchecked(env: &EnvState, latencies: &[f64]) -> Vec<f64> {
    let scale = env.market.unit_cost / (env.market.reward_weight * env.max_latency);
    let theta = &env.type_values;
    let mut rewards = Vec::with_capacity(latencies.len());
    let mut acc = latencies[0] / theta[0];
    rewards.push(scale * acc);
    for i in 1..latencies.len() {
        acc += (latencies[i] - latencies[i - 1]) / theta[i];
        rewards.push(scale * acc);
    }
    rewards
}

/// `∂R_k/∂L_j` of [`optimal_rewards`]; the map is linear in `L`.
pub fn optimal_rewards_jacobian(env: &EnvState) -> Vec<Vec<f64>> {
    let k_types = env.num_types();
    let scale = env.market.unit_cost / (env.market.reward_weight * env.max_latency);
    let theta = &env.type_values;
    (0..k_types)
        .map(|k| {
            (0..k_types)
                .map(|j| match j.cmp(&k) {
                    Ordering::Less => scale * (1.0 / theta[j] - 1.0 / theta[j + 1]),
                    Ordering::Equal => scale / theta[k],
                    Ordering::Greater => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Checks the ordering structure every feasible menu shares: `R_i - R_j` and
/// `L_i - L_j` carry the same sign (zero within `tol`), and rewards never
/// decrease where the type strictly increases.
pub fn check_lemma_structure(env: &EnvState, menu: &ContractMenu, tol: f64) -> bool {
    let k_types = env.num_types();
    if menu.len() != k_types {
        return false;
    }
    let sign = |x: f64| {
        if x > tol {
            1
        } else if x < -tol {
            -1
        } else {
            0
        }
    };
    let (l, r, theta) = (menu.latencies(), menu.rewards(), &env.type_values);
    for i in 0..k_types {
        for j in 0..k_types {
            if sign(r[i] - r[j]) != sign(l[i] - l[j]) {
                return false;
            }
            if theta[i] > theta[j] && r[i] < r[j] - tol {
                return false;
            }
        }
    }
    true
}

/// Grid used by [`brute_force_optimal`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleGrid {
    /// Number of latency intervals per type; the grid has `latency_steps + 1` points.
    pub latency_steps: usize,
    /// Number of reward intervals per type (joint mode only).
    pub reward_steps: usize,
    /// Enumerate rewards on their own grid instead of using [`optimal_rewards`].
    pub joint: bool,
}

impl Default for OracleGrid {
    fn default() -> Self {
        Self {
            latency_steps: 100,
            reward_steps: 100,
            joint: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_menu: ContractMenu,
    pub best_value: f64,
    /// `(ΔL, ΔR)`; `ΔR` is zero when rewards were not gridded.
    pub grid_resolution: (f64, f64),
    pub evaluations: u64,
    /// Joint mode: feasible candidates paying some type less than the
    /// closed-form minimum for their latency profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimality_violations: Option<u64>,
}

#[derive(Clone, Debug)]
struct Candidate {
    value: f64,
    total_reward: f64,
    action: Vec<f64>,
}

impl Candidate {
    /// Total order: higher value, then lower total reward, then lexicographic
    /// `[L, R]` order. Reduction under it is independent of partitioning.
    fn better_than(&self, other: &Candidate) -> bool {
        match self.value.total_cmp(&other.value) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match self.total_reward.total_cmp(&other.total_reward) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => {
                    for (a, b) in self.action.iter().zip(&other.action) {
                        match a.total_cmp(b) {
                            Ordering::Less => return true,
                            Ordering::Greater => return false,
                            Ordering::Equal => {}
                        }
                    }
                    false
                }
            },
        }
    }
}

fn pick(a: Option<Candidate>, b: Option<Candidate>) -> Option<Candidate> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if b.better_than(&a) { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    }
}

fn grid_points(upper: f64, steps: usize) -> Vec<f64> {
    if steps == 0 {
        return vec![0.0];
    }
    (0..=steps)
        .map(|i| {
            if i == steps {
                upper
            } else {
                upper * i as f64 / steps as f64
            }
        })
        .collect()
}

/// Exhaustive grid search for the client-optimal feasible menu.
///
/// In the default mode every non-decreasing latency profile on the grid is
/// paired with [`optimal_rewards`]. In joint mode rewards are enumerated on
/// their own grid over `[0, r_max]` (default: 1.5 × the closed-form reward at
/// `L = L_max` for every type), which cross-checks the closed form; it is
/// limited to `K <= 3`.
pub fn brute_force_optimal(
    env: &EnvState,
    pt: &PTParams,
    grid: &OracleGrid,
    r_max: Option<f64>,
    tol: f64,
) -> Result<OracleResult> {
    pt.validate()?;
    let k_types = env.num_types();
    let lat = grid_points(env.max_latency, grid.latency_steps);
    let dl = if grid.latency_steps == 0 {
        0.0
    } else {
        env.max_latency / grid.latency_steps as f64
    };
    let lat_candidates = (lat.len() as u128).pow(k_types as u32);

    if !grid.joint {
        if lat_candidates > MAX_ORACLE_CANDIDATES {
            return Err(Error::UnsupportedSize(format!(
                "{lat_candidates} latency profiles for K = {k_types}"
            )));
        }
        return Ok(analytic_oracle(env, pt, &lat, dl, tol));
    }

    if k_types > 3 {
        return Err(Error::UnsupportedSize(format!(
            "joint grid oracle supports K <= 3, got K = {k_types}"
        )));
    }
    let r_upper = match r_max {
        Some(r) if r.is_finite() && r >= 0.0 => r,
        Some(r) => return Err(domain(format!("reward bound must be non-negative, got {r}"))),
        None => default_reward_bound(env),
    };
    let rew = grid_points(r_upper, grid.reward_steps);
    let dr = if grid.reward_steps == 0 {
        0.0
    } else {
        r_upper / grid.reward_steps as f64
    };
    let total = lat_candidates * (rew.len() as u128).pow(k_types as u32);
    if total > MAX_ORACLE_CANDIDATES {
        return Err(Error::UnsupportedSize(format!(
            "{total} joint candidates for K = {k_types}"
        )));
    }
    Ok(joint_oracle(env, pt, &lat, &rew, (dl, dr), tol))
}

/// `1.5 · R*_K(L_max, …, L_max)`.
pub fn default_reward_bound(env: &EnvState) -> f64 {
    let full = vec![env.max_latency; env.num_types()];
    1.5 * optimal_rewards_unchecked(env, &full)[env.num_types() - 1]
}

fn subjective_value(env: &EnvState, pt: &PTParams, menu: &ContractMenu) -> f64 {
    client_subjective_utility(env, pt, menu).expect("grid menus lie inside the domain")
}

/// Decodes a mixed-radix index into grid coordinates.
fn decode(mut idx: usize, radix: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = idx % radix;
        idx /= radix;
    }
}

fn analytic_oracle(env: &EnvState, pt: &PTParams, lat: &[f64], dl: f64, tol: f64) -> OracleResult {
    let k_types = env.num_types();
    let n = lat.len();
    let total = n.pow(k_types as u32);
    let (best, evaluated) = (0..total)
        .into_par_iter()
        .fold(
            || (None::<Candidate>, 0u64),
            |(best, count), idx| {
                let mut coords = vec![0usize; k_types];
                decode(idx, n, &mut coords);
                if coords.windows(2).any(|w| w[1] < w[0]) {
                    return (best, count);
                }
                let l: Vec<f64> = coords.iter().map(|&i| lat[i]).collect();
                let r = optimal_rewards_unchecked(env, &l);
                let menu = ContractMenu::new(l, r).expect("closed-form rewards are non-negative");
                if !feasibility_unchecked(env, &menu, tol).feasible() {
                    return (best, count + 1);
                }
                let cand = Candidate {
                    value: subjective_value(env, pt, &menu),
                    total_reward: menu.total_reward(),
                    action: menu.to_action(),
                };
                (pick(best, Some(cand)), count + 1)
            },
        )
        .reduce(|| (None, 0), |a, b| (pick(a.0, b.0), a.1 + b.1));
    let best = best.expect("the zero latency profile is always feasible");
    OracleResult {
        best_menu: ContractMenu::from_action(&best.action).expect("valid grid menu"),
        best_value: best.value,
        grid_resolution: (dl, 0.0),
        evaluations: evaluated,
        minimality_violations: None,
    }
}

struct JointCtx<'a> {
    env: &'a EnvState,
    pt: &'a PTParams,
    rew: &'a [f64],
    tol: f64,
    k_types: usize,
}

#[derive(Default)]
struct JointAcc {
    best: Option<Candidate>,
    evaluations: u64,
    violations: u64,
}

impl JointCtx<'_> {
    /// Depth-first enumeration of reward tuples for one latency profile.
    ///
    /// `util[k][n]` holds type `k`'s utility for item `n` once `R_n` is fixed.
    /// A branch is cut as soon as a constraint among the already fixed
    /// coordinates fails; the cut branch is still counted as evaluated.
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        &self,
        depth: usize,
        l: &[f64],
        r_star: Option<&[f64]>,
        r_idx: &mut [usize],
        util: &mut [[f64; 3]; 3],
        acc: &mut JointAcc,
    ) {
        let env = self.env;
        let m = &env.market;
        let k_types = self.k_types;
        let n_r = self.rew.len() as u64;
        if depth == k_types {
            acc.evaluations += 1;
            let mut action = [0.0f64; 6];
            let mut total_reward = 0.0;
            let mut value = 0.0;
            let mut below_minimum = false;
            for k in 0..k_types {
                let (lk, rk) = (l[k], self.rew[r_idx[k]]);
                action[k] = lk;
                action[k_types + k] = rk;
                total_reward += rk;
                if let Some(star) = r_star {
                    below_minimum |= rk < star[k] - self.tol;
                }
                let q = env.type_probs[k];
                if q != 0.0 {
                    let u = client_type_eut_unchecked(env, k, ContractItem::new(lk, rk));
                    value += q * pt_transform(u, self.pt);
                }
            }
            if below_minimum {
                acc.violations += 1;
            }
            let cand = Candidate {
                value: m.num_asps as f64 * value,
                total_reward,
                action: action[..2 * k_types].to_vec(),
            };
            // Cheap pre-check avoids the allocation for clearly worse menus.
            if let Some(best) = &acc.best {
                if cand.value < best.value {
                    return;
                }
            }
            acc.best = pick(acc.best.take(), Some(cand));
            return;
        }
        let remaining = n_r.pow((k_types - depth - 1) as u32);
        let d = depth;
        'outer: for ri in 0..self.rew.len() {
            r_idx[d] = ri;
            let item = ContractItem::new(l[d], self.rew[ri]);
            for (k, row) in util.iter_mut().enumerate().take(k_types) {
                row[d] = asp_utility_unchecked(env, k, item);
            }
            if util[d][d] < -self.tol {
                acc.evaluations += remaining;
                continue;
            }
            for a in 0..=d {
                if util[a][a] < util[a][d] - self.tol || util[d][d] < util[d][a] - self.tol {
                    acc.evaluations += remaining;
                    continue 'outer;
                }
            }
            self.recurse(depth + 1, l, r_star, r_idx, util, acc);
        }
    }
}

fn joint_oracle(
    env: &EnvState,
    pt: &PTParams,
    lat: &[f64],
    rew: &[f64],
    resolution: (f64, f64),
    tol: f64,
) -> OracleResult {
    let k_types = env.num_types();
    let n = lat.len();
    let ctx = JointCtx {
        env,
        pt,
        rew,
        tol,
        k_types,
    };
    let total = n.pow(k_types as u32);
    let acc = (0..total)
        .into_par_iter()
        .fold(JointAcc::default, |mut acc, idx| {
            let mut coords = vec![0usize; k_types];
            decode(idx, n, &mut coords);
            let l: Vec<f64> = coords.iter().map(|&i| lat[i]).collect();
            let r_star = if l.windows(2).all(|w| w[0] <= w[1]) {
                Some(optimal_rewards_unchecked(env, &l))
            } else {
                None
            };
            let mut r_idx = vec![0usize; k_types];
            let mut util = [[0.0f64; 3]; 3];
            ctx.recurse(0, &l, r_star.as_deref(), &mut r_idx, &mut util, &mut acc);
            acc
        })
        .reduce(JointAcc::default, |a, b| JointAcc {
            best: pick(a.best, b.best),
            evaluations: a.evaluations + b.evaluations,
            violations: a.violations + b.violations,
        });
    let best = acc.best.expect("the all-zero menu is always on the grid and feasible");
    OracleResult {
        best_menu: ContractMenu::from_action(&best.action).expect("valid grid menu"),
        best_value: best.value,
        grid_resolution: resolution,
        evaluations: acc.evaluations,
        minimality_violations: Some(acc.violations),
    }
}

/// Optimal menu when the client observes every ASP's type.
///
/// Each type is paid exactly its cost (`R_k = a L_k / (f θ_k L_max)`) and its
/// latency maximizes the PT-transformed per-type utility. IC is not imposed.
pub fn complete_info_optimal(env: &EnvState, pt: &PTParams) -> Result<OracleResult> {
    pt.validate()?;
    const SEARCH_STEPS: usize = 1000;
    let m = &env.market;
    let k_types = env.num_types();
    let mut latencies = Vec::with_capacity(k_types);
    let mut rewards = Vec::with_capacity(k_types);
    let mut evaluations = 0u64;
    for k in 0..k_types {
        let theta = env.type_values[k];
        let price = m.unit_cost / (m.reward_weight * theta);
        let reward_for = |l: f64| price * l / env.max_latency;
        let l = if m.latency_exp == 1.0 {
            evaluations += 1;
            if m.latency_coeff >= price {
                env.max_latency
            } else {
                0.0
            }
        } else {
            let mut best = (f64::NEG_INFINITY, 0.0);
            for l in grid_points(env.max_latency, SEARCH_STEPS) {
                evaluations += 1;
                let u = client_type_eut_unchecked(env, k, ContractItem::new(l, reward_for(l)));
                let v = pt_transform(u, pt);
                // Strict improvement keeps the cheaper (shorter) latency on ties.
                if v > best.0 {
                    best = (v, l);
                }
            }
            best.1
        };
        latencies.push(l);
        rewards.push(reward_for(l));
    }
    let menu = ContractMenu::new(latencies, rewards)?;
    let value = client_subjective_utility(env, pt, &menu)?;
    let dl = if m.latency_exp == 1.0 {
        env.max_latency
    } else {
        env.max_latency / SEARCH_STEPS as f64
    };
    Ok(OracleResult {
        best_menu: menu,
        best_value: value,
        grid_resolution: (dl, 0.0),
        evaluations,
        minimality_violations: None,
    })
}

/// What the client actually obtains when each ASP picks its favourite item.
///
/// Every type takes the item maximizing its own utility (its designated item
/// when that is within `tol` of the best) and stays out of the market when no
/// item gives it at least `-tol`; an absent type contributes an objective
/// utility of zero. For a feasible menu this equals
/// [`client_subjective_utility`]. The realized assignment is itself a
/// feasible menu, so the value never exceeds the true optimum.
pub fn realized_client_utility(env: &EnvState, pt: &PTParams, menu: &ContractMenu, tol: f64) -> Result<f64> {
    check_dim("contract menu", env.num_types(), menu.len())?;
    for k in 0..env.num_types() {
        crate::market::asp_utility(env, k, menu.item(k))?;
    }
    let m = &env.market;
    let mut total = 0.0;
    for k in 0..env.num_types() {
        let q = env.type_probs[k];
        if q == 0.0 {
            continue;
        }
        let own = asp_utility_unchecked(env, k, menu.item(k));
        let mut choice = k;
        let mut best = own;
        for n in 0..menu.len() {
            let u = asp_utility_unchecked(env, k, menu.item(n));
            if u > best {
                best = u;
                choice = n;
            }
        }
        if best - own <= tol {
            choice = k;
            best = own;
        }
        let u_eut = if best < -tol {
            0.0
        } else {
            let item = menu.item(choice);
            m.quality_coeff * env.type_values[k].powf(m.quality_exp)
                + m.latency_coeff * (item.latency / env.max_latency).powf(m.latency_exp)
                - item.reward
        };
        let weight = if pt.weight_probabilities {
            crate::market::probability_weight(q, pt.rationality)?
        } else {
            q
        };
        total += weight * pt_transform(u_eut, pt);
    }
    Ok(m.num_asps as f64 * total)
}
