//! Economic model of the edge AIGC market.
//!
//! Houses the market constants, the environment observed by the client, the
//! contract menu it posts, and the prospect-theoretic utility of the client.
//! Type indices are zero-based throughout the Rust API: type `k` in `0..K`
//! corresponds to the `(k+1)`-th lowest ASP type.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, domain, Error, Result};

/// Relative slack allowed when checking `L <= L_max`.
const LATENCY_SLACK: f64 = 1e-12;

/// Absolute tolerance on `sum(Q) == 1`.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Economic constants shared by every environment instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    #[serde(rename = "M")]
    pub num_asps: usize,
    #[serde(rename = "K")]
    pub num_types: usize,
    /// Weight `f` of the reward in the ASP's valuation.
    #[serde(rename = "f")]
    pub reward_weight: f64,
    /// Unit resource cost `a` per normalized latency.
    #[serde(rename = "a")]
    pub unit_cost: f64,
    #[serde(rename = "e1")]
    pub quality_coeff: f64,
    #[serde(rename = "e2")]
    pub latency_coeff: f64,
    #[serde(rename = "z1")]
    pub quality_exp: f64,
    #[serde(rename = "z2")]
    pub latency_exp: f64,
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_asps == 0 || self.num_types == 0 {
            return Err(domain("M and K must be at least 1"));
        }
        let positive = [
            ("f", self.reward_weight),
            ("a", self.unit_cost),
            ("e1", self.quality_coeff),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(domain(format!("{name} must be finite and positive, got {v}")));
            }
        }
        // e2 = 0 is admitted as the "no latency revenue" edge case.
        if !(self.latency_coeff.is_finite() && self.latency_coeff >= 0.0) {
            return Err(domain(format!("e2 must be >= 0, got {}", self.latency_coeff)));
        }
        for (name, v) in [("z1", self.quality_exp), ("z2", self.latency_exp)] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(domain(format!("{name} must be >= 1, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EnvStateRepr {
    #[serde(flatten)]
    market: MarketConfig,
    #[serde(rename = "L_max")]
    max_latency: f64,
    #[serde(rename = "U_ref")]
    reference_point: f64,
    #[serde(rename = "Q")]
    type_probs: Vec<f64>,
    #[serde(rename = "theta")]
    type_values: Vec<f64>,
}

/// One market instance as observed by the client.
///
/// The invariants (probabilities summing to one, sorted positive types) are
/// checked on construction and on deserialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvStateRepr", into = "EnvStateRepr")]
pub struct EnvState {
    pub market: MarketConfig,
    pub max_latency: f64,
    pub reference_point: f64,
    pub type_probs: Vec<f64>,
    pub type_values: Vec<f64>,
}

impl TryFrom<EnvStateRepr> for EnvState {
    type Error = Error;

    fn try_from(r: EnvStateRepr) -> Result<Self> {
        EnvState::new(r.market, r.max_latency, r.reference_point, r.type_probs, r.type_values)
    }
}

impl From<EnvState> for EnvStateRepr {
    fn from(e: EnvState) -> Self {
        EnvStateRepr {
            market: e.market,
            max_latency: e.max_latency,
            reference_point: e.reference_point,
            type_probs: e.type_probs,
            type_values: e.type_values,
        }
    }
}

impl EnvState {
    pub fn new(
        market: MarketConfig,
        max_latency: f64,
        reference_point: f64,
        type_probs: Vec<f64>,
        type_values: Vec<f64>,
    ) -> Result<Self> {
        market.validate()?;
        let k = market.num_types;
        check_dim("type probabilities", k, type_probs.len())?;
        check_dim("type values", k, type_values.len())?;
        if !(max_latency.is_finite() && max_latency > 0.0) {
            return Err(domain(format!("L_max must be positive, got {max_latency}")));
        }
        if !reference_point.is_finite() {
            return Err(domain("U_ref must be finite"));
        }
        if type_probs.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(domain("type probabilities must be non-negative"));
        }
        let total: f64 = type_probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(domain(format!("type probabilities sum to {total}, not 1")));
        }
        if type_values.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(domain("type values must be positive"));
        }
        if type_values.windows(2).any(|w| w[0] > w[1]) {
            return Err(domain("type values must be sorted non-decreasing"));
        }
        Ok(Self {
            market,
            max_latency,
            reference_point,
            type_probs,
            type_values,
        })
    }

    pub fn num_types(&self) -> usize {
        self.market.num_types
    }

    /// Length of [`EnvState::flatten`]: `5 + 2K`.
    pub fn flat_dim(num_types: usize) -> usize {
        5 + 2 * num_types
    }

    /// Numeric form `[M, K, L_max, U_ref, a, Q_1..Q_K, theta_1..theta_K]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::flat_dim(self.num_types()));
        v.push(self.market.num_asps as f64);
        v.push(self.market.num_types as f64);
        v.push(self.max_latency);
        v.push(self.reference_point);
        v.push(self.market.unit_cost);
        v.extend_from_slice(&self.type_probs);
        v.extend_from_slice(&self.type_values);
        v
    }

    fn check_type(&self, k: usize) -> Result<()> {
        if k < self.num_types() {
            Ok(())
        } else {
            Err(domain(format!(
                "type index {k} out of range for K = {}",
                self.num_types()
            )))
        }
    }

    fn check_item(&self, item: ContractItem) -> Result<()> {
        let ContractItem { latency, reward } = item;
        if !(latency.is_finite() && latency >= 0.0) {
            return Err(domain(format!("latency must be non-negative, got {latency}")));
        }
        if latency > self.max_latency * (1.0 + LATENCY_SLACK) {
            return Err(domain(format!("latency {latency} exceeds L_max {}", self.max_latency)));
        }
        if !(reward.is_finite() && reward >= 0.0) {
            return Err(domain(format!("reward must be non-negative, got {reward}")));
        }
        Ok(())
    }
}

/// A single contract item `(L_k, R_k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractItem {
    pub latency: f64,
    pub reward: f64,
}

impl ContractItem {
    pub fn new(latency: f64, reward: f64) -> Self {
        Self { latency, reward }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ContractMenuRepr {
    #[serde(rename = "L")]
    latencies: Vec<f64>,
    #[serde(rename = "R")]
    rewards: Vec<f64>,
}

/// The menu of `K` items posted by the client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContractMenuRepr", into = "ContractMenuRepr")]
pub struct ContractMenu {
    latencies: Vec<f64>,
    rewards: Vec<f64>,
}

impl TryFrom<ContractMenuRepr> for ContractMenu {
    type Error = Error;

    fn try_from(r: ContractMenuRepr) -> Result<Self> {
        ContractMenu::new(r.latencies, r.rewards)
    }
}

impl From<ContractMenu> for ContractMenuRepr {
    fn from(m: ContractMenu) -> Self {
        ContractMenuRepr {
            latencies: m.latencies,
            rewards: m.rewards,
        }
    }
}

impl ContractMenu {
    pub fn new(latencies: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        check_dim("menu rewards", latencies.len(), rewards.len())?;
        if latencies.is_empty() {
            return Err(domain("menu must contain at least one item"));
        }
        if latencies.iter().chain(&rewards).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(domain("menu entries must be finite and non-negative"));
        }
        Ok(Self { latencies, rewards })
    }

    /// Menu offering `(0, 0)` to every type.
    pub fn zeros(num_types: usize) -> Self {
        Self {
            latencies: vec![0.0; num_types],
            rewards: vec![0.0; num_types],
        }
    }

    /// Builds a menu from the `[L_1..L_K, R_1..R_K]` action layout.
    pub fn from_action(action: &[f64]) -> Result<Self> {
        if action.len() % 2 != 0 {
            return Err(domain("action vector must have even length 2K"));
        }
        let k = action.len() / 2;
        Self::new(action[..k].to_vec(), action[k..].to_vec())
    }

    /// `[L_1..L_K, R_1..R_K]`.
    pub fn to_action(&self) -> Vec<f64> {
        let mut v = self.latencies.clone();
        v.extend_from_slice(&self.rewards);
        v
    }

    pub fn len(&self) -> usize {
        self.latencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latencies.is_empty()
    }

    pub fn latencies(&self) -> &[f64] {
        &self.latencies
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn item(&self, k: usize) -> ContractItem {
        ContractItem::new(self.latencies[k], self.rewards[k])
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

fn default_alpha() -> f64 {
    1.0
}

/// Prospect-theory preferences of the client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PTParams {
    #[serde(rename = "U_ref")]
    pub reference_point: f64,
    #[serde(rename = "eta")]
    pub loss_aversion: f64,
    #[serde(rename = "zeta_plus")]
    pub gain_exp: f64,
    #[serde(rename = "zeta_minus")]
    pub loss_exp: f64,
    /// Rationality coefficient of the probability-weighting function.
    #[serde(rename = "alpha", default = "default_alpha")]
    pub rationality: f64,
    /// Replace `Q_k` by `H(Q_k)` in the subjective utility. Off by default.
    #[serde(default)]
    pub weight_probabilities: bool,
}

impl Default for PTParams {
    fn default() -> Self {
        Self {
            reference_point: 200.0,
            loss_aversion: 0.5,
            gain_exp: 1.0,
            loss_exp: 1.0,
            rationality: 1.0,
            weight_probabilities: false,
        }
    }
}

impl PTParams {
    pub fn validate(&self) -> Result<()> {
        if !self.reference_point.is_finite() {
            return Err(domain("U_ref must be finite"));
        }
        if !(self.loss_aversion.is_finite() && self.loss_aversion >= 0.0) {
            return Err(domain("eta must be >= 0"));
        }
        for (name, v) in [
            ("zeta_plus", self.gain_exp),
            ("zeta_minus", self.loss_exp),
            ("alpha", self.rationality),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(domain(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Utility of a type-`k` ASP accepting `item`: `f θ_k R - a L / L_max`.
pub fn asp_utility(env: &EnvState, k: usize, item: ContractItem) -> Result<f64> {
    env.check_type(k)?;
    env.check_item(item)?;
    Ok(asp_utility_unchecked(env, k, item))
}

#[inline]
pub(crate) fn asp_utility_unchecked(env: &EnvState, k: usize, item: ContractItem) -> f64 {
    let m = &env.market;
    m.reward_weight * env.type_values[k] * item.reward - m.unit_cost * (item.latency / env.max_latency)
}

/// Objective utility of the client from a type-`k` ASP serving `item`.
pub fn client_type_eut(env: &EnvState, k: usize, item: ContractItem) -> Result<f64> {
    env.check_type(k)?;
    env.check_item(item)?;
    Ok(client_type_eut_unchecked(env, k, item))
}

#[inline]
pub(crate) fn client_type_eut_unchecked(env: &EnvState, k: usize, item: ContractItem) -> f64 {
    let m = &env.market;
    m.quality_coeff * env.type_values[k].powf(m.quality_exp)
        + m.latency_coeff * (item.latency / env.max_latency).powf(m.latency_exp)
        - item.reward
}

/// Prospect-theoretic value of an objective utility relative to `U_ref`.
///
/// The branch is selected before exponentiation so the base is never negative.
pub fn pt_transform(u_eut: f64, pt: &PTParams) -> f64 {
    if u_eut >= pt.reference_point {
        (u_eut - pt.reference_point).powf(pt.gain_exp)
    } else {
        -pt.loss_aversion * (pt.reference_point - u_eut).powf(pt.loss_exp)
    }
}

/// Subjective probability `H(q) = exp(-(-ln q)^alpha)`.
pub fn probability_weight(q: f64, alpha: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(domain(format!("probability must lie in (0, 1], got {q}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if q == 1.0 {
        return Ok(1.0);
    }
    Ok((-(-q.ln()).powf(alpha)).exp())
}

fn check_menu(env: &EnvState, menu: &ContractMenu) -> Result<()> {
    check_dim("contract menu", env.num_types(), menu.len())?;
    for k in 0..menu.len() {
        env.check_item(menu.item(k))?;
    }
    Ok(())
}

/// Client utility under prospect theory: `M Σ_k Q_k · PT(U_k^EUT)`.
///
/// With `pt.weight_probabilities` set, `Q_k` is replaced by `H(Q_k)`
/// (types with `Q_k = 0` contribute nothing either way).
pub fn client_subjective_utility(env: &EnvState, pt: &PTParams, menu: &ContractMenu) -> Result<f64> {
    check_menu(env, menu)?;
    let mut total = 0.0;
    for k in 0..env.num_types() {
        let q = env.type_probs[k];
        if q == 0.0 {
            continue;
        }
        let weight = if pt.weight_probabilities {
            probability_weight(q, pt.rationality)?
        } else {
            q
        };
        let u = client_type_eut_unchecked(env, k, menu.item(k));
        total += weight * pt_transform(u, pt);
    }
    Ok(env.market.num_asps as f64 * total)
}

/// Expected-utility baseline: `M Σ_k Q_k U_k^EUT`.
pub fn client_expected_utility(env: &EnvState, menu: &ContractMenu) -> Result<f64> {
    check_menu(env, menu)?;
    let total: f64 = (0..env.num_types())
        .map(|k| env.type_probs[k] * client_type_eut_unchecked(env, k, menu.item(k)))
        .sum();
    Ok(env.market.num_asps as f64 * total)
}
