use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::diffusion::StateNormalizer;
use crate::error::{domain, Result};
use crate::market::{EnvState, MarketConfig};

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// Distribution of training and evaluation environments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    pub theta_ranges: Vec<Interval>,
    pub max_latency_range: Interval,
    pub unit_cost_range: Interval,
    pub dirichlet_concentration: f64,
    pub num_asps: usize,
    pub reward_weight: f64,
    pub quality_coeff: f64,
    pub latency_coeff: f64,
    pub quality_exp: f64,
    pub latency_exp: f64,
    pub reference_point: f64,
    /// Range used only to normalize `U_ref` for the networks.
    pub reference_point_range: Interval,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            theta_ranges: vec![Interval::new(10.0, 50.0), Interval::new(100.0, 200.0)],
            max_latency_range: Interval::new(100.0, 160.0),
            unit_cost_range: Interval::new(80.0, 100.0),
            dirichlet_concentration: 1.0,
            num_asps: 5,
            reward_weight: 0.05,
            quality_coeff: 3.0,
            latency_coeff: 50.0,
            quality_exp: 1.0,
            latency_exp: 1.0,
            reference_point: 200.0,
            reference_point_range: Interval::new(100.0, 300.0),
        }
    }
}

impl SamplingSpec {
    pub fn num_types(&self) -> usize {
        self.theta_ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_ranges.is_empty() {
            return Err(domain("at least one type range is required"));
        }
        let positive = |i: &Interval| i.lo > 0.0 && i.lo <= i.hi && i.hi.is_finite();
        if !self.theta_ranges.iter().all(positive) {
            return Err(domain("type ranges must be positive with lo <= hi"));
        }
        if !positive(&self.max_latency_range) || !positive(&self.unit_cost_range) {
            return Err(domain("L_max and a ranges must be positive with lo <= hi"));
        }
        let r = &self.reference_point_range;
        if !(r.lo <= r.hi && r.lo.is_finite() && r.hi.is_finite()) {
            return Err(domain("reference point range must have lo <= hi"));
        }
        if !(self.dirichlet_concentration > 0.0 && self.dirichlet_concentration.is_finite()) {
            return Err(domain("Dirichlet concentration must be positive"));
        }
        self.market().validate()
    }

    pub fn market(&self) -> MarketConfig {
        MarketConfig {
            num_asps: self.num_asps,
            num_types: self.num_types(),
            reward_weight: self.reward_weight,
            unit_cost: self.unit_cost_range.lo,
            quality_coeff: self.quality_coeff,
            latency_coeff: self.latency_coeff,
            quality_exp: self.quality_exp,
            latency_exp: self.latency_exp,
        }
    }

    /// Draws θ, Q, L_max and a; θ is sorted ascending.
    pub fn sample_env<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<EnvState> {
        let mut theta: Vec<f64> = self.theta_ranges.iter().map(|r| r.sample(rng)).collect();
        theta.sort_by(f64::total_cmp);
        let gamma = Gamma::new(self.dirichlet_concentration, 1.0).map_err(|e| domain(e.to_string()))?;
        let draws: Vec<f64> = (0..self.num_types()).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let mut probs: Vec<f64> = draws.iter().map(|g| g / total).collect();
        let last = probs.len() - 1;
        probs[last] = (1.0 - probs[..last].iter().sum::<f64>()).max(0.0);
        let max_latency = self.max_latency_range.sample(rng);
        let mut market = self.market();
        market.unit_cost = self.unit_cost_range.sample(rng);
        EnvState::new(market, max_latency, self.reference_point, probs, theta)
    }

    /// Largest reward any sampled environment can require, doubled:
    /// `2 · max a / (f · min θ_1)`.
    pub fn reward_cap(&self) -> f64 {
        2.0 * self.unit_cost_range.hi / (self.reward_weight * self.theta_ranges[0].lo)
    }

    /// Maps each flattened state entry from its sampling range onto `[-1, 1]`.
    pub fn normalizer(&self) -> StateNormalizer {
        let k = self.num_types() as f64;
        let mut lower = vec![
            self.num_asps as f64,
            k,
            self.max_latency_range.lo,
            self.reference_point_range.lo,
            self.unit_cost_range.lo,
        ];
        let mut upper = vec![
            self.num_asps as f64,
            k,
            self.max_latency_range.hi,
            self.reference_point_range.hi,
            self.unit_cost_range.hi,
        ];
        lower.extend(std::iter::repeat_n(0.0, self.num_types()));
        upper.extend(std::iter::repeat_n(1.0, self.num_types()));
        lower.extend(self.theta_ranges.iter().map(|r| r.lo));
        upper.extend(self.theta_ranges.iter().map(|r| r.hi));
        StateNormalizer { lower, upper }
    }
}
