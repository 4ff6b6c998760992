use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::plan::{Algorithm, CellSummary, SweepParam, SweepPoint};
use crate::error::{Error, Result};
use crate::market::{client_subjective_utility, ContractMenu, EnvState, PTParams};

/// Differences below this are reported as ties.
pub const ORDER_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Greater,
    Tied,
    Less,
}

impl Order {
    pub fn of(a: f64, b: f64) -> Self {
        if (a - b).abs() <= ORDER_TOL {
            Order::Tied
        } else if a > b {
            Order::Greater
        } else {
            Order::Less
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Order::Greater => ">",
            Order::Tied => "=",
            Order::Less => "<",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub mean_test_reward: f64,
    pub mean_client_utility: f64,
    pub optimality_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOrder {
    pub first: Algorithm,
    pub second: Algorithm,
    pub test_reward: Order,
    pub client_utility: Order,
}

/// A pair whose utilities contradict complete_info ≥ oracle ≥ learned ≥ random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainViolation {
    pub expected_higher: Algorithm,
    pub expected_lower: Algorithm,
    /// `mean(higher) − mean(lower)`, negative when violated on average.
    pub mean_gap: f64,
    /// Eval envs on which the higher-ranked algorithm falls short by more
    /// than the tie tolerance.
    pub env_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub eval_seed: u64,
    pub eval_hash: String,
    pub sweep: Option<SweepPoint>,
    pub rows: Vec<CompareRow>,
    pub pairs: Vec<PairOrder>,
    pub violations: Vec<ChainViolation>,
}

/// Orders cells that were scored on the same frozen eval set.
pub fn compare_report(cells: &[CellSummary]) -> Result<CompareReport> {
    let first = cells
        .first()
        .filter(|_| cells.len() >= 2)
        .ok_or_else(|| Error::Comparison("need at least two cells".into()))?;
    for c in cells {
        if c.eval_seed != first.eval_seed || c.eval_hash != first.eval_hash {
            return Err(Error::Comparison(format!(
                "{} used eval seed {} ({}), {} used {} ({})",
                first.algorithm, first.eval_seed, first.eval_hash, c.algorithm, c.eval_seed, c.eval_hash
            )));
        }
        if c.sweep != first.sweep {
            return Err(Error::Comparison("cells come from different sweep points".into()));
        }
    }
    let rows = cells
        .iter()
        .map(|c| CompareRow {
            algorithm: c.algorithm,
            seed: c.seed,
            mean_test_reward: c.mean_test_reward,
            mean_client_utility: c.mean_client_utility,
            optimality_ratio: c.optimality_ratio,
        })
        .collect();
    let mut pairs = Vec::new();
    let mut violations = Vec::new();
    for (i, a) in cells.iter().enumerate() {
        for b in &cells[i + 1..] {
            pairs.push(PairOrder {
                first: a.algorithm,
                second: b.algorithm,
                test_reward: Order::of(a.mean_test_reward, b.mean_test_reward),
                client_utility: Order::of(a.mean_client_utility, b.mean_client_utility),
            });
            let (hi, lo) = match a.algorithm.rank().cmp(&b.algorithm.rank()) {
                Ordering::Greater => (a, b),
                Ordering::Less => (b, a),
                Ordering::Equal => continue,
            };
            let env_violations = hi
                .per_env_utility
                .iter()
                .zip(&lo.per_env_utility)
                .filter(|(h, l)| **h < **l - ORDER_TOL)
                .count();
            let mean_gap = hi.mean_client_utility - lo.mean_client_utility;
            if env_violations > 0 || mean_gap < -ORDER_TOL {
                violations.push(ChainViolation {
                    expected_higher: hi.algorithm,
                    expected_lower: lo.algorithm,
                    mean_gap,
                    env_violations,
                });
            }
        }
    }
    Ok(CompareReport {
        eval_seed: first.eval_seed,
        eval_hash: first.eval_hash.clone(),
        sweep: first.sweep,
        rows,
        pairs,
        violations,
    })
}

/// Fixed-width text rendering of a report.
pub fn render_table(report: &CompareReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "eval seed {}", report.eval_seed);
    if let Some(p) = report.sweep {
        let _ = write!(out, ", {} = {}", p.param.as_str(), p.value);
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<14} {:>6} {:>16} {:>16} {:>10}",
        "algorithm", "seed", "test_reward", "client_utility", "opt_ratio"
    );
    for r in &report.rows {
        let ratio = r
            .optimality_ratio
            .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>16.4} {:>16.4} {:>10}",
            r.algorithm.as_str(),
            r.seed,
            r.mean_test_reward,
            r.mean_client_utility,
            ratio
        );
    }
    for p in &report.pairs {
        let _ = writeln!(
            out,
            "{} vs {}: reward {}, utility {}",
            p.first,
            p.second,
            p.test_reward.symbol(),
            p.client_utility.symbol()
        );
    }
    if report.violations.is_empty() {
        out.push_str("ordering chain holds\n");
    }
    for v in &report.violations {
        let _ = writeln!(
            out,
            "VIOLATION {} should be >= {}: mean gap {:.6}, {} envs",
            v.expected_higher, v.expected_lower, v.mean_gap, v.env_violations
        );
    }
    out
}

/// One report per (sweep point, seed) group holding at least two cells, in
/// first-appearance order.
pub fn plan_reports(cells: &[CellSummary]) -> Result<Vec<CompareReport>> {
    let mut groups: Vec<Vec<CellSummary>> = Vec::new();
    for c in cells {
        match groups.iter_mut().find(|g| g[0].seed == c.seed && g[0].sweep == c.sweep) {
            Some(g) => g.push(c.clone()),
            None => groups.push(vec![c.clone()]),
        }
    }
    groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| compare_report(g))
        .collect()
}

/// Tidy table `param,value,algorithm,seed,mean_test_reward,mean_client_utility,feasibility_rate,optimality_ratio`.
pub fn sweep_csv(cells: &[CellSummary]) -> Result<Vec<u8>> {
    let err = |e: csv::Error| crate::error::domain(format!("csv: {e}"));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record([
        "param",
        "value",
        "algorithm",
        "seed",
        "mean_test_reward",
        "mean_client_utility",
        "feasibility_rate",
        "optimality_ratio",
    ])
    .map_err(err)?;
    for c in cells {
        w.write_record([
            c.sweep.map(|p| p.param.as_str().to_string()).unwrap_or_default(),
            c.sweep.map(|p| p.value.to_string()).unwrap_or_default(),
            c.algorithm.as_str().to_string(),
            c.seed.to_string(),
            c.mean_test_reward.to_string(),
            c.mean_client_utility.to_string(),
            c.feasibility_rate.to_string(),
            c.optimality_ratio.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| crate::error::domain(e.to_string()))
}

/// Mean client subjective utility of fixed menus at each swept value.
pub fn subjective_utility_sweep(
    envs: &[EnvState],
    menus: &[ContractMenu],
    base: &PTParams,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<f64>> {
    crate::error::check_dim("menus per env", envs.len(), menus.len())?;
    values
        .iter()
        .map(|&v| {
            let mut pt = base.clone();
            match param {
                SweepParam::URef => pt.reference_point = v,
                SweepParam::Eta => pt.loss_aversion = v,
            }
            let total = envs
                .iter()
                .zip(menus)
                .map(|(e, m)| client_subjective_utility(e, &pt, m))
                .sum::<Result<f64>>()?;
            Ok(total / envs.len() as f64)
        })
        .collect()
}
