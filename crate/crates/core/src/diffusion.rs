//! Conditional denoising chain that maps Gaussian noise and an environment
//! state to a contract menu.

use std::cell::Cell;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, domain, Result};
use crate::market::{ContractMenu, EnvState};
use crate::nn::{Activation, FinalActivation, ForwardCache, Mlp, NetSpec};

/// Width of the sinusoidal step embedding fed to the denoiser.
pub const TIME_EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    steps: usize,
    delta: Vec<f64>,
    chi: Vec<f64>,
    chi_bar: Vec<f64>,
    /// Inject noise on the last reverse step as well.
    pub final_step_noise: bool,
}

impl DiffusionSchedule {
    /// Linear `δ_t` from `beta_min` to `beta_max` over `t = 1..T`.
    pub fn build(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(domain("diffusion needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(domain(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let delta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let chi: Vec<f64> = delta.iter().map(|d| 1.0 - d).collect();
        let chi_bar = chi
            .iter()
            .scan(1.0, |acc, &c| {
                *acc *= c;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            steps,
            delta,
            chi,
            chi_bar,
            final_step_noise: false,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `δ_t` for `t ∈ 1..=T`.
    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t - 1]
    }

    pub fn chi(&self, t: usize) -> f64 {
        self.chi[t - 1]
    }

    pub fn chi_bar(&self, t: usize) -> f64 {
        self.chi_bar[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(domain(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// Coefficients `(1/√χ_t, δ_t/√(χ_t(1-χ̄_t)), noise scale)` of one
    /// reverse step.
    fn reverse_coeffs(&self, t: usize) -> (f64, f64, f64) {
        let chi = self.chi(t);
        let a = 1.0 / chi.sqrt();
        let b = self.delta(t) / (chi * (1.0 - self.chi_bar(t))).sqrt();
        let sigma = if t > 1 || self.final_step_noise {
            self.delta(t).sqrt()
        } else {
            0.0
        };
        (a, b, sigma)
    }
}

/// `x_t = √χ̄_t·x0 + √(1-χ̄_t)·noise`.
pub fn forward_diffuse(x0: &[f64], t: usize, sched: &DiffusionSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_dim("diffusion noise", x0.len(), noise.len())?;
    let cb = sched.chi_bar(t);
    let (sa, sb) = (cb.sqrt(), (1.0 - cb).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| sa * x + sb * n).collect())
}

/// Applies the reverse update given an already evaluated noise prediction.
///
/// `noise` is ignored on the last step unless the schedule asks for it.
pub fn reverse_update(
    x_t: &[f64],
    t: usize,
    eps_pred: &[f64],
    sched: &DiffusionSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_dim("noise prediction", x_t.len(), eps_pred.len())?;
    check_dim("diffusion noise", x_t.len(), noise.len())?;
    let (a, b, sigma) = sched.reverse_coeffs(t);
    Ok(x_t
        .iter()
        .zip(eps_pred)
        .zip(noise)
        .map(|((x, e), z)| a * x - b * e + sigma * z)
        .collect())
}

/// Anything that predicts the injected noise from `(state, t, x_t)` rows.
pub trait NoisePredictor {
    fn action_dim(&self) -> usize;

    /// `states`: normalized state rows; `steps[i]` is the diffusion step of
    /// row `i`.
    fn predict(&self, states: ArrayView2<'_, f64>, steps: &[usize], x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// One reverse step with a single network evaluation.
pub fn denoise_step<P: NoisePredictor + ?Sized>(
    x_t: &[f64],
    t: usize,
    state: &[f64],
    net: &P,
    sched: &DiffusionSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let sv = ArrayView2::from_shape((1, state.len()), state).map_err(|e| domain(e.to_string()))?;
    let xv = ArrayView2::from_shape((1, x_t.len()), x_t).map_err(|e| domain(e.to_string()))?;
    let eps = net.predict(sv, &[t], xv)?;
    reverse_update(x_t, t, eps.as_slice().expect("contiguous"), sched, noise)
}

/// Affine map of each flattened [`EnvState`] entry onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateNormalizer {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("normalizer bounds", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(domain("normalizer needs lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Degenerate coordinates map to 0.
    pub fn normalize(&self, flat: &[f64]) -> Result<Vec<f64>> {
        check_dim("state features", self.dim(), flat.len())?;
        Ok(flat
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &u))| if u > l { 2.0 * (v - l) / (u - l) - 1.0 } else { 0.0 })
            .collect())
    }

    pub fn env_features(&self, env: &EnvState) -> Result<Vec<f64>> {
        self.normalize(&env.flatten())
    }
}

/// Per-coordinate box for the raw action vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ActionBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("action bounds", lower.len(), upper.len())?;
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u))
        {
            return Err(domain("action bounds must be finite with lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    /// `L_k ∈ [0, L_max]`, `R_k ∈ [0, r_cap]`.
    pub fn joint(env: &EnvState, r_cap: f64) -> Result<Self> {
        if !(r_cap.is_finite() && r_cap > 0.0) {
            return Err(domain(format!("r_cap must be positive and finite, got {r_cap}")));
        }
        let k = env.num_types();
        let mut upper = vec![env.max_latency; k];
        upper.extend(std::iter::repeat_n(r_cap, k));
        Self::new(vec![0.0; 2 * k], upper)
    }

    /// Latencies only: `L_k ∈ [0, L_max]`.
    pub fn latency_only(env: &EnvState) -> Result<Self> {
        let k = env.num_types();
        Self::new(vec![0.0; k], vec![env.max_latency; k])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// `lo + (hi-lo)·σ(x)` coordinate-wise.
    pub fn squash(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &u))| l + (u - l) * sigmoid(v))
            .collect()
    }

    /// Inverse of [`ActionBounds::squash`], clamping saturated values.
    pub fn unsquash(&self, y: &[f64]) -> Vec<f64> {
        const EDGE: f64 = 1e-6;
        y.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &u))| {
                if u > l {
                    let p = ((v - l) / (u - l)).clamp(EDGE, 1.0 - EDGE);
                    (p / (1.0 - p)).ln()
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sinusoidal features of the integer step index.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Noise predictor network over `[state, time embedding, x_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    pub mlp: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden_dims: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Self::net_spec(state_dim, action_dim, hidden_dims);
        Ok(Self {
            mlp: Mlp::new(spec, rng, true)?,
            state_dim,
            action_dim,
        })
    }

    pub fn net_spec(state_dim: usize, action_dim: usize, hidden_dims: Vec<usize>) -> NetSpec {
        NetSpec {
            input_dim: state_dim + TIME_EMBED_DIM + action_dim,
            hidden_dims,
            output_dim: action_dim,
            activation: Activation::Mish,
            final_activation: FinalActivation::None,
        }
    }

    pub fn from_mlp(mlp: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        let spec = mlp.spec();
        check_dim(
            "denoiser input",
            state_dim + TIME_EMBED_DIM + action_dim,
            spec.input_dim,
        )?;
        check_dim("denoiser output", action_dim, spec.output_dim)?;
        Ok(Self {
            mlp,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn build_input(&self, states: ArrayView2<'_, f64>, steps: &[usize], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = states.nrows();
        check_dim("state features", self.state_dim, states.ncols())?;
        check_dim("noisy action", self.action_dim, x.ncols())?;
        check_dim("noisy action rows", n, x.nrows())?;
        check_dim("step indices", n, steps.len())?;
        let mut input = Array2::zeros((n, self.state_dim + TIME_EMBED_DIM + self.action_dim));
        let t0 = self.state_dim;
        let x0 = t0 + TIME_EMBED_DIM;
        input.slice_mut(s![.., ..t0]).assign(&states);
        for (mut row, &t) in input.slice_mut(s![.., t0..x0]).outer_iter_mut().zip(steps) {
            row.assign(&ndarray::ArrayView1::from(&time_embedding(t)));
        }
        input.slice_mut(s![.., x0..]).assign(&x);
        Ok(input)
    }

    fn forward_cached(
        &self,
        states: ArrayView2<'_, f64>,
        steps: &[usize],
        x: ArrayView2<'_, f64>,
    ) -> Result<ForwardCache> {
        let input = self.build_input(states, steps, x)?;
        self.mlp.forward_batch(input.view())
    }

    /// Gradient w.r.t. the `x_t` block of the input.
    fn backward_x(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>, grad: &mut [f64]) -> Result<Array2<f64>> {
        let dx = self.mlp.backward_into(cache, upstream, grad, 1.0)?;
        Ok(dx.slice(s![.., self.state_dim + TIME_EMBED_DIM..]).to_owned())
    }
}

impl NoisePredictor for DenoiserNet {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict(&self, states: ArrayView2<'_, f64>, steps: &[usize], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let input = self.build_input(states, steps, x)?;
        self.mlp.forward_batch_nocache(input.view())
    }
}

/// Per-row squash box for a batch of actions.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchBounds {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
}

impl BatchBounds {
    pub fn from_rows(rows: &[ActionBounds]) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map(ActionBounds::dim).unwrap_or(0);
        let mut lower = Array2::zeros((n, dim));
        let mut upper = Array2::zeros((n, dim));
        for (i, b) in rows.iter().enumerate() {
            check_dim("action bounds", dim, b.dim())?;
            lower.row_mut(i).assign(&ndarray::ArrayView1::from(&b.lower));
            upper.row_mut(i).assign(&ndarray::ArrayView1::from(&b.upper));
        }
        Ok(Self { lower, upper })
    }
}

/// Recorded reverse chain for differentiating sampled actions.
#[derive(Clone, Debug)]
pub struct ChainTape {
    /// `caches[t-1]` holds the network activations of step `t`.
    caches: Vec<ForwardCache>,
    x0: Array2<f64>,
    span: Array2<f64>,
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Runs the reverse chain for a batch; returns squashed actions and, when
/// `record` is set, the tape needed by [`chain_backward`].
pub fn sample_batch<R: Rng + ?Sized>(
    net: &DenoiserNet,
    states: ArrayView2<'_, f64>,
    bounds: &BatchBounds,
    sched: &DiffusionSchedule,
    rng: &mut R,
    record: bool,
) -> Result<(Array2<f64>, Option<ChainTape>)> {
    let n = states.nrows();
    let a = net.action_dim;
    check_dim("bound rows", n, bounds.lower.nrows())?;
    check_dim("bound cols", a, bounds.lower.ncols())?;
    let mut x = standard_normal(rng, n, a);
    let mut caches = Vec::with_capacity(if record { sched.steps() } else { 0 });
    for t in (1..=sched.steps()).rev() {
        let steps = vec![t; n];
        let eps = if record {
            let cache = net.forward_cached(states, &steps, x.view())?;
            let out = cache.output().clone();
            caches.push(cache);
            out
        } else {
            net.predict(states, &steps, x.view())?
        };
        let (ca, cb, sigma) = sched.reverse_coeffs(t);
        let mut next = x * ca - eps * cb;
        if sigma > 0.0 {
            next.scaled_add(sigma, &standard_normal(rng, n, a));
        }
        x = next;
    }
    let span = &bounds.upper - &bounds.lower;
    let y = &bounds.lower + &(&span * &x.mapv(sigmoid));
    let tape = record.then(|| {
        caches.reverse();
        ChainTape { caches, x0: x, span }
    });
    Ok((y, tape))
}

/// Accumulates `∂(Σ upstream ⊙ y)/∂ω` into `grad`.
pub fn chain_backward(
    net: &DenoiserNet,
    tape: &ChainTape,
    sched: &DiffusionSchedule,
    upstream: ArrayView2<'_, f64>,
    grad: &mut [f64],
) -> Result<()> {
    check_dim("upstream rows", tape.x0.nrows(), upstream.nrows())?;
    check_dim("upstream cols", tape.x0.ncols(), upstream.ncols())?;
    check_dim("tape length", sched.steps(), tape.caches.len())?;
    let s = tape.x0.mapv(sigmoid);
    let mut g = &upstream * &(&tape.span * &(&s * &s.mapv(|v| 1.0 - v)));
    for t in 1..=sched.steps() {
        let (ca, cb, _) = sched.reverse_coeffs(t);
        let d_eps = &g * (-cb);
        let dx_net = net.backward_x(&tape.caches[t - 1], d_eps.view(), grad)?;
        g = g * ca + dx_net;
    }
    Ok(())
}

/// Samples one raw action vector within `bounds`, using exactly `T` network
/// evaluations.
pub fn sample_action<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    state: &[f64],
    net: &P,
    sched: &DiffusionSchedule,
    bounds: &ActionBounds,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let a = net.action_dim();
    check_dim("action bounds", a, bounds.dim())?;
    let mut x: Vec<f64> = (0..a).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=sched.steps()).rev() {
        let noise: Vec<f64> = if sched.reverse_coeffs(t).2 > 0.0 {
            (0..a).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            vec![0.0; a]
        };
        x = denoise_step(&x, t, state, net, sched, &noise)?;
    }
    Ok(bounds.squash(&x))
}

/// Samples a full `(L, R)` menu for `env`.
pub fn sample_contract<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    env: &EnvState,
    normalizer: &StateNormalizer,
    net: &P,
    sched: &DiffusionSchedule,
    bounds: &ActionBounds,
    rng: &mut R,
) -> Result<ContractMenu> {
    check_dim("joint action", 2 * env.num_types(), net.action_dim())?;
    let state = normalizer.env_features(env)?;
    let action = sample_action(&state, net, sched, bounds, rng)?;
    ContractMenu::from_action(&action)
}

/// Mean over rows of `‖ε - ε_ω(x_t, t)‖²` with `t` and `ε` drawn per row.
///
/// `x0` is in pre-squash coordinates (see [`ActionBounds::unsquash`]).
pub fn denoising_loss<R: Rng + ?Sized>(
    net: &DenoiserNet,
    x0: ArrayView2<'_, f64>,
    states: ArrayView2<'_, f64>,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let (eps, steps, xt) = corrupt_batch(x0, states, sched, rng, net.action_dim)?;
    let cache = net.forward_cached(states, &steps, xt.view())?;
    let n = x0.nrows() as f64;
    let diff = cache.output() - &eps;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let upstream = diff * (2.0 / n);
    let mut grad = vec![0.0; net.mlp.num_params()];
    net.mlp.backward_into(&cache, upstream.view(), &mut grad, 1.0)?;
    Ok((loss, grad))
}

/// Loss only, for any predictor.
pub fn denoising_loss_value<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    x0: ArrayView2<'_, f64>,
    states: ArrayView2<'_, f64>,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    let (eps, steps, xt) = corrupt_batch(x0, states, sched, rng, net.action_dim())?;
    let pred = net.predict(states, &steps, xt.view())?;
    let diff = pred - &eps;
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / x0.nrows() as f64)
}

fn corrupt_batch<R: Rng + ?Sized>(
    x0: ArrayView2<'_, f64>,
    states: ArrayView2<'_, f64>,
    sched: &DiffusionSchedule,
    rng: &mut R,
    action_dim: usize,
) -> Result<(Array2<f64>, Vec<usize>, Array2<f64>)> {
    let n = x0.nrows();
    if n == 0 {
        return Err(domain("denoising loss needs a non-empty batch"));
    }
    check_dim("clean action", action_dim, x0.ncols())?;
    check_dim("state rows", n, states.nrows())?;
    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = standard_normal(rng, n, action_dim);
    let mut xt = Array2::zeros((n, action_dim));
    for (i, mut row) in xt.axis_iter_mut(Axis(0)).enumerate() {
        let cb = sched.chi_bar(steps[i]);
        let (sa, sb) = (cb.sqrt(), (1.0 - cb).sqrt());
        row.assign(&(&x0.row(i) * sa + &eps.row(i) * sb));
    }
    Ok((eps, steps, xt))
}

/// Wraps a predictor and counts `predict` calls.
pub struct CountingPredictor<P> {
    pub inner: P,
    calls: Cell<usize>,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<P> {
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn predict(&self, states: ArrayView2<'_, f64>, steps: &[usize], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(states, steps, x)
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ZeroPredictor(pub usize);

impl NoisePredictor for ZeroPredictor {
    fn action_dim(&self) -> usize {
        self.0
    }

    fn predict(&self, states: ArrayView2<'_, f64>, _steps: &[usize], _x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((states.nrows(), self.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::tests::worked_env;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched5() -> DiffusionSchedule {
        DiffusionSchedule::build(5, 0.1, 0.5).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = DiffusionSchedule::build(1, 0.1, 0.1).unwrap();
        assert!((s.delta(1) - 0.1).abs() < 1e-15);
        assert!((s.chi(1) - 0.9).abs() < 1e-15);
        assert!((s.chi_bar(1) - 0.9).abs() < 1e-15);

        let s = DiffusionSchedule::build(2, 0.1, 0.2).unwrap();
        assert!((s.chi_bar(2) - 0.72).abs() < 1e-12);

        let s = sched5();
        for t in 2..=5 {
            assert!(s.chi_bar(t) < s.chi_bar(t - 1));
            assert!((s.chi_bar(t) - s.chi_bar(t - 1) * s.chi(t)).abs() < 1e-15);
        }
        assert!(DiffusionSchedule::build(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::build(3, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::build(3, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::build(3, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = sched5();
        let x0 = [1.0, -2.0, 0.5, 3.0];
        let y = forward_diffuse(&x0, 3, &s, &[0.0; 4]).unwrap();
        for (a, b) in y.iter().zip(&x0) {
            assert!((a - s.chi_bar(3).sqrt() * b).abs() < 1e-15);
        }
        let n = [0.3, -0.1, 1.0, 2.0];
        let y = forward_diffuse(&[0.0; 4], 2, &s, &n).unwrap();
        for (a, b) in y.iter().zip(&n) {
            assert!((a - (1.0 - s.chi_bar(2)).sqrt() * b).abs() < 1e-15);
        }
        assert!(forward_diffuse(&x0, 6, &s, &n).is_err());
    }

    #[test]
    fn forward_diffuse_moments() {
        let s = sched5();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = [1.5, -0.5];
        let n = 100_000;
        for t in 1..=5 {
            let mut sum = [0.0; 2];
            let mut sq = [0.0; 2];
            for _ in 0..n {
                let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                let y = forward_diffuse(&x0, t, &s, &noise).unwrap();
                for j in 0..2 {
                    sum[j] += y[j];
                    sq[j] += y[j] * y[j];
                }
            }
            let var_true = 1.0 - s.chi_bar(t);
            for j in 0..2 {
                let mean = sum[j] / n as f64;
                let var = sq[j] / n as f64 - mean * mean;
                let mean_se = (var_true / n as f64).sqrt();
                let var_se = var_true * (2.0 / (n - 1) as f64).sqrt();
                assert!(
                    (mean - s.chi_bar(t).sqrt() * x0[j]).abs() <= 3.0 * mean_se,
                    "t={t} mean"
                );
                assert!((var - var_true).abs() <= 3.0 * var_se, "t={t} var");
            }
        }
    }

    #[test]
    fn denoise_step_examples() {
        let s = sched5();
        let z = ZeroPredictor(2);
        let x = denoise_step(&[1.0, 2.0], 3, &[0.0], &z, &s, &[0.0, 0.0]).unwrap();
        assert!((x[0] - 1.0 / s.chi(3).sqrt()).abs() < 1e-15);
        assert!((x[1] - 2.0 / s.chi(3).sqrt()).abs() < 1e-15);

        let x = denoise_step(&[0.0, 0.0], 2, &[0.0], &z, &s, &[1.0, 0.0]).unwrap();
        assert!((x[0] - s.delta(2).sqrt()).abs() < 1e-15);
        assert_eq!(x[1], 0.0);

        let x = denoise_step(&[0.0, 0.0], 1, &[0.0], &z, &s, &[1.0, 1.0]).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);

        let s1 = DiffusionSchedule::build(1, 0.1, 0.1).unwrap();
        let x = denoise_step(&[1.0, 1.0], 1, &[0.0], &z, &s1, &[0.0, 0.0]).unwrap();
        assert!((x[0] - 1.054_092_553_389_459_7).abs() < 1e-12);
    }

    #[test]
    fn literal_final_step_noise_flag() {
        let mut s = sched5();
        s.final_step_noise = true;
        let x = denoise_step(&[0.0], 1, &[0.0], &ZeroPredictor(1), &s, &[1.0]).unwrap();
        assert!((x[0] - s.delta(1).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sampling_uses_exactly_t_evaluations() {
        let env = worked_env();
        let norm = StateNormalizer::new(vec![0.0; 9], vec![1.0; 9]).unwrap();
        let bounds = ActionBounds::joint(&env, 400.0).unwrap();
        let net = CountingPredictor::new(ZeroPredictor(4));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        sample_contract(&env, &norm, &net, &sched5(), &bounds, &mut rng).unwrap();
        assert_eq!(net.calls(), 5);
    }

    #[test]
    fn degenerate_bounds_give_fixed_menu() {
        let env = worked_env();
        let norm = StateNormalizer::new(vec![0.0; 9], vec![1.0; 9]).unwrap();
        let target = [10.0, 20.0, 16.0, 17.6];
        let bounds = ActionBounds::new(target.to_vec(), target.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DenoiserNet::new(9, 4, vec![8, 8], &mut rng).unwrap();
        for _ in 0..5 {
            let m = sample_contract(&env, &norm, &net, &sched5(), &bounds, &mut rng).unwrap();
            assert_eq!(m.to_action(), target.to_vec());
        }
    }

    #[test]
    fn sampling_is_reproducible_and_in_bounds() {
        let env = worked_env();
        let norm = StateNormalizer::new(vec![0.0; 9], vec![200.0; 9]).unwrap();
        let bounds = ActionBounds::joint(&env, 400.0).unwrap();
        let mut init = ChaCha8Rng::seed_from_u64(3);
        let mut net = DenoiserNet::new(9, 4, vec![16, 16], &mut init).unwrap();
        for v in net.mlp.params.values.iter_mut() {
            *v += init.random_range(-0.5..0.5);
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_contract(&env, &norm, &net, &sched5(), &bounds, &mut rng).unwrap()
        };
        let a = draw(9);
        assert_eq!(a, draw(9));
        for (k, (&l, &r)) in a.latencies().iter().zip(a.rewards()).enumerate() {
            assert!((0.0..=100.0).contains(&l), "L{k}={l}");
            assert!((0.0..=400.0).contains(&r), "R{k}={r}");
        }
    }

    #[test]
    fn zero_network_samples_are_symmetric() {
        let env = worked_env();
        let norm = StateNormalizer::new(vec![0.0; 9], vec![1.0; 9]).unwrap();
        let bounds = ActionBounds::joint(&env, 400.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenoiserNet::new(9, 4, vec![16, 16], &mut rng).unwrap();
        let n = 1000;
        let mut above = [0usize; 4];
        for _ in 0..n {
            let m = sample_contract(&env, &norm, &net, &sched5(), &bounds, &mut rng).unwrap();
            for (j, v) in m.to_action().iter().enumerate() {
                let mid = 0.5 * (bounds.lower[j] + bounds.upper[j]);
                if *v > mid {
                    above[j] += 1;
                }
            }
        }
        // Normal approximation of the two-sided binomial sign test at 1%.
        let half = n as f64 / 2.0;
        let crit = 2.5758 * (n as f64 * 0.25).sqrt();
        for c in above {
            assert!((c as f64 - half).abs() <= crit, "{c}");
        }
    }

    #[test]
    fn squash_roundtrip() {
        let b = ActionBounds::new(vec![0.0, -5.0], vec![100.0, 5.0]).unwrap();
        let y = b.squash(&[0.3, -1.2]);
        let x = b.unsquash(&y);
        assert!((x[0] - 0.3).abs() < 1e-9);
        assert!((x[1] + 1.2).abs() < 1e-9);
        assert_eq!(b.squash(&[0.0, 0.0]), vec![50.0, 0.0]);
        assert!(ActionBounds::new(vec![1.0], vec![0.0]).is_err());
    }

    struct ExactPredictor {
        x0: Array2<f64>,
        sched: DiffusionSchedule,
    }

    impl NoisePredictor for ExactPredictor {
        fn action_dim(&self) -> usize {
            self.x0.ncols()
        }

        fn predict(
            &self,
            _states: ArrayView2<'_, f64>,
            steps: &[usize],
            x: ArrayView2<'_, f64>,
        ) -> Result<Array2<f64>> {
            let mut out = x.to_owned();
            for (i, mut row) in out.outer_iter_mut().enumerate() {
                let cb = self.sched.chi_bar(steps[i]);
                let r = (&x.row(i) - &(&self.x0.row(i) * cb.sqrt())) / (1.0 - cb).sqrt();
                row.assign(&r);
            }
            Ok(out)
        }
    }

    #[test]
    fn denoising_loss_examples() {
        let s = sched5();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let x0 = standard_normal(&mut rng, n, 4);
        let states = Array2::zeros((n, 3));

        let exact = ExactPredictor {
            x0: x0.clone(),
            sched: s.clone(),
        };
        let l = denoising_loss_value(&exact, x0.view(), states.view(), &s, &mut rng).unwrap();
        assert!(l < 1e-20, "{l}");

        let l = denoising_loss_value(&ZeroPredictor(4), x0.view(), states.view(), &s, &mut rng).unwrap();
        // ‖ε‖² ~ χ²(4): mean 4, variance 8.
        let se = (8.0 / n as f64).sqrt();
        assert!((l - 4.0).abs() <= 3.0 * se, "{l}");

        let net = DenoiserNet::new(3, 4, vec![8], &mut rng).unwrap();
        let (l, _) = denoising_loss(&net, x0.view(), states.view(), &s, &mut rng).unwrap();
        assert!((l - 4.0).abs() <= 3.0 * se, "{l}");

        let empty = Array2::<f64>::zeros((0, 4));
        assert!(denoising_loss(&net, empty.view(), Array2::zeros((0, 3)).view(), &s, &mut rng).is_err());
    }

    fn perturbed_net(seed: u64, state_dim: usize, action_dim: usize) -> DenoiserNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DenoiserNet::new(state_dim, action_dim, vec![12, 10], &mut rng).unwrap();
        for v in net.mlp.params.values.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        net
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn denoising_loss_gradient_matches_fd() {
        let s = sched5();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = perturbed_net(7, 3, 2);
        let x0 = standard_normal(&mut rng, 8, 2);
        let states = standard_normal(&mut rng, 8, 3);
        let (_, grad) = denoising_loss(&net, x0.view(), states.view(), &s, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let loss_at = |n: &DenoiserNet| {
            denoising_loss(n, x0.view(), states.view(), &s, &mut ChaCha8Rng::seed_from_u64(8))
                .unwrap()
                .0
        };
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..64 {
            let i = rng.random_range(0..net.mlp.num_params());
            let mut p = net.clone();
            p.mlp.params.values[i] += eps;
            let mut m = net.clone();
            m.mlp.params.values[i] -= eps;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * eps);
            worst = worst.max(rel_err(grad[i], fd));
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn chain_gradient_matches_fd() {
        let s = sched5();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = perturbed_net(10, 3, 2);
        let states = standard_normal(&mut rng, 4, 3);
        let rows = vec![ActionBounds::new(vec![0.0, 0.0], vec![100.0, 400.0]).unwrap(); 4];
        let bounds = BatchBounds::from_rows(&rows).unwrap();
        let g = standard_normal(&mut rng, 4, 2);
        let objective = |n: &DenoiserNet| {
            let (y, _) =
                sample_batch(n, states.view(), &bounds, &s, &mut ChaCha8Rng::seed_from_u64(12), false).unwrap();
            (&y * &g).sum()
        };
        let (_, tape) = sample_batch(
            &net,
            states.view(),
            &bounds,
            &s,
            &mut ChaCha8Rng::seed_from_u64(12),
            true,
        )
        .unwrap();
        let mut grad = vec![0.0; net.mlp.num_params()];
        chain_backward(&net, &tape.unwrap(), &s, g.view(), &mut grad).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..64 {
            let i = rng.random_range(0..net.mlp.num_params());
            let mut p = net.clone();
            p.mlp.params.values[i] += eps;
            let mut m = net.clone();
            m.mlp.params.values[i] -= eps;
            let fd = (objective(&p) - objective(&m)) / (2.0 * eps);
            worst = worst.max(rel_err(grad[i], fd));
        }
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn recorded_and_plain_sampling_agree() {
        let s = sched5();
        let net = perturbed_net(13, 3, 2);
        let states = standard_normal(&mut ChaCha8Rng::seed_from_u64(1), 5, 3);
        let rows = vec![ActionBounds::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap(); 5];
        let bounds = BatchBounds::from_rows(&rows).unwrap();
        let (a, _) = sample_batch(
            &net,
            states.view(),
            &bounds,
            &s,
            &mut ChaCha8Rng::seed_from_u64(2),
            false,
        )
        .unwrap();
        let (b, _) = sample_batch(
            &net,
            states.view(),
            &bounds,
            &s,
            &mut ChaCha8Rng::seed_from_u64(2),
            true,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    /// Exact noise predictor for a `N(mu, var·I)` target.
    struct GaussianScore {
        mu: Vec<f64>,
        var: f64,
        sched: DiffusionSchedule,
    }

    impl NoisePredictor for GaussianScore {
        fn action_dim(&self) -> usize {
            self.mu.len()
        }

        fn predict(
            &self,
            _states: ArrayView2<'_, f64>,
            steps: &[usize],
            x: ArrayView2<'_, f64>,
        ) -> Result<Array2<f64>> {
            let mut out = x.to_owned();
            for (i, mut row) in out.outer_iter_mut().enumerate() {
                let cb = self.sched.chi_bar(steps[i]);
                let marg_var = cb * self.var + 1.0 - cb;
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (x[[i, j]] - cb.sqrt() * self.mu[j]) * (1.0 - cb).sqrt() / marg_var;
                }
            }
            Ok(out)
        }
    }

    fn gaussian_kl(samples: &[Vec<f64>], mu: &[f64], var: f64) -> f64 {
        let n = samples.len() as f64;
        (0..mu.len())
            .map(|j| {
                let m = samples.iter().map(|s| s[j]).sum::<f64>() / n;
                let v = samples.iter().map(|s| (s[j] - m).powi(2)).sum::<f64>() / n;
                0.5 * (v / var + (m - mu[j]).powi(2) / var - 1.0 - (v / var).ln())
            })
            .sum()
    }

    #[test]
    fn longer_chains_approach_the_target() {
        let mu = vec![1.0, -1.0];
        let var = 0.25;
        let bounds = ActionBounds::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let mut last = f64::INFINITY;
        for t in 1..=5 {
            let sched = DiffusionSchedule::build(t, 0.1, 0.5).unwrap();
            let score = GaussianScore {
                mu: mu.clone(),
                var,
                sched: sched.clone(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            let samples: Vec<Vec<f64>> = (0..20_000)
                .map(|_| {
                    let y = sample_action(&[0.0], &score, &sched, &bounds, &mut rng).unwrap();
                    bounds.unsquash(&y)
                })
                .collect();
            let kl = gaussian_kl(&samples, &mu, var);
            assert!(kl < last, "T={t}: {kl} !< {last}");
            last = kl;
        }
    }
}
