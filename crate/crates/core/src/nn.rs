//! Small dense networks with hand-written reverse mode.
//!
//! Parameters of every layer live in one flat `f64` vector (weights stored
//! row-major as `fan_in × fan_out`, followed by the bias), so optimizer
//! steps, soft updates and checkpoints all work on plain slices.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, domain, io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Mish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    None,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub final_activation: FinalActivation,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(domain("network dimensions must be at least 1"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(domain("hidden_dims must be non-empty with positive widths"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameters plus the adaptive-moment state that travels with them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl ParamSet {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected adaptive-moment step on `params`.
///
/// Non-finite gradients are rejected and leave `params` untouched.
pub fn optimizer_step(params: &mut ParamSet, grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
    check_dim("gradient", params.len(), grad.len())?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(domain(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: params.step as usize,
            what: format!("gradient entry {i}"),
        });
    }
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, m), v), &g) in params
        .values
        .iter_mut()
        .zip(params.first_moment.iter_mut())
        .zip(params.second_moment.iter_mut())
        .zip(grad)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if params.values.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            step: params.step as usize,
            what: "parameters after update".into(),
        });
    }
    Ok(())
}

/// Polyak averaging `target ← τ·online + (1-τ)·target`.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    check_dim("soft update", target.len(), online.len())?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(domain(format!("tau must lie in (0, 1], got {tau}")));
    }
    if tau == 1.0 {
        target.values.copy_from_slice(&online.values);
        return Ok(());
    }
    for (t, &o) in target.values.iter_mut().zip(&online.values) {
        *t += tau * (o - *t);
    }
    Ok(())
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Mish => z * softplus(z).tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Mish => {
                let t = softplus(z).tanh();
                t + z * (1.0 - t * t) * sigmoid(z)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }
}

/// Activations recorded by [`Mlp::forward_batch`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of each layer (batch × fan_in).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer (batch × fan_out).
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

/// Multi-layer perceptron with flat parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: NetSpec,
    layers: Vec<LayerShape>,
    pub params: ParamSet,
}

impl Mlp {
    /// Uniform fan-in initialization; `zero_final` zeroes the output layer.
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R, zero_final: bool) -> Result<Self> {
        spec.validate()?;
        let layers = Self::shapes(&spec);
        let mut values = Vec::with_capacity(spec.num_params());
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for _ in 0..l.len() {
                let v = if zero_final && i == last {
                    0.0
                } else {
                    rng.random_range(-bound..bound)
                };
                values.push(v);
            }
        }
        Ok(Self {
            spec,
            layers,
            params: ParamSet::new(values),
        })
    }

    /// Wraps existing parameter values (e.g. loaded from a checkpoint).
    pub fn from_values(spec: NetSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_dim("parameter vector", spec.num_params(), values.len())?;
        let layers = Self::shapes(&spec);
        Ok(Self {
            spec,
            layers,
            params: ParamSet::new(values),
        })
    }

    fn shapes(spec: &NetSpec) -> Vec<LayerShape> {
        let mut offset = 0;
        spec.layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let l = LayerShape {
                    fan_in,
                    fan_out,
                    offset,
                };
                offset += l.len();
                l
            })
            .collect()
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn weight(&self, l: &LayerShape) -> ArrayView2<'_, f64> {
        let w = &self.params.values[l.offset..l.offset + l.weight_len()];
        ArrayView2::from_shape((l.fan_in, l.fan_out), w).expect("layer shape")
    }

    fn bias(&self, l: &LayerShape) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.values[l.offset + l.weight_len()..l.offset + l.len()])
    }

    fn activation_of(&self, layer: usize) -> Option<Activation> {
        if layer + 1 < self.layers.len() {
            Some(self.spec.activation)
        } else {
            match self.spec.final_activation {
                FinalActivation::None => None,
                FinalActivation::Tanh => Some(Activation::Tanh),
            }
        }
    }

    /// Evaluates one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.spec.input_dim, x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let out = self.forward_batch_nocache(view)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Batched evaluation without recording activations.
    pub fn forward_batch_nocache(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.spec.input_dim, x.ncols())?;
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&self.weight(l));
            z += &self.bias(l);
            if let Some(act) = self.activation_of(i) {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Batched evaluation recording what [`Mlp::backward`] needs.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        check_dim("network input", self.spec.input_dim, x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&self.weight(l));
            z += &self.bias(l);
            let out = match self.activation_of(i) {
                Some(act) => z.mapv(|v| act.apply(v)),
                None => z.clone(),
            };
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok(ForwardCache { inputs, pre, output: h })
    }

    /// Reverse-mode pass: returns the parameter gradient summed over the
    /// batch, and the gradient with respect to each input row.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let mut grad = vec![0.0; self.num_params()];
        let dx = self.backward_into(cache, upstream, &mut grad, 1.0)?;
        Ok((grad, dx))
    }

    /// Like [`Mlp::backward`] but accumulates `scale · ∂/∂θ` into `grad`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
        grad: &mut [f64],
        scale: f64,
    ) -> Result<Array2<f64>> {
        check_dim("parameter gradient", self.num_params(), grad.len())?;
        check_dim("upstream gradient rows", cache.batch_size(), upstream.nrows())?;
        check_dim("upstream gradient cols", self.spec.output_dim, upstream.ncols())?;
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let l = self.layers[i];
            if let Some(act) = self.activation_of(i) {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[i])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            let (gw, gb) = grad[l.offset..l.offset + l.len()].split_at_mut(l.weight_len());
            let mut gw = ArrayViewMut2::from_shape((l.fan_in, l.fan_out), gw).expect("layer shape");
            ndarray::linalg::general_mat_mul(scale, &cache.inputs[i].t(), &delta, 1.0, &mut gw);
            for (b, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0)).iter()) {
                *b += scale * s;
            }
            delta = delta.dot(&self.weight(&l).t());
        }
        Ok(delta)
    }

    /// Single-sample convenience wrapper over [`Mlp::backward`].
    pub fn backward_single(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("network input", self.spec.input_dim, x.len())?;
        check_dim("upstream gradient", self.spec.output_dim, upstream.len())?;
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let cache = self.forward_batch(xv)?;
        let gv = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let (grad, dx) = self.backward(&cache, gv)?;
        Ok((grad, dx.into_raw_vec_and_offset().0))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PTCF";
const CHECKPOINT_VERSION: u32 = 1;

/// Encodes `values` as `PTCF | version u32 | dim u64 | f64 LE …`.
pub fn encode_checkpoint(values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * values.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing PTCF header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dim = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != dim * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {dim} values ({} bytes), found {} bytes",
            dim * 8,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn write_checkpoint(path: &Path, values: &[f64]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&encode_checkpoint(values)).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&bytes)
}

/// Human-readable export: layer sizes and activations plus per-layer weight and bias arrays.
pub fn export_json(net: &Mlp) -> serde_json::Value {
    let layers: Vec<serde_json::Value> = net
        .layers
        .iter()
        .map(|l| {
            let w: Vec<Vec<f64>> = net.weight(l).outer_iter().map(|r| r.to_vec()).collect();
            serde_json::json!({ "weight": w, "bias": net.bias(l).to_vec() })
        })
        .collect();
    serde_json::json!({ "spec": net.spec, "layers": layers })
}
