//! Encoders, product-of-experts fusion, reparametrized sampling and decoders.
//!
//! Every forward pass runs on a [`Graph`]; parameters are bound to the graph
//! with [`Mlp::bind`] so the trainer can read their gradients back.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Graph, Tensor, Var};

/// Log-variance heads are clamped below at `ln(floor)` before exponentiation.
pub const DEFAULT_LOGVAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    /// Output width of every layer; the last entry is the network output.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, widths: Vec<usize>) -> Self {
        Self {
            input,
            widths,
            activation: Activation::Relu,
        }
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap_or(&self.input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {:?} for input {}", self.widths, self.input)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `[in, out]`.
    pub w: Tensor<T>,
    /// `[out]`.
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub spec: MlpSpec,
    pub layers: Vec<Linear<T>>,
}

/// An [`Mlp`] whose parameters live on a graph, in `w0, b0, w1, b1, ...` order.
pub struct BoundMlp<'g, T: Scalar> {
    pub params: Vec<Var<'g, T>>,
    activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut fan_in = spec.input;
        let mut layers = Vec::with_capacity(spec.widths.len());
        for &out in &spec.widths {
            let bound = (6.0 / (fan_in + out) as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
            layers.push(Linear {
                w: Tensor::from_fn(&[fan_in, out], |_| T::lit(u.sample(rng))),
                b: Tensor::zeros(&[out]),
            });
            fan_in = out;
        }
        Ok(Self { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut fan_in = spec.input;
        let layers = spec
            .widths
            .iter()
            .map(|&out| {
                let l = Linear {
                    w: Tensor::zeros(&[fan_in, out]),
                    b: Tensor::zeros(&[out]),
                };
                fan_in = out;
                l
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind<'g>(&self, g: &'g Graph<T>) -> BoundMlp<'g, T> {
        BoundMlp {
            params: self.tensors().into_iter().map(|t| g.param(t.clone())).collect(),
            activation: self.spec.activation,
        }
    }

    /// Graph-free forward pass, for inference.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let bound = BoundMlp {
            params: self.tensors().into_iter().map(|t| g.constant(t.clone())).collect(),
            activation: self.spec.activation,
        };
        let y = bound.forward(g.constant(x.clone()))?;
        let out = y.value().as_ref().clone();
        Ok(out)
    }
}

impl<'g, T: Scalar> BoundMlp<'g, T> {
    pub fn new(params: Vec<Var<'g, T>>, activation: Activation) -> Self {
        Self { params, activation }
    }

    /// `x [B, in] -> [B, out]`, activation between layers but not after the last.
    pub fn forward(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let fan_in = self.params[0].shape()[0];
        if shape.len() != 2 || shape[1] != fan_in {
            return Err(contract("mlp", format!("input shape {shape:?}, network expects [B, {fan_in}]")));
        }
        let n = self.params.len() / 2;
        let mut h = x;
        for i in 0..n {
            h = h.matmul(self.params[2 * i])?.add(self.params[2 * i + 1])?;
            if i + 1 < n {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(h)
    }
}

/// Splits a `[B, 2D]` head into mean and `exp(max(logvar, ln floor))`.
pub fn gaussian_head<'g, T: Scalar>(out: Var<'g, T>, floor: T) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let s = out.shape();
    if s.len() != 2 || s[1] % 2 != 0 {
        return Err(contract("gaussian_head", format!("head shape {s:?} is not [B, 2D]")));
    }
    let d = s[1] / 2;
    let mu = out.narrow(1, 0, d)?;
    let var = out.narrow(1, d, d)?.clamp_min(floor.ln()).exp();
    Ok((mu, var))
}

/// `[mu_m, var_m] = F_m(x_m)` for a unimodal encoder.
pub fn encode<'g, T: Scalar>(enc: &BoundMlp<'g, T>, x: Var<'g, T>, floor: T) -> Result<(Var<'g, T>, Var<'g, T>)> {
    gaussian_head(enc.forward(x)?, floor)
}

/// Precision-weighted fusion. `masks[m]` is `[B, 1]` with 1 where modality
/// `m` is present; `None` means present for the whole batch.
pub fn fuse_poe<'g, T: Scalar>(
    experts: &[(Var<'g, T>, Var<'g, T>)],
    masks: &[Option<Tensor<T>>],
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if experts.is_empty() || masks.len() != experts.len() {
        return Err(contract("fuse_poe", "need one mask per expert and at least one expert"));
    }
    let g = experts[0].0.graph();
    let b = experts[0].0.shape()[0];
    let mut coverage = vec![0usize; b];
    let mut precision: Option<Var<'g, T>> = None;
    let mut weighted: Option<Var<'g, T>> = None;
    for ((mu, var), mask) in experts.iter().zip(masks) {
        if mu.shape() != var.shape() || mu.shape()[0] != b {
            return Err(contract("fuse_poe", "expert shapes disagree"));
        }
        let mut p = g.scalar(T::one()).div(*var)?;
        match mask {
            Some(m) => {
                if m.shape() != [b, 1] {
                    return Err(contract("fuse_poe", format!("mask shape {:?}, expected [{b}, 1]", m.shape())));
                }
                for (c, &x) in coverage.iter_mut().zip(m.data()) {
                    if x > T::zero() {
                        *c += 1;
                    }
                }
                p = p.mul(g.constant(m.clone()))?;
            }
            None => coverage.iter_mut().for_each(|c| *c += 1),
        }
        let pm = p.mul(*mu)?;
        precision = Some(match precision {
            None => p,
            Some(acc) => acc.add(p)?,
        });
        weighted = Some(match weighted {
            None => pm,
            Some(acc) => acc.add(pm)?,
        });
    }
    if let Some(i) = coverage.iter().position(|&c| c == 0) {
        return Err(contract("fuse_poe", format!("sample {i} has no modality present")));
    }
    let precision = precision.expect("nonempty");
    let var = g.scalar(T::one()).div(precision)?;
    let mu = weighted.expect("nonempty").mul(var)?;
    Ok((mu, var))
}

/// Numeric fusion of per-sample experts, each `(mean, var)` of length `J`.
pub fn fuse_poe_values<T: Scalar>(experts: &[(Vec<T>, Vec<T>)]) -> Result<(Vec<T>, Vec<T>)> {
    let Some(first) = experts.first() else {
        return Err(contract("fuse_poe", "at least one modality is required"));
    };
    let j = first.0.len();
    let mut prec = vec![T::zero(); j];
    let mut wm = vec![T::zero(); j];
    for (m, v) in experts {
        if m.len() != j || v.len() != j {
            return Err(contract("fuse_poe", "expert dimensions disagree"));
        }
        for c in 0..j {
            if !(v[c] > T::zero()) {
                return Err(crate::error::domain("fuse_poe", "expert variance must be positive"));
            }
            prec[c] += T::one() / v[c];
            wm[c] += m[c] / v[c];
        }
    }
    let var: Vec<T> = prec.iter().map(|&p| T::one() / p).collect();
    let mean = wm.iter().zip(&var).map(|(&w, &v)| w * v).collect();
    Ok((mean, var))
}

/// Standard normal noise of the given shape.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let x: f64 = StandardNormal.sample(rng);
        T::lit(x)
    })
}

/// `z = mu + eps * sqrt(var)`; `eps` is a constant, so gradients reach only `mu` and `var`.
pub fn sample_latent<'g, T: Scalar>(mu: Var<'g, T>, var: Var<'g, T>, eps: &Tensor<T>) -> Result<Var<'g, T>> {
    if eps.shape() != mu.shape().as_slice() {
        return Err(contract("sample_latent", "noise shape differs from the mean"));
    }
    let g = mu.graph();
    mu.add(var.sqrt()?.mul(g.constant(eps.clone()))?)
}

/// How a neural decoder produces its reconstruction variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderVariance {
    /// The network emits `[mu_hat, logvar_hat]`, with the log-variance clamped at `ln floor`.
    Learned { floor: f64 },
    /// The network emits `mu_hat` only; `var_hat` is this constant.
    Fixed { var: f64 },
}

impl DecoderVariance {
    pub fn head_width(&self, features: usize) -> usize {
        match self {
            Self::Learned { .. } => 2 * features,
            Self::Fixed { .. } => features,
        }
    }
}

/// `[mu_hat, var_hat] = D_m(z)`.
pub fn decode_neural<'g, T: Scalar>(
    dec: &BoundMlp<'g, T>,
    z: Var<'g, T>,
    variance: DecoderVariance,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let out = dec.forward(z)?;
    match variance {
        DecoderVariance::Learned { floor } => gaussian_head(out, T::lit(floor)),
        DecoderVariance::Fixed { var } => {
            if !(var > 0.0) {
                return Err(Error::Config(format!("fixed decoder variance must be positive, got {var}")));
            }
            let g = out.graph();
            Ok((out, g.constant(Tensor::full(&out.shape(), T::lit(var)))))
        }
    }
}

/// Constrained parameters of a two-piece continuous linear curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertCurveParams {
    pub breakpoint: f64,
    pub slope1: f64,
    pub slope2: f64,
    pub intercept: f64,
}

/// Per-cluster expert curves stored unconstrained as `[K, 5]` rows of
/// `(breakpoint_logit, slope1, slope2, intercept, log_var)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertCurveSet<T> {
    pub raw: Tensor<T>,
}

pub const EXPERT_RAW_WIDTH: usize = 5;

impl<T: Scalar> ExpertCurveSet<T> {
    pub fn from_params(params: &[ExpertCurveParams], var: f64) -> Result<Self> {
        if params.is_empty() {
            return Err(contract("expert_curves", "need at least one cluster"));
        }
        let mut data = Vec::with_capacity(params.len() * EXPERT_RAW_WIDTH);
        for p in params {
            if !(p.breakpoint > 0.0 && p.breakpoint < 1.0) {
                return Err(crate::error::domain("expert_curves", format!("breakpoint {} is not interior", p.breakpoint)));
            }
            let logit = (p.breakpoint / (1.0 - p.breakpoint)).ln();
            data.extend([logit, p.slope1, p.slope2, p.intercept, var.ln()].map(T::lit));
        }
        Ok(Self {
            raw: Tensor::new(vec![params.len(), EXPERT_RAW_WIDTH], data)?,
        })
    }

    /// Breakpoints spread across the interior, slopes and intercept jittered
    /// around a unit diagonal.
    pub fn init<R: Rng + ?Sized>(clusters: usize, var: f64, rng: &mut R) -> Result<Self> {
        let params: Vec<ExpertCurveParams> = (0..clusters)
            .map(|k| ExpertCurveParams {
                breakpoint: (k as f64 + 1.0) / (clusters as f64 + 1.0),
                slope1: 1.0 + rng.random_range(-0.1..0.1),
                slope2: 1.0 + rng.random_range(-0.1..0.1),
                intercept: rng.random_range(-0.05..0.05),
            })
            .collect();
        Self::from_params(&params, var)
    }

    pub fn clusters(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn params(&self, k: usize) -> ExpertCurveParams {
        let r = &self.raw.data()[k * EXPERT_RAW_WIDTH..(k + 1) * EXPERT_RAW_WIDTH];
        ExpertCurveParams {
            breakpoint: sigmoid(r[0]).to_f64_lossy(),
            slope1: r[1].to_f64_lossy(),
            slope2: r[2].to_f64_lossy(),
            intercept: r[3].to_f64_lossy(),
        }
    }

    pub fn variance(&self, k: usize) -> f64 {
        self.raw.data()[k * EXPERT_RAW_WIDTH + 4].to_f64_lossy().exp()
    }
}

pub fn check_grid<T: Scalar>(grid: &[T]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(contract("expert_curve", "grid must be non-empty and sorted ascending"));
    }
    Ok(())
}

/// Curves `[K, G]` and variances `[K, 1]` from raw parameters `[K, 5]`:
/// `c(s) = intercept + slope1 (s - relu(s - b)) + slope2 relu(s - b)`.
pub fn decode_expert_curve<'g, T: Scalar>(raw: Var<'g, T>, grid: &[T], floor: T) -> Result<(Var<'g, T>, Var<'g, T>)> {
    check_grid(grid)?;
    let s = raw.shape();
    if s.len() != 2 || s[1] != EXPERT_RAW_WIDTH {
        return Err(contract("expert_curve", format!("raw parameters have shape {s:?}")));
    }
    let g = raw.graph();
    let grid_v = g.constant(Tensor::new(vec![1, grid.len()], grid.to_vec())?);
    let b = raw.narrow(1, 0, 1)?.sigmoid();
    let slope1 = raw.narrow(1, 1, 1)?;
    let slope2 = raw.narrow(1, 2, 1)?;
    let intercept = raw.narrow(1, 3, 1)?;
    let var = raw.narrow(1, 4, 1)?.clamp_min(floor.ln()).exp();
    let past = grid_v.sub(b)?.relu();
    let before = grid_v.sub(past)?;
    let curve = intercept.add(slope1.mul(before)?)?.add(slope2.mul(past)?)?;
    Ok((curve, var))
}

/// Direct evaluation of one curve, for reporting and tests.
pub fn expert_curve_values(p: &ExpertCurveParams, grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&s| {
            if s <= p.breakpoint {
                p.intercept + p.slope1 * s
            } else {
                p.intercept + p.slope1 * p.breakpoint + p.slope2 * (s - p.breakpoint)
            }
        })
        .collect()
}
