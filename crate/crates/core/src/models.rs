//! Benchmark models with analytic gradients and the input distributions used
//! to drive them.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as NormalDist};
use thiserror::Error;

/// Acceptance rate below which truncated normals switch from rejection to
/// inverse-CDF sampling.
const MIN_REJECTION_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model expects {expected} inputs, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input {index} is not finite")]
    NonFiniteInput { index: usize },
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),
    #[error("analytic moments are not available for {0}")]
    MomentsUnavailable(&'static str),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("model evaluation failed: {0}")]
    Evaluation(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// A scalar model of `n_inputs` uncertain inputs that returns its value and
/// gradient together.
pub trait Model {
    fn name(&self) -> &str;

    fn n_inputs(&self) -> usize;

    fn evaluate(&self, point: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, point: &[f64]) -> Result<f64> {
        self.evaluate(point).map(|(v, _)| v)
    }
}

fn check_point(point: &[f64], n_u: usize) -> Result<()> {
    if point.len() != n_u {
        return Err(ModelError::DimensionMismatch {
            expected: n_u,
            got: point.len(),
        });
    }
    if let Some(index) = point.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput { index });
    }
    Ok(())
}

/// `1 + ξ_1 + (1/n_u) Σ ξ_i³` and its gradient.
pub fn cubic_function(point: &[f64]) -> (f64, Vec<f64>) {
    let n = point.len() as f64;
    let mut value = 1.0 + point.first().copied().unwrap_or(0.0);
    let mut grad = Vec::with_capacity(point.len());
    for (i, &x) in point.iter().enumerate() {
        value += x * x * x / n;
        grad.push(3.0 * x * x / n + if i == 0 { 1.0 } else { 0.0 });
    }
    (value, grad)
}

/// `Σ sin(ξ_i - 0.5)` and its gradient.
pub fn sinusoidal_function(point: &[f64]) -> (f64, Vec<f64>) {
    let value = point.iter().map(|x| (x - 0.5).sin()).sum();
    let grad = point.iter().map(|x| (x - 0.5).cos()).collect();
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cubic {
    pub n_u: usize,
}

impl Model for Cubic {
    fn name(&self) -> &str {
        "cubic"
    }

    fn n_inputs(&self) -> usize {
        self.n_u
    }

    fn evaluate(&self, point: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_point(point, self.n_u)?;
        Ok(cubic_function(point))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sinusoidal {
    pub n_u: usize,
}

impl Model for Sinusoidal {
    fn name(&self) -> &str {
        "sinusoidal"
    }

    fn n_inputs(&self) -> usize {
        self.n_u
    }

    fn evaluate(&self, point: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_point(point, self.n_u)?;
        Ok(sinusoidal_function(point))
    }
}

/// Built-in model by name: `cubic` or `sinusoidal`.
pub fn model_by_name(name: &str, n_u: usize) -> Result<Box<dyn Model + Send + Sync>> {
    match name {
        "cubic" => Ok(Box::new(Cubic { n_u })),
        "sinusoidal" => Ok(Box::new(Sinusoidal { n_u })),
        other => Err(ModelError::UnknownModel(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: f64,
    pub sd: f64,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// Univariate input law. GEV uses the convention
/// `F(x) = exp(-(1 + shape (x - loc) / scale)^(-1/shape))`, with the Gumbel
/// limit at `shape = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Distribution {
    GaussianMixture { components: Vec<GaussianComponent> },
    Gev { loc: f64, scale: f64, shape: f64 },
    TruncatedNormal { mean: f64, sd: f64, lower: f64, upper: f64 },
    Normal { mean: f64, sd: f64 },
    Uniform { lower: f64, upper: f64 },
}

impl Distribution {
    /// Equal-weight mixture of `N(-1, 0.25²)` and `N(0.75, 0.25²)`.
    pub fn bimodal_mixture() -> Self {
        Distribution::GaussianMixture {
            components: vec![
                GaussianComponent {
                    mean: -1.0,
                    sd: 0.25,
                    weight: 1.0,
                },
                GaussianComponent {
                    mean: 0.75,
                    sd: 0.25,
                    weight: 1.0,
                },
            ],
        }
    }

    /// Gumbel law with location 0 and scale 0.25.
    pub fn gumbel_quarter() -> Self {
        Distribution::Gev {
            loc: 0.0,
            scale: 0.25,
            shape: 0.0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Distribution::GaussianMixture { .. } => "gaussian-mixture",
            Distribution::Gev { .. } => "gev",
            Distribution::TruncatedNormal { .. } => "truncated-normal",
            Distribution::Normal { .. } => "normal",
            Distribution::Uniform { .. } => "uniform",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidParameter(msg));
        let finite = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(ModelError::InvalidParameter(format!("{name} must be finite, got {v}")))
            }
        };
        match *self {
            Distribution::GaussianMixture { ref components } => {
                if components.is_empty() {
                    return bad("mixture needs at least one component".into());
                }
                for c in components {
                    finite("mean", c.mean)?;
                    if !(c.sd > 0.0 && c.sd.is_finite()) {
                        return bad(format!("component sd must be positive, got {}", c.sd));
                    }
                    if !(c.weight > 0.0 && c.weight.is_finite()) {
                        return bad(format!("component weight must be positive, got {}", c.weight));
                    }
                }
            }
            Distribution::Gev { loc, scale, shape } => {
                finite("loc", loc)?;
                finite("shape", shape)?;
                if !(scale > 0.0 && scale.is_finite()) {
                    return bad(format!("GEV scale must be positive, got {scale}"));
                }
            }
            Distribution::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => {
                finite("mean", mean)?;
                if !(sd > 0.0 && sd.is_finite()) {
                    return bad(format!("sd must be positive, got {sd}"));
                }
                if lower.is_nan() || upper.is_nan() || !(lower < upper) {
                    return bad(format!("need lower < upper, got [{lower}, {upper}]"));
                }
                if truncated_mass(mean, sd, lower, upper) <= 0.0 {
                    return bad("truncation interval has zero probability".into());
                }
            }
            Distribution::Normal { mean, sd } => {
                finite("mean", mean)?;
                if !(sd > 0.0 && sd.is_finite()) {
                    return bad(format!("sd must be positive, got {sd}"));
                }
            }
            Distribution::Uniform { lower, upper } => {
                finite("lower", lower)?;
                finite("upper", upper)?;
                if !(lower < upper) {
                    return bad(format!("need lower < upper, got [{lower}, {upper}]"));
                }
            }
        }
        Ok(())
    }

    /// Closed support interval (bounds may be infinite).
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Distribution::Gev { loc, scale, shape } if shape > 0.0 => {
                (loc - scale / shape, f64::INFINITY)
            }
            Distribution::Gev { loc, scale, shape } if shape < 0.0 => {
                (f64::NEG_INFINITY, loc - scale / shape)
            }
            Distribution::TruncatedNormal { lower, upper, .. } => (lower, upper),
            Distribution::Uniform { lower, upper } => (lower, upper),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Population mean, where it exists in closed form.
    pub fn mean(&self) -> Option<f64> {
        match *self {
            Distribution::Gev { loc, scale, shape } => {
                if shape.abs() < GUMBEL_SHAPE_EPS {
                    Some(loc + scale * EULER_GAMMA)
                } else if shape < 1.0 {
                    Some(loc + scale * (gamma_fn(1.0 - shape) - 1.0) / shape)
                } else {
                    None
                }
            }
            _ => self.raw_moments(1).ok().map(|m| m[1]),
        }
    }

    /// Raw moments `E[X^k]` for `k = 0..=max_order`.
    pub fn raw_moments(&self, max_order: usize) -> Result<Vec<f64>> {
        self.validate()?;
        match *self {
            Distribution::Normal { mean, sd } => Ok(normal_raw_moments(mean, sd, max_order)),
            Distribution::Uniform { lower, upper } => Ok((0..=max_order)
                .map(|k| {
                    let k1 = k as i32 + 1;
                    (upper.powi(k1) - lower.powi(k1)) / (k1 as f64 * (upper - lower))
                })
                .collect()),
            Distribution::GaussianMixture { ref components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut out = vec![0.0; max_order + 1];
                for c in components {
                    for (o, m) in out.iter_mut().zip(normal_raw_moments(c.mean, c.sd, max_order)) {
                        *o += c.weight / total * m;
                    }
                }
                Ok(out)
            }
            Distribution::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => Ok(truncated_normal_raw_moments(mean, sd, lower, upper, max_order)),
            Distribution::Gev { .. } => Err(ModelError::MomentsUnavailable("gev")),
        }
    }
}

const GUMBEL_SHAPE_EPS: f64 = 1e-12;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn gamma_fn(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

fn std_normal() -> NormalDist {
    NormalDist::new(0.0, 1.0).expect("unit normal")
}

fn truncated_mass(mean: f64, sd: f64, lower: f64, upper: f64) -> f64 {
    let n = std_normal();
    n.cdf((upper - mean) / sd) - n.cdf((lower - mean) / sd)
}

fn normal_raw_moments(mean: f64, sd: f64, max_order: usize) -> Vec<f64> {
    let mut m = vec![1.0];
    for k in 1..=max_order {
        let prev2 = if k >= 2 { m[k - 2] } else { 0.0 };
        m.push(mean * m[k - 1] + (k as f64 - 1.0) * sd * sd * prev2);
    }
    m
}

/// `m_k = μ m_{k-1} + (k-1)σ² m_{k-2} - σ (b^{k-1} φ(β) - a^{k-1} φ(α)) / Z`.
fn truncated_normal_raw_moments(
    mean: f64,
    sd: f64,
    lower: f64,
    upper: f64,
    max_order: usize,
) -> Vec<f64> {
    let n = std_normal();
    let alpha = (lower - mean) / sd;
    let beta = (upper - mean) / sd;
    let z = n.cdf(beta) - n.cdf(alpha);
    // Infinite bounds contribute nothing: φ vanishes faster than any power grows.
    let phi_a = if lower.is_finite() { n.pdf(alpha) } else { 0.0 };
    let phi_b = if upper.is_finite() { n.pdf(beta) } else { 0.0 };
    let mut m = vec![1.0];
    for k in 1..=max_order {
        let prev2 = if k >= 2 { m[k - 2] } else { 0.0 };
        let pa = if phi_a == 0.0 { 0.0 } else { lower.powi(k as i32 - 1) * phi_a };
        let pb = if phi_b == 0.0 { 0.0 } else { upper.powi(k as i32 - 1) * phi_b };
        m.push(mean * m[k - 1] + (k as f64 - 1.0) * sd * sd * prev2 - sd * (pb - pa) / z);
    }
    m
}

/// A distribution together with the seed that drives its sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    #[serde(flatten)]
    pub distribution: Distribution,
    #[serde(default)]
    pub seed: u64,
}

/// Stateful i.i.d. sampler. Stream `s` of a seed is independent of stream `t`.
pub struct Sampler {
    distribution: Distribution,
    rng: ChaCha8Rng,
    inverse_cdf_truncation: bool,
}

impl Sampler {
    pub fn new(distribution: Distribution, seed: u64, stream: u64) -> Result<Self> {
        distribution.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let inverse_cdf_truncation = match distribution {
            Distribution::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => truncated_mass(mean, sd, lower, upper) < MIN_REJECTION_ACCEPTANCE,
            _ => false,
        };
        Ok(Self {
            distribution,
            rng,
            inverse_cdf_truncation,
        })
    }

    pub fn sample(&mut self) -> f64 {
        let rng = &mut self.rng;
        match self.distribution {
            Distribution::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Distribution::Uniform { lower, upper } => lower + (upper - lower) * rng.random::<f64>(),
            Distribution::GaussianMixture { ref components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut u = rng.random::<f64>() * total;
                let mut chosen = components[components.len() - 1];
                for c in components {
                    if u < c.weight {
                        chosen = *c;
                        break;
                    }
                    u -= c.weight;
                }
                chosen.mean + chosen.sd * rng.sample::<f64, _>(StandardNormal)
            }
            Distribution::Gev { loc, scale, shape } => {
                let u: f64 = rng.sample(Open01);
                let t = -u.ln();
                if shape.abs() < GUMBEL_SHAPE_EPS {
                    loc - scale * t.ln()
                } else {
                    loc + scale * (t.powf(-shape) - 1.0) / shape
                }
            }
            Distribution::TruncatedNormal {
                mean,
                sd,
                lower,
                upper,
            } => {
                if self.inverse_cdf_truncation {
                    let n = std_normal();
                    let fa = n.cdf((lower - mean) / sd);
                    let fb = n.cdf((upper - mean) / sd);
                    let u: f64 = rng.sample(Open01);
                    (mean + sd * n.inverse_cdf(fa + u * (fb - fa))).clamp(lower, upper)
                } else {
                    loop {
                        let x = mean + sd * rng.sample::<f64, _>(StandardNormal);
                        if x >= lower && x <= upper {
                            break x;
                        }
                    }
                }
            }
        }
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for o in out {
            *o = self.sample();
        }
    }
}

/// `n` i.i.d. draws from `spec` (stream 0 of its seed).
pub fn sample_distribution(spec: &DistributionSpec, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(ModelError::InvalidParameter("sample count must be positive".into()));
    }
    let mut s = Sampler::new(spec.distribution.clone(), spec.seed, 0)?;
    let mut out = vec![0.0; n];
    s.fill(&mut out);
    Ok(out)
}

/// `n × dims.len()` matrix of independent draws; column `d` uses stream `d`
/// of `seed`, so column 0 agrees with [`sample_distribution`].
pub fn sample_independent(dims: &[Distribution], n: usize, seed: u64) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((n, dims.len()));
    for (d, dist) in dims.iter().enumerate() {
        let mut s = Sampler::new(dist.clone(), seed, d as u64)?;
        for v in out.column_mut(d) {
            *v = s.sample();
        }
    }
    Ok(out)
}
