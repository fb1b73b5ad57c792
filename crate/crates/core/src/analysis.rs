//! Statistics of a fitted expansion and validation against direct sampling.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regression::{PceModel, RegressionError};

/// Number of abscissae in a density estimate.
pub const DENSITY_GRID_POINTS: usize = 512;

/// Fewest surrogate samples accepted by [`surrogate_density`].
pub const MIN_DENSITY_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error("model has zero variance; sensitivity indices are undefined")]
    ZeroVariance,
    #[error("all gradients are zero")]
    ZeroGradients,
    #[error("gradient matrix contains a non-finite entry")]
    NonFiniteGradient,
    #[error("output sample has zero spread")]
    DegenerateOutput,
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFiniteSample,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Mean `λ_0 Ψ_0` and variance `Σ_{j≥1} γ_j λ_j²`.
pub fn analytic_moments(model: &PceModel) -> (f64, f64) {
    let lambda = model.lambda();
    let gamma = model.gamma();
    let mean = lambda[0] * model.basis().constant_term();
    let variance = lambda
        .iter()
        .zip(gamma)
        .skip(1)
        .map(|(l, g)| g * l * l)
        .sum();
    (mean, variance)
}

/// Which expansion terms count towards input `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SobolMode {
    /// Every term in which input `j` has non-zero degree.
    #[default]
    Grouped,
    /// Only terms in which input `j` is the sole active input.
    Strict,
}

/// Variance share of each input (grouped mode).
pub fn sobol_first_order(model: &PceModel) -> Result<Vec<f64>> {
    sobol_indices(model, SobolMode::Grouped)
}

pub fn sobol_indices(model: &PceModel, mode: SobolMode) -> Result<Vec<f64>> {
    let basis = model.basis();
    let index = basis.multi_index();
    let lambda = model.lambda();
    let gamma = model.gamma();
    let mut parts = vec![0.0; basis.n_inputs()];
    let mut total = 0.0;
    for k in 1..basis.len() {
        let contrib = gamma[k] * lambda[k] * lambda[k];
        total += contrib;
        let active = index.active(k);
        match mode {
            SobolMode::Grouped => {
                for &(d, _) in active {
                    parts[d] += contrib;
                }
            }
            SobolMode::Strict if active.len() == 1 => parts[active[0].0] += contrib,
            SobolMode::Strict => {}
        }
    }
    if !(total > 0.0) {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok(parts.into_iter().map(|p| p / total).collect())
}

/// Share of the summed absolute sensitivities carried by each input; rows of
/// `gradients` are samples.
pub fn mc_sensitivity_heatmap(gradients: ArrayView2<f64>) -> Result<Vec<f64>> {
    if gradients.iter().any(|g| !g.is_finite()) {
        return Err(AnalysisError::NonFiniteGradient);
    }
    let sums: Vec<f64> = gradients
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|g| g.abs()).sum())
        .collect();
    let total: f64 = sums.iter().sum();
    if !(total > 0.0) {
        return Err(AnalysisError::ZeroGradients);
    }
    Ok(sums.into_iter().map(|s| s / total).collect())
}

/// Gaussian kernel density estimate on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
            .sum()
    }

    /// Abscissa of the largest density value.
    pub fn mode(&self) -> f64 {
        let (i, _) = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (i, &d)| if d > a.1 { (i, d) } else { a });
        self.grid[i]
    }
}

fn check_sample(xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(AnalysisError::EmptySample);
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFiniteSample);
    }
    Ok(())
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `0.9 min(σ, IQR/1.34) n^(-1/5)`, using `σ` alone when the IQR vanishes.
pub fn silverman_bandwidth(xs: &[f64]) -> Result<f64> {
    check_sample(xs)?;
    let stats = SampleStatistics::of(xs)?;
    let sd = stats.std_dev;
    if !(sd > 0.0) {
        return Err(AnalysisError::DegenerateOutput);
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (xs.len() as f64).powf(-0.2))
}

/// Gaussian KDE with Silverman bandwidth on `[min - 3h, max + 3h]`.
pub fn kernel_density(xs: &[f64]) -> Result<DensityEstimate> {
    let h = silverman_bandwidth(xs)?;
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (lo, hi) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (hi - lo) / (DENSITY_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..DENSITY_GRID_POINTS).map(|i| lo + i as f64 * step).collect();
    let norm = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let inv_h = 1.0 / h;
    let density = grid
        .iter()
        .map(|&g| {
            xs.iter()
                .map(|&x| {
                    let z = (g - x) * inv_h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(DensityEstimate {
        grid,
        density,
        bandwidth: h,
    })
}

/// Density of the surrogate output over `mc_points`.
pub fn surrogate_density(model: &PceModel, mc_points: ArrayView2<f64>) -> Result<DensityEstimate> {
    if mc_points.nrows() < MIN_DENSITY_SAMPLES {
        return Err(AnalysisError::TooFewPoints {
            needed: MIN_DENSITY_SAMPLES,
            got: mc_points.nrows(),
        });
    }
    let values = model.predict_many(mc_points)?;
    kernel_density(&values)
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_sample(a)?;
    check_sample(b)?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        // Step past every copy of the smallest remaining value in both samples.
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Mean, standard deviation and shape of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStatistics {
    pub mean: f64,
    /// Unbiased (`n - 1`) standard deviation.
    pub std_dev: f64,
    pub skewness: f64,
    /// Excess kurtosis.
    pub kurtosis: f64,
}

impl SampleStatistics {
    pub fn of(xs: &[f64]) -> Result<Self> {
        check_sample(xs)?;
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &x in xs {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let var_biased = m2 / n;
        let std_dev = if xs.len() > 1 { (m2 / (n - 1.0)).sqrt() } else { 0.0 };
        let (skewness, kurtosis) = if var_biased > 0.0 {
            (
                m3 / n / var_biased.powf(1.5),
                m4 / n / (var_biased * var_biased) - 3.0,
            )
        } else {
            (0.0, 0.0)
        };
        Ok(Self {
            mean,
            std_dev,
            skewness,
            kurtosis,
        })
    }
}

/// `100 |value - reference| / |reference|`.
pub fn percent_error(value: f64, reference: f64) -> f64 {
    100.0 * (value - reference).abs() / reference.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub mean: f64,
    pub variance: f64,
    pub sobol_first_order: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_distance: Option<f64>,
    /// Shape of the surrogate output, estimated by sampling the surrogate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skewness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kurtosis: Option<f64>,
}

impl OutputSummary {
    /// Analytic moments and Sobol indices of `model`. A zero-variance model
    /// gets all-zero indices.
    pub fn from_model(model: &PceModel) -> Result<Self> {
        let (mean, variance) = analytic_moments(model);
        let sobol_first_order = match sobol_first_order(model) {
            Ok(s) => s,
            Err(AnalysisError::ZeroVariance) => vec![0.0; model.basis().n_inputs()],
            Err(e) => return Err(e),
        };
        Ok(Self {
            mean,
            variance,
            sobol_first_order,
            ks_distance: None,
            skewness: None,
            kurtosis: None,
        })
    }

    /// Add shape statistics of `surrogate_values` and, when given, their KS
    /// distance to `reference_values`.
    pub fn with_samples(
        mut self,
        surrogate_values: &[f64],
        reference_values: Option<&[f64]>,
    ) -> Result<Self> {
        let stats = SampleStatistics::of(surrogate_values)?;
        self.skewness = Some(stats.skewness);
        self.kurtosis = Some(stats.kurtosis);
        if let Some(r) = reference_values {
            self.ks_distance = Some(ks_distance(surrogate_values, r)?);
        }
        Ok(self)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}
