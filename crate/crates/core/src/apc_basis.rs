//! Moment-based orthonormal polynomial bases.
//!
//! Each input dimension gets its own family `ψ_0 … ψ_p`, built from the raw
//! moments of that input alone: the Hankel matrix of moments is factored as
//! `M = RᵀR` and the columns of `R⁻¹` are the monomial coefficients of an
//! orthonormal system. The multivariate basis is the total-degree tensor
//! product `Ψ_k(ξ) = ∏_i ψ_{I[k,i]}(ξ_i)`.
//!
//! Moments are shifted and scaled to zero mean and unit variance before the
//! Hankel matrix is formed; the affine map is kept on the basis and applied
//! on every evaluation, so callers always work in the original input units.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_upper, invert_upper};

/// Largest basis size accepted by [`build_multiindex`].
pub const DEFAULT_BASIS_CAP: usize = 1_000_000;

/// Absolute tolerance of the moment-based Gram identity check.
pub const GRAM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("order {order} needs at least {needed} samples, got {got}")]
    TooFewSamples {
        order: usize,
        needed: usize,
        got: usize,
    },
    #[error("sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("invalid moment set: {0}")]
    InvalidMoments(String),
    #[error(
        "Hankel matrix{} is not positive definite (smallest eigenvalue estimate {min_eigenvalue:.3e})",
        dimension.map(|d| format!(" of dimension {d}")).unwrap_or_default()
    )]
    CholeskyFailure {
        dimension: Option<usize>,
        min_eigenvalue: f64,
    },
    #[error("basis with {n_u} inputs and order {order} has {size} terms, above the cap of {cap}")]
    BasisTooLarge {
        n_u: usize,
        order: usize,
        size: u128,
        cap: usize,
    },
    #[error("expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension {index} out of range for a {n_u}-input basis")]
    DimensionOutOfRange { index: usize, n_u: usize },
    #[error("evaluation point {row} contains a non-finite coordinate")]
    NonFinitePoint { row: usize },
    #[error("invalid polynomial coefficients: {0}")]
    InvalidCoefficients(String),
}

pub type Result<T, E = BasisError> = std::result::Result<T, E>;

/// Raw moments `μ_0 … μ_{2p}` of one input, normalized so that `μ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MomentSet {
    moments: Vec<f64>,
}

impl MomentSet {
    pub fn new(moments: Vec<f64>) -> Result<Self> {
        if moments.is_empty() || moments.len() % 2 == 0 {
            return Err(BasisError::InvalidMoments(format!(
                "need an odd number (2p+1) of moments, got {}",
                moments.len()
            )));
        }
        if let Some(i) = moments.iter().position(|m| !m.is_finite()) {
            return Err(BasisError::InvalidMoments(format!("moment {i} is not finite")));
        }
        let mu0 = moments[0];
        if !(mu0 > 0.0) {
            return Err(BasisError::InvalidMoments(format!(
                "zeroth moment must be positive, got {mu0}"
            )));
        }
        Ok(Self {
            moments: moments.into_iter().map(|m| m / mu0).collect(),
        })
    }

    /// Highest polynomial order `p` this set supports.
    pub fn order(&self) -> usize {
        (self.moments.len() - 1) / 2
    }

    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    pub fn truncated(&self, order: usize) -> Result<Self> {
        if order > self.order() {
            return Err(BasisError::InvalidMoments(format!(
                "order {order} requested from a set of order {}",
                self.order()
            )));
        }
        Ok(Self {
            moments: self.moments[..2 * order + 1].to_vec(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.moments.get(1).copied().unwrap_or(0.0)
    }

    pub fn variance(&self) -> f64 {
        match self.moments.get(2) {
            Some(m2) => m2 - self.mean() * self.mean(),
            None => 0.0,
        }
    }

    /// Moments of `(ξ - shift) / scale`, by binomial expansion.
    pub fn standardized(&self, shift: f64, scale: f64) -> Vec<f64> {
        let n = self.moments.len();
        let mut out = vec![0.0; n];
        let mut binom = vec![1.0f64; n];
        for k in 0..n {
            // binom holds row k of Pascal's triangle.
            if k > 0 {
                for i in (1..k).rev() {
                    binom[i] += binom[i - 1];
                }
            }
            let mut s = 0.0;
            for i in 0..=k {
                s += binom[i] * self.moments[i] * (-shift).powi((k - i) as i32);
            }
            out[k] = s / scale.powi(k as i32);
        }
        out
    }
}

impl TryFrom<Vec<f64>> for MomentSet {
    type Error = BasisError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MomentSet> for Vec<f64> {
    fn from(m: MomentSet) -> Self {
        m.moments
    }
}

/// Raw sample moments `μ_i = (1/n_s) Σ_l (ξ^(l))^i` for `i = 0..=2p`.
pub fn compute_moments(samples: &[f64], order: usize) -> Result<MomentSet> {
    let needed = 2 * order + 1;
    if samples.len() < needed {
        return Err(BasisError::TooFewSamples {
            order,
            needed,
            got: samples.len(),
        });
    }
    if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
        return Err(BasisError::NonFiniteSample { index });
    }
    let mut sums = vec![0.0; needed];
    for &x in samples {
        let mut pow = 1.0;
        for s in sums.iter_mut() {
            *s += pow;
            pow *= x;
        }
    }
    let n = samples.len() as f64;
    MomentSet::new(sums.into_iter().map(|s| s / n).collect())
}

/// Polynomials `ψ_0 … ψ_p` of one input.
///
/// Coefficients are stored for the standardized variable `z = (ξ - shift) / scale`:
/// `ψ_j(ξ) = Σ_k coeffs[k, j] z^k`, with `coeffs` upper triangular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UnivariateRepr", into = "UnivariateRepr")]
pub struct UnivariateBasis {
    shift: f64,
    scale: f64,
    coeffs: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct UnivariateRepr {
    shift: f64,
    scale: f64,
    /// `polynomials[j][k]` is the coefficient of `z^k` in `ψ_j`.
    polynomials: Vec<Vec<f64>>,
}

impl TryFrom<UnivariateRepr> for UnivariateBasis {
    type Error = BasisError;

    fn try_from(r: UnivariateRepr) -> Result<Self> {
        let n = r.polynomials.len();
        let mut coeffs = Array2::zeros((n, n));
        for (j, poly) in r.polynomials.iter().enumerate() {
            if poly.len() > n {
                return Err(BasisError::InvalidCoefficients(format!(
                    "polynomial {j} has {} coefficients for order {}",
                    poly.len(),
                    n.saturating_sub(1)
                )));
            }
            for (k, c) in poly.iter().enumerate() {
                coeffs[[k, j]] = *c;
            }
        }
        Self::from_coefficients(coeffs, r.shift, r.scale)
    }
}

impl From<UnivariateBasis> for UnivariateRepr {
    fn from(b: UnivariateBasis) -> Self {
        let polynomials = (0..b.coeffs.ncols())
            .map(|j| (0..=j).map(|k| b.coeffs[[k, j]]).collect())
            .collect();
        Self {
            shift: b.shift,
            scale: b.scale,
            polynomials,
        }
    }
}

impl UnivariateBasis {
    /// Wrap explicit coefficients (column `j` = `ψ_j` in powers of the
    /// standardized variable). `ψ_j` must have exact degree `j`.
    pub fn from_coefficients(coeffs: Array2<f64>, shift: f64, scale: f64) -> Result<Self> {
        let n = coeffs.nrows();
        if n == 0 || n != coeffs.ncols() {
            return Err(BasisError::InvalidCoefficients(format!(
                "coefficient matrix must be square and non-empty, got {:?}",
                coeffs.dim()
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() || !shift.is_finite() {
            return Err(BasisError::InvalidCoefficients(format!(
                "invalid affine map shift={shift} scale={scale}"
            )));
        }
        for ((i, j), v) in coeffs.indexed_iter() {
            if !v.is_finite() {
                return Err(BasisError::InvalidCoefficients(format!("entry ({i},{j}) not finite")));
            }
            if i > j && *v != 0.0 {
                return Err(BasisError::InvalidCoefficients(format!(
                    "entry ({i},{j}) below the diagonal must be zero"
                )));
            }
            if i == j && *v == 0.0 {
                return Err(BasisError::InvalidCoefficients(format!(
                    "polynomial {j} does not have degree {j}"
                )));
            }
        }
        Ok(Self { shift, scale, coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.nrows() - 1
    }

    /// Coefficients in the standardized variable.
    pub fn coefficients(&self) -> &Array2<f64> {
        &self.coeffs
    }

    /// `(shift, scale)` of the map `z = (ξ - shift) / scale`.
    pub fn affine_map(&self) -> (f64, f64) {
        (self.shift, self.scale)
    }

    /// Coefficients in the original variable: `ψ_j(ξ) = Σ_i out[i, j] ξ^i`.
    pub fn monomial_coefficients(&self) -> Array2<f64> {
        let n = self.coeffs.nrows();
        let mut out = Array2::zeros((n, n));
        let mut binom = vec![1.0f64; n];
        for k in 0..n {
            if k > 0 {
                for i in (1..k).rev() {
                    binom[i] += binom[i - 1];
                }
            }
            let inv_scale = self.scale.powi(-(k as i32));
            for i in 0..=k {
                let term = binom[i] * (-self.shift).powi((k - i) as i32) * inv_scale;
                for j in k..n {
                    out[[i, j]] += self.coeffs[[k, j]] * term;
                }
            }
        }
        out
    }

    /// Values `ψ_0(x) … ψ_p(x)` written into `out`.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let n = self.coeffs.nrows();
        let z = (x - self.shift) / self.scale;
        for (j, o) in out.iter_mut().enumerate().take(n) {
            // Horner on column j.
            let mut acc = 0.0;
            for k in (0..=j).rev() {
                acc = acc * z + self.coeffs[[k, j]];
            }
            *o = acc;
        }
    }

    /// Derivatives `ψ'_0(x) … ψ'_p(x)` with respect to the original variable.
    pub fn eval_derivatives_into(&self, x: f64, out: &mut [f64]) {
        let n = self.coeffs.nrows();
        let z = (x - self.shift) / self.scale;
        for (j, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for k in (1..=j).rev() {
                acc = acc * z + k as f64 * self.coeffs[[k, j]];
            }
            *o = acc / self.scale;
        }
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.coeffs.nrows()];
        self.eval_into(x, &mut out);
        out
    }

    /// `E[ψ_a ψ_b]` computed exactly from `moments` (order ≥ this basis).
    pub fn gram(&self, moments: &MomentSet) -> Result<Array2<f64>> {
        let p = self.order();
        if moments.order() < p {
            return Err(BasisError::InvalidMoments(format!(
                "Gram matrix of order {p} needs moments to order {}, got {}",
                2 * p,
                2 * moments.order()
            )));
        }
        let nu = moments.standardized(self.shift, self.scale);
        let n = p + 1;
        let mut g = Array2::zeros((n, n));
        for a in 0..n {
            for b in a..n {
                let mut s = 0.0;
                for k in 0..=a {
                    for l in 0..=b {
                        s += self.coeffs[[k, a]] * self.coeffs[[l, b]] * nu[k + l];
                    }
                }
                g[[a, b]] = s;
                g[[b, a]] = s;
            }
        }
        Ok(g)
    }

    /// `E[ψ_j²]` for every `j`.
    pub fn second_moments(&self, moments: &MomentSet) -> Result<Vec<f64>> {
        let g = self.gram(moments)?;
        Ok(g.diag().to_vec())
    }
}

/// Orthonormal polynomials from a moment set via Cholesky of the Hankel matrix.
pub fn hankel_cholesky(m: &MomentSet) -> Result<UnivariateBasis> {
    let p = m.order();
    let (shift, scale) = if p == 0 {
        (0.0, 1.0)
    } else {
        let var = m.variance();
        if !(var > 0.0) {
            return Err(BasisError::CholeskyFailure {
                dimension: None,
                min_eigenvalue: var.min(0.0),
            });
        }
        (m.mean(), var.sqrt())
    };
    let nu = m.standardized(shift, scale);
    let hankel = Array2::from_shape_fn((p + 1, p + 1), |(i, j)| nu[i + j]);
    let r = cholesky_upper(&hankel).ok_or_else(|| BasisError::CholeskyFailure {
        dimension: None,
        min_eigenvalue: smallest_eigenvalue(&hankel),
    })?;
    let mut coeffs = invert_upper(&r);

    // Absorb rounding so that E[ψ_j²] = 1 to working precision.
    for j in 0..=p {
        let mut norm = 0.0;
        for k in 0..=j {
            for l in 0..=j {
                norm += coeffs[[k, j]] * coeffs[[l, j]] * nu[k + l];
            }
        }
        if !(norm > 0.0) {
            return Err(BasisError::CholeskyFailure {
                dimension: None,
                min_eigenvalue: smallest_eigenvalue(&hankel),
            });
        }
        let s = norm.sqrt();
        coeffs.column_mut(j).mapv_inplace(|c| c / s);
    }
    UnivariateBasis::from_coefficients(coeffs, shift, scale)
}

fn smallest_eigenvalue(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    m.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Total-degree multi-index set in graded order: total degree ascending,
/// then exponent rows in descending lexicographic order.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MultiIndexRepr", into = "MultiIndexRepr")]
pub struct MultiIndex {
    n_u: usize,
    order: usize,
    exponents: Vec<u32>,
    /// Non-zero `(dimension, degree)` pairs per row.
    active: Vec<Vec<(usize, usize)>>,
}

#[derive(Serialize, Deserialize)]
struct MultiIndexRepr {
    n_u: usize,
    order: usize,
    rows: Vec<Vec<u32>>,
}

impl TryFrom<MultiIndexRepr> for MultiIndex {
    type Error = BasisError;

    fn try_from(r: MultiIndexRepr) -> Result<Self> {
        let mut exponents = Vec::with_capacity(r.rows.len() * r.n_u);
        for row in &r.rows {
            if row.len() != r.n_u {
                return Err(BasisError::DimensionMismatch {
                    expected: r.n_u,
                    got: row.len(),
                });
            }
            if row.iter().map(|&e| e as usize).sum::<usize>() > r.order {
                return Err(BasisError::InvalidCoefficients(format!(
                    "multi-index row {row:?} exceeds order {}",
                    r.order
                )));
            }
            exponents.extend_from_slice(row);
        }
        Ok(MultiIndex::from_parts(r.n_u, r.order, exponents))
    }
}

impl From<MultiIndex> for MultiIndexRepr {
    fn from(m: MultiIndex) -> Self {
        Self {
            n_u: m.n_u,
            order: m.order,
            rows: m.rows().map(|r| r.to_vec()).collect(),
        }
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiIndex")
            .field("n_u", &self.n_u)
            .field("order", &self.order)
            .field("len", &self.len())
            .finish()
    }
}

impl MultiIndex {
    fn from_parts(n_u: usize, order: usize, exponents: Vec<u32>) -> Self {
        let active = exponents
            .chunks_exact(n_u.max(1))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(d, &e)| (d, e as usize))
                    .collect()
            })
            .collect();
        Self {
            n_u,
            order,
            exponents,
            active,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_u
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of terms, `P + 1`.
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn row(&self, k: usize) -> &[u32] {
        &self.exponents[k * self.n_u..(k + 1) * self.n_u]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.exponents.chunks_exact(self.n_u)
    }

    /// Non-zero `(dimension, degree)` entries of row `k`.
    pub fn active(&self, k: usize) -> &[(usize, usize)] {
        &self.active[k]
    }

    /// `(P+1) × n_u` index matrix.
    pub fn to_array(&self) -> Array2<u32> {
        Array2::from_shape_vec((self.len(), self.n_u), self.exponents.clone())
            .expect("shape matches by construction")
    }
}

/// `(n_u + p)! / (n_u! p!)`, or `None` on overflow.
pub fn basis_cardinality(n_u: usize, order: usize) -> Option<u128> {
    let mut c: u128 = 1;
    for i in 1..=order as u128 {
        c = c.checked_mul(n_u as u128 + i)? / i;
    }
    Some(c)
}

pub fn build_multiindex(n_u: usize, order: usize) -> Result<MultiIndex> {
    build_multiindex_capped(n_u, order, DEFAULT_BASIS_CAP)
}

pub fn build_multiindex_capped(n_u: usize, order: usize, cap: usize) -> Result<MultiIndex> {
    if n_u == 0 {
        return Err(BasisError::DimensionMismatch { expected: 1, got: 0 });
    }
    let size = basis_cardinality(n_u, order).unwrap_or(u128::MAX);
    if size > cap as u128 {
        return Err(BasisError::BasisTooLarge {
            n_u,
            order,
            size,
            cap,
        });
    }
    let mut exponents = Vec::with_capacity(size as usize * n_u);
    let mut current = vec![0u32; n_u];
    for degree in 0..=order {
        push_compositions(degree as u32, 0, &mut current, &mut exponents);
    }
    Ok(MultiIndex::from_parts(n_u, order, exponents))
}

fn push_compositions(remaining: u32, dim: usize, current: &mut [u32], out: &mut Vec<u32>) {
    if dim + 1 == current.len() {
        current[dim] = remaining;
        out.extend_from_slice(current);
        current[dim] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[dim] = e;
        push_compositions(remaining - e, dim + 1, current, out);
    }
    current[dim] = 0;
}

/// Tensor-product basis `Ψ_k(ξ) = ∏_i ψ^{(i)}_{I[k,i]}(ξ_i)` with norms `γ_k = E[Ψ_k²]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateBasis {
    univariate: Vec<UnivariateBasis>,
    index: MultiIndex,
    norms: Vec<f64>,
}

impl MultivariateBasis {
    /// Build orthonormal families for every input and the order-`p`
    /// total-degree basis over them.
    pub fn from_moments(moment_sets: &[MomentSet], order: usize) -> Result<Self> {
        let univariate = moment_sets
            .iter()
            .enumerate()
            .map(|(d, m)| {
                let m = m.truncated(order)?;
                hankel_cholesky(&m).map_err(|e| match e {
                    BasisError::CholeskyFailure { min_eigenvalue, .. } => {
                        BasisError::CholeskyFailure {
                            dimension: Some(d),
                            min_eigenvalue,
                        }
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index = build_multiindex(moment_sets.len(), order)?;
        Self::new(univariate, index, moment_sets)
    }

    /// Assemble a basis from explicit parts; norms are computed exactly from
    /// `moment_sets`.
    pub fn new(
        univariate: Vec<UnivariateBasis>,
        index: MultiIndex,
        moment_sets: &[MomentSet],
    ) -> Result<Self> {
        if univariate.len() != index.n_inputs() {
            return Err(BasisError::DimensionMismatch {
                expected: index.n_inputs(),
                got: univariate.len(),
            });
        }
        if let Some(u) = univariate.iter().find(|u| u.order() < index.order()) {
            return Err(BasisError::InvalidCoefficients(format!(
                "univariate family of order {} below multi-index order {}",
                u.order(),
                index.order()
            )));
        }
        let norms = norms_from_parts(&univariate, &index, moment_sets)?;
        Ok(Self {
            univariate,
            index,
            norms,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.index.n_inputs()
    }

    pub fn order(&self) -> usize {
        self.index.order()
    }

    /// Number of terms `P + 1`.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn univariate(&self) -> &[UnivariateBasis] {
        &self.univariate
    }

    pub fn multi_index(&self) -> &MultiIndex {
        &self.index
    }

    /// `γ_k = E[Ψ_k²]`.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Value of the all-zero term `Ψ_0`.
    pub fn constant_term(&self) -> f64 {
        self.univariate.iter().map(|u| u.coefficients()[[0, 0]]).product()
    }

    fn check_point(&self, x: &[f64], row: usize) -> Result<()> {
        if x.len() != self.n_inputs() {
            return Err(BasisError::DimensionMismatch {
                expected: self.n_inputs(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BasisError::NonFinitePoint { row });
        }
        Ok(())
    }

    fn univariate_table(&self, x: &[f64], derivs: bool) -> (Vec<f64>, Vec<f64>) {
        let w = self.order() + 1;
        let mut vals = vec![0.0; self.n_inputs() * w];
        let mut ders = if derivs {
            vec![0.0; self.n_inputs() * w]
        } else {
            Vec::new()
        };
        for (i, u) in self.univariate.iter().enumerate() {
            let mut buf = vec![0.0; u.order() + 1];
            u.eval_into(x[i], &mut buf);
            vals[i * w..(i + 1) * w].copy_from_slice(&buf[..w]);
            if derivs {
                u.eval_derivatives_into(x[i], &mut buf);
                ders[i * w..(i + 1) * w].copy_from_slice(&buf[..w]);
            }
        }
        (vals, ders)
    }

    /// Write `Ψ_0(x) … Ψ_P(x)` into `out`.
    pub fn eval_point(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_point(x, 0)?;
        let w = self.order() + 1;
        let (vals, _) = self.univariate_table(x, false);
        let c0 = self.constant_term();
        for (k, o) in out.iter_mut().enumerate().take(self.len()) {
            let mut v = c0;
            for &(d, e) in self.index.active(k) {
                v *= vals[d * w + e] / vals[d * w];
            }
            *o = v;
        }
        Ok(())
    }

    /// Gradient of every term at `x`, laid out `out[i * (P+1) + k] = ∂Ψ_k/∂ξ_i`.
    pub fn eval_gradient_point(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_point(x, 0)?;
        let w = self.order() + 1;
        let n_terms = self.len();
        let (vals, ders) = self.univariate_table(x, true);
        let c0 = self.constant_term();
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n_terms {
            let active = self.index.active(k);
            for (a, &(d, e)) in active.iter().enumerate() {
                let mut v = c0 * ders[d * w + e] / vals[d * w];
                for (b, &(d2, e2)) in active.iter().enumerate() {
                    if a != b {
                        v *= vals[d2 * w + e2] / vals[d2 * w];
                    }
                }
                out[d * n_terms + k] = v;
            }
        }
        Ok(())
    }
}

/// Measurement matrix: entry `(m, k)` is `Ψ_k` at row `m` of `points`.
pub fn eval_basis(b: &MultivariateBasis, points: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_points(b, points)?;
    let mut out = Array2::zeros((points.nrows(), b.len()));
    for (m, (x, mut row)) in points.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        let x = x.to_vec();
        b.eval_point(&x, row.as_slice_mut().expect("row-major output"))
            .map_err(|e| relabel_row(e, m))?;
    }
    Ok(out)
}

/// `∂Ψ_k/∂ξ_dim` at every row of `points` (`dim` is zero-based).
pub fn eval_basis_derivatives(
    b: &MultivariateBasis,
    points: ArrayView2<f64>,
    dim: usize,
) -> Result<Array2<f64>> {
    if dim >= b.n_inputs() {
        return Err(BasisError::DimensionOutOfRange {
            index: dim,
            n_u: b.n_inputs(),
        });
    }
    check_points(b, points)?;
    let n_terms = b.len();
    let mut out = Array2::zeros((points.nrows(), n_terms));
    let mut grad = vec![0.0; b.n_inputs() * n_terms];
    for (m, x) in points.outer_iter().enumerate() {
        let x = x.to_vec();
        b.eval_gradient_point(&x, &mut grad)
            .map_err(|e| relabel_row(e, m))?;
        out.row_mut(m)
            .assign(&ndarray::ArrayView1::from(&grad[dim * n_terms..(dim + 1) * n_terms]));
    }
    Ok(out)
}

/// Derivative matrices for every input at once: element `i` of the result is
/// `∂ψ/∂ξ_i` (shape `q × (P+1)`).
pub fn eval_basis_gradients(
    b: &MultivariateBasis,
    points: ArrayView2<f64>,
) -> Result<Vec<Array2<f64>>> {
    check_points(b, points)?;
    let n_terms = b.len();
    let mut out = vec![Array2::zeros((points.nrows(), n_terms)); b.n_inputs()];
    let mut grad = vec![0.0; b.n_inputs() * n_terms];
    for (m, x) in points.outer_iter().enumerate() {
        let x = x.to_vec();
        b.eval_gradient_point(&x, &mut grad)
            .map_err(|e| relabel_row(e, m))?;
        for (i, block) in out.iter_mut().enumerate() {
            block
                .row_mut(m)
                .assign(&ndarray::ArrayView1::from(&grad[i * n_terms..(i + 1) * n_terms]));
        }
    }
    Ok(out)
}

fn check_points(b: &MultivariateBasis, points: ArrayView2<f64>) -> Result<()> {
    if points.ncols() != b.n_inputs() {
        return Err(BasisError::DimensionMismatch {
            expected: b.n_inputs(),
            got: points.ncols(),
        });
    }
    Ok(())
}

fn relabel_row(e: BasisError, row: usize) -> BasisError {
    match e {
        BasisError::NonFinitePoint { .. } => BasisError::NonFinitePoint { row },
        other => other,
    }
}

/// `γ_j = ∏_i E[ψ²_{I[j,i]}]`, each factor exact from the moments of input `i`.
pub fn compute_norms(b: &MultivariateBasis, moment_sets: &[MomentSet]) -> Result<Vec<f64>> {
    norms_from_parts(&b.univariate, &b.index, moment_sets)
}

fn norms_from_parts(
    univariate: &[UnivariateBasis],
    index: &MultiIndex,
    moment_sets: &[MomentSet],
) -> Result<Vec<f64>> {
    if moment_sets.len() != index.n_inputs() {
        return Err(BasisError::DimensionMismatch {
            expected: index.n_inputs(),
            got: moment_sets.len(),
        });
    }
    let per_dim = univariate
        .iter()
        .zip(moment_sets)
        .map(|(u, m)| {
            let trimmed = UnivariateBasis::from_coefficients(
                u.coefficients()
                    .slice(ndarray::s![..=index.order(), ..=index.order()])
                    .to_owned(),
                u.shift,
                u.scale,
            )?;
            trimmed.second_moments(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let base: f64 = per_dim.iter().map(|s| s[0]).product();
    Ok((0..index.len())
        .map(|k| {
            index
                .active(k)
                .iter()
                .fold(base, |acc, &(d, e)| acc * per_dim[d][e] / per_dim[d][0])
        })
        .collect())
}
