//! Weighted least-squares estimation of expansion coefficients, from values
//! alone or from values stacked with gradients.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apc_basis::{eval_basis, eval_basis_gradients, BasisError, MultivariateBasis};
use crate::linalg::PivotedQr;

/// Relative `|R_kk|` threshold below which a design column counts as dependent.
const RANK_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("{rows} equations cannot determine {unknowns} coefficients")]
    Underdetermined { rows: usize, unknowns: usize },
    #[error("record {index} has no gradient")]
    MissingGradient { index: usize },
    #[error("record {index}: expected {expected} entries, got {got}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("{records} records but {weights} weights")]
    WeightCount { records: usize, weights: usize },
    #[error("weight {index} is not a positive finite number")]
    InvalidWeight { index: usize },
    #[error("record {index} contains a non-finite value")]
    NonFiniteRecord { index: usize },
    #[error("design matrix is numerically singular")]
    Singular,
    #[error("basis hash mismatch: model expects {expected}, got {got}")]
    BasisMismatch { expected: String, got: String },
}

pub type Result<T, E = RegressionError> = std::result::Result<T, E>;

/// One model evaluation: input point, output value and optionally the gradient
/// of the output with respect to the point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub point: Vec<f64>,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<Vec<f64>>,
    /// Position in the design the record was produced for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doe_index: Option<usize>,
}

impl EvaluationRecord {
    pub fn new(point: Vec<f64>, value: f64, gradient: Option<Vec<f64>>) -> Self {
        Self {
            point,
            value,
            gradient,
            doe_index: None,
        }
    }
}

/// Stacked value and gradient equations.
///
/// Rows `0..q` are values; rows `q(i+1)..q(i+2)` are derivatives with respect
/// to input `i`. `weights` repeats the `q` point weights once per block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSystem {
    pub g: Vec<f64>,
    pub phi: Array2<f64>,
    pub weights: Vec<f64>,
    pub q: usize,
    pub n_u: usize,
}

fn check_records(
    basis: &MultivariateBasis,
    records: &[EvaluationRecord],
    weights: &[f64],
    need_gradient: bool,
) -> Result<()> {
    let n_u = basis.n_inputs();
    if records.len() != weights.len() {
        return Err(RegressionError::WeightCount {
            records: records.len(),
            weights: weights.len(),
        });
    }
    if let Some(index) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(RegressionError::InvalidWeight { index });
    }
    for (index, r) in records.iter().enumerate() {
        if r.point.len() != n_u {
            return Err(RegressionError::DimensionMismatch {
                index,
                expected: n_u,
                got: r.point.len(),
            });
        }
        if !r.value.is_finite() || r.point.iter().any(|v| !v.is_finite()) {
            return Err(RegressionError::NonFiniteRecord { index });
        }
        if need_gradient {
            let g = r
                .gradient
                .as_ref()
                .ok_or(RegressionError::MissingGradient { index })?;
            if g.len() != n_u {
                return Err(RegressionError::DimensionMismatch {
                    index,
                    expected: n_u,
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(RegressionError::NonFiniteRecord { index });
            }
        }
    }
    Ok(())
}

/// Records and weights reordered by `doe_index` when every record has one.
fn ordered<'a>(
    records: &'a [EvaluationRecord],
    weights: &'a [f64],
) -> (Vec<&'a EvaluationRecord>, Vec<f64>) {
    let mut pairs: Vec<(&EvaluationRecord, f64)> =
        records.iter().zip(weights.iter().copied()).collect();
    if records.iter().all(|r| r.doe_index.is_some()) {
        pairs.sort_by_key(|(r, _)| r.doe_index);
    }
    pairs.into_iter().unzip()
}

fn points_of(records: &[&EvaluationRecord], n_u: usize) -> Array2<f64> {
    Array2::from_shape_fn((records.len(), n_u), |(m, i)| records[m].point[i])
}

pub fn assemble_block_system(
    basis: &MultivariateBasis,
    records: &[EvaluationRecord],
    weights: &[f64],
) -> Result<BlockSystem> {
    assemble_block_system_scaled(basis, records, weights, 1.0)
}

/// As [`assemble_block_system`], with every gradient row multiplied by
/// `gradient_scale` on both sides.
pub fn assemble_block_system_scaled(
    basis: &MultivariateBasis,
    records: &[EvaluationRecord],
    weights: &[f64],
    gradient_scale: f64,
) -> Result<BlockSystem> {
    check_records(basis, records, weights, true)?;
    let (records, weights) = ordered(records, weights);
    let n_u = basis.n_inputs();
    let q = records.len();
    let n_terms = basis.len();
    let points = points_of(&records, n_u);
    let values = eval_basis(basis, points.view())?;
    let derivs = eval_basis_gradients(basis, points.view())?;

    let rows = (n_u + 1) * q;
    let mut phi = Array2::zeros((rows, n_terms));
    let mut g = Vec::with_capacity(rows);
    phi.slice_mut(ndarray::s![0..q, ..]).assign(&values);
    g.extend(records.iter().map(|r| r.value));
    for (i, d) in derivs.into_iter().enumerate() {
        let block = ndarray::s![q * (i + 1)..q * (i + 2), ..];
        phi.slice_mut(block).assign(&(d * gradient_scale));
        g.extend(
            records
                .iter()
                .map(|r| r.gradient.as_ref().expect("checked")[i] * gradient_scale),
        );
    }
    let w = (0..=n_u).flat_map(|_| weights.iter().copied()).collect();
    Ok(BlockSystem {
        g,
        phi,
        weights: w,
        q,
        n_u,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    WeightedLeastSquares,
    SensitivityEnhanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub method: FitMethod,
    pub rows: usize,
    pub rank: usize,
    /// `‖W^{1/2}(Φλ - G)‖₂`.
    pub residual_norm: f64,
    /// `|R_00| / |R_nn|` of the pivoted QR of the weighted design.
    pub condition_estimate: f64,
    /// Whether the minimum-norm fallback was used.
    pub rank_deficient: bool,
}

/// Fitted expansion `M(ξ) ≈ Σ_k λ_k Ψ_k(ξ)`.
#[derive(Debug, Clone)]
pub struct PceModel {
    lambda: Vec<f64>,
    basis: Arc<MultivariateBasis>,
    diagnostics: FitDiagnostics,
}

/// Serialized form of a [`PceModel`]; the basis travels separately and is
/// pinned by its hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceModelExport {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub multi_index: Vec<Vec<u32>>,
    pub diagnostics: FitDiagnostics,
    pub basis_sha256: String,
}

/// SHA-256 of the basis JSON encoding, hex.
pub fn basis_hash(basis: &MultivariateBasis) -> String {
    let bytes = serde_json::to_vec(basis).expect("basis serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl PceModel {
    pub fn new(
        lambda: Vec<f64>,
        basis: Arc<MultivariateBasis>,
        diagnostics: FitDiagnostics,
    ) -> Result<Self> {
        if lambda.len() != basis.len() {
            return Err(RegressionError::DimensionMismatch {
                index: 0,
                expected: basis.len(),
                got: lambda.len(),
            });
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(RegressionError::Singular);
        }
        Ok(Self {
            lambda,
            basis,
            diagnostics,
        })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn basis(&self) -> &Arc<MultivariateBasis> {
        &self.basis
    }

    /// `γ_k = E[Ψ_k²]`, aligned with `lambda`.
    pub fn gamma(&self) -> &[f64] {
        self.basis.norms()
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    pub fn predict(&self, point: &[f64]) -> Result<f64> {
        let mut psi = vec![0.0; self.basis.len()];
        self.basis.eval_point(point, &mut psi)?;
        Ok(psi.iter().zip(&self.lambda).map(|(a, b)| a * b).sum())
    }

    pub fn predict_many(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        // Chunked so that the measurement matrix stays small for large pools.
        const CHUNK: usize = 2048;
        let lambda = ndarray::ArrayView1::from(&self.lambda[..]);
        let mut out = Vec::with_capacity(points.nrows());
        for chunk in points.axis_chunks_iter(Axis(0), CHUNK) {
            let psi = eval_basis(&self.basis, chunk)?;
            out.extend(psi.dot(&lambda));
        }
        Ok(out)
    }

    /// Gradient of the surrogate at `point`.
    pub fn predict_gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        let n = self.basis.len();
        let mut grad = vec![0.0; self.basis.n_inputs() * n];
        self.basis.eval_gradient_point(point, &mut grad)?;
        Ok(grad
            .chunks_exact(n)
            .map(|d| d.iter().zip(&self.lambda).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn export(&self) -> PceModelExport {
        PceModelExport {
            lambda: self.lambda.clone(),
            gamma: self.gamma().to_vec(),
            multi_index: self
                .basis
                .multi_index()
                .rows()
                .map(|r| r.to_vec())
                .collect(),
            diagnostics: self.diagnostics.clone(),
            basis_sha256: basis_hash(&self.basis),
        }
    }

    /// Rebuild from an export, checking that `basis` is the one it was fitted on.
    pub fn from_export(export: PceModelExport, basis: Arc<MultivariateBasis>) -> Result<Self> {
        let got = basis_hash(&basis);
        if got != export.basis_sha256 {
            return Err(RegressionError::BasisMismatch {
                expected: export.basis_sha256,
                got,
            });
        }
        Self::new(export.lambda, basis, export.diagnostics)
    }
}

/// Weighted least squares on function values only.
pub fn fit_wlsq(
    basis: Arc<MultivariateBasis>,
    records: &[EvaluationRecord],
    weights: &[f64],
) -> Result<PceModel> {
    check_records(&basis, records, weights, false)?;
    let (records, weights) = ordered(records, weights);
    let points = points_of(&records, basis.n_inputs());
    let phi = eval_basis(&basis, points.view())?;
    let g: Vec<f64> = records.iter().map(|r| r.value).collect();
    let (lambda, diagnostics) = solve_weighted(&phi, &g, &weights, FitMethod::WeightedLeastSquares)?;
    PceModel::new(lambda, basis, diagnostics)
}

/// Weighted least squares on the stacked value and gradient equations.
pub fn fit_sensitivity_enhanced(
    basis: Arc<MultivariateBasis>,
    records: &[EvaluationRecord],
    weights: &[f64],
) -> Result<PceModel> {
    fit_sensitivity_enhanced_scaled(basis, records, weights, 1.0)
}

pub fn fit_sensitivity_enhanced_scaled(
    basis: Arc<MultivariateBasis>,
    records: &[EvaluationRecord],
    weights: &[f64],
    gradient_scale: f64,
) -> Result<PceModel> {
    let sys = assemble_block_system_scaled(&basis, records, weights, gradient_scale)?;
    let (lambda, diagnostics) = solve_block_system(&sys)?;
    PceModel::new(lambda, basis, diagnostics)
}

/// Solve a stacked system by weighted least squares.
pub fn solve_block_system(sys: &BlockSystem) -> Result<(Vec<f64>, FitDiagnostics)> {
    solve_weighted(&sys.phi, &sys.g, &sys.weights, FitMethod::SensitivityEnhanced)
}

fn solve_weighted(
    phi: &Array2<f64>,
    g: &[f64],
    weights: &[f64],
    method: FitMethod,
) -> Result<(Vec<f64>, FitDiagnostics)> {
    let (rows, unknowns) = phi.dim();
    if rows < unknowns {
        return Err(RegressionError::Underdetermined { rows, unknowns });
    }
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a = phi.clone();
    for (mut row, s) in a.outer_iter_mut().zip(&sqrt_w) {
        row.mapv_inplace(|v| v * s);
    }
    let b: Vec<f64> = g.iter().zip(&sqrt_w).map(|(v, s)| v * s).collect();

    let qr = PivotedQr::factor(&a);
    let rank = qr.rank(RANK_RTOL);
    let rank_deficient = rank < unknowns;
    let lambda = if rank_deficient {
        log::warn!(
            "design of {rows}x{unknowns} has numerical rank {rank}; using the minimum-norm solution"
        );
        min_norm_solution(&a, &b)?
    } else {
        qr.solve_least_squares(&b, unknowns)
    };
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(RegressionError::Singular);
    }
    let fitted = a.dot(&ndarray::ArrayView1::from(&lambda[..]));
    let residual_norm = fitted
        .iter()
        .zip(&b)
        .map(|(f, y)| (f - y) * (f - y))
        .sum::<f64>()
        .sqrt();
    Ok((
        lambda,
        FitDiagnostics {
            method,
            rows,
            rank,
            residual_norm,
            condition_estimate: qr.condition_estimate(),
            rank_deficient,
        },
    ))
}

fn min_norm_solution(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = a.dim();
    let am = nalgebra::DMatrix::from_fn(m, n, |i, j| a[[i, j]]);
    let bm = nalgebra::DVector::from_column_slice(b);
    let svd = am.svd(true, true);
    let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if max_sv == 0.0 {
        return Err(RegressionError::Singular);
    }
    let x = svd
        .solve(&bm, max_sv * RANK_RTOL)
        .map_err(|_| RegressionError::Singular)?;
    Ok(x.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apc_basis::MomentSet;

    fn normal_moments(order: usize) -> MomentSet {
        let mut m = vec![1.0, 0.0];
        for k in 2..=2 * order {
            m.push((k as f64 - 1.0) * m[k - 2]);
        }
        m.truncate(2 * order + 1);
        MomentSet::new(m).unwrap()
    }

    fn basis(n_u: usize, p: usize) -> Arc<MultivariateBasis> {
        Arc::new(MultivariateBasis::from_moments(&vec![normal_moments(p); n_u], p).unwrap())
    }

    fn grid_points(n_u: usize, count: usize) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(count as u64);
        (0..count)
            .map(|_| (0..n_u).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn constant_function() {
        let b = basis(2, 2);
        let recs: Vec<_> = grid_points(2, 10)
            .into_iter()
            .map(|p| EvaluationRecord::new(p, 4.5, None))
            .collect();
        let m = fit_wlsq(b, &recs, &[1.0; 10]).unwrap();
        assert!((m.lambda()[0] - 4.5).abs() < 1e-12);
        assert!(m.lambda()[1..].iter().all(|l| l.abs() < 1e-12));
    }

    #[test]
    fn basis_member_recovered() {
        let b = basis(2, 2);
        let recs: Vec<_> = grid_points(2, 8)
            .into_iter()
            .map(|p| {
                let mut psi = vec![0.0; 6];
                b.eval_point(&p, &mut psi).unwrap();
                EvaluationRecord::new(p, psi[3], None)
            })
            .collect();
        let m = fit_wlsq(b, &recs, &[1.0; 8]).unwrap();
        for (k, l) in m.lambda().iter().enumerate() {
            let e = if k == 3 { 1.0 } else { 0.0 };
            assert!((l - e).abs() < 1e-12, "λ_{k} = {l}");
        }
    }

    #[test]
    fn affine_map_from_single_gradient_sample() {
        let b = basis(3, 1);
        let slope = [0.5, -2.0, 1.25];
        let point = vec![0.3, -0.1, 0.7];
        let value = 2.0 + slope.iter().zip(&point).map(|(a, x)| a * x).sum::<f64>();
        let rec = EvaluationRecord::new(point, value, Some(slope.to_vec()));
        let m = fit_sensitivity_enhanced(b, &[rec], &[1.0]).unwrap();
        assert!(m.diagnostics().residual_norm < 1e-12);
        let x = [1.5, 2.0, -3.0];
        let exact = 2.0 + slope.iter().zip(&x).map(|(a, x)| a * x).sum::<f64>();
        assert!((m.predict(&x).unwrap() - exact).abs() < 1e-12);
    }

    #[test]
    fn block_layout_and_counts() {
        let b = basis(2, 1);
        let rec = EvaluationRecord::new(vec![0.2, 0.4], 1.0, Some(vec![3.0, 5.0]));
        let sys = assemble_block_system(&b, &[rec], &[0.7]).unwrap();
        assert_eq!(sys.phi.dim(), (3, 3));
        assert_eq!(sys.g, vec![1.0, 3.0, 5.0]);
        assert_eq!(sys.weights, vec![0.7; 3]);
    }

    #[test]
    fn linear_model_gradient_rows_constant() {
        let b = basis(2, 2);
        let recs: Vec<_> = grid_points(2, 4)
            .into_iter()
            .map(|p| EvaluationRecord::new(p.clone(), p[0] - 2.0 * p[1], Some(vec![1.0, -2.0])))
            .collect();
        let sys = assemble_block_system(&b, &recs, &[1.0; 4]).unwrap();
        assert_eq!(&sys.g[4..8], &[1.0; 4]);
        assert_eq!(&sys.g[8..12], &[-2.0; 4]);
    }

    #[test]
    fn records_sorted_by_design_index() {
        let b = basis(1, 1);
        let mut a = EvaluationRecord::new(vec![1.0], 1.0, Some(vec![0.5]));
        let mut c = EvaluationRecord::new(vec![2.0], 2.0, Some(vec![0.25]));
        a.doe_index = Some(1);
        c.doe_index = Some(0);
        let sys = assemble_block_system(&b, &[a, c], &[10.0, 20.0]).unwrap();
        assert_eq!(sys.g, vec![2.0, 1.0, 0.25, 0.5]);
        assert_eq!(sys.weights, vec![20.0, 10.0, 20.0, 10.0]);
    }

    #[test]
    fn input_errors() {
        let b = basis(2, 2);
        let rec = EvaluationRecord::new(vec![0.0, 0.0], 1.0, None);
        assert!(matches!(
            fit_sensitivity_enhanced(b.clone(), &[rec.clone()], &[1.0]),
            Err(RegressionError::MissingGradient { index: 0 })
        ));
        assert!(matches!(
            fit_wlsq(b.clone(), &[rec.clone()], &[1.0]),
            Err(RegressionError::Underdetermined { rows: 1, unknowns: 6 })
        ));
        assert!(matches!(
            fit_wlsq(b.clone(), &[rec.clone()], &[-1.0]),
            Err(RegressionError::InvalidWeight { index: 0 })
        ));
        assert!(matches!(
            fit_wlsq(b, &[rec], &[]),
            Err(RegressionError::WeightCount { .. })
        ));
    }

    #[test]
    fn rank_deficient_design_falls_back_to_min_norm() {
        let b = basis(1, 2);
        // Three rows, but only two distinct points: rank 2 < 3.
        let recs: Vec<_> = [0.5, 0.5, -1.0]
            .iter()
            .map(|&x| EvaluationRecord::new(vec![x], 1.0 + x, None))
            .collect();
        let m = fit_wlsq(b, &recs, &[1.0; 3]).unwrap();
        assert!(m.diagnostics().rank_deficient);
        assert_eq!(m.diagnostics().rank, 2);
        assert!((m.predict(&[0.5]).unwrap() - 1.5).abs() < 1e-10);
    }

    #[test]
    fn export_roundtrip_and_hash_check() {
        let b = basis(2, 1);
        let rec = EvaluationRecord::new(vec![0.2, 0.4], 1.0, Some(vec![3.0, 5.0]));
        let m = fit_sensitivity_enhanced(b.clone(), &[rec], &[1.0]).unwrap();
        let e = m.export();
        assert_eq!(e.basis_sha256.len(), 64);
        let back = PceModel::from_export(e.clone(), b).unwrap();
        assert_eq!(back.lambda(), m.lambda());
        assert!(matches!(
            PceModel::from_export(e, basis(2, 2)),
            Err(RegressionError::BasisMismatch { .. })
        ));
    }
}
