//! Coherence-weighted selection of evaluation points from a candidate pool.
//!
//! Every pool point gets a weight `W(ξ) = 1 / (c B(ξ))` with
//! `B(ξ)² = Σ_{j≥1} Ψ_j(ξ)²`. The weighted measurement matrix
//! `(W^{1/2} Ψ)ᵀ`, one column per pool point, is factored by column-pivoted
//! QR; the pivot order ranks the pool greedily by the volume each point adds.
//! Once the basis size `P+1` is exhausted the ranking continues by maximum
//! leverage `aᵀ C⁻¹ a` of the weighted row `a` against the information matrix
//! `C` of the rows already chosen, which is the same greedy determinant rule
//! for a matrix with more rows than columns.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apc_basis::{eval_basis, BasisError, MultivariateBasis};
use crate::linalg::{cholesky_upper, invert_upper, PivotedQr};
use crate::models::{sample_independent, Distribution, ModelError};

/// Upper bound on a single coherence weight.
pub const MAX_WEIGHT: f64 = 1e12;

/// Default number of candidate points.
pub const DEFAULT_POOL_SIZE: usize = 10_000;

/// Pivots with `|R_kk| <= RANK_RTOL * |R_00|` are treated as dependent.
const RANK_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DoeError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Sampling(#[from] ModelError),
    #[error("coherence weights need a basis of order at least 1")]
    ConstantBasis,
    #[error("oversampling ratio must be at least 1")]
    InvalidOversampling,
    #[error("pool has {pool} points but {required} are required")]
    PoolTooSmall { pool: usize, required: usize },
    #[error("weighted measurement matrix has rank {rank}, need {required}")]
    RankDeficient { rank: usize, required: usize },
    #[error("pool contains a non-finite coordinate at row {row}")]
    NonFinitePool { row: usize },
}

pub type Result<T, E = DoeError> = std::result::Result<T, E>;

/// Independent draws from the joint input density, one row per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    points: Array2<f64>,
    seed: u64,
}

impl CandidatePool {
    pub fn new(points: Array2<f64>, seed: u64) -> Result<Self> {
        for (row, r) in points.outer_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(DoeError::NonFinitePool { row });
            }
        }
        Ok(Self { points, seed })
    }

    /// `n_s` draws with independent coordinates following `dims`.
    pub fn sample(dims: &[Distribution], n_s: usize, seed: u64) -> Result<Self> {
        Self::new(sample_independent(dims, n_s, seed)?, seed)
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn n_inputs(&self) -> usize {
        self.points.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Samples of input `dim` as a contiguous vector.
    pub fn column(&self, dim: usize) -> Vec<f64> {
        self.points.column(dim).to_vec()
    }
}

/// `q_a = n_o (P+1)` and `q = ceil(q_a / (n_u+1))`.
pub fn sample_counts(n_terms: usize, n_u: usize, n_o: usize) -> (usize, usize) {
    let q_a = n_o * n_terms;
    (q_a, q_a.div_ceil(n_u + 1))
}

fn coherence_terms(psi: ArrayView2<f64>) -> Vec<f64> {
    psi.outer_iter()
        .map(|row| row.iter().skip(1).map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn weights_from_terms(b: &[f64]) -> (Vec<f64>, f64) {
    let c = (b.iter().map(|v| v * v).sum::<f64>() / b.len() as f64).sqrt();
    let w = b
        .iter()
        .map(|&bi| {
            let w = 1.0 / (c * bi);
            if w.is_finite() {
                w.min(MAX_WEIGHT)
            } else {
                MAX_WEIGHT
            }
        })
        .collect();
    (w, c)
}

/// Weights `1 / (c B(ξ))` at every row of `points`, with `c²` the mean of
/// `B²` over the same rows. Returns the weights and `c`.
pub fn coherence_weights(
    basis: &MultivariateBasis,
    points: ArrayView2<f64>,
) -> Result<(Vec<f64>, f64)> {
    if basis.len() < 2 {
        return Err(DoeError::ConstantBasis);
    }
    let psi = eval_basis(basis, points)?;
    Ok(weights_from_terms(&coherence_terms(psi.view())))
}

/// Selection settings beyond the basis and pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoeSettings {
    pub n_o: usize,
    pub sensitivity_enhanced: bool,
    /// Rank all `q_a` oversampled points even when only `q` are returned.
    pub rank_oversampled: bool,
}

impl DoeSettings {
    pub fn new(n_o: usize, sensitivity_enhanced: bool) -> Self {
        Self {
            n_o,
            sensitivity_enhanced,
            rank_oversampled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOfExperiments {
    /// Pool rows of the returned design, in selection order.
    pub selected_indices: Vec<usize>,
    pub selected_points: Array2<f64>,
    /// Coherence weights of the selected points.
    pub weights: Vec<f64>,
    /// Pool rows in ranking order; the selection is a prefix of this.
    pub oversampled_indices: Vec<usize>,
    /// `|R_kk|` of the pivoted QR, one per pivot up to `P+1`.
    pub r_diagonal: Vec<f64>,
    /// Leverage of each point ranked after the first `P+1`.
    pub extension_leverage: Vec<f64>,
    /// Normalization constant of the weights.
    pub weight_scale: f64,
    pub n_terms: usize,
    pub n_o: usize,
    pub sensitivity_enhanced: bool,
    pub q: usize,
    pub q_a: usize,
    pub seed: u64,
}

/// Rank pool points greedily and return the first `q` (sensitivity-enhanced)
/// or `q_a` points.
pub fn select_doe(
    basis: &MultivariateBasis,
    pool: &CandidatePool,
    n_o: usize,
    sensitivity_enhanced: bool,
) -> Result<DesignOfExperiments> {
    select_doe_with(basis, pool, DoeSettings::new(n_o, sensitivity_enhanced))
}

pub fn select_doe_with(
    basis: &MultivariateBasis,
    pool: &CandidatePool,
    settings: DoeSettings,
) -> Result<DesignOfExperiments> {
    if settings.n_o == 0 {
        return Err(DoeError::InvalidOversampling);
    }
    if basis.len() < 2 {
        return Err(DoeError::ConstantBasis);
    }
    let n_terms = basis.len();
    let n_u = basis.n_inputs();
    let (q_a, q_se) = sample_counts(n_terms, n_u, settings.n_o);
    let q = if settings.sensitivity_enhanced { q_se } else { q_a };
    if pool.len() < q_a {
        return Err(DoeError::PoolTooSmall {
            pool: pool.len(),
            required: q_a,
        });
    }
    let ranked = if settings.rank_oversampled { q_a } else { q };

    let psi = eval_basis(basis, pool.points())?;
    let (pool_weights, c) = weights_from_terms(&coherence_terms(psi.view()));
    let mut scaled = psi;
    for (mut row, w) in scaled.axis_iter_mut(Axis(0)).zip(&pool_weights) {
        let s = w.sqrt();
        row.mapv_inplace(|v| v * s);
    }
    let ranking = greedy_ranking(&scaled, ranked)?;

    let selected_indices = ranking.order[..q].to_vec();
    let selected_points = pool.points().select(Axis(0), &selected_indices);
    let weights = selected_indices.iter().map(|&i| pool_weights[i]).collect();
    log::debug!(
        "selected {q} of {} pool points (q_a = {q_a}, P+1 = {n_terms})",
        pool.len()
    );
    Ok(DesignOfExperiments {
        selected_indices,
        selected_points,
        weights,
        oversampled_indices: ranking.order,
        r_diagonal: ranking.r_diagonal,
        extension_leverage: ranking.leverage,
        weight_scale: c,
        n_terms,
        n_o: settings.n_o,
        sensitivity_enhanced: settings.sensitivity_enhanced,
        q,
        q_a,
        seed: pool.seed(),
    })
}

struct Ranking {
    order: Vec<usize>,
    r_diagonal: Vec<f64>,
    leverage: Vec<f64>,
}

/// Greedy determinant ranking of the rows of `a` (`n_s × (P+1)`).
fn greedy_ranking(a: &Array2<f64>, count: usize) -> Result<Ranking> {
    let (n_s, n_terms) = a.dim();
    let qr_steps = count.min(n_terms);
    // Row-major `a` is the column-major layout of `aᵀ`.
    let data = a.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let qr = PivotedQr::from_columns(n_terms, n_s, data, qr_steps);
    let rank = qr.rank(RANK_RTOL);
    if rank < qr_steps {
        return Err(DoeError::RankDeficient {
            rank,
            required: qr_steps,
        });
    }
    let mut order: Vec<usize> = qr.permutation()[..qr_steps].to_vec();
    let r_diagonal = qr.r_diagonal().iter().map(|d| d.abs()).collect();
    let mut leverage = Vec::new();
    if count > n_terms {
        extend_by_leverage(a, &mut order, &mut leverage, count)?;
    }
    Ok(Ranking {
        order,
        r_diagonal,
        leverage,
    })
}

/// Continue a full-rank selection by repeatedly adding the row of largest
/// leverage, updating `C⁻¹` by Sherman-Morrison.
fn extend_by_leverage(
    a: &Array2<f64>,
    order: &mut Vec<usize>,
    leverage: &mut Vec<f64>,
    count: usize,
) -> Result<()> {
    let (n_s, n) = a.dim();
    let mut info = Array2::<f64>::zeros((n, n));
    for &i in order.iter() {
        let row = a.row(i);
        for r in 0..n {
            for s in 0..n {
                info[[r, s]] += row[r] * row[s];
            }
        }
    }
    let chol = cholesky_upper(&info).ok_or(DoeError::RankDeficient {
        rank: order.len() - 1,
        required: n,
    })?;
    let rinv = invert_upper(&chol);
    let mut cinv = rinv.dot(&rinv.t());

    let mut taken = vec![false; n_s];
    for &i in order.iter() {
        taken[i] = true;
    }
    let mut lev: Vec<f64> = (0..n_s)
        .map(|j| {
            if taken[j] {
                f64::NEG_INFINITY
            } else {
                let row = a.row(j);
                row.dot(&cinv.dot(&row))
            }
        })
        .collect();

    while order.len() < count {
        let mut best = usize::MAX;
        let mut best_lev = f64::NEG_INFINITY;
        for (j, &l) in lev.iter().enumerate() {
            if l > best_lev {
                best = j;
                best_lev = l;
            }
        }
        if best == usize::MAX {
            break;
        }
        let u = cinv.dot(&a.row(best));
        let denom = 1.0 + best_lev;
        for r in 0..n {
            for s in 0..n {
                cinv[[r, s]] -= u[r] * u[s] / denom;
            }
        }
        let proj = a.dot(&u);
        for (j, l) in lev.iter_mut().enumerate() {
            if !taken[j] {
                *l = (*l - proj[j] * proj[j] / denom).max(0.0);
            }
        }
        taken[best] = true;
        lev[best] = f64::NEG_INFINITY;
        order.push(best);
        leverage.push(best_lev);
    }
    Ok(())
}
