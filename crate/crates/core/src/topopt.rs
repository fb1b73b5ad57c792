//! SIMP compliance minimization of the MBB half-beam and uncertainty
//! propagation through the optimized design.
//!
//! Elements are bilinear plane-stress quads on a unit grid, numbered
//! column-major: element `e = ely + elx * nely`, with `ely = 0` on the top
//! row. Nodes follow the same convention with `nely + 1` nodes per column,
//! and node `n` owns dofs `2n` (x) and `2n + 1` (y). The left edge carries
//! symmetry rollers, the bottom-right node a vertical roller, and a unit
//! downward load acts at the top-left node.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    analytic_moments, mc_sensitivity_heatmap, sobol_first_order, AnalysisError, SampleStatistics,
};
use crate::apc_basis::{BasisError, MomentSet, MultivariateBasis};
use crate::doe::{select_doe_with, CandidatePool, DoeError, DoeSettings};
use crate::linalg::SymBandMatrix;
use crate::models::{Distribution, Model, ModelError};
use crate::regression::{
    fit_sensitivity_enhanced, fit_wlsq, EvaluationRecord, PceModel, RegressionError,
};

#[derive(Debug, Error)]
pub enum TopOptError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} densities, got {got}")]
    DensityCount { expected: usize, got: usize },
    #[error("density {index} = {value} lies outside [0, 1]")]
    DensityOutOfRange { index: usize, value: f64 },
    #[error("stiffness matrix is singular (pivot {pivot})")]
    SingularStiffness { pivot: usize },
    #[error("design has no intermediate-density elements")]
    NoUncertainElements,
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Doe(#[from] DoeError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Distribution(#[from] ModelError),
}

pub type Result<T, E = TopOptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopOptConfig {
    pub nelx: usize,
    pub nely: usize,
    pub volfrac: f64,
    pub penal: f64,
    /// Filter radius in element widths.
    pub rmin: f64,
    pub e0: f64,
    pub emin: f64,
    pub nu: f64,
    /// Stop when the largest density change falls below this.
    pub change_tol: f64,
    pub max_iterations: usize,
    /// Elements with `τ < x < 1 - τ` are treated as uncertain.
    pub intermediate_threshold: f64,
}

impl Default for TopOptConfig {
    fn default() -> Self {
        Self {
            nelx: 40,
            nely: 20,
            volfrac: 0.5,
            penal: 3.0,
            rmin: 1.5,
            e0: 1.0,
            emin: 1e-9,
            nu: 0.3,
            change_tol: 0.01,
            max_iterations: 200,
            intermediate_threshold: 0.01,
        }
    }
}

impl TopOptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TopOptError::InvalidConfig(m.to_string()));
        if self.nelx == 0 || self.nely == 0 {
            return bad("nelx and nely must be at least 1");
        }
        if !(self.volfrac > 0.0 && self.volfrac < 1.0) {
            return bad("volfrac must lie in (0, 1)");
        }
        if !(self.penal >= 1.0) {
            return bad("penal must be at least 1");
        }
        if !(self.rmin > 0.0) {
            return bad("rmin must be positive");
        }
        if !(self.e0 > 0.0 && self.emin > 0.0 && self.emin < self.e0) {
            return bad("need 0 < Emin < E0");
        }
        if !(self.nu > -1.0 && self.nu < 0.5) {
            return bad("nu must lie in (-1, 0.5)");
        }
        if !(self.intermediate_threshold >= 0.0 && self.intermediate_threshold < 0.5) {
            return bad("intermediate threshold must lie in [0, 0.5)");
        }
        Ok(())
    }

    pub fn n_elements(&self) -> usize {
        self.nelx * self.nely
    }

    pub fn n_dofs(&self) -> usize {
        2 * (self.nelx + 1) * (self.nely + 1)
    }
}

/// Unit-modulus stiffness matrix of a square bilinear plane-stress element.
pub fn element_stiffness(nu: f64) -> [[f64; 8]; 8] {
    let a11 = [
        [12.0, 3.0, -6.0, -3.0],
        [3.0, 12.0, 3.0, 0.0],
        [-6.0, 3.0, 12.0, -3.0],
        [-3.0, 0.0, -3.0, 12.0],
    ];
    let a12 = [
        [-6.0, -3.0, 0.0, 3.0],
        [-3.0, -6.0, -3.0, -6.0],
        [0.0, -3.0, -6.0, 3.0],
        [3.0, -6.0, 3.0, -6.0],
    ];
    let b11 = [
        [-4.0, 3.0, -2.0, 9.0],
        [3.0, -4.0, -9.0, 4.0],
        [-2.0, -9.0, -4.0, -3.0],
        [9.0, 4.0, -3.0, -4.0],
    ];
    let b12 = [
        [2.0, -3.0, 4.0, -9.0],
        [-3.0, 2.0, 9.0, -2.0],
        [4.0, 9.0, 2.0, 3.0],
        [-9.0, -2.0, 3.0, 2.0],
    ];
    let scale = 1.0 / (1.0 - nu * nu) / 24.0;
    let mut ke = [[0.0; 8]; 8];
    for i in 0..4 {
        for j in 0..4 {
            ke[i][j] = scale * (a11[i][j] + nu * b11[i][j]);
            ke[i][j + 4] = scale * (a12[i][j] + nu * b12[i][j]);
            ke[i + 4][j] = scale * (a12[j][i] + nu * b12[j][i]);
            ke[i + 4][j + 4] = scale * (a11[i][j] + nu * b11[i][j]);
        }
    }
    ke
}

/// Finite-element discretization shared by every solve on one grid.
#[derive(Debug, Clone)]
struct Mesh {
    ke: [[f64; 8]; 8],
    edofs: Vec<[usize; 8]>,
    /// Position of each dof among the free dofs, `None` if fixed.
    free_index: Vec<Option<usize>>,
    n_free: usize,
    bandwidth: usize,
    /// Load restricted to the free dofs.
    load: Vec<f64>,
}

impl Mesh {
    fn new(cfg: &TopOptConfig) -> Self {
        let (nelx, nely) = (cfg.nelx, cfg.nely);
        let mut edofs = Vec::with_capacity(cfg.n_elements());
        for elx in 0..nelx {
            for ely in 0..nely {
                let a = (nely + 1) * elx + ely;
                let b = (nely + 1) * (elx + 1) + ely;
                edofs.push([
                    2 * (a + 1),
                    2 * (a + 1) + 1,
                    2 * (b + 1),
                    2 * (b + 1) + 1,
                    2 * b,
                    2 * b + 1,
                    2 * a,
                    2 * a + 1,
                ]);
            }
        }
        let n = cfg.n_dofs();
        let mut fixed = vec![false; n];
        for k in 0..=nely {
            fixed[2 * k] = true;
        }
        fixed[n - 1] = true;
        let mut free_index = vec![None; n];
        let mut n_free = 0;
        for (d, f) in fixed.iter().enumerate() {
            if !f {
                free_index[d] = Some(n_free);
                n_free += 1;
            }
        }
        let mut load = vec![0.0; n_free];
        if let Some(i) = free_index[1] {
            load[i] = -1.0;
        }
        let bandwidth = edofs
            .iter()
            .map(|ed| {
                let idx: Vec<usize> = ed.iter().filter_map(|&d| free_index[d]).collect();
                idx.iter().max().unwrap_or(&0) - idx.iter().min().unwrap_or(&0)
            })
            .max()
            .unwrap_or(0);
        Self {
            ke: element_stiffness(cfg.nu),
            edofs,
            free_index,
            n_free,
            bandwidth,
            load,
        }
    }

    /// Full displacement vector for element moduli `moduli`.
    fn solve(&self, moduli: &[f64]) -> Result<Vec<f64>> {
        let mut k = SymBandMatrix::zeros(self.n_free, self.bandwidth);
        for (ed, &e) in self.edofs.iter().zip(moduli) {
            for i in 0..8 {
                let Some(gi) = self.free_index[ed[i]] else {
                    continue;
                };
                for j in 0..8 {
                    if let Some(gj) = self.free_index[ed[j]] {
                        if gi >= gj {
                            k.add(gi, gj, e * self.ke[i][j]);
                        }
                    }
                }
            }
        }
        let chol = k
            .factorize()
            .map_err(|pivot| TopOptError::SingularStiffness { pivot })?;
        let uf = chol.solve(&self.load);
        let mut u = vec![0.0; self.free_index.len()];
        for (d, fi) in self.free_index.iter().enumerate() {
            if let Some(i) = fi {
                u[d] = uf[*i];
            }
        }
        Ok(u)
    }

    /// `u_eᵀ k0 u_e` for every element.
    fn element_energies(&self, u: &[f64]) -> Vec<f64> {
        self.edofs
            .iter()
            .map(|ed| {
                let ue: [f64; 8] = std::array::from_fn(|i| u[ed[i]]);
                let mut s = 0.0;
                for i in 0..8 {
                    let mut row = 0.0;
                    for j in 0..8 {
                        row += self.ke[i][j] * ue[j];
                    }
                    s += ue[i] * row;
                }
                s
            })
            .collect()
    }
}

/// Linear density filter weights `max(0, rmin - dist)`.
#[derive(Debug, Clone)]
struct SensitivityFilter {
    neighbours: Vec<Vec<(usize, f64)>>,
    weight_sums: Vec<f64>,
}

impl SensitivityFilter {
    fn new(cfg: &TopOptConfig) -> Self {
        let (nelx, nely) = (cfg.nelx as isize, cfg.nely as isize);
        let reach = cfg.rmin.ceil() as isize - 1;
        let mut neighbours = Vec::with_capacity(cfg.n_elements());
        for i1 in 0..nelx {
            for j1 in 0..nely {
                let mut list = Vec::new();
                for i2 in (i1 - reach).max(0)..=(i1 + reach).min(nelx - 1) {
                    for j2 in (j1 - reach).max(0)..=(j1 + reach).min(nely - 1) {
                        let dist = (((i1 - i2).pow(2) + (j1 - j2).pow(2)) as f64).sqrt();
                        let w = (cfg.rmin - dist).max(0.0);
                        if w > 0.0 {
                            list.push(((i2 * nely + j2) as usize, w));
                        }
                    }
                }
                neighbours.push(list);
            }
        }
        let weight_sums = neighbours
            .iter()
            .map(|l| l.iter().map(|(_, w)| w).sum())
            .collect();
        Self {
            neighbours,
            weight_sums,
        }
    }

    /// `H (x ∘ dc) / Hs / max(1e-3, x)`.
    fn apply(&self, x: &[f64], dc: &[f64]) -> Vec<f64> {
        self.neighbours
            .iter()
            .enumerate()
            .map(|(e, list)| {
                let s: f64 = list.iter().map(|&(k, w)| w * x[k] * dc[k]).sum();
                s / self.weight_sums[e] / x[e].max(1e-3)
            })
            .collect()
    }
}

/// Optimized design plus everything needed to re-evaluate it.
#[derive(Debug, Clone)]
pub struct TopOptStructure {
    config: TopOptConfig,
    mesh: Arc<Mesh>,
    densities: Vec<f64>,
    uncertain_indices: Vec<usize>,
    compliance_history: Vec<f64>,
    converged: bool,
}

impl TopOptStructure {
    pub fn config(&self) -> &TopOptConfig {
        &self.config
    }

    /// Element densities, indexed `ely + elx * nely`.
    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    /// Elements with intermediate density, ascending.
    pub fn uncertain_indices(&self) -> &[usize] {
        &self.uncertain_indices
    }

    /// Compliance at the start of every optimizer iteration.
    pub fn compliance_history(&self) -> &[f64] {
        &self.compliance_history
    }

    pub fn iterations(&self) -> usize {
        self.compliance_history.len()
    }

    /// Whether the change tolerance was met before the iteration cap.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn element_stiffness(&self) -> &[[f64; 8]; 8] {
        &self.mesh.ke
    }

    /// Density field as an `nely × nelx` grid (row = y, column = x).
    pub fn density_grid(&self) -> Array2<f64> {
        element_grid(&self.config, &self.densities)
    }

    /// Densities with the uncertain elements replaced by `values`.
    pub fn with_uncertain(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.uncertain_indices.len() {
            return Err(TopOptError::DensityCount {
                expected: self.uncertain_indices.len(),
                got: values.len(),
            });
        }
        let mut x = self.densities.clone();
        for (&e, &v) in self.uncertain_indices.iter().zip(values) {
            x[e] = v;
        }
        Ok(x)
    }

    /// Nodal displacements for a full density field.
    pub fn displacements(&self, densities: &[f64]) -> Result<Vec<f64>> {
        check_densities(&self.config, densities)?;
        self.mesh.solve(&moduli(&self.config, densities))
    }
}

/// Per-element values laid out as an `nely × nelx` grid.
pub fn element_grid(cfg: &TopOptConfig, values: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((cfg.nely, cfg.nelx), |(y, x)| values[y + x * cfg.nely])
}

fn moduli(cfg: &TopOptConfig, x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xe| cfg.emin + xe.powf(cfg.penal) * (cfg.e0 - cfg.emin))
        .collect()
}

fn check_densities(cfg: &TopOptConfig, x: &[f64]) -> Result<()> {
    if x.len() != cfg.n_elements() {
        return Err(TopOptError::DensityCount {
            expected: cfg.n_elements(),
            got: x.len(),
        });
    }
    if let Some(index) = x.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(TopOptError::DensityOutOfRange {
            index,
            value: x[index],
        });
    }
    Ok(())
}

/// Compliance and its sensitivities at one density field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceEvaluation {
    pub compliance: f64,
    /// `∂C/∂x_e` for the uncertain elements, in `uncertain_indices` order.
    pub gradient: Vec<f64>,
}

fn compliance_and_sensitivities(cfg: &TopOptConfig, mesh: &Mesh, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let u = mesh.solve(&moduli(cfg, x))?;
    let ce = mesh.element_energies(&u);
    let mut c = 0.0;
    let dc = x
        .iter()
        .zip(&ce)
        .map(|(&xe, &cee)| {
            c += (cfg.emin + xe.powf(cfg.penal) * (cfg.e0 - cfg.emin)) * cee;
            -cfg.penal * xe.powf(cfg.penal - 1.0) * (cfg.e0 - cfg.emin) * cee
        })
        .collect();
    Ok((c, dc))
}

/// `C = uᵀKu` and `∂C/∂x_e = -penal x_e^(penal-1) (E0 - Emin) u_eᵀ k0 u_e`.
pub fn evaluate_compliance(
    structure: &TopOptStructure,
    densities: &[f64],
) -> Result<ComplianceEvaluation> {
    let (compliance, full) = evaluate_compliance_full(structure, densities)?;
    Ok(ComplianceEvaluation {
        compliance,
        gradient: structure.uncertain_indices.iter().map(|&e| full[e]).collect(),
    })
}

/// Compliance with the sensitivity of every element.
pub fn evaluate_compliance_full(
    structure: &TopOptStructure,
    densities: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_densities(&structure.config, densities)?;
    compliance_and_sensitivities(&structure.config, &structure.mesh, densities)
}

/// Optimality-criteria SIMP loop with sensitivity filtering.
pub fn optimize_structure(cfg: &TopOptConfig) -> Result<TopOptStructure> {
    cfg.validate()?;
    let mesh = Mesh::new(cfg);
    let filter = SensitivityFilter::new(cfg);
    let n = cfg.n_elements();
    let target = cfg.volfrac * n as f64;
    let mut x = vec![cfg.volfrac; n];
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_iterations {
        let (c, dc) = compliance_and_sensitivities(cfg, &mesh, &x)?;
        history.push(c);
        let dc = filter.apply(&x, &dc);
        let xnew = oc_update(&x, &dc, target);
        let change = x
            .iter()
            .zip(&xnew)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = xnew;
        log::trace!("iteration {}: compliance {c:.6}, change {change:.4}", history.len());
        if change < cfg.change_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "optimizer stopped at the iteration cap ({}) before meeting the change tolerance",
            cfg.max_iterations
        );
    }
    let t = cfg.intermediate_threshold;
    let uncertain_indices = (0..n).filter(|&e| x[e] > t && x[e] < 1.0 - t).collect();
    Ok(TopOptStructure {
        config: cfg.clone(),
        mesh: Arc::new(mesh),
        densities: x,
        uncertain_indices,
        compliance_history: history,
        converged,
    })
}

/// Bisection on the volume multiplier, with move limit 0.2.
fn oc_update(x: &[f64], dc: &[f64], target: f64) -> Vec<f64> {
    const MOVE: f64 = 0.2;
    let (mut l1, mut l2) = (0.0f64, 1e9f64);
    let mut xnew = x.to_vec();
    while (l2 - l1) / (l1 + l2) > 1e-9 {
        let lmid = 0.5 * (l2 + l1);
        for ((xn, &xe), &d) in xnew.iter_mut().zip(x).zip(dc) {
            let be = (-d / lmid).max(0.0).sqrt();
            *xn = (xe * be).min(xe + MOVE).min(1.0).max(xe - MOVE).max(0.0);
        }
        if xnew.iter().sum::<f64>() > target {
            l1 = lmid;
        } else {
            l2 = lmid;
        }
    }
    xnew
}

/// Compliance as a function of the uncertain element densities.
pub struct UncertainCompliance<'a> {
    structure: &'a TopOptStructure,
}

impl<'a> UncertainCompliance<'a> {
    pub fn new(structure: &'a TopOptStructure) -> Self {
        Self { structure }
    }
}

impl Model for UncertainCompliance<'_> {
    fn name(&self) -> &str {
        "compliance"
    }

    fn n_inputs(&self) -> usize {
        self.structure.uncertain_indices.len()
    }

    fn evaluate(&self, point: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        let x = self
            .structure
            .with_uncertain(point)
            .map_err(|e| ModelError::Evaluation(e.to_string()))?;
        evaluate_compliance(self.structure, &x)
            .map(|ev| (ev.compliance, ev.gradient))
            .map_err(|e| ModelError::Evaluation(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UqSettings {
    /// Standard deviation of each uncertain density before truncation.
    pub sd: f64,
    pub pool_size: usize,
    /// Oversampling ratios for the gradient-enhanced fits.
    pub oversampling: Vec<usize>,
    /// Oversampling ratios for value-only fits (may be empty).
    pub wlsq_oversampling: Vec<usize>,
    pub seed: u64,
}

impl Default for UqSettings {
    fn default() -> Self {
        Self {
            sd: 0.05,
            pool_size: 10_000,
            oversampling: vec![1, 2, 4, 8, 16],
            wlsq_oversampling: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReference {
    pub samples: usize,
    pub mean: f64,
    pub std_dev: f64,
    /// Mean-absolute-sensitivity share of each uncertain element.
    pub heatmap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqRow {
    /// `sear-pc` or `wlsq-apc`.
    pub method: String,
    pub n_o: usize,
    pub q: usize,
    pub mean: f64,
    pub std_dev: f64,
    /// Sobol index of each uncertain element.
    pub sobol: Vec<f64>,
    pub condition_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqStudy {
    pub n_u: usize,
    pub uncertain_indices: Vec<usize>,
    pub reference: McReference,
    pub rows: Vec<UqRow>,
}

/// Per-element truncated normals around the optimized densities.
pub fn uncertain_inputs(structure: &TopOptStructure, sd: f64) -> Vec<Distribution> {
    structure
        .uncertain_indices
        .iter()
        .map(|&e| Distribution::TruncatedNormal {
            mean: structure.densities[e],
            sd,
            lower: 0.0,
            upper: 1.0,
        })
        .collect()
}

/// First-order expansions of the compliance fitted from `q` pool points,
/// compared with direct sampling over the whole pool.
///
/// Every pool point is evaluated once for the reference; fits reuse those
/// evaluations at the selected points.
pub fn uq_study(structure: &TopOptStructure, settings: &UqSettings) -> Result<UqStudy> {
    if !(settings.sd > 0.0) {
        return Err(TopOptError::InvalidConfig("sd must be positive".into()));
    }
    let n_u = structure.uncertain_indices.len();
    if n_u == 0 {
        return Err(TopOptError::NoUncertainElements);
    }
    let dims = uncertain_inputs(structure, settings.sd);
    let moments = dims
        .iter()
        .map(|d| Ok(MomentSet::new(d.raw_moments(2)?)?))
        .collect::<Result<Vec<_>>>()?;
    let basis = Arc::new(MultivariateBasis::from_moments(&moments, 1)?);
    let pool = CandidatePool::sample(&dims, settings.pool_size, settings.seed)?;

    let model = UncertainCompliance::new(structure);
    let mut values = Vec::with_capacity(pool.len());
    let mut gradients = Array2::zeros((pool.len(), n_u));
    for (m, point) in pool.points().outer_iter().enumerate() {
        let (v, g) = model.evaluate(point.as_slice().expect("row-major pool"))?;
        values.push(v);
        gradients.row_mut(m).assign(&ndarray::Array1::from(g));
    }
    let stats = SampleStatistics::of(&values)?;
    let reference = McReference {
        samples: pool.len(),
        mean: stats.mean,
        std_dev: stats.std_dev,
        heatmap: mc_sensitivity_heatmap(gradients.view())?,
    };
    log::info!(
        "{n_u} uncertain elements, reference mean {:.6} sd {:.6}",
        reference.mean,
        reference.std_dev
    );

    let record = |i: usize, with_gradient: bool| EvaluationRecord {
        point: pool.points().row(i).to_vec(),
        value: values[i],
        gradient: with_gradient.then(|| gradients.row(i).to_vec()),
        doe_index: None,
    };
    let summarize = |method: &str, n_o: usize, model: PceModel| -> Result<UqRow> {
        let (mean, var) = analytic_moments(&model);
        Ok(UqRow {
            method: method.to_string(),
            n_o,
            q: model.diagnostics().rows / if method == "sear-pc" { n_u + 1 } else { 1 },
            mean,
            std_dev: var.sqrt(),
            sobol: sobol_first_order(&model)?,
            condition_estimate: model.diagnostics().condition_estimate,
        })
    };

    let mut rows = Vec::new();
    for &n_o in &settings.oversampling {
        let doe = select_doe_with(
            &basis,
            &pool,
            DoeSettings {
                rank_oversampled: false,
                ..DoeSettings::new(n_o, true)
            },
        )?;
        let records: Vec<_> = doe.selected_indices.iter().map(|&i| record(i, true)).collect();
        let fit = fit_sensitivity_enhanced(basis.clone(), &records, &doe.weights)?;
        rows.push(summarize("sear-pc", n_o, fit)?);
    }
    for &n_o in &settings.wlsq_oversampling {
        let doe = select_doe_with(&basis, &pool, DoeSettings::new(n_o, false))?;
        let records: Vec<_> = doe.selected_indices.iter().map(|&i| record(i, false)).collect();
        let fit = fit_wlsq(basis.clone(), &records, &doe.weights)?;
        rows.push(summarize("wlsq-apc", n_o, fit)?);
    }
    Ok(UqStudy {
        n_u,
        uncertain_indices: structure.uncertain_indices.clone(),
        reference,
        rows,
    })
}

/// Spread per-uncertain-element values onto the full element grid (zero
/// elsewhere), laid out `nely × nelx`.
pub fn uncertain_heatmap(structure: &TopOptStructure, values: &[f64]) -> Array2<f64> {
    let mut full = vec![0.0; structure.config.n_elements()];
    for (&e, &v) in structure.uncertain_indices.iter().zip(values) {
        full[e] = v;
    }
    element_grid(&structure.config, &full)
}

/// Fraction of the top `fraction` entries of `a` that are also among the top
/// `fraction` entries of `b`.
pub fn top_fraction_overlap(a: &[f64], b: &[f64], fraction: f64) -> f64 {
    let k = ((a.len() as f64 * fraction).ceil() as usize).clamp(1, a.len().max(1));
    let top = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
        idx.truncate(k);
        idx
    };
    let ta = top(a);
    let tb = top(b);
    ta.iter().filter(|i| tb.contains(i)).count() as f64 / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TopOptConfig {
        TopOptConfig {
            nelx: 12,
            nely: 6,
            ..TopOptConfig::default()
        }
    }

    #[test]
    fn element_stiffness_is_symmetric_with_rigid_modes() {
        let ke = element_stiffness(0.3);
        for i in 0..8 {
            for j in 0..8 {
                assert!((ke[i][j] - ke[j][i]).abs() < 1e-15);
            }
            // Rigid translations in x and y produce no force.
            let fx: f64 = (0..4).map(|n| ke[i][2 * n]).sum();
            let fy: f64 = (0..4).map(|n| ke[i][2 * n + 1]).sum();
            assert!(fx.abs() < 1e-14 && fy.abs() < 1e-14);
        }
    }

    #[test]
    fn bandwidth_matches_grid_height() {
        let cfg = TopOptConfig::default();
        let mesh = Mesh::new(&cfg);
        assert!(mesh.bandwidth <= 2 * (cfg.nely + 1) + 3);
        assert_eq!(mesh.n_free, cfg.n_dofs() - (cfg.nely + 2));
    }

    #[test]
    fn band_solve_matches_dense_solve() {
        let cfg = TopOptConfig {
            nelx: 4,
            nely: 3,
            ..TopOptConfig::default()
        };
        let mesh = Mesh::new(&cfg);
        let x: Vec<f64> = (0..cfg.n_elements()).map(|e| 0.3 + 0.05 * e as f64 % 0.7).collect();
        let e = moduli(&cfg, &x);
        let n = mesh.n_free;
        let mut k = nalgebra::DMatrix::<f64>::zeros(n, n);
        for (ed, &ee) in mesh.edofs.iter().zip(&e) {
            for i in 0..8 {
                for j in 0..8 {
                    if let (Some(a), Some(b)) = (mesh.free_index[ed[i]], mesh.free_index[ed[j]]) {
                        k[(a, b)] += ee * mesh.ke[i][j];
                    }
                }
            }
        }
        let f = nalgebra::DVector::from_column_slice(&mesh.load);
        let dense = k.lu().solve(&f).unwrap();
        let u = mesh.solve(&e).unwrap();
        for (d, fi) in mesh.free_index.iter().enumerate() {
            match fi {
                Some(i) => assert!((u[d] - dense[*i]).abs() < 1e-9 * dense.amax()),
                None => assert_eq!(u[d], 0.0),
            }
        }
    }

    #[test]
    fn small_problem_meets_volume_and_symmetry_conditions() {
        let s = optimize_structure(&small()).unwrap();
        let mean = s.densities().iter().sum::<f64>() / s.densities().len() as f64;
        assert!((mean - 0.5).abs() < 1e-4, "volume {mean}");
        // No horizontal motion on the symmetry edge.
        let u = s.displacements(s.densities()).unwrap();
        for k in 0..=s.config().nely {
            assert_eq!(u[2 * k], 0.0);
        }
        assert!(s.compliance_history().last().unwrap() < &s.compliance_history()[0]);
    }

    #[test]
    fn scaling_moduli_scales_compliance() {
        let s = optimize_structure(&small()).unwrap();
        let c1 = evaluate_compliance(&s, s.densities()).unwrap().compliance;
        let mut doubled = s.clone();
        doubled.config.e0 *= 2.0;
        doubled.config.emin *= 2.0;
        let c2 = evaluate_compliance(&doubled, s.densities()).unwrap().compliance;
        assert!((c1 / c2 - 2.0).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = optimize_structure(&small()).unwrap();
        let x = s.densities().to_vec();
        let ev = evaluate_compliance(&s, &x).unwrap();
        assert!(ev.gradient.iter().all(|g| *g <= 0.0));
        let h = 1e-5;
        for (k, &e) in s.uncertain_indices().iter().enumerate().take(10) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[e] += h;
            xm[e] -= h;
            let fd = (evaluate_compliance(&s, &xp).unwrap().compliance
                - evaluate_compliance(&s, &xm).unwrap().compliance)
                / (2.0 * h);
            assert!(
                (fd - ev.gradient[k]).abs() <= 1e-4 * ev.gradient[k].abs(),
                "element {e}: fd {fd} vs {}",
                ev.gradient[k]
            );
        }
    }

    #[test]
    fn density_validation() {
        let s = optimize_structure(&small()).unwrap();
        let mut x = s.densities().to_vec();
        x[0] = 1.5;
        assert!(matches!(
            evaluate_compliance(&s, &x),
            Err(TopOptError::DensityOutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            evaluate_compliance(&s, &x[1..]),
            Err(TopOptError::DensityCount { .. })
        ));
        assert!(optimize_structure(&TopOptConfig {
            volfrac: 1.0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn void_structure_is_nearly_singular_but_solvable() {
        let s = optimize_structure(&small()).unwrap();
        let c_void = evaluate_compliance(&s, &vec![0.0; 72]).unwrap().compliance;
        let c_solid = evaluate_compliance(&s, &vec![1.0; 72]).unwrap().compliance;
        assert!((c_void / c_solid - 1e9).abs() / 1e9 < 1e-6);
    }

    #[test]
    fn overlap_of_top_sets() {
        let a = [5.0, 4.0, 3.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = [0.0, 4.0, 3.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 9.0];
        assert_eq!(top_fraction_overlap(&a, &b, 0.2), 0.5);
        assert_eq!(top_fraction_overlap(&a, &a, 0.1), 1.0);
    }

    #[test]
    fn heatmap_layout() {
        let s = optimize_structure(&small()).unwrap();
        let ones = vec![1.0; s.uncertain_indices().len()];
        let g = uncertain_heatmap(&s, &ones);
        assert_eq!(g.dim(), (6, 12));
        let e = s.uncertain_indices()[0];
        assert_eq!(g[[e % 6, e / 6]], 1.0);
    }
}
