//! End-to-end runs: pool, moments, basis, design, evaluations, fit, analysis.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use apc::analysis::{kernel_density, ks_distance, percent_error, DensityEstimate, OutputSummary, SampleStatistics};
use apc::apc_basis::{basis_cardinality, compute_moments, MomentSet, MultivariateBasis};
use apc::doe::{sample_counts, select_doe, CandidatePool, DesignOfExperiments};
use apc::models::{model_by_name, Model};
use apc::regression::{fit_sensitivity_enhanced, fit_wlsq, EvaluationRecord, PceModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{fmt_f64, read_json, write_csv, write_json, Provenance};
use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, Stage, StageExt};

/// Pool, model and direct Monte Carlo reference shared by every order of a run.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub pool: CandidatePool,
    pub model: Box<dyn Model + Send + Sync>,
    /// Model output at every pool point.
    pub reference: Vec<f64>,
    pub reference_stats: SampleStatistics,
}

/// Stored Monte Carlo reference, keyed by everything that determines it.
#[derive(Debug, Serialize, Deserialize)]
struct McCache {
    key: String,
    values: Vec<f64>,
}

fn reference_key(cfg: &ExperimentConfig) -> String {
    let key = serde_json::json!({
        "model": cfg.model,
        "inputs": cfg.inputs,
        "n_u": cfg.n_u,
        "pool_size": cfg.pool_size,
        "seed": cfg.seed,
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

fn load_cache(path: &Path, key: &str) -> Option<Vec<f64>> {
    let text = std::fs::read_to_string(path).ok()?;
    let cache: McCache = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("ignoring unreadable Monte Carlo cache {}: {e}", path.display());
            return None;
        }
    };
    if cache.key != key {
        log::info!("Monte Carlo cache {} belongs to another experiment", path.display());
        return None;
    }
    Some(cache.values)
}

/// Draw the pool and evaluate the model on all of it. With `mc_cache`, the
/// reference values are read from (or stored to) that file.
pub fn prepare(cfg: &ExperimentConfig, mc_cache: Option<&Path>) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let model = model_by_name(&cfg.model, cfg.n_u).map_err(|e| CliError::Config(e.to_string()))?;
    let dims = vec![cfg.inputs.clone(); cfg.n_u];
    let pool = CandidatePool::sample(&dims, cfg.pool_size, cfg.seed).stage(Stage::Sample)?;

    let key = reference_key(cfg);
    let cached = mc_cache.and_then(|p| load_cache(p, &key));
    let reference = match cached {
        Some(values) if values.len() == pool.len() => values,
        _ => {
            let values = pool
                .points()
                .outer_iter()
                .map(|x| model.value(x.as_slice().expect("row-major pool")))
                .collect::<Result<Vec<_>, _>>()
                .stage(Stage::Reference)?;
            if let Some(path) = mc_cache {
                let bytes = serde_json::to_vec(&McCache {
                    key,
                    values: values.clone(),
                })
                .stage(Stage::Write)?;
                crate::artifacts::write_atomic(path, &bytes)?;
            }
            values
        }
    };
    let reference_stats = SampleStatistics::of(&reference).stage(Stage::Reference)?;
    Ok(Prepared {
        config: cfg.clone(),
        provenance: Provenance {
            config_sha256: cfg.sha256(),
            seed: cfg.seed,
        },
        pool,
        model,
        reference,
        reference_stats,
    })
}

/// Per-input moment sets of the pool up to degree `2 p`.
pub fn pool_moments(pool: &CandidatePool, p: usize) -> Result<Vec<MomentSet>, CliError> {
    (0..pool.n_inputs())
        .map(|d| compute_moments(&pool.column(d), p).stage(Stage::Moments))
        .collect()
}

pub fn build_basis(pool: &CandidatePool, p: usize) -> Result<(Vec<MomentSet>, Arc<MultivariateBasis>), CliError> {
    let moments = pool_moments(pool, p)?;
    let basis = MultivariateBasis::from_moments(&moments, p).stage(Stage::Basis)?;
    Ok((moments, Arc::new(basis)))
}

/// Evaluate `model` at the design points, with gradients when `gradients`.
pub fn evaluate_design(
    model: &dyn Model,
    doe: &DesignOfExperiments,
    gradients: bool,
) -> Result<Vec<EvaluationRecord>, CliError> {
    doe.selected_points
        .outer_iter()
        .enumerate()
        .map(|(i, x)| {
            let x = x.to_vec();
            let (value, grad) = model.evaluate(&x).stage(Stage::Evaluate)?;
            Ok(EvaluationRecord {
                point: x,
                value,
                gradient: gradients.then_some(grad),
                doe_index: Some(i),
            })
        })
        .collect()
}

pub fn fit(
    method: Method,
    basis: Arc<MultivariateBasis>,
    records: &[EvaluationRecord],
    weights: &[f64],
) -> Result<PceModel, CliError> {
    match method {
        Method::SearPc => fit_sensitivity_enhanced(basis, records, weights),
        Method::WlsqApc => fit_wlsq(basis, records, weights),
    }
    .stage(Stage::Fit)
}

/// Numbers reported for one (method, order) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub p: usize,
    pub n_terms: usize,
    pub n_o: usize,
    /// Model evaluations used by the fit.
    pub q: usize,
    pub q_a: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub reference_mean: f64,
    pub reference_std_dev: f64,
    pub delta_mu_pct: f64,
    pub delta_sigma_pct: f64,
    pub ks: f64,
    pub condition_estimate: f64,
    pub rank_deficient: bool,
}

pub struct RunOutcome {
    pub moments: Vec<MomentSet>,
    pub basis: Arc<MultivariateBasis>,
    pub doe: DesignOfExperiments,
    pub records: Vec<EvaluationRecord>,
    pub model: PceModel,
    pub summary: OutputSummary,
    pub density: DensityEstimate,
    pub report: RunReport,
}

/// Moments, density and errors of a fitted surrogate against the pool reference.
pub fn assess(
    prep: &Prepared,
    method: Method,
    p: usize,
    model: &PceModel,
    q: usize,
    q_a: usize,
) -> Result<(OutputSummary, DensityEstimate, RunReport), CliError> {
    let surrogate = model.predict_many(prep.pool.points()).stage(Stage::Analyze)?;
    let summary = OutputSummary::from_model(model)
        .and_then(|s| s.with_samples(&surrogate, Some(&prep.reference)))
        .stage(Stage::Analyze)?;
    let density = kernel_density(&surrogate).stage(Stage::Analyze)?;
    let ks = ks_distance(&surrogate, &prep.reference).stage(Stage::Analyze)?;
    let std_dev = summary.std_dev();
    let r = &prep.reference_stats;
    let diag = model.diagnostics();
    let report = RunReport {
        method,
        p,
        n_terms: model.basis().len(),
        n_o: prep.config.n_o,
        q,
        q_a,
        mean: summary.mean,
        std_dev,
        reference_mean: r.mean,
        reference_std_dev: r.std_dev,
        delta_mu_pct: percent_error(summary.mean, r.mean),
        delta_sigma_pct: percent_error(std_dev, r.std_dev),
        ks,
        condition_estimate: diag.condition_estimate,
        rank_deficient: diag.rank_deficient,
    };
    Ok((summary, density, report))
}

/// One pass of the algorithm at order `p`.
pub fn run_order(prep: &Prepared, method: Method, p: usize) -> Result<RunOutcome, CliError> {
    let cfg = &prep.config;
    let (moments, basis) = build_basis(&prep.pool, p)?;
    let doe = select_doe(&basis, &prep.pool, cfg.n_o, method.uses_gradients()).stage(Stage::Doe)?;
    log::info!(
        "{} p={p}: P+1={}, q={}, q_a={}",
        method.name(),
        basis.len(),
        doe.q,
        doe.q_a
    );
    let records = evaluate_design(prep.model.as_ref(), &doe, method.uses_gradients())?;
    let model = fit(method, basis.clone(), &records, &doe.weights)?;
    let diag = model.diagnostics();
    log::info!(
        "{} p={p}: condition estimate {:.3e}, residual {:.3e}",
        method.name(),
        diag.condition_estimate,
        diag.residual_norm
    );

    let (summary, density, report) = assess(prep, method, p, &model, doe.q, doe.q_a)?;
    Ok(RunOutcome {
        moments,
        basis,
        doe,
        records,
        model,
        summary,
        density,
        report,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BasisArtifact {
    pub order: usize,
    pub moments: Vec<MomentSet>,
    pub basis: MultivariateBasis,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DoeArtifact {
    pub method: Method,
    pub order: usize,
    pub doe: DesignOfExperiments,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub method: Method,
    pub order: usize,
    pub model: apc::regression::PceModelExport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryArtifact {
    pub report: RunReport,
    pub summary: OutputSummary,
}

pub fn write_basis(path: &Path, prov: &Provenance, order: usize, moments: &[MomentSet], basis: &MultivariateBasis) -> Result<(), CliError> {
    write_json(
        path,
        prov,
        serde_json::json!({ "order": order, "moments": moments, "basis": basis }),
    )
}

pub fn read_basis(path: &Path) -> Result<BasisArtifact, CliError> {
    Ok(read_json::<BasisArtifact>(path)?.body)
}

pub fn write_density(path: &Path, prov: &Provenance, density: &DensityEstimate) -> Result<(), CliError> {
    write_csv(
        path,
        prov,
        &["x", "density"],
        density
            .grid
            .iter()
            .zip(&density.density)
            .map(|(x, d)| vec![fmt_f64(*x), fmt_f64(*d)]),
    )
}

/// Directory holding the artifacts of one (method, order) run.
pub fn run_dir(cfg: &ExperimentConfig, method: Method, p: usize) -> PathBuf {
    cfg.output_dir.join(format!("{}-p{p}", method.name()))
}

/// Run every configured order with the configured method and write
/// basis.json, doe.json, model.json, summary.json and density.csv per order.
pub fn run_pipeline(cfg: &ExperimentConfig, mc_cache: Option<&Path>) -> Result<Vec<RunReport>, CliError> {
    let prep = prepare(cfg, mc_cache)?;
    let mut reports = Vec::new();
    for &p in &cfg.orders {
        let out = run_order(&prep, cfg.method, p)?;
        let dir = run_dir(cfg, cfg.method, p);
        let prov = &prep.provenance;
        write_basis(&dir.join("basis.json"), prov, p, &out.moments, &out.basis)?;
        write_json(
            &dir.join("doe.json"),
            prov,
            DoeArtifact {
                method: cfg.method,
                order: p,
                doe: out.doe,
            },
        )?;
        write_json(
            &dir.join("model.json"),
            prov,
            ModelArtifact {
                method: cfg.method,
                order: p,
                model: out.model.export(),
            },
        )?;
        write_json(
            &dir.join("summary.json"),
            prov,
            SummaryArtifact {
                report: out.report.clone(),
                summary: out.summary,
            },
        )?;
        write_density(&dir.join("density.csv"), prov, &out.density)?;
        reports.push(out.report);
    }
    Ok(reports)
}

pub const TABLE_HEADER: [&str; 6] = ["method", "p", "q", "delta_mu_pct", "delta_sigma_pct", "ks"];

/// One row per (method, order), compared with direct Monte Carlo over the
/// pool; written to `table.csv` in the output directory.
pub fn run_convergence_table(
    cfg: &ExperimentConfig,
    methods: &[Method],
    mc_cache: Option<&Path>,
) -> Result<Vec<RunReport>, CliError> {
    let prep = prepare(cfg, mc_cache)?;
    let mut reports = Vec::new();
    for &method in methods {
        for &p in &cfg.orders {
            reports.push(run_order(&prep, method, p)?.report);
        }
    }
    write_csv(
        &cfg.output_dir.join("table.csv"),
        &prep.provenance,
        &TABLE_HEADER,
        reports.iter().map(|r| {
            vec![
                r.method.name().to_string(),
                r.p.to_string(),
                r.q.to_string(),
                fmt_f64(r.delta_mu_pct),
                fmt_f64(r.delta_sigma_pct),
                fmt_f64(r.ks),
            ]
        }),
    )?;
    Ok(reports)
}

/// Evaluation counts implied by the configuration, without sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCount {
    pub method: Method,
    pub p: usize,
    pub n_terms: usize,
    pub q: usize,
    pub q_a: usize,
}

pub fn plan_sample_counts(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Vec<SampleCount>, CliError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &method in methods {
        for &p in &cfg.orders {
            let n_terms = basis_cardinality(cfg.n_u, p)
                .and_then(|c| usize::try_from(c).ok())
                .ok_or_else(|| CliError::Config(format!("basis for n_u={} p={p} is too large", cfg.n_u)))?;
            let (q_a, q_se) = sample_counts(n_terms, cfg.n_u, cfg.n_o);
            let q = if method.uses_gradients() { q_se } else { q_a };
            out.push(SampleCount {
                method,
                p,
                n_terms,
                q,
                q_a,
            });
        }
    }
    Ok(out)
}
