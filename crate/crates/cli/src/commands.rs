//! Individual pipeline steps that communicate through artifact files.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use apc::doe::{select_doe, CandidatePool};
use apc::models::model_by_name;
use apc::regression::{EvaluationRecord, PceModel};

use crate::artifacts::{read_json, write_atomic, write_json, Provenance};
use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, Stage, StageExt};
use crate::pipeline::{
    assess, build_basis, evaluate_design, fit, prepare, read_basis, write_basis, write_density, DoeArtifact,
    ModelArtifact, RunReport, SummaryArtifact,
};

fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        config_sha256: cfg.sha256(),
        seed: cfg.seed,
    }
}

fn pool(cfg: &ExperimentConfig) -> Result<CandidatePool, CliError> {
    cfg.validate()?;
    let dims = vec![cfg.inputs.clone(); cfg.n_u];
    CandidatePool::sample(&dims, cfg.pool_size, cfg.seed).stage(Stage::Sample)
}

fn mismatch(what: &str, expected: &str, got: &str) -> CliError {
    CliError::Config(format!(
        "{what} was produced by config {got}, expected {expected}"
    ))
}

/// Build the order-`p` basis from the pool moments and write it to `out`.
pub fn cmd_basis(cfg: &ExperimentConfig, p: usize, out: &Path) -> Result<usize, CliError> {
    let pool = pool(cfg)?;
    let (moments, basis) = build_basis(&pool, p)?;
    write_basis(out, &provenance(cfg), p, &moments, &basis)?;
    Ok(basis.len())
}

/// Select the design for the basis in `basis_path` and write it to `out`.
/// With `records_out`, also evaluate the model there and write one JSON
/// record per line.
pub fn cmd_doe(
    cfg: &ExperimentConfig,
    basis_path: &Path,
    out: &Path,
    records_out: Option<&Path>,
) -> Result<(usize, usize), CliError> {
    let prov = provenance(cfg);
    let stored = read_json::<crate::pipeline::BasisArtifact>(basis_path)?;
    if stored.provenance.config_sha256 != prov.config_sha256 {
        return Err(mismatch(
            "basis",
            &prov.config_sha256,
            &stored.provenance.config_sha256,
        ));
    }
    let pool = pool(cfg)?;
    let basis = stored.body.basis;
    let doe = select_doe(&basis, &pool, cfg.n_o, cfg.method.uses_gradients()).stage(Stage::Doe)?;
    let counts = (doe.q, doe.q_a);
    if let Some(path) = records_out {
        let model = model_by_name(&cfg.model, cfg.n_u).map_err(|e| CliError::Config(e.to_string()))?;
        let records = evaluate_design(model.as_ref(), &doe, cfg.method.uses_gradients())?;
        write_records(path, &records)?;
    }
    write_json(
        out,
        &prov,
        DoeArtifact {
            method: cfg.method,
            order: stored.body.order,
            doe,
        },
    )?;
    Ok(counts)
}

pub fn write_records(path: &Path, records: &[EvaluationRecord]) -> Result<(), CliError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).stage(Stage::Write)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_records(path: &Path) -> Result<Vec<EvaluationRecord>, CliError> {
    let file = std::fs::File::open(path).stage(Stage::Read)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.stage(Stage::Read)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).stage(Stage::Read)?);
    }
    Ok(records)
}

/// Fit a surrogate from a basis, a design and evaluation records. Each
/// record takes the design weight of its `doe_index`.
pub fn cmd_fit(
    basis_path: &Path,
    doe_path: &Path,
    records_path: &Path,
    method: Method,
    out: &Path,
) -> Result<PceModel, CliError> {
    let basis = read_json::<crate::pipeline::BasisArtifact>(basis_path)?;
    let doe = read_json::<DoeArtifact>(doe_path)?;
    if basis.provenance != doe.provenance {
        return Err(mismatch(
            "design",
            &basis.provenance.config_sha256,
            &doe.provenance.config_sha256,
        ));
    }
    let records = read_records(records_path)?;
    let weights = records
        .iter()
        .map(|r| {
            r.doe_index
                .and_then(|i| doe.body.doe.weights.get(i).copied())
                .ok_or_else(|| CliError::Config("record without a valid doe_index".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let model = fit(method, Arc::new(basis.body.basis), &records, &weights)?;
    write_json(
        out,
        &basis.provenance,
        ModelArtifact {
            method,
            order: basis.body.order,
            model: model.export(),
        },
    )?;
    Ok(model)
}

/// Compare a stored surrogate with the Monte Carlo reference on the pool and
/// write summary.json and density.csv into `out_dir`.
pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    basis_path: &Path,
    model_path: &Path,
    out_dir: &Path,
    mc_cache: Option<&Path>,
) -> Result<RunReport, CliError> {
    let prep = prepare(cfg, mc_cache)?;
    let basis = read_basis(basis_path)?;
    let stored = read_json::<ModelArtifact>(model_path)?;
    if stored.provenance != prep.provenance {
        return Err(mismatch(
            "model",
            &prep.provenance.config_sha256,
            &stored.provenance.config_sha256,
        ));
    }
    let model = PceModel::from_export(stored.body.model, Arc::new(basis.basis)).stage(Stage::Read)?;
    let q_a = model.diagnostics().rows;
    let q = if stored.body.method.uses_gradients() {
        q_a / (cfg.n_u + 1)
    } else {
        q_a
    };
    let (summary, density, report) = assess(&prep, stored.body.method, stored.body.order, &model, q, q_a)?;
    write_json(
        &out_dir.join("summary.json"),
        &prep.provenance,
        SummaryArtifact {
            report: report.clone(),
            summary,
        },
    )?;
    write_density(&out_dir.join("density.csv"), &prep.provenance, &density)?;
    Ok(report)
}
