//! Uncertainty study of an optimized MBB half-beam.

use std::path::PathBuf;

use apc::topopt::{
    element_grid, optimize_structure, top_fraction_overlap, uncertain_heatmap, uq_study, TopOptConfig,
    TopOptStructure, UqRow, UqSettings, UqStudy,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{fmt_f64, write_csv, write_grid_csv, write_json, Provenance};
use crate::error::{CliError, Stage, StageExt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopOptStudyConfig {
    pub topopt: TopOptConfig,
    pub uq: UqSettings,
    /// Oversampling ratio of the row whose Sobol indices form the heatmap.
    pub heatmap_n_o: usize,
    /// Share of elements compared between the two heatmaps.
    pub top_fraction: f64,
    pub output_dir: PathBuf,
}

impl Default for TopOptStudyConfig {
    fn default() -> Self {
        Self {
            topopt: TopOptConfig::default(),
            uq: UqSettings::default(),
            heatmap_n_o: 8,
            top_fraction: 0.1,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl TopOptStudyConfig {
    pub fn sha256(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.topopt
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.uq.oversampling.is_empty() {
            return Err(CliError::Config("uq.oversampling must not be empty".into()));
        }
        if !self.uq.oversampling.contains(&self.heatmap_n_o) {
            return Err(CliError::Config(format!(
                "heatmap_n_o = {} is not among uq.oversampling",
                self.heatmap_n_o
            )));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(CliError::Config("top_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

pub struct TopOptStudyOutcome {
    pub structure: TopOptStructure,
    pub study: UqStudy,
    /// Sobol indices of the heatmap row over the `nely × nelx` grid.
    pub sobol_grid: Array2<f64>,
    pub mc_grid: Array2<f64>,
    /// Top-fraction overlap over all grid elements.
    pub overlap_grid: f64,
    /// Top-fraction overlap over the uncertain elements only.
    pub overlap_uncertain: f64,
}

impl TopOptStudyOutcome {
    pub fn heatmap_row(&self, n_o: usize) -> Option<&UqRow> {
        self.study
            .rows
            .iter()
            .find(|r| r.method == "sear-pc" && r.n_o == n_o)
    }
}

/// Optimize the beam, run the expansion sweep and write uq_table.csv,
/// sobol_heatmap.csv, mc_heatmap.csv, densities.csv and study.json.
pub fn run_topopt_study(cfg: &TopOptStudyConfig) -> Result<TopOptStudyOutcome, CliError> {
    cfg.validate()?;
    let structure = optimize_structure(&cfg.topopt).stage(Stage::TopOpt)?;
    log::info!(
        "optimized in {} iterations ({}), {} intermediate elements",
        structure.iterations(),
        if structure.converged() { "converged" } else { "iteration cap" },
        structure.uncertain_indices().len()
    );
    let study = uq_study(&structure, &cfg.uq).stage(Stage::TopOpt)?;
    let row = study
        .rows
        .iter()
        .find(|r| r.method == "sear-pc" && r.n_o == cfg.heatmap_n_o)
        .expect("validated heatmap row");
    let sobol_grid = uncertain_heatmap(&structure, &row.sobol);
    let mc_grid = uncertain_heatmap(&structure, &study.reference.heatmap);
    let flat = |g: &Array2<f64>| g.iter().copied().collect::<Vec<_>>();
    let overlap_grid = top_fraction_overlap(&flat(&sobol_grid), &flat(&mc_grid), cfg.top_fraction);
    let overlap_uncertain = top_fraction_overlap(&row.sobol, &study.reference.heatmap, cfg.top_fraction);

    let prov = Provenance {
        config_sha256: cfg.sha256(),
        seed: cfg.uq.seed,
    };
    let dir = &cfg.output_dir;
    let mut rows = vec![vec![
        "mc".to_string(),
        study.reference.samples.to_string(),
        fmt_f64(study.reference.mean),
        fmt_f64(study.reference.std_dev),
    ]];
    rows.extend(
        study
            .rows
            .iter()
            .map(|r| vec![r.method.clone(), r.q.to_string(), fmt_f64(r.mean), fmt_f64(r.std_dev)]),
    );
    write_csv(&dir.join("uq_table.csv"), &prov, &["method", "q", "mu", "sigma"], rows)?;
    write_grid_csv(&dir.join("sobol_heatmap.csv"), &prov, &sobol_grid)?;
    write_grid_csv(&dir.join("mc_heatmap.csv"), &prov, &mc_grid)?;
    write_grid_csv(
        &dir.join("densities.csv"),
        &prov,
        &element_grid(&cfg.topopt, structure.densities()),
    )?;
    write_json(
        &dir.join("study.json"),
        &prov,
        serde_json::json!({
            "iterations": structure.iterations(),
            "converged": structure.converged(),
            "compliance_history": structure.compliance_history(),
            "overlap_grid": overlap_grid,
            "overlap_uncertain": overlap_uncertain,
            "study": &study,
        }),
    )?;
    Ok(TopOptStudyOutcome {
        structure,
        study,
        sobol_grid,
        mc_grid,
        overlap_grid,
        overlap_uncertain,
    })
}
