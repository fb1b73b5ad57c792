//! Output files. Every file is written to a temporary sibling and renamed into
//! place, so a failed run never leaves a partial artifact behind.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Stage, StageExt};

/// Identifies the run an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

/// JSON artifact: provenance alongside the payload fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).stage(Stage::Write)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).stage(Stage::Write)?;
    tmp.write_all(bytes).stage(Stage::Write)?;
    tmp.as_file().sync_all().stage(Stage::Write)?;
    tmp.persist(path).map_err(|e| e.error).stage(Stage::Write)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, provenance: &Provenance, body: T) -> Result<(), CliError> {
    let artifact = Artifact {
        provenance: provenance.clone(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&artifact).stage(Stage::Write)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Artifact<T>, CliError> {
    let text = std::fs::read_to_string(path).stage(Stage::Read)?;
    serde_json::from_str(&text).stage(Stage::Read)
}

/// CSV with the provenance in leading `#` comment lines.
pub fn write_csv(
    path: &Path,
    provenance: &Provenance,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let mut out = format!(
        "# config_sha256={}\n# seed={}\n{}\n",
        provenance.config_sha256,
        provenance.seed,
        header.join(",")
    );
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Grid CSV, one line per row of `grid`.
pub fn write_grid_csv(path: &Path, provenance: &Provenance, grid: &ndarray::Array2<f64>) -> Result<(), CliError> {
    let mut out = format!(
        "# config_sha256={}\n# seed={}\n# rows=y cols=x\n",
        provenance.config_sha256, provenance.seed
    );
    for row in grid.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Shortest round-trip representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            config_sha256: "ab".into(),
            seed: 7,
        }
    }

    #[test]
    fn json_round_trip_carries_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/x.json");
        write_json(&path, &prov(), serde_json::json!({"value": 1.5})).unwrap();
        let back: Artifact<serde_json::Value> = read_json(&path).unwrap();
        assert_eq!(back.provenance, prov());
        assert_eq!(back.body["value"], 1.5);
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, &prov(), &["a", "b"], [vec!["1".into(), fmt_f64(0.1)]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# config_sha256=ab\n# seed=7\na,b\n1,0.1\n");
    }

    #[test]
    fn unwritable_target_is_a_write_stage_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let err = write_atomic(&blocker.join("child.json"), b"{}").unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Write));
    }
}
