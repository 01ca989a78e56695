//! CSV and manifest helpers for figure-data export.

use crate::macrosolver::MacroState;
use crate::{KinsegError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Write a float table with a header row.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(row.iter().map(|v| format!("{v:.12e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Macro state dump: one row per feature cell with per-axis centers,
/// density and the windowed first moment at the given `delta2`.
pub fn macro_state_csv(state: &MacroState, delta2: f64, path: &Path) -> Result<()> {
    let d = state.grid.dim;
    let mut header: Vec<String> = (0..d).map(|ell| format!("c{}", ell + 1)).collect();
    header.extend(["rho".to_string(), "Fx".to_string(), "Fy".to_string()]);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let f = state.f_cant(delta2);
    let mut c = vec![0.0; d];
    let rows = (0..state.grid.len()).map(|k| {
        state.grid.center(k, &mut c);
        let mut row = c.clone();
        row.push(state.rho[k]);
        row.push(f[k][0]);
        row.push(f[k][1]);
        row
    });
    // collect to keep the closure borrow simple
    let rows: Vec<Vec<f64>> = rows.collect();
    write_csv(path, &header_refs, rows)
}

/// Figure name -> file map written next to the exported CSVs.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct FigureManifest {
    pub figures: BTreeMap<String, PathBuf>,
}

impl FigureManifest {
    pub fn insert(&mut self, name: &str, path: PathBuf) {
        self.figures.insert(name.to_string(), path);
    }

    pub fn require(&self, name: &str) -> Result<&PathBuf> {
        self.figures
            .get(name)
            .ok_or_else(|| KinsegError::MissingArtifact(name.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FeatureGrid;

    #[test]
    fn csv_and_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("densities.csv");
        write_csv(
            &csv_path,
            &["c", "rho"],
            vec![vec![0.1, 1.0], vec![0.3, 2.0]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("c,rho"));

        let mut manifest = FigureManifest::default();
        manifest.insert("densities", csv_path.clone());
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let back = FigureManifest::load(&mpath).unwrap();
        assert_eq!(back.require("densities").unwrap(), &csv_path);
        assert!(matches!(
            back.require("slices"),
            Err(KinsegError::MissingArtifact(_))
        ));
    }

    #[test]
    fn state_csv_has_expected_columns() {
        let grid = FeatureGrid::new(1, 4);
        let state = MacroState::new(grid, vec![1.0; 4], vec![[0.5, -0.5]; 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.csv");
        macro_state_csv(&state, 0.5, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("c1,rho,Fx,Fy"));
        assert_eq!(text.lines().count(), 5);
    }
}
