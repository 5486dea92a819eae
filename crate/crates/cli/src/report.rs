//! Report assembly and deterministic emission (JSON mirror plus a fixed
//! CSV table), with stored adversarial tensors backing every cell.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qwb_core::attack::AdversarialResult;
use qwb_core::error::{Error, Result};
use qwb_core::metrics::{BoundaryDistance, CosineSimilarity, DistortionStats};
use qwb_core::model::dataset::write_raw_tensor;

use crate::spec::{BitWidth, ExperimentSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryStats {
    pub total: u64,
    pub mean: f64,
}

impl QueryStats {
    pub fn from_results(results: &[AdversarialResult]) -> Self {
        let total: u64 = results.iter().map(|r| r.queries).sum();
        QueryStats { total, mean: total as f64 / results.len().max(1) as f64 }
    }
}

/// One (attack x bit-width) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    pub attack: String,
    pub bit_width: BitWidth,
    pub adversarial_accuracy: f32,
    pub distortions: DistortionStats,
    pub queries: QueryStats,
    /// Set only under the defense-eval protocol: drop below 20 points.
    pub defense_success: Option<bool>,
    /// Directory of the stored adversarial tensors backing this cell,
    /// relative to the report.
    pub examples_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsBlock {
    /// Mean finite-difference zero density per bit-width.
    pub zero_density: Vec<(BitWidth, f64)>,
    /// Gradient cosine of the float model against each dequantized model.
    pub cosine_similarity: Vec<(BitWidth, CosineSimilarity)>,
    /// DeepFool boundary distance per bit-width (on dequantized graphs for
    /// the integer widths).
    pub boundary_distance: Vec<(BitWidth, BoundaryDistance)>,
    /// Finite-difference step used for zero density.
    pub h: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub seed: u64,
    pub spec: ExperimentSpec,
    pub spec_hash: u64,
    /// Attack strength parameters after auto-calibration (name -> value),
    /// present only for calibrated attacks.
    pub calibrated_strengths: Vec<(String, f32)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub manifest: Manifest,
    /// Clean accuracy per bit-width before any attack or defense.
    pub baseline_accuracy: Vec<(BitWidth, f32)>,
    /// Clean accuracy of the defended pipeline, defense-eval only.
    pub defended_accuracy: Option<Vec<(BitWidth, f32)>>,
    pub cells: Vec<ReportCell>,
    pub diagnostics: Option<DiagnosticsBlock>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed CSV: attack,bitwidth,acc,l0,l1,l2,linf,n,n_success — distortion
    /// columns are the all-sample means (the JSON carries both populations).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,bitwidth,acc,l0,l1,l2,linf,n,n_success\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                cell.attack,
                cell.bit_width.label(),
                cell.adversarial_accuracy,
                cell.distortions.mean_all.l0,
                cell.distortions.mean_all.l1,
                cell.distortions.mean_all.l2,
                cell.distortions.mean_all.linf,
                cell.distortions.n_all,
                cell.distortions.n_success,
            ));
        }
        out
    }
}

/// Write report.json and report.csv into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let json_path = dir.join("report.json");
    let csv_path = dir.join("report.csv");
    fs::write(&json_path, report.to_json())?;
    fs::write(&csv_path, report.to_csv())?;
    Ok((json_path, csv_path))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))
}

/// Store the adversarial tensors backing one cell; returns the relative dir.
pub fn store_examples(
    out_dir: &Path,
    attack: &str,
    width: BitWidth,
    results: &[AdversarialResult],
) -> Result<String> {
    let rel = format!("examples/{}_{}", attack, width.label());
    let dir = out_dir.join(&rel);
    fs::create_dir_all(&dir)?;
    for (i, r) in results.iter().enumerate() {
        write_raw_tensor(&dir.join(format!("adv_{i:04}.rten")), &r.adversarial)?;
    }
    Ok(rel)
}

/// FNV-1a over the canonical spec JSON.
pub fn spec_hash(spec: &ExperimentSpec) -> u64 {
    let bytes = serde_json::to_vec(spec).expect("spec serializes");
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}
