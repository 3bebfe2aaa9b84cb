//! Experiment configuration: strict JSON schema (unknown fields
//! rejected), named or inline specs, rational coordinates as "num/den"
//! strings, and the run record written next to the outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use toruslab_core::algebra::{rat_from_str, IntMatrix, TorusPoint};
use toruslab_core::walk::WalkSpec;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub command: Option<String>,
    pub spec: Option<SpecSource>,
    /// Torus coordinates: "num/den" strings (exact) or numbers (float).
    pub x: Option<Vec<serde_json::Value>>,
    /// Mod-p starting point.
    pub x0: Option<Vec<u64>>,
    pub a: Option<Vec<i64>>,
    pub n: Option<usize>,
    pub n_list: Option<Vec<usize>>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub t: Option<f64>,
    pub rho: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub r: Option<f64>,
    pub epsilon: Option<f64>,
    pub c2: Option<f64>,
    pub q_max: Option<u64>,
    pub p: Option<u64>,
    pub m: Option<usize>,
    pub steps: Option<usize>,
    pub k: Option<u32>,
    pub pairs: Option<usize>,
    pub walks: Option<usize>,
    pub a_max: Option<i64>,
    pub cap: Option<usize>,
    /// Integer linear forms for the solzlin command.
    pub forms: Option<Vec<Vec<i64>>>,
    /// Rational point and radius for the solzlin command.
    pub point: Option<Vec<String>>,
    pub radius: Option<String>,
    /// Test functional for decompose: "one" or "half".
    pub f_kind: Option<String>,
    /// Add generator inverses with uniform weights (fp-gap).
    pub symmetrize: Option<bool>,
    pub out: Option<String>,
    /// "exact" or "float": forces coordinate interpretation.
    pub mode: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config invalid: {e}"))
    }

    /// Stable hash of the canonical serialized form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("serializable");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSource {
    Named(String),
    Inline(SpecDto),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDto {
    pub dim: usize,
    pub labels: Vec<String>,
    /// "num/den" strings.
    pub weights: Vec<String>,
    pub generators: Vec<Vec<Vec<i64>>>,
    /// Per-letter coordinate lists; strings are exact, numbers float.
    pub translations: Vec<Vec<serde_json::Value>>,
}

impl SpecDto {
    pub fn build(&self, mode: Option<&str>) -> Result<WalkSpec, String> {
        let weights = self
            .weights
            .iter()
            .map(|s| rat_from_str(s))
            .collect::<Result<Vec<_>, _>>()?;
        let generators: Vec<IntMatrix> = self
            .generators
            .iter()
            .map(|rows| {
                if rows.len() != self.dim || rows.iter().any(|r| r.len() != self.dim) {
                    return Err("generator shape must be dim x dim".to_string());
                }
                Ok(IntMatrix::from_rows(rows))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let translations = self
            .translations
            .iter()
            .map(|coords| parse_point(coords, mode))
            .collect::<Result<Vec<_>, _>>()?;
        WalkSpec::new(self.labels.clone(), weights, generators, translations)
            .map_err(|e| format!("spec invalid: {e}"))
    }
}

/// Parse a coordinate list into a torus point. Strings are exact
/// rationals, numbers are floats; the two cannot be mixed. `mode`
/// forces one interpretation ("float" demotes rationals, "exact"
/// rejects floats).
pub fn parse_point(coords: &[serde_json::Value], mode: Option<&str>) -> Result<TorusPoint, String> {
    let mut rats = Vec::new();
    let mut floats = Vec::new();
    for v in coords {
        match v {
            serde_json::Value::String(s) => rats.push(rat_from_str(s)?),
            serde_json::Value::Number(n) => {
                floats.push(n.as_f64().ok_or("coordinate not representable")?)
            }
            other => return Err(format!("bad coordinate {other}")),
        }
    }
    match (rats.is_empty(), floats.is_empty(), mode) {
        (false, true, Some("float")) => Ok(TorusPoint::approx(
            rats.iter().map(toruslab_core::algebra::rat_to_f64).collect(),
        )),
        (false, true, _) => Ok(TorusPoint::exact(rats)),
        (true, false, Some("exact")) => {
            Err("float coordinates rejected in exact mode".to_string())
        }
        (true, false, _) => Ok(TorusPoint::approx(floats)),
        (true, true, _) => Err("empty coordinate list".to_string()),
        (false, false, _) => Err("mixed exact and float coordinates".to_string()),
    }
}

/// The record persisted after every run.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub artifact_version: String,
    pub config_hash: String,
    pub elapsed_ms: u128,
    pub outputs: Vec<String>,
    pub verdicts: serde_json::Value,
}

/// Write-then-rename so partially written files are never observed.
pub fn write_atomic(path: &std::path::Path, content: &str) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| format!("mkdir {}: {e}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).map_err(|e| format!("write {}: {e}", tmp.display()))?;
    std::fs::rename(&tmp, path).map_err(|e| format!("rename {}: {e}", path.display()))
}
