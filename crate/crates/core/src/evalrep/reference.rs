use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/reference.json");

/// Rounding slack when checking a two-decimal F1 against its P and R.
const ROUNDING_SLACK: f64 = 0.011;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub model: String,
    pub params: String,
    pub accuracy: f64,
    pub macro_f1: Option<f64>,
}

/// Published numbers for side-by-side display. Never used as expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub description: String,
    /// case -> row label (category name or `macro`) -> (P, R, F1)
    pub cases: BTreeMap<String, BTreeMap<String, [f64; 3]>>,
    pub baselines: Vec<BaselineRow>,
    pub encoder_swap_f1_gain: [f64; 2],
}

impl Reference {
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN).expect("bundled reference file parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn row(&self, case: &str, label: &str) -> Option<[f64; 3]> {
        self.cases.get(case)?.get(label).copied()
    }

    /// `(case, label)` rows whose F1 is not the harmonic mean of their P and R.
    pub fn inconsistent_rows(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (case, rows) in &self.cases {
            for (label, &[p, r, f1]) in rows {
                if label == "macro" {
                    continue;
                }
                let h = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
                if (h - f1).abs() > ROUNDING_SLACK {
                    out.push((case.clone(), label.clone()));
                }
            }
        }
        out
    }
}
