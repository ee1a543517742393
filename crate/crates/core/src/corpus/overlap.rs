use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::DatasetSpec;
use crate::error::{Error, Result};

/// Case-folded alphanumeric tokens of every label in a vocabulary.
pub fn label_tokens(labels: &[String]) -> BTreeSet<String> {
    labels
        .iter()
        .flat_map(|l| {
            l.split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .map(str::to_lowercase)
        })
        .collect()
}

/// Share (0–100) of the out-of-domain label tokens that also occur among the
/// in-domain label tokens.
pub fn label_overlap(in_spec: &DatasetSpec, out_spec: &DatasetSpec) -> Result<f64> {
    for spec in [in_spec, out_spec] {
        if spec.label_vocabulary.is_empty() {
            return Err(Error::InvalidInput(format!(
                "dataset {:?} has an empty label vocabulary",
                spec.dataset_id
            )));
        }
    }
    let seen = label_tokens(&in_spec.label_vocabulary);
    let target = label_tokens(&out_spec.label_vocabulary);
    if target.is_empty() {
        return Err(Error::InvalidInput(format!(
            "dataset {:?} has no alphanumeric label tokens",
            out_spec.dataset_id
        )));
    }
    let shared = target.intersection(&seen).count();
    Ok(100.0 * shared as f64 / target.len() as f64)
}

/// Rows are in-domain datasets, columns out-of-domain datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub in_domain: Vec<String>,
    pub out_of_domain: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

pub fn overlap_matrix(in_specs: &[DatasetSpec], out_specs: &[DatasetSpec]) -> Result<OverlapMatrix> {
    if in_specs.is_empty() || out_specs.is_empty() {
        return Err(Error::InvalidInput("overlap matrix needs datasets on both sides".into()));
    }
    let scores = in_specs
        .iter()
        .map(|i| out_specs.iter().map(|o| label_overlap(i, o)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(OverlapMatrix {
        in_domain: in_specs.iter().map(|s| s.dataset_id.clone()).collect(),
        out_of_domain: out_specs.iter().map(|s| s.dataset_id.clone()).collect(),
        scores,
    })
}

impl OverlapMatrix {
    pub fn to_table(&self) -> String {
        let first = self
            .in_domain
            .iter()
            .map(String::len)
            .chain(std::iter::once("in \\ out".len()))
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = self.out_of_domain.iter().map(|c| c.len().max(6)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<first$}", "in \\ out");
        for (c, w) in self.out_of_domain.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (name, row) in self.in_domain.iter().zip(&self.scores) {
            let _ = write!(out, "{name:<first$}");
            for (v, w) in row.iter().zip(&widths) {
                let _ = write!(out, "  {v:>w$.1}");
            }
            out.push('\n');
        }
        out
    }
}
