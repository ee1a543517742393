use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{check_textual, Dataset};
use crate::error::{Error, Result};

/// Rewrite table from source labels to natural-language labels.
///
/// Several source labels may share a target only when that target is listed
/// in `merges`; their examples are then unioned under the target.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub rewrites: BTreeMap<String, String>,
    #[serde(default)]
    pub merges: BTreeSet<String>,
}

impl LabelMapping {
    pub fn identity<'a>(labels: impl IntoIterator<Item = &'a String>) -> Self {
        Self {
            rewrites: labels.into_iter().map(|l| (l.clone(), l.clone())).collect(),
            merges: BTreeSet::new(),
        }
    }
}

pub fn standardize_labels(dataset: Dataset, mapping: &LabelMapping) -> Result<Dataset> {
    let Dataset { mut spec, mut examples } = dataset;

    let mut sources_by_target: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for label in &spec.label_vocabulary {
        let target = mapping
            .rewrites
            .get(label)
            .ok_or_else(|| Error::UnmappedLabel(label.clone()))?;
        check_textual(target)?;
        sources_by_target
            .entry(target.as_str())
            .or_default()
            .push(label.clone());
    }
    for (target, sources) in &sources_by_target {
        if sources.len() > 1 && !mapping.merges.contains(*target) {
            return Err(Error::LabelCollision {
                sources: sources.clone(),
                target: target.to_string(),
            });
        }
    }

    let rewrite = |label: &String| -> Result<String> {
        mapping
            .rewrites
            .get(label)
            .cloned()
            .ok_or_else(|| Error::UnmappedLabel(label.clone()))
    };

    spec.label_vocabulary = dedup(spec.label_vocabulary.iter().map(rewrite).collect::<Result<_>>()?);
    for e in &mut examples {
        e.gold_labels = dedup(e.gold_labels.iter().map(rewrite).collect::<Result<_>>()?);
    }
    spec.validate()?;
    Ok(Dataset { spec, examples })
}

fn dedup(labels: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labels.into_iter().filter(|l| seen.insert(l.clone())).collect()
}
