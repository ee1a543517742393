//! Dataset ingestion, label standardization, aspect normalization and
//! label-overlap diagnostics.

mod load;
mod manifest;
mod normalize;
mod overlap;
mod standardize;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use load::{load_dataset, read_jsonl, write_jsonl};
pub use manifest::{load_manifest, DatasetEntry, DatasetManifest};
pub use normalize::aspect_normalize;
pub use overlap::{label_overlap, label_tokens, overlap_matrix, OverlapMatrix};
pub use standardize::{standardize_labels, LabelMapping};

/// Task family a dataset belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Aspect {
    Sentiment,
    Intent,
    Topic,
    Other(String),
}

impl Aspect {
    pub const BUILTIN: [Aspect; 3] = [Aspect::Sentiment, Aspect::Intent, Aspect::Topic];

    pub fn name(&self) -> &str {
        match self {
            Aspect::Sentiment => "sentiment",
            Aspect::Intent => "intent",
            Aspect::Topic => "topic",
            Aspect::Other(name) => name,
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aspect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let name = s.trim().to_lowercase();
        Ok(match name.as_str() {
            "sentiment" => Aspect::Sentiment,
            "intent" | "dialogue" => Aspect::Intent,
            "topic" => Aspect::Topic,
            "" => return Err(Error::UnknownAspect(s.to_string())),
            _ if name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-') => {
                Aspect::Other(name)
            }
            _ => return Err(Error::UnknownAspect(s.to_string())),
        })
    }
}

impl TryFrom<String> for Aspect {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Aspect> for String {
    fn from(a: Aspect) -> String {
        a.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "in")]
    InDomain,
    #[serde(rename = "out")]
    OutOfDomain,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::InDomain => "in",
            Split::OutOfDomain => "out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

/// One text with its gold labels. The field names double as the JSONL
/// record layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    #[serde(rename = "labels")]
    pub gold_labels: Vec<String>,
    #[serde(rename = "dataset")]
    pub dataset_id: String,
    pub aspect: Aspect,
    pub split: Split,
    pub partition: Partition,
}

impl Example {
    pub fn first_label(&self) -> &str {
        &self.gold_labels[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: String,
    pub aspect: Aspect,
    pub split: Split,
    pub label_vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Counts>,
}

impl DatasetSpec {
    /// Checks the vocabulary: textual labels, no duplicates after
    /// case-folding and trimming.
    pub fn validate(&self) -> Result<()> {
        if self.label_vocabulary.is_empty() {
            return Err(Error::InvalidInput(format!(
                "dataset {:?} has an empty label vocabulary",
                self.dataset_id
            )));
        }
        let mut seen = HashSet::new();
        for label in &self.label_vocabulary {
            check_textual(label)?;
            if !seen.insert(canonical_label(label)) {
                return Err(Error::DuplicateLabel {
                    dataset: self.dataset_id.clone(),
                    label: label.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.label_vocabulary.iter().any(|l| l == label)
    }
}

/// A dataset's specification together with its examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn partition(&self, partition: Partition) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.partition == partition)
    }

    pub fn counts(&self) -> Counts {
        Counts {
            train: self.partition(Partition::Train).count(),
            test: self.partition(Partition::Test).count(),
        }
    }

    pub fn unique_train_texts(&self) -> BTreeSet<&str> {
        self.partition(Partition::Train).map(|e| e.text.as_str()).collect()
    }
}

/// The in-domain datasets of one aspect.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectCorpus {
    pub aspect: Aspect,
    pub datasets: Vec<Dataset>,
}

impl AspectCorpus {
    /// Number of distinct texts across the member datasets' train partitions.
    pub fn unique_text_count(&self) -> usize {
        self.datasets
            .iter()
            .flat_map(|d| d.partition(Partition::Train).map(|e| e.text.as_str()))
            .collect::<HashSet<_>>()
            .len()
    }

    /// Groups datasets by aspect, in first-seen order.
    pub fn group(datasets: Vec<Dataset>) -> Vec<AspectCorpus> {
        let mut out: Vec<AspectCorpus> = Vec::new();
        for d in datasets {
            match out.iter_mut().find(|c| c.aspect == d.spec.aspect) {
                Some(c) => c.datasets.push(d),
                None => out.push(AspectCorpus {
                    aspect: d.spec.aspect.clone(),
                    datasets: vec![d],
                }),
            }
        }
        out
    }
}

/// Case-folded, trimmed, internal whitespace collapsed.
pub fn canonical_label(label: &str) -> String {
    label
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub(crate) fn check_textual(label: &str) -> Result<()> {
    if label.chars().any(char::is_alphabetic) {
        Ok(())
    } else {
        Err(Error::NonTextualLabel(label.to_string()))
    }
}

/// Sorted JSONL rendering used for determinism and identity checks.
pub fn canonical_serialization(examples: &[Example]) -> String {
    let mut sorted: Vec<&Example> = examples.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.dataset_id, &a.text, a.first_label(), a.partition, &a.gold_labels).cmp(&(
            &b.dataset_id,
            &b.text,
            b.first_label(),
            b.partition,
            &b.gold_labels,
        ))
    });
    let mut out = String::new();
    for e in sorted {
        out.push_str(&serde_json::to_string(e).expect("example serializes"));
        out.push('\n');
    }
    out
}
