use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{check_textual, DatasetSpec, Example, Partition};
use crate::error::{Error, Result};

/// Reads a JSONL dataset file and validates every record against `spec`.
/// Record order is preserved.
pub fn load_dataset(path: &Path, spec: &DatasetSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let examples = read_jsonl(path)?;
    let mut train = 0;
    let mut test = 0;
    for (example, line) in examples.iter().zip(line_numbers(path)?) {
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if example.dataset_id != spec.dataset_id {
            return Err(malformed(format!(
                "dataset {:?} does not match {:?}",
                example.dataset_id, spec.dataset_id
            )));
        }
        if example.aspect != spec.aspect {
            return Err(malformed(format!(
                "aspect {} does not match {}",
                example.aspect, spec.aspect
            )));
        }
        if example.split != spec.split {
            return Err(malformed(format!(
                "split {:?} does not match {:?}",
                example.split.as_str(),
                spec.split.as_str()
            )));
        }
        for label in &example.gold_labels {
            check_textual(label)?;
            if !spec.contains(label) {
                return Err(Error::UnknownLabel {
                    path: path.to_path_buf(),
                    line,
                    dataset: spec.dataset_id.clone(),
                    label: label.clone(),
                });
            }
        }
        match example.partition {
            Partition::Train => train += 1,
            Partition::Test => test += 1,
        }
    }
    if let Some(declared) = spec.counts {
        if declared.train != train || declared.test != test {
            return Err(Error::CountMismatch {
                dataset: spec.dataset_id.clone(),
                declared_train: declared.train,
                declared_test: declared.test,
                found_train: train,
                found_test: test,
            });
        }
    }
    Ok(examples)
}

/// Parses a JSONL file of records, checking per-record structure only
/// (non-empty text, non-empty label list, no blank labels).
pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let example: Example = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if example.text.trim().is_empty() {
            return Err(Error::EmptyText {
                path: path.to_path_buf(),
                line: line_no,
            });
        }
        if example.gold_labels.is_empty() {
            return Err(malformed("empty label list".into()));
        }
        if example.gold_labels.iter().any(|l| l.trim().is_empty()) {
            return Err(malformed("blank label".into()));
        }
        out.push(example);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// 1-based line numbers of the non-blank lines, matching `read_jsonl` order.
fn line_numbers(path: &Path) -> Result<Vec<usize>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if !line.trim().is_empty() {
            out.push(idx + 1);
        }
    }
    Ok(out)
}
