//! Checkpoint directory: `manifest.toml`, `params.bin` (little-endian f64 in
//! manifest order) and `decode_words.tsv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, LinearHead, Mode, Parameterized, ReferenceEncoder};
use super::tokenizer::{Tokenizer, EOS, PAD, SEP, START};
use super::Model;
use crate::autodiff::Tensor;
use crate::corpus::Aspect;
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    mode: Mode,
    vocabulary_size: usize,
    hidden_width: usize,
    layers: usize,
    heads: usize,
    ffn_width: usize,
    max_sequence_length: usize,
    seed: u64,
    tokenizer: TokenizerSpec,
    special_tokens: SpecialTokens,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<HeadSpec>,
    parameters: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenizerSpec {
    kind: String,
    lowercase: bool,
    hash: String,
    buckets: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecialTokens {
    pad: u32,
    start: u32,
    sep: u32,
    eos: u32,
    aspects: BTreeMap<String, u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadSpec {
    labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `model` to `dir`. Files go to a sibling staging directory that is
/// renamed into place once complete, so `dir` either holds a whole
/// checkpoint or does not exist.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let encoder = &model.encoder;
    let config = encoder.config();
    let tokenizer = encoder.tokenizer();

    let mut names: Vec<String> = encoder.parameter_names().to_vec();
    if model.head.is_some() {
        names.push("head.weight".into());
        names.push("head.bias".into());
    }
    let params = model.parameters();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        mode: config.mode,
        vocabulary_size: encoder.vocabulary_size(),
        hidden_width: config.hidden_width,
        layers: config.layers,
        heads: config.heads,
        ffn_width: config.ffn_width,
        max_sequence_length: config.max_sequence_length,
        seed: config.seed,
        tokenizer: TokenizerSpec {
            kind: "whitespace-punctuation".into(),
            lowercase: true,
            hash: "fnv1a-64".into(),
            buckets: tokenizer.buckets(),
        },
        special_tokens: SpecialTokens {
            pad: PAD,
            start: START,
            sep: SEP,
            eos: EOS,
            aspects: tokenizer
                .aspects()
                .iter()
                .map(|a| Ok((a.to_string(), tokenizer.aspect_token(a)?)))
                .collect::<Result<_>>()?,
        },
        head: model.head.as_ref().map(|h| HeadSpec {
            labels: h.labels.clone(),
        }),
        parameters: names
            .iter()
            .zip(&params)
            .map(|(n, p)| ParamEntry {
                name: n.clone(),
                rows: p.rows(),
                cols: p.cols(),
            })
            .collect(),
    };

    let mut blob = Vec::with_capacity(params.iter().map(|p| p.data().len() * 8).sum());
    for p in &params {
        for v in p.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut words = String::new();
    for (id, w) in tokenizer.decode_table() {
        words.push_str(&format!("{id}\t{w}\n"));
    }
    let manifest_text = toml::to_string(&manifest).map_err(|e| ckpt_err(dir, e.to_string()))?;

    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(format!("clear {}", staging.display()), e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(format!("create {}", staging.display()), e))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = staging.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))
    };
    write("manifest.toml", manifest_text.as_bytes())?;
    write("params.bin", &blob)?;
    write("decode_words.tsv", words.as_bytes())?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(format!("replace {}", dir.display()), e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(format!("publish {}", dir.display()), e))
}

/// Staging directories start with a dot and end in `.partial`.
pub(crate) fn staging_path(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.partial"))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::io(format!("read {}", path.display()), e))
    };
    let manifest_bytes = read("manifest.toml")?;
    let manifest_text = String::from_utf8(manifest_bytes).map_err(|e| ckpt_err(dir, e.to_string()))?;
    let manifest: Manifest = toml::from_str(&manifest_text).map_err(|e| ckpt_err(dir, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(dir, format!("unsupported format version {}", manifest.format_version)));
    }

    let mut aspects: Vec<(u32, Aspect)> = manifest
        .special_tokens
        .aspects
        .iter()
        .map(|(name, id)| Ok((*id, name.parse::<Aspect>()?)))
        .collect::<Result<_>>()?;
    aspects.sort_by_key(|(id, _)| *id);
    let config = EncoderConfig {
        mode: manifest.mode,
        hidden_width: manifest.hidden_width,
        layers: manifest.layers,
        heads: manifest.heads,
        ffn_width: manifest.ffn_width,
        max_sequence_length: manifest.max_sequence_length,
        buckets: manifest.tokenizer.buckets,
        aspects: aspects.into_iter().map(|(_, a)| a).collect(),
        seed: manifest.seed,
    };

    let blob = read("params.bin")?;
    let expected: usize = manifest.parameters.iter().map(|p| p.rows * p.cols * 8).sum();
    if blob.len() != expected {
        return Err(ckpt_err(dir, format!("params.bin holds {} bytes, manifest expects {expected}", blob.len())));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(manifest.parameters.len());
    for entry in &manifest.parameters {
        let n = entry.rows * entry.cols;
        let data = blob[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += n * 8;
        tensors.push(Tensor::from_vec(entry.rows, entry.cols, data));
    }

    let head = match manifest.head {
        Some(spec) => {
            if tensors.len() < 2 {
                return Err(ckpt_err(dir, "head declared but parameters missing"));
            }
            let bias = tensors.pop().expect("checked length");
            let weight = tensors.pop().expect("checked length");
            if weight.cols() != spec.labels.len() {
                return Err(ckpt_err(dir, "head width does not match its labels"));
            }
            Some(LinearHead {
                weight,
                bias,
                labels: spec.labels,
            })
        }
        None => None,
    };

    let mut tokenizer = Tokenizer::new(config.buckets, config.aspects.clone());
    let words = String::from_utf8(read("decode_words.tsv")?).map_err(|e| ckpt_err(dir, e.to_string()))?;
    let mut table = BTreeMap::new();
    for line in words.lines().filter(|l| !l.is_empty()) {
        let (id, w) = line
            .split_once('\t')
            .ok_or_else(|| ckpt_err(dir, format!("bad decode entry {line:?}")))?;
        let id: u32 = id.parse().map_err(|_| ckpt_err(dir, format!("bad decode id {id:?}")))?;
        table.insert(id, w.to_string());
    }
    tokenizer.set_decode_table(table);

    let encoder = ReferenceEncoder::from_parts(config, tokenizer, tensors).map_err(|e| ckpt_err(dir, e.to_string()))?;
    if encoder.vocabulary_size() != manifest.vocabulary_size {
        return Err(ckpt_err(dir, "vocabulary size does not match the tokenizer spec"));
    }
    Ok(Model { encoder, head })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_head() {
        let mut encoder = ReferenceEncoder::new(EncoderConfig {
            hidden_width: 8,
            heads: 2,
            ffn_width: 8,
            buckets: 16,
            max_sequence_length: 8,
            ..EncoderConfig::default()
        })
        .unwrap();
        encoder.tokenizer_mut().observe("hello world");
        let model = Model::with_head(encoder, LinearHead::new(8, vec!["yes".into(), "no".into()], 3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0");
        save_checkpoint(&model, &path).unwrap();
        assert!(!staging_path(&path).exists());
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);

        let manifest = fs::read_to_string(path.join("manifest.toml")).unwrap();
        assert!(manifest.contains("mode = \"bidirectional\""));
        assert!(manifest.contains("sentiment = 4"));

        // overwriting keeps a single complete directory
        save_checkpoint(&model, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = Model::new(
            ReferenceEncoder::new(EncoderConfig {
                hidden_width: 4,
                heads: 1,
                ffn_width: 4,
                buckets: 4,
                max_sequence_length: 4,
                ..EncoderConfig::default()
            })
            .unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&model, &path).unwrap();
        let blob = fs::read(path.join("params.bin")).unwrap();
        fs::write(path.join("params.bin"), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
