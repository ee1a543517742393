use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Aspect;
use crate::error::{Error, Result};
use crate::util::fnv1a;

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
const ASPECT_BASE: u32 = 4;

/// Lower-cased whitespace + punctuation tokenizer over a hash-bucketed
/// vocabulary. Ids `0..4` are pad/start/sep/eos, followed by one reserved id
/// per aspect, followed by the word buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    buckets: usize,
    aspects: Vec<Aspect>,
    /// Representative word per bucket, for decoding generated ids.
    #[serde(skip)]
    decode: BTreeMap<u32, String>,
}

/// Splits text into lower-cased words; every punctuation character is its
/// own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

impl Tokenizer {
    pub fn new(buckets: usize, aspects: Vec<Aspect>) -> Self {
        assert!(buckets > 0, "tokenizer needs at least one bucket");
        Self {
            buckets,
            aspects,
            decode: BTreeMap::new(),
        }
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn aspects(&self) -> &[Aspect] {
        &self.aspects
    }

    pub fn vocabulary_size(&self) -> usize {
        self.word_base() as usize + self.buckets
    }

    fn word_base(&self) -> u32 {
        ASPECT_BASE + self.aspects.len() as u32
    }

    pub fn word_id(&self, word: &str) -> u32 {
        self.word_base() + (fnv1a(word.as_bytes()) % self.buckets as u64) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.word_id(w)).collect()
    }

    pub fn aspect_token(&self, aspect: &Aspect) -> Result<u32> {
        self.aspects
            .iter()
            .position(|a| a == aspect)
            .map(|i| ASPECT_BASE + i as u32)
            .ok_or_else(|| Error::UnknownAspect(aspect.to_string()))
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.word_base()
    }

    /// Registers words for decoding. The first word seen for a bucket keeps it.
    pub fn observe(&mut self, text: &str) {
        for w in split_words(text) {
            let id = self.word_id(&w);
            self.decode.entry(id).or_insert(w);
        }
    }

    pub fn decode_table(&self) -> &BTreeMap<u32, String> {
        &self.decode
    }

    pub(crate) fn set_decode_table(&mut self, table: BTreeMap<u32, String>) {
        self.decode = table;
    }

    /// Decodes word ids, preferring `local` (e.g. words of the prompt being
    /// continued) over the global table. Special ids are skipped; unknown
    /// buckets render as `<unk>`.
    pub fn decode(&self, ids: &[u32], local: &BTreeMap<u32, String>) -> String {
        ids.iter()
            .filter(|id| !self.is_special(**id))
            .map(|id| {
                local
                    .get(id)
                    .or_else(|| self.decode.get(id))
                    .map(String::as_str)
                    .unwrap_or("<unk>")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Local decode table for the words of `text`.
    pub fn local_table(&self, text: &str) -> BTreeMap<u32, String> {
        let mut table = BTreeMap::new();
        for w in split_words(text) {
            table.entry(self.word_id(&w)).or_insert(w);
        }
        table
    }
}
