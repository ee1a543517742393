use super::model::ReferenceEncoder;
use super::tokenizer::{Tokenizer, START};
use super::{pool, Pooling};
use crate::error::{Error, Result};

/// Maps a text to a fixed-width vector (encode, then mean-pool).
pub trait SentenceEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

impl SentenceEmbedder for ReferenceEncoder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut ids = vec![START];
        ids.extend(self.tokenizer().tokenize(text));
        ids.truncate(self.max_sequence_length());
        let states = self.encode(&ids)?;
        Ok(pool(&states, &vec![true; states.len()], Pooling::Mean)?.values)
    }
}

/// Term-count vector over hashed word buckets. Texts sharing no words are
/// orthogonal (up to hash collisions).
#[derive(Debug, Clone)]
pub struct BagOfTokensEmbedder {
    tokenizer: Tokenizer,
}

impl BagOfTokensEmbedder {
    pub fn new(buckets: usize) -> Self {
        Self {
            tokenizer: Tokenizer::new(buckets, Vec::new()),
        }
    }
}

impl Default for BagOfTokensEmbedder {
    fn default() -> Self {
        Self::new(1 << 16)
    }
}

impl SentenceEmbedder for BagOfTokensEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.tokenizer.tokenize(text);
        if ids.is_empty() {
            return Err(Error::InvalidInput("cannot embed a text without tokens".into()));
        }
        let mut v = vec![0.0; self.tokenizer.vocabulary_size()];
        for id in ids {
            v[id as usize] += 1.0;
        }
        Ok(v)
    }
}
