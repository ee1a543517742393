//! Pluggable model contract plus a small trainable reference implementation.

mod checkpoint;
mod embedder;
mod model;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use embedder::{BagOfTokensEmbedder, SentenceEmbedder};
pub use model::{EncoderConfig, LinearHead, Mode, Parameterized, ReferenceEncoder};
pub use tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    FirstToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f64>,
    pub pooling: Pooling,
}

/// Reduces hidden states to one vector. `mask[i]` is `true` for real
/// (non-padding) positions.
pub fn pool(states: &[Vec<f64>], mask: &[bool], pooling: Pooling) -> Result<PooledVector> {
    if mask.len() != states.len() {
        return Err(Error::InvalidInput(format!(
            "mask length {} does not match {} hidden states",
            mask.len(),
            states.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::FullyMasked);
    }
    let values = match pooling {
        Pooling::FirstToken => states[0].clone(),
        Pooling::Mean => {
            let mut acc = vec![0.0; states[0].len()];
            for (s, _) in states.iter().zip(mask).filter(|(_, m)| **m) {
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= count as f64);
            acc
        }
    };
    Ok(PooledVector { values, pooling })
}

/// Graph version of [`pool`] for sequences without padding.
pub(crate) fn pool_var(graph: &mut Graph<'_>, hidden: Var, pooling: Pooling) -> Var {
    match pooling {
        Pooling::FirstToken => graph.row(hidden, 0),
        Pooling::Mean => {
            let rows = graph.value(hidden).rows();
            graph.masked_mean(hidden, &vec![true; rows])
        }
    }
}

/// A backbone with an optional classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: ReferenceEncoder,
    pub head: Option<LinearHead>,
}

impl Model {
    pub fn new(encoder: ReferenceEncoder) -> Self {
        Self { encoder, head: None }
    }

    pub fn with_head(encoder: ReferenceEncoder, head: LinearHead) -> Self {
        Self {
            encoder,
            head: Some(head),
        }
    }

    /// Splits bound variables into backbone and head parts.
    pub fn split_vars<'v>(&self, vars: &'v [Var]) -> (&'v [Var], &'v [Var]) {
        vars.split_at(self.encoder.parameter_count())
    }

    pub fn head(&self) -> Result<&LinearHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("model has no classification head".into()))
    }
}

impl Parameterized for Model {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.parameters();
        if let Some(h) = &self.head {
            p.push(&h.weight);
            p.push(&h.bias);
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.parameters_mut();
        if let Some(h) = &mut self.head {
            p.push(&mut h.weight);
            p.push(&mut h.bias);
        }
        p
    }
}

/// Mean loss over `batch` and its gradient with respect to every parameter
/// of `model`.
///
/// `loss_fn` builds the per-item loss on a fresh graph whose first variables
/// are the model's bound parameters.
pub fn gradient<M, B, F>(model: &M, loss_fn: F, batch: &[B]) -> Result<(f64, Vec<Tensor>)>
where
    M: Parameterized,
    F: for<'a> Fn(&'a M, &mut Graph<'a>, &[Var], &B) -> Result<Var>,
{
    let mut grads = ParamGrads::zeros_like(&model.parameters());
    let loss = accumulate_gradient(model, &loss_fn, batch, &mut grads)?;
    Ok((loss, grads.into_slots()))
}

pub fn accumulate_gradient<M, B, F>(
    model: &M,
    loss_fn: &F,
    batch: &[B],
    grads: &mut ParamGrads,
) -> Result<f64>
where
    M: Parameterized,
    F: for<'a> Fn(&'a M, &mut Graph<'a>, &[Var], &B) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        let mut graph = Graph::new();
        let vars = model.bind(&mut graph);
        let loss = loss_fn(model, &mut graph, &vars, item)?;
        let value = graph.value(loss).scalar();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(value));
        }
        total += value;
        graph.backward(loss, scale, grads);
    }
    Ok(total * scale)
}

/// Evaluates the mean loss without building gradients.
pub fn loss_value<M, B, F>(model: &M, loss_fn: F, batch: &[B]) -> Result<f64>
where
    M: Parameterized,
    F: for<'a> Fn(&'a M, &mut Graph<'a>, &[Var], &B) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = 0.0;
    for item in batch {
        let mut graph = Graph::new();
        let vars = model.bind(&mut graph);
        let loss = loss_fn(model, &mut graph, &vars, item)?;
        total += graph.value(loss).scalar();
    }
    Ok(total / batch.len() as f64)
}
