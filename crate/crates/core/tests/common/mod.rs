#![allow(dead_code)]

use zstc::autodiff::{Graph, Var};
use zstc::encoder::{gradient, EncoderConfig, Mode, Model, Parameterized, ReferenceEncoder};
use zstc::strategies::AdamW;

pub fn small_config(mode: Mode, seed: u64) -> EncoderConfig {
    EncoderConfig {
        mode,
        hidden_width: 16,
        layers: 2,
        heads: 2,
        ffn_width: 32,
        max_sequence_length: 48,
        buckets: 512,
        seed,
        ..EncoderConfig::default()
    }
}

pub fn encoder(mode: Mode, seed: u64) -> ReferenceEncoder {
    ReferenceEncoder::new(small_config(mode, seed)).unwrap()
}

/// Full-batch AdamW at a constant rate; returns the loss before every step.
pub fn overfit<B, F>(model: &mut Model, loss_fn: F, batch: &[B], steps: usize, lr: f64) -> Vec<f64>
where
    F: for<'a> Fn(&'a Model, &mut Graph<'a>, &[Var], &B) -> zstc::Result<Var>,
{
    let mut adam = AdamW::new(&model.parameters(), 0.0);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grads) = gradient(&*model, &loss_fn, batch).unwrap();
        losses.push(loss);
        adam.step(model.parameters_mut(), &grads, lr);
    }
    losses
}

pub fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}
