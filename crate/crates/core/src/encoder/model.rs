use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use crate::autodiff::{softmax_into, Graph, Tensor, Var};
use crate::corpus::Aspect;
use crate::error::{Error, Result};
use crate::util::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Bidirectional,
    Autoregressive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Bidirectional => "bidirectional",
            Mode::Autoregressive => "autoregressive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: Mode,
    pub hidden_width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_sequence_length: usize,
    pub buckets: usize,
    pub aspects: Vec<Aspect>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Bidirectional,
            hidden_width: 32,
            layers: 2,
            heads: 2,
            ffn_width: 64,
            max_sequence_length: 64,
            buckets: 1024,
            aspects: Aspect::BUILTIN.to_vec(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.heads == 0 || !self.hidden_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of the head count {}",
                self.hidden_width, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_width == 0 || self.max_sequence_length == 0 {
            return Err(Error::Config("layers, ffn width and max length must be positive".into()));
        }
        Ok(())
    }
}

/// Anything with an ordered list of trainable tensors.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Registers every parameter on `graph`, in order.
    fn bind<'a>(&'a self, graph: &mut Graph<'a>) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .enumerate()
            .map(|(slot, p)| graph.param(p, slot))
            .collect()
    }
}

struct LayerSlots {
    ln1: (usize, usize),
    heads: Vec<[usize; 4]>,
    ln2: (usize, usize),
    ffn: [usize; 4],
}

/// Small pre-norm transformer with learned positional embeddings and an
/// output projection tied to the token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder {
    config: EncoderConfig,
    tokenizer: Tokenizer,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl ReferenceEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(config.buckets, config.aspects.clone());
        let vocab = tokenizer.vocabulary_size();
        let d = config.hidden_width;
        let dh = d / config.heads;
        let mut rng = derived_rng(config.seed, &["reference-encoder"]);
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        let out_scale = 1.0 / (2.0 * config.layers as f64).sqrt();

        push("token_embedding".into(), normal(&mut rng, vocab, d, 0.5));
        push("position_embedding".into(), normal(&mut rng, config.max_sequence_length, d, 0.1));
        for l in 0..config.layers {
            push(format!("layer{l}.ln1.gain"), ones(d));
            push(format!("layer{l}.ln1.bias"), Tensor::zeros(1, d));
            for h in 0..config.heads {
                let s = 1.0 / (d as f64).sqrt();
                push(format!("layer{l}.head{h}.query"), normal(&mut rng, d, dh, s));
                push(format!("layer{l}.head{h}.key"), normal(&mut rng, d, dh, s));
                push(format!("layer{l}.head{h}.value"), normal(&mut rng, d, dh, s));
                push(
                    format!("layer{l}.head{h}.output"),
                    normal(&mut rng, dh, d, out_scale / (d as f64).sqrt()),
                );
            }
            push(format!("layer{l}.ln2.gain"), ones(d));
            push(format!("layer{l}.ln2.bias"), Tensor::zeros(1, d));
            push(
                format!("layer{l}.ffn.in"),
                normal(&mut rng, d, config.ffn_width, 1.0 / (d as f64).sqrt()),
            );
            push(format!("layer{l}.ffn.in_bias"), Tensor::zeros(1, config.ffn_width));
            push(
                format!("layer{l}.ffn.out"),
                normal(&mut rng, config.ffn_width, d, out_scale / (config.ffn_width as f64).sqrt()),
            );
            push(format!("layer{l}.ffn.out_bias"), Tensor::zeros(1, d));
        }
        push("final_ln.gain".into(), ones(d));
        push("final_ln.bias".into(), Tensor::zeros(1, d));

        Ok(Self {
            config,
            tokenizer,
            params,
            names,
        })
    }

    pub(crate) fn from_parts(config: EncoderConfig, tokenizer: Tokenizer, params: Vec<Tensor>) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.params.len() != params.len()
            || fresh.params.iter().zip(&params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidInput("parameter shapes do not match the configuration".into()));
        }
        Ok(Self {
            tokenizer,
            params,
            ..fresh
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn hidden_width(&self) -> usize {
        self.config.hidden_width
    }

    pub fn max_sequence_length(&self) -> usize {
        self.config.max_sequence_length
    }

    pub fn vocabulary_size(&self) -> usize {
        self.tokenizer.vocabulary_size()
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn tokenizer_mut(&mut self) -> &mut Tokenizer {
        &mut self.tokenizer
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Checks the length and id preconditions of `encode`.
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_sequence_length {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_sequence_length,
            });
        }
        let vocab = self.vocabulary_size();
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(())
    }

    fn layer_slots(&self) -> Vec<LayerSlots> {
        let mut next = 2;
        let mut take = || {
            next += 1;
            next - 1
        };
        (0..self.config.layers)
            .map(|_| {
                let ln1 = (take(), take());
                let heads = (0..self.config.heads)
                    .map(|_| [take(), take(), take(), take()])
                    .collect();
                let ln2 = (take(), take());
                let ffn = [take(), take(), take(), take()];
                LayerSlots { ln1, heads, ln2, ffn }
            })
            .collect()
    }

    /// Builds the forward pass; `vars` are this encoder's bound parameters.
    /// Returns the final hidden states (`len × hidden_width`).
    pub fn forward(&self, graph: &mut Graph<'_>, vars: &[Var], tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot run the encoder on an empty sequence".into()));
        }
        let causal = self.config.mode == Mode::Autoregressive;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = graph.gather(vars[0], &ids);
        let pos = graph.gather(vars[1], &positions);
        let mut x = graph.add(tok, pos);
        let head_scale = 1.0 / ((self.config.hidden_width / self.config.heads) as f64).sqrt();

        for layer in self.layer_slots() {
            let h = graph.layer_norm(x, vars[layer.ln1.0], vars[layer.ln1.1]);
            let mut attn: Option<Var> = None;
            for [q, k, v, o] in layer.heads {
                let qv = graph.matmul(h, vars[q]);
                let kv = graph.matmul(h, vars[k]);
                let vv = graph.matmul(h, vars[v]);
                let scores = graph.matmul_nt(qv, kv);
                let scores = graph.scale(scores, head_scale);
                let weights = graph.softmax_rows(scores, causal);
                let mixed = graph.matmul(weights, vv);
                let projected = graph.matmul(mixed, vars[o]);
                attn = Some(match attn {
                    Some(acc) => graph.add(acc, projected),
                    None => projected,
                });
            }
            x = graph.add(x, attn.expect("at least one head"));

            let h = graph.layer_norm(x, vars[layer.ln2.0], vars[layer.ln2.1]);
            let [w1, b1, w2, b2] = layer.ffn;
            let up = graph.matmul(h, vars[w1]);
            let up = graph.add_row(up, vars[b1]);
            let act = graph.gelu(up);
            let down = graph.matmul(act, vars[w2]);
            let down = graph.add_row(down, vars[b2]);
            x = graph.add(x, down);
        }
        let n = self.params.len();
        Ok(graph.layer_norm(x, vars[n - 2], vars[n - 1]))
    }

    /// Next-token logits for every position (`len × vocabulary_size`).
    pub fn lm_logits(&self, graph: &mut Graph<'_>, vars: &[Var], tokens: &[u32]) -> Result<Var> {
        self.require_mode(Mode::Autoregressive)?;
        let hidden = self.forward(graph, vars, tokens)?;
        Ok(graph.matmul_nt(hidden, vars[0]))
    }

    pub fn require_mode(&self, mode: Mode) -> Result<()> {
        if self.config.mode == mode {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                expected: mode.as_str(),
                actual: self.config.mode.as_str(),
            })
        }
    }

    /// One hidden vector per input token.
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut graph = Graph::new();
        let vars = self.bind(&mut graph);
        let out = self.forward(&mut graph, &vars, tokens)?;
        let t = graph.value(out);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    /// Distribution over the vocabulary for the token following `prefix`.
    pub fn lm_step(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.require_mode(Mode::Autoregressive)?;
        if prefix.is_empty() {
            return Err(Error::InvalidInput("lm_step needs a non-empty prefix".into()));
        }
        let mut graph = Graph::new();
        let vars = self.bind(&mut graph);
        let logits = self.lm_logits(&mut graph, &vars, prefix)?;
        let t = graph.value(logits);
        let last = t.row(t.rows() - 1);
        let mut probs = vec![0.0; last.len()];
        softmax_into(last, &mut probs);
        Ok(probs)
    }
}

impl Parameterized for ReferenceEncoder {
    fn parameters(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}

/// Linear softmax head over a pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Output class names, in index order.
    pub labels: Vec<String>,
}

impl LinearHead {
    pub fn new(hidden_width: usize, labels: Vec<String>, seed: u64) -> Self {
        let mut rng = derived_rng(seed, &["linear-head", &labels.join("\u{1f}")]);
        let k = labels.len();
        Self {
            weight: normal(&mut rng, hidden_width, k, 1.0 / (hidden_width as f64).sqrt()),
            bias: Tensor::zeros(1, k),
            labels,
        }
    }

    pub fn width(&self) -> usize {
        self.labels.len()
    }

    /// `pooled (1×d) · W + b`; `vars` are `[weight, bias]`.
    pub fn forward(&self, graph: &mut Graph<'_>, vars: &[Var], pooled: Var) -> Var {
        let z = graph.matmul(pooled, vars[0]);
        graph.add_row(z, vars[1])
    }
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn ones(d: usize) -> Tensor {
    Tensor::from_vec(1, d, vec![1.0; d])
}
