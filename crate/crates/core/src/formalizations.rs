//! Instance builders, losses and predictors for the supervised baseline and
//! the three zero-shot formalizations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{norm, dot, Graph, Var};
use crate::corpus::{Aspect, Example};
use crate::encoder::tokenizer::{Tokenizer, EOS, SEP, START};
use crate::encoder::{pool_var, LinearHead, Mode, Model, Parameterized, Pooling, ReferenceEncoder};
use crate::error::{Error, Result};
use crate::util::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formalization {
    Binary,
    Dual,
    Generative,
    SeqCls,
}

impl Formalization {
    pub fn mode(self) -> Mode {
        match self {
            Formalization::Generative => Mode::Autoregressive,
            _ => Mode::Bidirectional,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Formalization::Binary => "binary",
            Formalization::Dual => "dual",
            Formalization::Generative => "generative",
            Formalization::SeqCls => "seq_cls",
        }
    }

    pub fn is_zero_shot(self) -> bool {
        self != Formalization::SeqCls
    }
}

impl std::str::FromStr for Formalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Formalization::Binary),
            "dual" => Ok(Formalization::Dual),
            "generative" => Ok(Formalization::Generative),
            "seq_cls" | "seq-cls" => Ok(Formalization::SeqCls),
            other => Err(Error::Config(format!("unknown formalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelField {
    Single(String),
    Options(Vec<String>),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Bool(bool),
    Similarity(f64),
    Answer(String),
    ClassIndex(usize),
}

/// A formalization-specific model input with its training target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationInstance {
    pub kind: Formalization,
    pub text: String,
    pub label: LabelField,
    pub aspect: Option<Aspect>,
    pub target: Target,
}

impl ClassificationInstance {
    pub fn binary(text: &str, label: &str, is_match: bool) -> Self {
        Self {
            kind: Formalization::Binary,
            text: text.to_string(),
            label: LabelField::Single(label.to_string()),
            aspect: None,
            target: Target::Bool(is_match),
        }
    }

    pub fn dual(text: &str, label: &str, is_match: bool) -> Self {
        Self {
            kind: Formalization::Dual,
            text: text.to_string(),
            label: LabelField::Single(label.to_string()),
            aspect: None,
            target: Target::Similarity(if is_match { 1.0 } else { 0.0 }),
        }
    }

    pub fn generative(text: &str, options: Vec<String>, answer: &str) -> Result<Self> {
        if !options.iter().any(|o| o == answer) {
            return Err(Error::AnswerNotInOptions(answer.to_string()));
        }
        Ok(Self {
            kind: Formalization::Generative,
            text: text.to_string(),
            label: LabelField::Options(options),
            aspect: None,
            target: Target::Answer(answer.to_string()),
        })
    }

    pub fn sequence(text: &str, class: usize) -> Self {
        Self {
            kind: Formalization::SeqCls,
            text: text.to_string(),
            label: LabelField::None,
            aspect: None,
            target: Target::ClassIndex(class),
        }
    }

    fn single_label(&self) -> Result<&str> {
        match &self.label {
            LabelField::Single(l) => Ok(l),
            _ => Err(Error::InvalidInput(format!("{} instance without a single label", self.kind.as_str()))),
        }
    }
}

/// Index of the first maximum; NaN never wins.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if s.partial_cmp(&scores[b]) != Some(std::cmp::Ordering::Greater) => {}
            _ if s.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        log::debug!("zero-norm embedding; similarity treated as 0");
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

// ---------------------------------------------------------------------------
// Input layouts

/// `[start] prefix.. text..` with the text truncated to fit `max_len`. At
/// least one text token must survive.
fn with_truncated_text(prefix: Vec<u32>, text: &[u32], suffix: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let fixed = prefix.len() + suffix.len();
    if text.is_empty() {
        return Err(Error::InvalidInput("text tokenizes to an empty sequence".into()));
    }
    if fixed + 1 > max_len {
        return Err(Error::SequenceTooLong {
            len: fixed + 1,
            max: max_len,
        });
    }
    let keep = text.len().min(max_len - fixed);
    let mut out = prefix;
    out.extend_from_slice(&text[..keep]);
    out.extend_from_slice(suffix);
    Ok(out)
}

/// `[start] label ([sep] aspect) [sep] text`; only the text side is truncated.
pub fn binary_tokens(
    tokenizer: &Tokenizer,
    text: &str,
    label: &str,
    aspect: Option<&Aspect>,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut prefix = vec![START];
    prefix.extend(tokenizer.tokenize(label));
    if let Some(a) = aspect {
        prefix.push(SEP);
        prefix.push(tokenizer.aspect_token(a)?);
    }
    prefix.push(SEP);
    with_truncated_text(prefix, &tokenizer.tokenize(text), &[], max_len)
}

/// Text side of the dual encoder: `[start] ([aspect] [sep]) text`.
pub fn dual_text_tokens(
    tokenizer: &Tokenizer,
    text: &str,
    aspect: Option<&Aspect>,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut prefix = vec![START];
    if let Some(a) = aspect {
        prefix.push(tokenizer.aspect_token(a)?);
        prefix.push(SEP);
    }
    with_truncated_text(prefix, &tokenizer.tokenize(text), &[], max_len)
}

pub fn sequence_tokens(tokenizer: &Tokenizer, text: &str, max_len: usize) -> Result<Vec<u32>> {
    with_truncated_text(vec![START], &tokenizer.tokenize(text), &[], max_len)
}

// ---------------------------------------------------------------------------
// Supervised baseline

fn head_logits<'a>(
    model: &'a Model,
    graph: &mut Graph<'a>,
    vars: &[Var],
    tokens: &[u32],
) -> Result<Var> {
    let head = model.head()?;
    let (backbone, head_vars) = model.split_vars(vars);
    let hidden = model.encoder.forward(graph, backbone, tokens)?;
    let pooled = pool_var(graph, hidden, Pooling::FirstToken);
    Ok(head.forward(graph, head_vars, pooled))
}

fn head_probabilities(model: &Model, tokens: &[u32]) -> Result<Vec<f64>> {
    let mut graph = Graph::new();
    let vars = model.bind(&mut graph);
    let logits = head_logits(model, &mut graph, &vars, tokens)?;
    let row = graph.value(logits).row(0).to_vec();
    let mut probs = vec![0.0; row.len()];
    crate::autodiff::softmax_into(&row, &mut probs);
    Ok(probs)
}

/// `softmax(W h)` over the fixed label set; ties go to the lowest index.
pub fn seq_cls_predict(model: &Model, text: &str) -> Result<(usize, Vec<f64>)> {
    model.encoder.require_mode(Mode::Bidirectional)?;
    let tokens = sequence_tokens(model.encoder.tokenizer(), text, model.encoder.max_sequence_length())?;
    let probs = head_probabilities(model, &tokens)?;
    let best = argmax_first(&probs).ok_or(Error::Empty("head"))?;
    Ok((best, probs))
}

pub fn seq_cls_loss<'a>(
    model: &'a Model,
    graph: &mut Graph<'a>,
    vars: &[Var],
    instance: &ClassificationInstance,
) -> Result<Var> {
    let Target::ClassIndex(class) = instance.target else {
        return Err(Error::InvalidInput("sequence instance needs a class index".into()));
    };
    let width = model.head()?.width();
    if class >= width {
        return Err(Error::InvalidInput(format!("class {class} outside head of width {width}")));
    }
    let tokens = sequence_tokens(model.encoder.tokenizer(), &instance.text, model.encoder.max_sequence_length())?;
    let logits = head_logits(model, graph, vars, &tokens)?;
    Ok(graph.cross_entropy(logits, &[Some(class)]))
}

// ---------------------------------------------------------------------------
// Binary cross-encoding

pub const BINARY_HEAD_LABELS: [&str; 2] = ["false", "true"];

pub fn binary_head(hidden_width: usize, seed: u64) -> LinearHead {
    LinearHead::new(hidden_width, BINARY_HEAD_LABELS.iter().map(|s| s.to_string()).collect(), seed)
}

fn require_binary(model: &Model) -> Result<()> {
    model.encoder.require_mode(Mode::Bidirectional)?;
    if model.head()?.width() != 2 {
        return Err(Error::InvalidInput("binary formalization needs a 2-way head".into()));
    }
    Ok(())
}

/// One True instance per gold label, each followed by up to
/// `negatives_per_positive` False instances drawn without replacement from
/// the non-gold labels.
pub fn make_binary_pairs(
    example: &Example,
    vocabulary: &[String],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<ClassificationInstance>> {
    make_pairs(example, vocabulary, negatives_per_positive, seed, ClassificationInstance::binary)
}

/// Same sampling as [`make_binary_pairs`], with similarity targets.
pub fn make_dual_pairs(
    example: &Example,
    vocabulary: &[String],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<ClassificationInstance>> {
    make_pairs(example, vocabulary, negatives_per_positive, seed, ClassificationInstance::dual)
}

fn make_pairs(
    example: &Example,
    vocabulary: &[String],
    negatives_per_positive: usize,
    seed: u64,
    build: fn(&str, &str, bool) -> ClassificationInstance,
) -> Result<Vec<ClassificationInstance>> {
    if negatives_per_positive == 0 {
        return Err(Error::InvalidInput("negatives_per_positive must be at least 1".into()));
    }
    if let Some(missing) = example.gold_labels.iter().find(|g| !vocabulary.contains(g)) {
        return Err(Error::InvalidInput(format!("gold label {missing:?} is not in the vocabulary")));
    }
    let pool: Vec<&String> = vocabulary.iter().filter(|l| !example.gold_labels.contains(l)).collect();
    if pool.is_empty() {
        log::warn!(
            "dataset {}: vocabulary equals the gold set, emitting positives only",
            example.dataset_id
        );
    }
    let mut rng = derived_rng(seed, &[&example.dataset_id, &example.text]);
    let mut out = Vec::new();
    for gold in &example.gold_labels {
        out.push(build(&example.text, gold, true));
        let k = negatives_per_positive.min(pool.len());
        for neg in pool.choose_multiple(&mut rng, k) {
            out.push(build(&example.text, neg, false));
        }
    }
    Ok(out)
}

fn binary_logits<'a>(
    model: &'a Model,
    graph: &mut Graph<'a>,
    vars: &[Var],
    text: &str,
    label: &str,
    aspect: Option<&Aspect>,
) -> Result<Var> {
    let tokens = binary_tokens(model.encoder.tokenizer(), text, label, aspect, model.encoder.max_sequence_length())?;
    head_logits(model, graph, vars, &tokens)
}

/// `P(True | label, text)`, optionally conditioned on an aspect token.
pub fn binary_score(model: &Model, text: &str, label: &str, aspect: Option<&Aspect>) -> Result<f64> {
    require_binary(model)?;
    let tokens = binary_tokens(model.encoder.tokenizer(), text, label, aspect, model.encoder.max_sequence_length())?;
    Ok(head_probabilities(model, &tokens)?[1])
}

pub fn binary_predict(model: &Model, text: &str, candidates: &[String], aspect: Option<&Aspect>) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let scores = candidates
        .iter()
        .map(|c| binary_score(model, text, c, aspect))
        .collect::<Result<Vec<_>>>()?;
    let best = argmax_first(&scores).unwrap_or(0);
    Ok(candidates[best].clone())
}

/// Cross-entropy of the 2-way head against the pair's boolean target.
pub fn binary_loss<'a>(
    model: &'a Model,
    graph: &mut Graph<'a>,
    vars: &[Var],
    instance: &ClassificationInstance,
) -> Result<Var> {
    let Target::Bool(is_match) = instance.target else {
        return Err(Error::InvalidInput("binary instance needs a boolean target".into()));
    };
    let logits = binary_logits(model, graph, vars, &instance.text, instance.single_label()?, instance.aspect.as_ref())?;
    Ok(graph.cross_entropy(logits, &[Some(usize::from(is_match))]))
}

// ---------------------------------------------------------------------------
// Dual encoding

fn embed_tokens(encoder: &ReferenceEncoder, tokens: &[u32]) -> Result<Vec<f64>> {
    let states = encoder.encode(tokens)?;
    Ok(crate::encoder::pool(&states, &vec![true; states.len()], Pooling::Mean)?.values)
}

/// `Φ(x)`: encode then mean-pool.
pub fn dual_embed_text(encoder: &ReferenceEncoder, text: &str, aspect: Option<&Aspect>) -> Result<Vec<f64>> {
    encoder.require_mode(Mode::Bidirectional)?;
    let tokens = dual_text_tokens(encoder.tokenizer(), text, aspect, encoder.max_sequence_length())?;
    embed_tokens(encoder, &tokens)
}

/// Label side never carries the aspect token.
pub fn dual_embed_label(encoder: &ReferenceEncoder, label: &str) -> Result<Vec<f64>> {
    dual_embed_text(encoder, label, None)
}

/// Cosine similarity of the mean-pooled encodings; zero-norm embeddings give 0.
pub fn dual_encode_score(encoder: &ReferenceEncoder, text: &str, label: &str, aspect: Option<&Aspect>) -> Result<f64> {
    let x = dual_embed_text(encoder, text, aspect)?;
    let y = dual_embed_label(encoder, label)?;
    Ok(cosine(&x, &y))
}

pub fn dual_predict(
    encoder: &ReferenceEncoder,
    text: &str,
    candidates: &[String],
    aspect: Option<&Aspect>,
) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let x = dual_embed_text(encoder, text, aspect)?;
    let scores = candidates
        .iter()
        .map(|c| Ok(cosine(&x, &dual_embed_label(encoder, c)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(candidates[argmax_first(&scores).unwrap_or(0)].clone())
}

/// `(S(x, y) − target)²`
pub fn dual_loss<'a>(
    model: &'a Model,
    graph: &mut Graph<'a>,
    vars: &[Var],
    instance: &ClassificationInstance,
) -> Result<Var> {
    let Target::Similarity(target) = instance.target else {
        return Err(Error::InvalidInput("dual instance needs a similarity target".into()));
    };
    let encoder = &model.encoder;
    encoder.require_mode(Mode::Bidirectional)?;
    let (backbone, _) = model.split_vars(vars);
    let max = encoder.max_sequence_length();
    let text = dual_text_tokens(encoder.tokenizer(), &instance.text, instance.aspect.as_ref(), max)?;
    let label = dual_text_tokens(encoder.tokenizer(), instance.single_label()?, None, max)?;
    let hx = encoder.forward(graph, backbone, &text)?;
    let hy = encoder.forward(graph, backbone, &label)?;
    let px = pool_var(graph, hx, Pooling::Mean);
    let py = pool_var(graph, hy, Pooling::Mean);
    let s = graph.cosine(px, py);
    Ok(graph.squared_error(s, target))
}

// ---------------------------------------------------------------------------
// Generative multiple choice

pub const DEFAULT_TEMPLATE_ID: &str = "default";
pub const DEFAULT_TEMPLATE: &str =
    "{text} [sep] Which of these choices best describes the {aspect_phrase} of the text? Choices: {options}. Answer:";
pub const ASPECT_TEMPLATE_ID: &str = "aspect";
pub const ASPECT_TEMPLATE: &str = "{text} [sep] What aspect is this? Answer:";
const SEP_MARKER: &str = "[sep]";

/// `template_id → template` with slots `{text}`, `{options}` and
/// `{aspect_phrase}`; the literal `[sep]` renders as the separator token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePack {
    pub templates: BTreeMap<String, String>,
}

impl Default for TemplatePack {
    fn default() -> Self {
        Self {
            templates: [
                (DEFAULT_TEMPLATE_ID.to_string(), DEFAULT_TEMPLATE.to_string()),
                (ASPECT_TEMPLATE_ID.to_string(), ASPECT_TEMPLATE.to_string()),
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl TemplatePack {
    /// Reads a TOML file of `id = "template"` entries on top of the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let extra: BTreeMap<String, String> =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut pack = Self::default();
        pack.templates.extend(extra);
        Ok(pack)
    }

    pub fn get(&self, id: &str) -> Result<&str> {
        self.templates
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownTemplate(id.to_string()))
    }
}

/// A rendered prompt; the answer starts at token index `answer_start`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub tokens: Vec<u32>,
    pub answer_start: usize,
    pub options: Vec<String>,
}

fn tokenize_marked(tokenizer: &Tokenizer, s: &str) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, piece) in s.split(SEP_MARKER).enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend(tokenizer.tokenize(piece));
    }
    out
}

pub fn aspect_phrase(aspect: Option<&Aspect>) -> String {
    aspect.map_or_else(|| "category".to_string(), |a| a.name().replace('_', " "))
}

/// Renders a multiple-choice prompt. Only the text is truncated, and room is
/// left for the longest option plus the end-of-answer token.
pub fn build_generative_prompt(
    tokenizer: &Tokenizer,
    text: &str,
    options: &[String],
    aspect: Option<&Aspect>,
    template: &str,
    max_len: usize,
) -> Result<RenderedPrompt> {
    if options.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let filled = template
        .replace("{options}", &options.join(", "))
        .replace("{aspect_phrase}", &aspect_phrase(aspect));
    let (before, after) = filled.split_once("{text}").unwrap_or(("", filled.as_str()));

    let answer_budget = options.iter().map(|o| tokenizer.tokenize(o).len()).max().unwrap_or(0) + 1;
    let mut prefix = vec![START];
    prefix.extend(tokenize_marked(tokenizer, before));
    let suffix = tokenize_marked(tokenizer, after);
    let text_tokens = tokenizer.tokenize(text);
    let budget = max_len.checked_sub(answer_budget).ok_or(Error::SequenceTooLong {
        len: answer_budget,
        max: max_len,
    })?;
    let tokens = with_truncated_text(prefix, &text_tokens, &suffix, budget).map_err(|e| match e {
        Error::SequenceTooLong { len, .. } => Error::SequenceTooLong {
            len: len + answer_budget,
            max: max_len,
        },
        other => other,
    })?;
    let answer_start = tokens.len();
    Ok(RenderedPrompt {
        text: format!("{before}{text}{after}"),
        tokens,
        answer_start,
        options: options.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    FullSequence,
    AnswerOnly,
}

/// Prompt, answer and end-of-answer token.
pub fn generative_sequence(tokenizer: &Tokenizer, prompt: &RenderedPrompt, answer: &str) -> Result<Vec<u32>> {
    if !prompt.options.iter().any(|o| o == answer) {
        return Err(Error::AnswerNotInOptions(answer.to_string()));
    }
    let mut seq = prompt.tokens.clone();
    seq.extend(tokenizer.tokenize(answer));
    seq.push(EOS);
    Ok(seq)
}

/// Summed next-token cross-entropy; position 0 is the start token and is
/// never predicted.
pub fn generative_loss_var<'a>(
    model: &'a Model,
    graph: &mut Graph<'a>,
    vars: &[Var],
    prompt: &RenderedPrompt,
    answer: &str,
    scope: LossScope,
) -> Result<Var> {
    let encoder = &model.encoder;
    let seq = generative_sequence(encoder.tokenizer(), prompt, answer)?;
    let (backbone, _) = model.split_vars(vars);
    let input = &seq[..seq.len() - 1];
    let logits = encoder.lm_logits(graph, backbone, input)?;
    let targets: Vec<Option<usize>> = (0..input.len())
        .map(|t| {
            let next = t + 1;
            match scope {
                LossScope::AnswerOnly if next < prompt.answer_start => None,
                _ => Some(seq[next] as usize),
            }
        })
        .collect();
    Ok(graph.cross_entropy(logits, &targets))
}

pub fn generative_loss(model: &Model, prompt: &RenderedPrompt, answer: &str, scope: LossScope) -> Result<f64> {
    let mut graph = Graph::new();
    let vars = model.bind(&mut graph);
    let loss = generative_loss_var(model, &mut graph, &vars, prompt, answer, scope)?;
    Ok(graph.value(loss).scalar())
}

/// Loss for a generative training instance rendered with `template`.
pub fn generative_instance_loss<'a>(
    model: &'a Model,
    graph: &mut Graph<'a>,
    vars: &[Var],
    instance: &ClassificationInstance,
    template: &str,
    scope: LossScope,
) -> Result<Var> {
    let (LabelField::Options(options), Target::Answer(answer)) = (&instance.label, &instance.target) else {
        return Err(Error::InvalidInput("generative instance needs options and an answer".into()));
    };
    let prompt = build_generative_prompt(
        model.encoder.tokenizer(),
        &instance.text,
        options,
        instance.aspect.as_ref(),
        template,
        model.encoder.max_sequence_length(),
    )?;
    generative_loss_var(model, graph, vars, &prompt, answer, scope)
}

/// Greedy decoding until the end-of-answer token, `max_new_tokens`, or the
/// context limit.
pub fn generative_predict(encoder: &ReferenceEncoder, prompt: &RenderedPrompt, max_new_tokens: usize) -> Result<String> {
    encoder.require_mode(Mode::Autoregressive)?;
    let mut seq = prompt.tokens.clone();
    let mut generated = Vec::new();
    while generated.len() < max_new_tokens && seq.len() < encoder.max_sequence_length() {
        let probs = encoder.lm_step(&seq)?;
        let next = argmax_first(&probs).ok_or(Error::Empty("vocabulary"))? as u32;
        if next == EOS {
            break;
        }
        generated.push(next);
        seq.push(next);
    }
    let local = encoder.tokenizer().local_table(&prompt.text);
    Ok(encoder.tokenizer().decode(&generated, &local))
}
