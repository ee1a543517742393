//! Accuracy under the any-gold-label rule, the generated-answer fallback and
//! aggregate reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, norm};
use crate::corpus::{canonical_label, Aspect, Dataset, Example, Partition, Split};
use crate::encoder::{Mode, Model, SentenceEmbedder};
use crate::error::{Error, Result};
use crate::formalizations::{
    argmax_first, binary_predict, build_generative_prompt, dual_predict, generative_predict, seq_cls_predict,
    Formalization,
};
use crate::util::fnv1a;

/// Stand-in embedded when the model generates nothing.
pub const EMPTY_GENERATION_PLACEHOLDER: &str = "unknown";

/// Whether `prediction` matches any gold label after canonicalization.
pub fn is_correct(prediction: &str, gold: &[String]) -> bool {
    let p = canonical_label(prediction);
    gold.iter().any(|g| canonical_label(g) == p)
}

/// Resolves a free-form answer to a candidate: a canonical exact match wins
/// outright, otherwise the candidate with the most similar embedding.
pub fn map_generated_to_label(generated: &str, candidates: &[String], embedder: &dyn SentenceEmbedder) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let wanted = canonical_label(generated);
    if let Some(hit) = candidates.iter().find(|c| canonical_label(c) == wanted) {
        return Ok(hit.clone());
    }
    if candidates.len() == 1 {
        return Ok(candidates[0].clone());
    }
    let query = if wanted.is_empty() {
        EMPTY_GENERATION_PLACEHOLDER
    } else {
        generated
    };
    let q = embedder.embed(query)?;
    let scores = candidates
        .iter()
        .map(|c| {
            let v = embedder.embed(c)?;
            let denom = norm(&q) * norm(&v);
            Ok(if denom == 0.0 { 0.0 } else { dot(&q, &v) / denom })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(candidates[argmax_first(&scores).unwrap_or(0)].clone())
}

/// Whether implicit models are told the target dataset's aspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AspectPolicy {
    #[default]
    Omit,
    DatasetAspect,
}

pub trait Predictor {
    /// Picks one of `candidates` for `example`.
    fn predict(&self, example: &Example, candidates: &[String]) -> Result<String>;
}

/// A trained model behind one of the formalizations.
pub struct ModelPredictor<'a> {
    model: &'a Model,
    formalization: Formalization,
    aspect_policy: AspectPolicy,
    embedder: &'a dyn SentenceEmbedder,
    template: String,
    max_new_tokens: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(
        model: &'a Model,
        formalization: Formalization,
        aspect_policy: AspectPolicy,
        embedder: &'a dyn SentenceEmbedder,
        template: &str,
        max_new_tokens: usize,
    ) -> Result<Self> {
        model.encoder.require_mode(formalization.mode())?;
        match formalization {
            Formalization::Binary | Formalization::SeqCls => {
                model.head()?;
            }
            _ => {}
        }
        Ok(Self {
            model,
            formalization,
            aspect_policy,
            embedder,
            template: template.to_string(),
            max_new_tokens,
        })
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, example: &Example, candidates: &[String]) -> Result<String> {
        let aspect: Option<&Aspect> = match self.aspect_policy {
            AspectPolicy::Omit => None,
            AspectPolicy::DatasetAspect => Some(&example.aspect),
        };
        let encoder = &self.model.encoder;
        match self.formalization {
            Formalization::Binary => binary_predict(self.model, &example.text, candidates, aspect),
            Formalization::Dual => dual_predict(encoder, &example.text, candidates, aspect),
            Formalization::Generative => {
                let prompt = build_generative_prompt(
                    encoder.tokenizer(),
                    &example.text,
                    candidates,
                    aspect,
                    &self.template,
                    encoder.max_sequence_length(),
                )?;
                debug_assert_eq!(encoder.mode(), Mode::Autoregressive);
                let generated = generative_predict(encoder, &prompt, self.max_new_tokens)?;
                map_generated_to_label(&generated, candidates, self.embedder)
            }
            Formalization::SeqCls => {
                let (index, _) = seq_cls_predict(self.model, &example.text)?;
                Ok(self.model.head()?.labels[index].clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub text_hash: String,
    pub gold: String,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub dataset_id: String,
    pub aspect: Aspect,
    pub split: Split,
    pub accuracy: f64,
    pub correct: usize,
    pub n_examples: usize,
    #[serde(skip)]
    pub predictions: Vec<PredictionRow>,
}

impl MetricsRecord {
    /// Writes the per-example dump as CSV.
    pub fn write_predictions(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(format!("create {}", path.display()), e.into()))?;
        for row in &self.predictions {
            w.serialize(row)
                .map_err(|e| Error::io(format!("write {}", path.display()), e.into()))?;
        }
        w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
    }
}

/// Scores every test example of `dataset` against its own label vocabulary.
pub fn evaluate(predictor: &dyn Predictor, run_id: &str, dataset: &Dataset) -> Result<MetricsRecord> {
    let candidates = &dataset.spec.label_vocabulary;
    let mut predictions = Vec::new();
    for example in dataset.partition(Partition::Test) {
        let prediction = predictor.predict(example, candidates)?;
        let correct = is_correct(&prediction, &example.gold_labels);
        predictions.push(PredictionRow {
            text_hash: format!("{:016x}", fnv1a(example.text.as_bytes())),
            gold: example.gold_labels.join("|"),
            prediction,
            correct,
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("test partition"));
    }
    let correct = predictions.iter().filter(|p| p.correct).count();
    Ok(MetricsRecord {
        run_id: run_id.to_string(),
        dataset_id: dataset.spec.dataset_id.clone(),
        aspect: dataset.spec.aspect.clone(),
        split: dataset.spec.split,
        accuracy: correct as f64 / predictions.len() as f64,
        correct,
        n_examples: predictions.len(),
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub records: Vec<MetricsRecord>,
    pub aspect_means: BTreeMap<String, f64>,
    pub average: f64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Per-aspect means and the unweighted mean over datasets.
pub fn aggregate(run_id: &str, records: Vec<MetricsRecord>) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Empty("metrics records"));
    }
    let mut by_aspect: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &records {
        by_aspect.entry(r.aspect.name().to_string()).or_default().push(r.accuracy);
    }
    Ok(Report {
        run_id: run_id.to_string(),
        average: mean(records.iter().map(|r| r.accuracy)),
        aspect_means: by_aspect.into_iter().map(|(a, v)| (a, mean(v))).collect(),
        records,
    })
}

impl Report {
    /// Accuracy table in percent, one decimal, followed by aspect means.
    pub fn to_table(&self) -> String {
        let width = self
            .records
            .iter()
            .map(|r| r.dataset_id.len())
            .chain(["dataset".len(), "Average".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:<10}  {:>5}  {:>8}", "dataset", "aspect", "split", "accuracy");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:<width$}  {:<10}  {:>5}  {:>8.1}",
                r.dataset_id,
                r.aspect.name(),
                r.split.as_str(),
                100.0 * r.accuracy
            );
        }
        for (aspect, m) in &self.aspect_means {
            let _ = writeln!(out, "{:<width$}  {:<10}  {:>5}  {:>8.1}", "mean", aspect, "", 100.0 * m);
        }
        let _ = writeln!(out, "{:<width$}  {:<10}  {:>5}  {:>8.1}", "Average", "", "", 100.0 * self.average);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::encoder::BagOfTokensEmbedder;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    struct Counting<'a> {
        inner: BagOfTokensEmbedder,
        calls: &'a Cell<usize>,
    }

    impl SentenceEmbedder for Counting<'_> {
        fn embed(&self, text: &str) -> Result<Vec<f64>> {
            self.calls.set(self.calls.get() + 1);
            self.inner.embed(text)
        }
    }

    #[test]
    fn any_gold_label_counts() {
        assert!(is_correct("joy", &labels(&["joy"])));
        assert!(is_correct("joy", &labels(&["anger", "joy", "love"])));
        assert!(is_correct("Joy ", &labels(&["joy"])));
        assert!(is_correct("check   Balance", &labels(&["check balance"])));
        assert!(!is_correct("joyful", &labels(&["joy"])));
    }

    #[test]
    fn exact_match_skips_embedder() {
        let calls = Cell::new(0);
        let e = Counting {
            inner: BagOfTokensEmbedder::default(),
            calls: &calls,
        };
        let c = labels(&["banking", "sports"]);
        assert_eq!(map_generated_to_label("banking", &c, &e).unwrap(), "banking");
        assert_eq!(map_generated_to_label(" Sports", &c, &e).unwrap(), "sports");
        assert_eq!(calls.get(), 0);
        assert_eq!(map_generated_to_label("anything", &labels(&["only"]), &e).unwrap(), "only");
        assert!(matches!(map_generated_to_label("x", &[], &e), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn fallback_uses_token_cosine() {
        let e = BagOfTokensEmbedder::default();
        let c = labels(&["finance", "team sports goal"]);
        assert_eq!(map_generated_to_label("team scores goal", &c, &e).unwrap(), "team sports goal");
        // nothing shared with either: all-zero similarities tie at index 0
        assert_eq!(map_generated_to_label("zzz", &c, &e).unwrap(), "finance");
        // empty output falls back to the placeholder
        let c = labels(&["sports", "unknown topic"]);
        assert_eq!(map_generated_to_label("", &c, &e).unwrap(), "unknown topic");
    }

    #[test]
    fn aggregate_means() {
        let rec = |id: &str, aspect: Aspect, acc: f64| MetricsRecord {
            run_id: "r".into(),
            dataset_id: id.into(),
            aspect,
            split: Split::OutOfDomain,
            accuracy: acc,
            correct: 0,
            n_examples: 1,
            predictions: Vec::new(),
        };
        let one = aggregate("r", vec![rec("a", Aspect::Topic, 0.5)]).unwrap();
        assert_eq!(one.average, 0.5);
        let r = aggregate(
            "r",
            vec![
                rec("a", Aspect::Topic, 0.2),
                rec("b", Aspect::Topic, 0.4),
                rec("c", Aspect::Intent, 0.9),
            ],
        )
        .unwrap();
        assert!((r.aspect_means["topic"] - 0.3).abs() < 1e-12);
        assert!((r.average - 0.5).abs() < 1e-12);
        assert!(r.to_table().contains("Average"));
        assert!(aggregate("r", Vec::new()).is_err());
    }
}
