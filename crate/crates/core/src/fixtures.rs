//! Deterministic synthetic benchmark with aspect-separable vocabularies and
//! controlled label-token overlap between in-domain and out-of-domain labels.
//!
//! Every in-domain label names a concept with its own keyword pool. An
//! out-of-domain dataset relabels concepts of the same aspect with new
//! phrases that reuse a chosen share of the concept's in-domain label words.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    label_tokens, write_jsonl, Aspect, Counts, Dataset, DatasetEntry, DatasetManifest, DatasetSpec, Example,
    Partition, Split,
};
use crate::error::{Error, Result};
use crate::util::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapLevel {
    Low,
    Medium,
    High,
}

impl OverlapLevel {
    /// Target share (0–100) of out-of-domain label tokens seen in-domain.
    pub fn target(self) -> f64 {
        match self {
            OverlapLevel::Low => 20.0,
            OverlapLevel::Medium => 50.0,
            OverlapLevel::High => 80.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OverlapLevel::Low => "low",
            OverlapLevel::Medium => "medium",
            OverlapLevel::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectSpec {
    pub aspect: Aspect,
    pub in_domain_datasets: usize,
    pub texts_per_label: usize,
    /// One out-of-domain dataset per entry.
    pub out_of_domain: Vec<OverlapLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub aspects: Vec<AspectSpec>,
    pub labels_per_dataset: usize,
    pub test_texts_per_label: usize,
    pub keywords_per_concept: usize,
    pub keywords_per_text: usize,
    pub markers_per_aspect: usize,
    pub noise_vocabulary: usize,
    pub noise_per_text: usize,
    /// Train texts for the j-th label shrink by `j * label_imbalance`
    /// (relative), so 0 gives balanced classes.
    pub label_imbalance: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let levels = [OverlapLevel::High, OverlapLevel::Medium, OverlapLevel::Low];
        Self {
            aspects: Aspect::BUILTIN
                .iter()
                .zip(levels)
                .map(|(a, level)| AspectSpec {
                    aspect: a.clone(),
                    in_domain_datasets: 2,
                    texts_per_label: 25,
                    out_of_domain: vec![level],
                })
                .collect(),
            labels_per_dataset: 4,
            test_texts_per_label: 10,
            keywords_per_concept: 6,
            keywords_per_text: 3,
            markers_per_aspect: 2,
            noise_vocabulary: 40,
            noise_per_text: 2,
            label_imbalance: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.aspects.len() < 3 {
            return bad("at least 3 aspects are required");
        }
        let names: BTreeSet<&str> = self.aspects.iter().map(|a| a.aspect.name()).collect();
        if names.len() != self.aspects.len() {
            return bad("aspects must be distinct");
        }
        if self.labels_per_dataset < 2 {
            return bad("labels_per_dataset must be at least 2");
        }
        if self.keywords_per_text == 0 || self.keywords_per_text > self.keywords_per_concept {
            return bad("keywords_per_text must be in 1..=keywords_per_concept");
        }
        if self.markers_per_aspect == 0 || self.test_texts_per_label == 0 {
            return bad("markers_per_aspect and test_texts_per_label must be positive");
        }
        if self.noise_per_text > self.noise_vocabulary {
            return bad("noise_per_text exceeds noise_vocabulary");
        }
        if !(0.0..1.0).contains(&(self.label_imbalance * (self.labels_per_dataset - 1) as f64)) {
            return bad("label_imbalance would leave a label without texts");
        }
        for a in &self.aspects {
            if a.in_domain_datasets == 0 || a.texts_per_label == 0 {
                return bad("every aspect needs in-domain datasets and texts");
            }
            if !a.out_of_domain.is_empty() && a.in_domain_datasets * self.labels_per_dataset < self.labels_per_dataset {
                return bad("not enough in-domain concepts to relabel");
            }
        }
        Ok(())
    }

    /// Train texts for label index `j` of an aspect.
    pub fn train_texts(&self, aspect: &AspectSpec, j: usize) -> usize {
        let factor = 1.0 - self.label_imbalance * j as f64;
        ((aspect.texts_per_label as f64 * factor).round() as usize).max(1)
    }
}

/// The generated datasets plus the realized overlap of every out-of-domain
/// dataset against the union of in-domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub datasets: Vec<Dataset>,
    pub overlap_levels: BTreeMap<String, OverlapLevel>,
    pub realized_overlap: BTreeMap<String, f64>,
}

impl SyntheticBenchmark {
    pub fn in_domain(&self) -> Vec<Dataset> {
        self.split(Split::InDomain)
    }

    pub fn out_of_domain(&self) -> Vec<Dataset> {
        self.split(Split::OutOfDomain)
    }

    fn split(&self, split: Split) -> Vec<Dataset> {
        self.datasets.iter().filter(|d| d.spec.split == split).cloned().collect()
    }

    /// Writes one `<dataset_id>.jsonl` per dataset and a `datasets.toml`
    /// manifest; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let mut manifest = DatasetManifest::default();
        for d in &self.datasets {
            let file = PathBuf::from(format!("{}.jsonl", d.spec.dataset_id));
            write_jsonl(&dir.join(&file), &d.examples)?;
            manifest.datasets.push(DatasetEntry {
                path: file,
                spec: d.spec.clone(),
            });
        }
        let path = dir.join("datasets.toml");
        manifest.write(&path)?;
        Ok(path)
    }
}

/// Spec whose vocabulary is the union of the given in-domain vocabularies.
pub fn union_spec(datasets: &[Dataset]) -> DatasetSpec {
    let labels: BTreeSet<String> = datasets
        .iter()
        .filter(|d| d.spec.split == Split::InDomain)
        .flat_map(|d| d.spec.label_vocabulary.iter().cloned())
        .collect();
    DatasetSpec {
        dataset_id: "in_domain_union".into(),
        aspect: Aspect::Other("union".into()),
        split: Split::InDomain,
        label_vocabulary: labels.into_iter().collect(),
        counts: None,
    }
}

/// Pronounceable pseudo-words, unique across the whole benchmark.
struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordSource {
    fn next(&mut self) -> String {
        const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        loop {
            let syllables = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[self.rng.gen_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn take(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.next()).collect()
    }
}

struct Concept {
    label: String,
    label_words: Vec<String>,
    keywords: Vec<String>,
}

struct TextSource<'a> {
    spec: &'a SyntheticSpec,
    noise: &'a [String],
    used: HashSet<String>,
}

impl TextSource<'_> {
    fn text(&mut self, rng: &mut ChaCha8Rng, markers: &[String], concept: &Concept) -> Result<String> {
        for _ in 0..200 {
            let mut words: Vec<&String> = vec![markers.choose(rng).expect("validated non-empty")];
            words.extend(concept.keywords.choose_multiple(rng, self.spec.keywords_per_text));
            words.extend(self.noise.choose_multiple(rng, self.spec.noise_per_text));
            words.shuffle(rng);
            let text = words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ");
            if self.used.insert(text.clone()) {
                return Ok(text);
            }
        }
        Err(Error::Config(format!(
            "synthetic spec: cannot draw enough distinct texts for label {:?}",
            concept.label
        )))
    }
}

fn phrase_length(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=3)
}

/// Splits `reused` word slots over labels of the given lengths, one round at
/// a time, bounded by each label's length and its concept's word count.
fn allocate_reuse(lengths: &[usize], capacity: &[usize], reused: usize) -> Option<Vec<usize>> {
    let mut alloc = vec![0; lengths.len()];
    let mut left = reused;
    while left > 0 {
        let mut progressed = false;
        for i in 0..lengths.len() {
            // a one-word phrase fully reused from a one-word label would repeat it
            let limit = if lengths[i] == 1 && capacity[i] == 1 { 0 } else { lengths[i].min(capacity[i]) };
            if left > 0 && alloc[i] < limit {
                alloc[i] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return None;
        }
    }
    Some(alloc)
}

/// Builds the benchmark. The same spec and seed always give the same output.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let mut words = WordSource {
        rng: derived_rng(seed, &["words"]),
        used: HashSet::new(),
    };
    let noise = words.take(spec.noise_vocabulary);
    let mut texts = TextSource {
        spec,
        noise: &noise,
        used: HashSet::new(),
    };
    let mut datasets = Vec::new();
    let mut levels = BTreeMap::new();
    let mut in_domain_labels: HashSet<String> = HashSet::new();
    let mut pending_out = Vec::new();

    for aspect_spec in &spec.aspects {
        let aspect = &aspect_spec.aspect;
        let mut rng = derived_rng(seed, &["aspect", aspect.name()]);
        let markers = words.take(spec.markers_per_aspect);
        let mut concepts = Vec::new();
        for d in 0..aspect_spec.in_domain_datasets {
            let dataset_id = format!("{}_in_{d}", aspect.name());
            let mut dataset_concepts = Vec::new();
            for _ in 0..spec.labels_per_dataset {
                let label_words = words.take(phrase_length(&mut rng));
                let keywords = words.take(spec.keywords_per_concept);
                dataset_concepts.push(Concept {
                    label: label_words.join(" "),
                    label_words,
                    keywords,
                });
            }
            let mut examples = Vec::new();
            for (j, concept) in dataset_concepts.iter().enumerate() {
                in_domain_labels.insert(concept.label.clone());
                for (partition, n) in [
                    (Partition::Train, spec.train_texts(aspect_spec, j)),
                    (Partition::Test, spec.test_texts_per_label),
                ] {
                    for _ in 0..n {
                        examples.push(Example {
                            text: texts.text(&mut rng, &markers, concept)?,
                            gold_labels: vec![concept.label.clone()],
                            dataset_id: dataset_id.clone(),
                            aspect: aspect.clone(),
                            split: Split::InDomain,
                            partition,
                        });
                    }
                }
            }
            examples.sort_by_key(|e| e.partition);
            datasets.push(dataset(dataset_id, aspect, Split::InDomain, &dataset_concepts, examples));
            concepts.extend(dataset_concepts);
        }
        pending_out.push((aspect_spec, markers, concepts, rng));
    }

    for (aspect_spec, markers, concepts, mut rng) in pending_out {
        let aspect = &aspect_spec.aspect;
        for (o, level) in aspect_spec.out_of_domain.iter().enumerate() {
            let dataset_id = format!("{}_out_{o}_{}", aspect.name(), level.as_str());
            // multi-word labels leave room for high reuse
            let roomy: Vec<&Concept> = concepts.iter().filter(|c| c.label_words.len() >= 2).collect();
            let pool: Vec<&Concept> = if roomy.len() >= spec.labels_per_dataset {
                roomy
            } else {
                concepts.iter().collect()
            };
            let mut chosen: Vec<&Concept> = pool.choose_multiple(&mut rng, spec.labels_per_dataset).copied().collect();
            chosen.sort_by(|a, b| a.label.cmp(&b.label));
            let capacity: Vec<usize> = chosen.iter().map(|c| c.label_words.len()).collect();

            let mut plan = None;
            for _ in 0..200 {
                let lengths: Vec<usize> = chosen.iter().map(|_| phrase_length(&mut rng)).collect();
                let total: usize = lengths.iter().sum();
                let reused = (level.target() / 100.0 * total as f64).round() as usize;
                let realized = 100.0 * reused as f64 / total as f64;
                if (realized - level.target()).abs() > 10.0 {
                    continue;
                }
                if let Some(alloc) = allocate_reuse(&lengths, &capacity, reused) {
                    plan = Some((lengths, alloc));
                    break;
                }
            }
            let (lengths, alloc) = plan.ok_or_else(|| {
                Error::Config(format!(
                    "synthetic spec: overlap target {} is infeasible for {dataset_id}",
                    level.target()
                ))
            })?;

            let mut relabeled = Vec::new();
            for ((concept, &len), &reuse) in chosen.iter().zip(&lengths).zip(&alloc) {
                let mut phrase: Vec<String> = concept.label_words.choose_multiple(&mut rng, reuse).cloned().collect();
                phrase.extend(words.take(len - reuse));
                phrase.shuffle(&mut rng);
                // a fully reused phrase can only repeat its own concept's label,
                // and then has at least two distinct words to reorder
                if in_domain_labels.contains(&phrase.join(" ")) {
                    phrase.rotate_left(1);
                }
                debug_assert!(!in_domain_labels.contains(&phrase.join(" ")));
                relabeled.push(Concept {
                    label: phrase.join(" "),
                    label_words: phrase,
                    keywords: concept.keywords.clone(),
                });
            }
            let mut examples = Vec::new();
            for concept in &relabeled {
                for partition in [Partition::Train, Partition::Test] {
                    let n = match partition {
                        Partition::Train => aspect_spec.texts_per_label,
                        Partition::Test => spec.test_texts_per_label,
                    };
                    for _ in 0..n {
                        examples.push(Example {
                            text: texts.text(&mut rng, &markers, concept)?,
                            gold_labels: vec![concept.label.clone()],
                            dataset_id: dataset_id.clone(),
                            aspect: aspect.clone(),
                            split: Split::OutOfDomain,
                            partition,
                        });
                    }
                }
            }
            levels.insert(dataset_id.clone(), *level);
            datasets.push(dataset(dataset_id, aspect, Split::OutOfDomain, &relabeled, examples));
        }
    }

    let union = label_tokens(&union_spec(&datasets).label_vocabulary);
    let realized_overlap = datasets
        .iter()
        .filter(|d| d.spec.split == Split::OutOfDomain)
        .map(|d| {
            let own = label_tokens(&d.spec.label_vocabulary);
            let shared = own.intersection(&union).count();
            (d.spec.dataset_id.clone(), 100.0 * shared as f64 / own.len() as f64)
        })
        .collect();
    Ok(SyntheticBenchmark {
        datasets,
        overlap_levels: levels,
        realized_overlap,
    })
}

fn dataset(dataset_id: String, aspect: &Aspect, split: Split, concepts: &[Concept], examples: Vec<Example>) -> Dataset {
    let counts = Counts {
        train: examples.iter().filter(|e| e.partition == Partition::Train).count(),
        test: examples.iter().filter(|e| e.partition == Partition::Test).count(),
    };
    Dataset {
        spec: DatasetSpec {
            dataset_id,
            aspect: aspect.clone(),
            split,
            label_vocabulary: concepts.iter().map(|c| c.label.clone()).collect(),
            counts: Some(counts),
        },
        examples,
    }
}
