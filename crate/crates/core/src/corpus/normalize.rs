use std::collections::HashSet;

use rand::seq::SliceRandom;

use super::{AspectCorpus, Dataset, Partition, Split};
use crate::error::{Error, Result};
use crate::util::derived_rng;

/// Subsamples in-domain corpora so every aspect has the same number of unique
/// train texts (the minimum over the inputs).
///
/// Within each dataset, sampling is stratified by the first gold label with
/// largest-remainder rounding and at least one text kept per class. Test
/// partitions pass through unchanged.
pub fn aspect_normalize(corpora: &[AspectCorpus], seed: u64) -> Result<Vec<AspectCorpus>> {
    if corpora.len() < 2 {
        return Err(Error::InvalidInput(
            "aspect normalization needs at least two corpora".into(),
        ));
    }
    for c in corpora {
        if let Some(d) = c.datasets.iter().find(|d| d.spec.split != Split::InDomain) {
            return Err(Error::InvalidInput(format!(
                "dataset {:?} is not in-domain",
                d.spec.dataset_id
            )));
        }
    }
    let counts: Vec<usize> = corpora.iter().map(AspectCorpus::unique_text_count).collect();
    let target = counts.iter().copied().min().unwrap_or(0);
    corpora
        .iter()
        .zip(counts)
        .map(|(c, n)| {
            if n == target {
                Ok(c.clone())
            } else {
                subsample(c, target, seed)
            }
        })
        .collect()
}

/// A unique train text and the label it is stratified by.
struct Unit<'a> {
    text: &'a str,
    stratum: &'a str,
}

fn subsample(corpus: &AspectCorpus, target: usize, seed: u64) -> Result<AspectCorpus> {
    // A text shared by several datasets of the aspect is owned by the first.
    let mut owned: HashSet<&str> = HashSet::new();
    let units: Vec<Vec<Unit>> = corpus
        .datasets
        .iter()
        .map(|d| {
            d.partition(Partition::Train)
                .filter(|e| owned.insert(e.text.as_str()))
                .map(|e| Unit {
                    text: &e.text,
                    stratum: e.first_label(),
                })
                .collect()
        })
        .collect();

    let sizes: Vec<usize> = units.iter().map(Vec::len).collect();
    let quotas = largest_remainder(&sizes, target);

    let mut kept: HashSet<&str> = HashSet::new();
    for ((dataset, units), quota) in corpus.datasets.iter().zip(&units).zip(quotas) {
        kept.extend(stratified_sample(dataset, units, quota, seed)?);
    }

    let datasets = corpus
        .datasets
        .iter()
        .map(|d| Dataset {
            spec: d.spec.clone(),
            examples: d
                .examples
                .iter()
                .filter(|e| e.partition == Partition::Test || kept.contains(e.text.as_str()))
                .cloned()
                .collect(),
        })
        .collect();
    Ok(AspectCorpus {
        aspect: corpus.aspect.clone(),
        datasets,
    })
}

fn stratified_sample<'a>(
    dataset: &Dataset,
    units: &[Unit<'a>],
    quota: usize,
    seed: u64,
) -> Result<Vec<&'a str>> {
    if quota >= units.len() {
        return Ok(units.iter().map(|u| u.text).collect());
    }

    let mut strata: Vec<(&str, Vec<&str>)> = Vec::new();
    for u in units {
        match strata.iter_mut().find(|(label, _)| *label == u.stratum) {
            Some((_, members)) => members.push(u.text),
            None => strata.push((u.stratum, vec![u.text])),
        }
    }

    let sizes: Vec<usize> = strata.iter().map(|(_, m)| m.len()).collect();
    let mut alloc = largest_remainder(&sizes, quota);

    if quota < strata.len() {
        let (label, _) = strata.iter().zip(&alloc).find(|(_, a)| **a == 0).expect("some class rounds to zero").0;
        return Err(Error::Normalization {
            dataset: dataset.spec.dataset_id.clone(),
            reason: format!(
                "class {label:?} would round to zero examples: budget of {quota} texts cannot cover {} classes",
                strata.len()
            ),
        });
    }
    for i in 0..alloc.len() {
        if alloc[i] == 0 {
            let donor = (0..alloc.len())
                .filter(|&j| alloc[j] > 1)
                .max_by(|&a, &b| alloc[a].cmp(&alloc[b]).then(b.cmp(&a)))
                .expect("budget covers every class");
            alloc[donor] -= 1;
            alloc[i] = 1;
            log::warn!(
                "dataset {}: class {:?} rounded to zero, keeping one example",
                dataset.spec.dataset_id,
                strata[i].0
            );
        }
    }

    let mut chosen = Vec::with_capacity(quota);
    for ((label, members), k) in strata.iter().zip(alloc) {
        let mut rng = derived_rng(seed, &[&dataset.spec.dataset_id, label]);
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.shuffle(&mut rng);
        chosen.extend(order[..k].iter().map(|&i| members[i]));
    }
    Ok(chosen)
}

/// Splits `total` proportionally to `weights` using largest-remainder
/// rounding; ties go to the lower index.
pub(crate) fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut alloc: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (total * weights[a] % sum, total * weights[b] % sum);
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        alloc[i] += 1;
    }
    alloc
}

/// Per-label share of unique train texts, keyed by first gold label.
#[cfg(test)]
pub(crate) fn label_proportions(dataset: &Dataset) -> std::collections::HashMap<String, f64> {
    use std::collections::HashMap;
    let mut seen = HashSet::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for e in dataset.partition(Partition::Train) {
        if seen.insert(e.text.as_str()) {
            *counts.entry(e.first_label().to_string()).or_default() += 1;
        }
    }
    let total = seen.len() as f64;
    counts.into_iter().map(|(k, v)| (k, v as f64 / total)).collect()
}
