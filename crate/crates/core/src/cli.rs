//! `zstc` subcommands: synth, prepare, train, eval, overlap, report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{RunConfig, OUT_ROOT_ENV};
use crate::corpus::{
    aspect_normalize, canonical_serialization, load_manifest, overlap_matrix, write_jsonl, AspectCorpus, Dataset,
    DatasetEntry, DatasetManifest, Example, Split,
};
use crate::encoder::{load_checkpoint, BagOfTokensEmbedder, Model, ReferenceEncoder};
use crate::evaluation::{aggregate, evaluate, ModelPredictor, Report};
use crate::fixtures::{generate, SyntheticSpec};
use crate::formalizations::{Formalization, LossScope};
use crate::strategies::{run_plan, Strategy};

const MANIFEST: &str = "datasets.toml";

#[derive(Debug, Parser)]
#[command(name = "zstc", version, about = "Zero-shot text classification runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark as raw JSONL datasets.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        texts_per_label: Option<usize>,
        #[arg(long)]
        test_texts_per_label: Option<usize>,
    },
    /// Ingest, normalize and describe the raw datasets.
    Prepare(RunArgs),
    /// Run the training plan and write per-stage checkpoints.
    Train(RunArgs),
    /// Evaluate a checkpoint on test partitions.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to the run's last checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Which::Both)]
        which: Which,
    },
    /// Print the label-overlap matrix of the prepared corpus.
    Overlap(RunArgs),
    /// Print the metrics tables of a run.
    Report(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    In,
    Out,
    Both,
}

impl Which {
    fn as_str(self) -> &'static str {
        match self {
            Which::In => "in",
            Which::Out => "out",
            Which::Both => "both",
        }
    }

    fn selects(self, split: Split) -> bool {
        match self {
            Which::In => split == Split::InDomain,
            Which::Out => split == Split::OutOfDomain,
            Which::Both => true,
        }
    }
}

/// Config file plus overrides; a flag wins over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub raw_manifest: Option<PathBuf>,
    #[arg(long)]
    pub prepared_dir: Option<PathBuf>,
    #[arg(long)]
    pub formalization: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Seeds normalization, initialization and every stage.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, value_parser = ["full_sequence", "answer_only"])]
    pub loss_scope: Option<String>,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub dump_predictions: bool,
}

impl RunArgs {
    /// Resolved configuration: flags over file over environment over defaults.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::read(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.run_id {
            c.run_id = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            c.out_dir = Some(v.clone());
        }
        if let Some(v) = &self.raw_manifest {
            c.data.raw_manifest = Some(v.clone());
        }
        if let Some(v) = &self.prepared_dir {
            c.data.prepared_dir = Some(v.clone());
        }
        if let Some(v) = &self.formalization {
            c.formalization = v.parse::<Formalization>()?;
        }
        if let Some(v) = &self.strategy {
            c.strategy = v.parse::<Strategy>()?;
        }
        if let Some(seed) = self.seed {
            c.normalize.seed = seed;
            c.encoder.seed = seed;
            c.train.finetune.seed = Some(seed);
            c.train.pretrain.seed = Some(seed);
        }
        if let Some(v) = self.learning_rate {
            c.train.finetune.learning_rate = Some(v);
            c.train.pretrain.learning_rate = Some(v);
        }
        if let Some(v) = self.epochs {
            c.train.finetune.epochs = Some(v);
        }
        if let Some(v) = self.pretrain_epochs {
            c.train.pretrain.epochs = Some(v);
        }
        if let Some(v) = self.batch_size {
            c.train.finetune.batch_size = Some(v);
            c.train.pretrain.batch_size = Some(v);
        }
        if let Some(v) = &self.loss_scope {
            c.train.loss_scope = match v.as_str() {
                "answer_only" => LossScope::AnswerOnly,
                _ => LossScope::FullSequence,
            };
        }
        if self.no_normalize {
            c.normalize.enabled = false;
        }
        if self.dump_predictions {
            c.eval.dump_predictions = true;
        }
        let env = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
        Ok(c.resolve(env)?)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            texts_per_label,
            test_texts_per_label,
        } => cmd_synth(&out, seed, texts_per_label, test_texts_per_label),
        Command::Prepare(args) => cmd_prepare(&args.resolve()?).map(|_| ()),
        Command::Train(args) => cmd_train(&args.resolve()?).map(|_| ()),
        Command::Eval { run, checkpoint, which } => {
            let report = cmd_eval(&run.resolve()?, checkpoint.as_deref(), which)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Overlap(args) => {
            print!("{}", cmd_overlap(&args.resolve()?)?);
            Ok(())
        }
        Command::Report(args) => {
            print!("{}", cmd_report(&args.resolve()?)?);
            Ok(())
        }
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("create {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("write {}", path.display()))
}

pub fn cmd_synth(
    out: &Path,
    seed: u64,
    texts_per_label: Option<usize>,
    test_texts_per_label: Option<usize>,
) -> anyhow::Result<()> {
    let mut spec = SyntheticSpec::default();
    if let Some(n) = texts_per_label {
        spec.aspects.iter_mut().for_each(|a| a.texts_per_label = n);
    }
    if let Some(n) = test_texts_per_label {
        spec.test_texts_per_label = n;
    }
    let bench = generate(&spec, seed)?;
    let manifest = bench.write(out)?;
    for (id, overlap) in &bench.realized_overlap {
        println!("{id} {} overlap {overlap:.1}", bench.overlap_levels[id].as_str());
    }
    println!("wrote {}", manifest.display());
    Ok(())
}

/// Per-dataset size rows followed by unique train-text counts per aspect.
pub fn stats_table(datasets: &[Dataset]) -> String {
    let mut out = String::from("dataset aspect train/test #labels\n");
    for d in datasets {
        let c = d.counts();
        let _ = writeln!(
            out,
            "{} {} {}/{} {}",
            d.spec.dataset_id,
            d.spec.aspect,
            c.train,
            c.test,
            d.spec.label_vocabulary.len()
        );
    }
    out.push_str("\naspect unique_in_domain_train_texts\n");
    let in_domain: Vec<Dataset> = datasets.iter().filter(|d| d.spec.split == Split::InDomain).cloned().collect();
    for corpus in AspectCorpus::group(in_domain) {
        let _ = writeln!(out, "{} {}", corpus.aspect, corpus.unique_text_count());
    }
    out
}

/// Loads the raw datasets, equalizes in-domain aspects and writes the
/// prepared corpus. Returns the prepared datasets.
pub fn cmd_prepare(config: &RunConfig) -> anyhow::Result<Vec<Dataset>> {
    let raw = config.raw_manifest()?;
    let dir = config.prepared_dir()?;
    let datasets = load_manifest(raw).with_context(|| format!("ingest {}", raw.display()))?;

    let (in_domain, out_of_domain): (Vec<Dataset>, Vec<Dataset>) =
        datasets.into_iter().partition(|d| d.spec.split == Split::InDomain);
    let order: Vec<String> = in_domain.iter().map(|d| d.spec.dataset_id.clone()).collect();
    let corpora = AspectCorpus::group(in_domain);
    let corpora = if config.normalize.enabled && corpora.len() >= 2 {
        aspect_normalize(&corpora, config.normalize.seed)?
    } else {
        if config.normalize.enabled {
            log::warn!("fewer than two in-domain aspects; skipping aspect normalization");
        }
        corpora
    };
    let mut by_id: BTreeMap<String, Dataset> = corpora
        .into_iter()
        .flat_map(|c| c.datasets)
        .map(|d| (d.spec.dataset_id.clone(), d))
        .collect();
    let mut prepared: Vec<Dataset> = order.iter().filter_map(|id| by_id.remove(id)).collect();
    prepared.extend(out_of_domain);
    for d in &mut prepared {
        d.spec.counts = Some(d.counts());
    }

    fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    let mut manifest = DatasetManifest::default();
    for d in &prepared {
        let file = PathBuf::from(format!("{}.jsonl", d.spec.dataset_id));
        write_jsonl(&dir.join(&file), &d.examples)?;
        manifest.datasets.push(DatasetEntry {
            path: file,
            spec: d.spec.clone(),
        });
    }
    manifest.write(&dir.join(MANIFEST))?;
    let all: Vec<Example> = prepared.iter().flat_map(|d| d.examples.iter().cloned()).collect();
    write_file(&dir.join("corpus.jsonl"), &canonical_serialization(&all))?;
    let stats = stats_table(&prepared);
    write_file(&dir.join("stats.txt"), &stats)?;
    if let Some(matrix) = matrix_for(&prepared)? {
        write_file(&dir.join("overlap.json"), &(serde_json::to_string_pretty(&matrix)? + "\n"))?;
        write_file(&dir.join("overlap.txt"), &matrix.to_table())?;
    }
    print!("{stats}");
    Ok(prepared)
}

fn matrix_for(datasets: &[Dataset]) -> anyhow::Result<Option<crate::corpus::OverlapMatrix>> {
    let specs = |split| {
        datasets
            .iter()
            .filter(|d| d.spec.split == split)
            .map(|d| d.spec.clone())
            .collect::<Vec<_>>()
    };
    let (ins, outs) = (specs(Split::InDomain), specs(Split::OutOfDomain));
    if ins.is_empty() || outs.is_empty() {
        return Ok(None);
    }
    Ok(Some(overlap_matrix(&ins, &outs)?))
}

pub fn load_prepared(config: &RunConfig) -> anyhow::Result<Vec<Dataset>> {
    let path = config.prepared_dir()?.join(MANIFEST);
    if !path.exists() {
        bail!("no prepared corpus at {}; run `zstc prepare` first", path.display());
    }
    Ok(load_manifest(&path)?)
}

fn persist_config(config: &RunConfig, run_dir: &Path) -> anyhow::Result<()> {
    write_file(&run_dir.join("config.toml"), &config.to_toml()?)
}

/// Runs the plan; returns the checkpoint directories in stage order.
pub fn cmd_train(config: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let run_dir = config.run_dir()?;
    let datasets = load_prepared(config)?;
    let in_domain: Vec<Dataset> = datasets.into_iter().filter(|d| d.spec.split == Split::InDomain).collect();
    persist_config(config, &run_dir)?;
    let plan = config.plan()?;
    let model = Model::new(ReferenceEncoder::new(config.encoder.clone())?);
    let (_, artifacts) = run_plan(&plan, model, &in_domain, &run_dir)
        .with_context(|| format!("training run {}", config.run_id().unwrap_or("?")))?;
    for c in &artifacts.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(artifacts.checkpoints)
}

fn last_checkpoint(run_dir: &Path) -> anyhow::Result<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut stages: Vec<usize> = fs::read_dir(&dir)
        .with_context(|| format!("no checkpoints under {}", dir.display()))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
        .collect();
    stages.sort_unstable();
    match stages.last() {
        Some(i) => Ok(dir.join(i.to_string())),
        None => bail!("no checkpoints under {}", dir.display()),
    }
}

/// Evaluates on the selected test partitions and writes
/// `metrics/<which>.json` and `metrics/<which>.txt`.
pub fn cmd_eval(config: &RunConfig, checkpoint: Option<&Path>, which: Which) -> anyhow::Result<Report> {
    let run_id = config.run_id()?;
    let run_dir = config.run_dir()?;
    let checkpoint = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => last_checkpoint(&run_dir)?,
    };
    let model = load_checkpoint(&checkpoint).with_context(|| format!("load checkpoint {}", checkpoint.display()))?;
    let embedder = BagOfTokensEmbedder::default();
    let plan = config.plan()?;
    let template = plan.templates.get(&plan.template_id)?;
    let predictor = ModelPredictor::new(
        &model,
        config.formalization,
        config.aspect_policy(),
        &embedder,
        template,
        config.eval.max_new_tokens,
    )
    .with_context(|| format!("checkpoint {} does not fit formalization {}", checkpoint.display(), config.formalization.as_str()))?;

    let datasets = load_prepared(config)?;
    let selected: Vec<&Dataset> = datasets.iter().filter(|d| which.selects(d.spec.split)).collect();
    if selected.is_empty() {
        bail!("no {} datasets in the prepared corpus", which.as_str());
    }
    let metrics = run_dir.join("metrics");
    let mut records = Vec::new();
    for d in selected {
        let record = evaluate(&predictor, run_id, d).with_context(|| format!("evaluate {}", d.spec.dataset_id))?;
        if config.eval.dump_predictions {
            let path = metrics.join("predictions").join(format!("{}.csv", d.spec.dataset_id));
            fs::create_dir_all(path.parent().expect("has parent"))?;
            record.write_predictions(&path)?;
        }
        records.push(record);
    }
    let report = aggregate(run_id, records)?;
    persist_config(config, &run_dir)?;
    write_file(&metrics.join(format!("{}.json", which.as_str())), &(report.to_json()? + "\n"))?;
    write_file(&metrics.join(format!("{}.txt", which.as_str())), &report.to_table())?;
    Ok(report)
}

pub fn cmd_overlap(config: &RunConfig) -> anyhow::Result<String> {
    let datasets = match config.prepared_dir() {
        Ok(dir) if dir.join(MANIFEST).exists() => load_prepared(config)?,
        _ => load_manifest(config.raw_manifest()?)?,
    };
    match matrix_for(&datasets)? {
        Some(m) => Ok(m.to_table()),
        None => bail!("overlap needs both in-domain and out-of-domain datasets"),
    }
}

pub fn cmd_report(config: &RunConfig) -> anyhow::Result<String> {
    let metrics = config.run_dir()?.join("metrics");
    let mut out = String::new();
    for which in [Which::In, Which::Out, Which::Both] {
        let path = metrics.join(format!("{}.json", which.as_str()));
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).with_context(|| format!("read {}", path.display()))?;
        let report: Report = serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))?;
        let _ = writeln!(out, "== {} ==", which.as_str());
        out.push_str(&report.to_table());
    }
    if out.is_empty() {
        bail!("no metrics under {}", metrics.display());
    }
    Ok(out)
}
