//! Vanilla fine-tuning, implicit aspect conditioning and explicit aspect
//! pre-training as composable stages.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, Tensor, Var};
use crate::corpus::{Aspect, Dataset, Example, Partition, Split};
use crate::encoder::{accumulate_gradient, save_checkpoint, LinearHead, Mode, Model, Parameterized};
use crate::error::{Error, Result};
use crate::formalizations::{
    binary_head, binary_loss, dual_loss, generative_instance_loss, make_binary_pairs, make_dual_pairs, seq_cls_loss,
    ClassificationInstance, Formalization, LabelField, LossScope, TemplatePack, ASPECT_TEMPLATE_ID,
    BINARY_HEAD_LABELS, DEFAULT_TEMPLATE_ID,
};
use crate::util::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    Implicit,
    Explicit,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Vanilla, Strategy::Implicit, Strategy::Explicit];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Implicit => "implicit",
            Strategy::Explicit => "explicit",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "implicit" => Ok(Strategy::Implicit),
            "explicit" => Ok(Strategy::Explicit),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl OptimConfig {
    /// Fine-tuning defaults per formalization.
    pub fn finetune_default(formalization: Formalization) -> Self {
        match formalization {
            Formalization::Generative => Self {
                learning_rate: 4e-5,
                batch_size: 128,
                warmup_fraction: 0.01,
                schedule: Schedule::Cosine,
                epochs: 3,
                weight_decay: 0.01,
                seed: 0,
            },
            _ => Self {
                learning_rate: 2e-5,
                batch_size: 16,
                warmup_fraction: 0.1,
                schedule: Schedule::Linear,
                epochs: 3,
                weight_decay: 0.01,
                seed: 0,
            },
        }
    }

    /// Aspect pre-training defaults, shared by every formalization.
    pub fn pretrain_default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 16,
            warmup_fraction: 0.1,
            schedule: Schedule::Cosine,
            epochs: 3,
            weight_decay: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, instances: usize) -> usize {
        self.epochs * instances.div_ceil(self.batch_size)
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_fraction * total as f64).ceil() as usize
    }

    /// Learning rate for the 0-based optimizer step `step` of `total`. Warmup
    /// ramps linearly to the peak, reaching it on the last warmup step.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let warmup = self.warmup_steps(total);
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        let factor = match self.schedule {
            Schedule::Linear => 1.0 - progress,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        };
        self.learning_rate * factor
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl AdamW {
    pub fn new(params: &[&Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: params.iter().map(|p| vec![0.0; p.data().len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.data().len()]).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    AspectPretrain,
    Finetune,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::AspectPretrain => "aspect_pretrain",
            StageKind::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub strategy: Strategy,
    pub formalization: Formalization,
    pub stages: Vec<Stage>,
    pub negatives_per_positive: usize,
    pub loss_scope: LossScope,
    pub template_id: String,
    pub templates: TemplatePack,
}

impl TrainingPlan {
    pub fn new(strategy: Strategy, formalization: Formalization) -> Self {
        let mut stages = Vec::new();
        if strategy == Strategy::Explicit {
            stages.push(Stage {
                kind: StageKind::AspectPretrain,
                optim: OptimConfig::pretrain_default(),
            });
        }
        stages.push(Stage {
            kind: StageKind::Finetune,
            optim: OptimConfig::finetune_default(formalization),
        });
        Self {
            strategy,
            formalization,
            stages,
            negatives_per_positive: 3,
            loss_scope: LossScope::default(),
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
            templates: TemplatePack::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kinds: Vec<StageKind> = self.stages.iter().map(|s| s.kind).collect();
        let expected: &[StageKind] = match self.strategy {
            Strategy::Explicit => &[StageKind::AspectPretrain, StageKind::Finetune],
            _ => &[StageKind::Finetune],
        };
        if kinds != expected {
            return Err(Error::Config(format!(
                "{} plans need stages {expected:?}, got {kinds:?}",
                self.strategy.as_str()
            )));
        }
        if self.formalization == Formalization::SeqCls && self.strategy != Strategy::Vanilla {
            return Err(Error::Config("the supervised baseline only supports the vanilla strategy".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be at least 1".into()));
        }
        self.templates.get(&self.template_id)?;
        self.stages.iter().try_for_each(|s| s.optim.validate())
    }

    pub fn finetune_optim(&self) -> &OptimConfig {
        &self.stages.last().expect("plans have a finetune stage").optim
    }

    /// Applies `f` to every stage's optimizer config.
    pub fn map_optim(mut self, f: impl Fn(&mut OptimConfig)) -> Self {
        self.stages.iter_mut().for_each(|s| f(&mut s.optim));
        self
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// Conditions an instance on `aspect`. Encoder layouts gain the reserved
/// aspect token; generative prompts gain the aspect word.
pub fn inject_aspect(
    mut instance: ClassificationInstance,
    aspect: &Aspect,
    known: &[Aspect],
) -> Result<ClassificationInstance> {
    if instance.aspect.is_some() {
        return Err(Error::DoubleInjection);
    }
    if !known.contains(aspect) {
        return Err(Error::UnknownAspect(aspect.to_string()));
    }
    instance.aspect = Some(aspect.clone());
    Ok(instance)
}

fn in_domain_train(datasets: &[Dataset]) -> Result<Vec<(&Dataset, &Example)>> {
    let mut out = Vec::new();
    for d in datasets {
        if d.spec.split != Split::InDomain {
            return Err(Error::InvalidInput(format!(
                "dataset {} is out-of-domain and cannot be trained on",
                d.spec.dataset_id
            )));
        }
        out.extend(d.partition(Partition::Train).map(|e| (d, e)));
    }
    if out.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    Ok(out)
}

/// Sorted union of the label vocabularies, the output space of the
/// supervised baseline.
pub fn union_labels(datasets: &[Dataset]) -> Vec<String> {
    datasets
        .iter()
        .flat_map(|d| d.spec.label_vocabulary.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Builds the stage's training instances from the in-domain train partitions.
pub fn build_instances(plan: &TrainingPlan, datasets: &[Dataset], known: &[Aspect]) -> Result<Vec<ClassificationInstance>> {
    let seed = plan.finetune_optim().seed;
    let union = union_labels(datasets);
    let mut out = Vec::new();
    for (dataset, example) in in_domain_train(datasets)? {
        let vocab = &dataset.spec.label_vocabulary;
        let built = match plan.formalization {
            Formalization::Binary => make_binary_pairs(example, vocab, plan.negatives_per_positive, seed)?,
            Formalization::Dual => make_dual_pairs(example, vocab, plan.negatives_per_positive, seed)?,
            Formalization::Generative => {
                let mut options = vocab.clone();
                options.shuffle(&mut derived_rng(seed, &["options", &example.dataset_id, &example.text]));
                vec![ClassificationInstance::generative(&example.text, options, example.first_label())?]
            }
            Formalization::SeqCls => {
                let class = union
                    .binary_search_by(|l| l.as_str().cmp(example.first_label()))
                    .map_err(|_| Error::UnknownLabel {
                        path: PathBuf::new(),
                        line: 0,
                        dataset: example.dataset_id.clone(),
                        label: example.first_label().to_string(),
                    })?;
                vec![ClassificationInstance::sequence(&example.text, class)]
            }
        };
        for inst in built {
            out.push(match plan.strategy {
                Strategy::Implicit => inject_aspect(inst, &example.aspect, known)?,
                _ => inst,
            });
        }
    }
    Ok(out)
}

type LossFn<'t, I> = dyn for<'a> Fn(&'a Model, &mut Graph<'a>, &[Var], &I) -> Result<Var> + 't;

/// Mini-batch AdamW over `instances`, reshuffled every epoch.
fn train_loop<I>(
    model: &mut Model,
    instances: &[I],
    loss_fn: &LossFn<'_, I>,
    optim: &OptimConfig,
    stage: &str,
) -> Result<Vec<LogEntry>> {
    optim.validate()?;
    if instances.is_empty() {
        return Err(Error::Empty("training instances"));
    }
    let total = optim.total_steps(instances.len());
    let mut adam = AdamW::new(&model.parameters(), optim.weight_decay);
    let mut grads = ParamGrads::zeros_like(&model.parameters());
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..optim.epochs {
        order.shuffle(&mut derived_rng(optim.seed, &[stage, "epoch", &epoch.to_string()]));
        for chunk in order.chunks(optim.batch_size) {
            let batch: Vec<&I> = chunk.iter().map(|&i| &instances[i]).collect();
            grads.clear();
            let loss = accumulate_gradient(&*model, &|m, g, v, item: &&I| loss_fn(m, g, v, item), &batch, &mut grads)?;
            if !grads.all_finite() {
                return Err(Error::NonFiniteLoss(f64::NAN));
            }
            let lr = optim.learning_rate_at(step, total);
            adam.step(model.parameters_mut(), grads.slots(), lr);
            log.push(LogEntry {
                stage: stage.to_string(),
                step,
                loss,
                learning_rate: lr,
            });
            step += 1;
        }
    }
    Ok(log)
}

fn require_mode(model: &Model, formalization: Formalization) -> Result<()> {
    model.encoder.require_mode(formalization.mode())
}

/// Trains the backbone on aspect detection and returns the backbone alone.
pub fn aspect_pretrain(model: Model, examples: &[Example], optim: &OptimConfig) -> Result<(Model, Vec<LogEntry>)> {
    let (mut model, log) = train_aspect_detector(model, examples, optim)?;
    model.head = None;
    Ok((model, log))
}

/// Aspect detection with the detector kept: bidirectional backbones get a
/// head over the sorted aspect names, autoregressive ones learn to generate
/// the aspect name after the aspect template.
pub fn train_aspect_detector(model: Model, examples: &[Example], optim: &OptimConfig) -> Result<(Model, Vec<LogEntry>)> {
    let mut seen = BTreeSet::new();
    let unique: Vec<&Example> = examples.iter().filter(|e| seen.insert(e.text.as_str())).collect();
    let aspects: Vec<String> = unique
        .iter()
        .map(|e| e.aspect.name().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if aspects.len() < 2 {
        return Err(Error::SingleAspect);
    }
    let stage = StageKind::AspectPretrain.as_str();
    let mut model = Model::new(model.encoder);
    for e in &unique {
        model.encoder.tokenizer_mut().observe(&e.text);
    }
    let log = match model.encoder.mode() {
        Mode::Bidirectional => {
            let hidden = model.encoder.hidden_width();
            model.head = Some(LinearHead::new(hidden, aspects.clone(), optim.seed));
            let instances: Vec<ClassificationInstance> = unique
                .iter()
                .map(|e| {
                    let class = aspects.iter().position(|a| a == e.aspect.name()).expect("collected above");
                    ClassificationInstance::sequence(&e.text, class)
                })
                .collect();
            train_loop(&mut model, &instances, &seq_cls_loss, optim, stage)?
        }
        Mode::Autoregressive => {
            for a in &aspects {
                model.encoder.tokenizer_mut().observe(a);
            }
            let instances = unique
                .iter()
                .map(|e| ClassificationInstance::generative(&e.text, aspects.clone(), e.aspect.name()))
                .collect::<Result<Vec<_>>>()?;
            let template = TemplatePack::default().get(ASPECT_TEMPLATE_ID)?.to_string();
            train_loop(
                &mut model,
                &instances,
                &|m, g, v, i| generative_instance_loss(m, g, v, i, &template, LossScope::FullSequence),
                optim,
                stage,
            )?
        }
    };
    Ok((model, log))
}

/// Head the formalization needs, keeping a matching existing one.
fn prepare_head(model: &mut Model, plan: &TrainingPlan, datasets: &[Dataset]) {
    let seed = plan.finetune_optim().seed;
    let hidden = model.encoder.hidden_width();
    let wanted: Option<Vec<String>> = match plan.formalization {
        Formalization::Binary => Some(BINARY_HEAD_LABELS.iter().map(|s| s.to_string()).collect()),
        Formalization::SeqCls => Some(union_labels(datasets)),
        _ => None,
    };
    model.head = match (wanted, model.head.take()) {
        (Some(labels), Some(h)) if h.labels == labels => Some(h),
        (Some(labels), _) if plan.formalization == Formalization::Binary && labels.len() == 2 => {
            Some(binary_head(hidden, seed))
        }
        (Some(labels), _) => Some(LinearHead::new(hidden, labels, seed)),
        (None, _) => None,
    };
}

/// Runs the fine-tuning stage of `plan` on the in-domain train partitions.
pub fn finetune(mut model: Model, plan: &TrainingPlan, datasets: &[Dataset]) -> Result<(Model, Vec<LogEntry>)> {
    plan.validate()?;
    require_mode(&model, plan.formalization)?;
    let known = model.encoder.tokenizer().aspects().to_vec();
    let instances = build_instances(plan, datasets, &known)?;
    debug_assert!(instances
        .iter()
        .all(|i| i.aspect.is_some() == (plan.strategy == Strategy::Implicit)));
    for inst in &instances {
        let tok = model.encoder.tokenizer_mut();
        tok.observe(&inst.text);
        match &inst.label {
            LabelField::Single(l) => tok.observe(l),
            LabelField::Options(opts) => opts.iter().for_each(|o| tok.observe(o)),
            LabelField::None => {}
        }
    }
    prepare_head(&mut model, plan, datasets);
    let optim = plan.finetune_optim();
    let stage = StageKind::Finetune.as_str();
    let log = match plan.formalization {
        Formalization::Binary => train_loop(&mut model, &instances, &binary_loss, optim, stage)?,
        Formalization::Dual => train_loop(&mut model, &instances, &dual_loss, optim, stage)?,
        Formalization::SeqCls => train_loop(&mut model, &instances, &seq_cls_loss, optim, stage)?,
        Formalization::Generative => {
            let template = plan.templates.get(&plan.template_id)?.to_string();
            let scope = plan.loss_scope;
            train_loop(
                &mut model,
                &instances,
                &|m, g, v, i| generative_instance_loss(m, g, v, i, &template, scope),
                optim,
                stage,
            )?
        }
    };
    Ok((model, log))
}

/// Files written by [`run_plan`], one entry per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub checkpoints: Vec<PathBuf>,
    pub logs: Vec<PathBuf>,
}

pub fn checkpoint_dir(run_dir: &Path, stage_index: usize) -> PathBuf {
    run_dir.join("checkpoints").join(stage_index.to_string())
}

fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    for entry in log {
        let line = serde_json::to_string(entry)?;
        writeln!(file, "{line}").map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    Ok(())
}

/// Executes the stages in order, each starting from the previous stage's
/// model, and persists a checkpoint plus log per stage under `run_dir`.
pub fn run_plan(plan: &TrainingPlan, model_init: Model, datasets: &[Dataset], run_dir: &Path) -> Result<(Model, RunArtifacts)> {
    plan.validate()?;
    require_mode(&model_init, plan.formalization)?;
    let mut model = model_init;
    let mut artifacts = RunArtifacts {
        checkpoints: Vec::new(),
        logs: Vec::new(),
    };
    for (index, stage) in plan.stages.iter().enumerate() {
        let wrap = |e: Error| Error::Stage {
            stage: index,
            name: stage.kind.as_str().to_string(),
            source: Box::new(e),
        };
        let (next, log) = match stage.kind {
            StageKind::AspectPretrain => {
                let examples: Vec<Example> = in_domain_train(datasets)
                    .map_err(wrap)?
                    .into_iter()
                    .map(|(_, e)| e.clone())
                    .collect();
                aspect_pretrain(model, &examples, &stage.optim).map_err(wrap)?
            }
            StageKind::Finetune => finetune(model, plan, datasets).map_err(wrap)?,
        };
        model = next;
        let ckpt = checkpoint_dir(run_dir, index);
        save_checkpoint(&model, &ckpt).map_err(wrap)?;
        let log_path = run_dir.join("logs").join(format!("stage_{index}_{}.jsonl", stage.kind.as_str()));
        write_log(&log_path, &log).map_err(wrap)?;
        log::info!(
            "stage {index} ({}) finished after {} steps, final loss {:.4}",
            stage.kind.as_str(),
            log.len(),
            log.last().map_or(f64::NAN, |l| l.loss)
        );
        artifacts.checkpoints.push(ckpt);
        artifacts.logs.push(log_path);
    }
    Ok((model, artifacts))
}
