mod common;

use std::fs;
use std::path::Path;

use common::{encoder, small_config, strings};
use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use zstc::autodiff::Tensor;
use zstc::corpus::{Aspect, Dataset, Example, Partition, Split};
use zstc::encoder::{load_checkpoint, save_checkpoint, Mode, Model, Parameterized, ReferenceEncoder};
use zstc::fixtures::{generate, AspectSpec, SyntheticSpec};
use zstc::formalizations::*;
use zstc::strategies::*;
use zstc::Error;

fn small_bench(texts_per_label: usize, seed: u64) -> Vec<Dataset> {
    bench_with_tests(texts_per_label, 3, seed)
}

fn bench_with_tests(texts_per_label: usize, test_texts_per_label: usize, seed: u64) -> Vec<Dataset> {
    let spec = SyntheticSpec {
        aspects: Aspect::BUILTIN
            .iter()
            .map(|a| AspectSpec {
                aspect: a.clone(),
                in_domain_datasets: 1,
                texts_per_label,
                out_of_domain: vec![],
            })
            .collect(),
        test_texts_per_label,
        ..SyntheticSpec::default()
    };
    generate(&spec, seed).unwrap().in_domain()
}

fn quick(plan: TrainingPlan, seed: u64) -> TrainingPlan {
    plan.map_optim(|o| {
        o.learning_rate = 3e-3;
        o.epochs = 1;
        o.seed = seed;
        o.batch_size = 16;
    })
}

fn fresh(formalization: Formalization, seed: u64) -> Model {
    Model::new(encoder(formalization.mode(), seed))
}

fn checkpoint_bytes(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    (fs::read(dir.join("params.bin")).unwrap(), fs::read(dir.join("manifest.toml")).unwrap())
}

#[test]
fn injection_round_trip_and_errors() {
    let known = Aspect::BUILTIN.to_vec();
    let inst = ClassificationInstance::binary("t", "l", true);
    let injected = inject_aspect(inst.clone(), &Aspect::Intent, &known).unwrap();
    assert_eq!(injected.aspect, Some(Aspect::Intent));
    assert_eq!(ClassificationInstance { aspect: None, ..injected.clone() }, inst);
    assert!(matches!(inject_aspect(injected, &Aspect::Intent, &known), Err(Error::DoubleInjection)));
    let other: Aspect = "weather".parse().unwrap();
    assert!(matches!(inject_aspect(inst, &other, &known), Err(Error::UnknownAspect(_))));
}

#[test]
fn implicit_instances_carry_aspects_and_vanilla_never_do() {
    let data = small_bench(3, 1);
    let known = Aspect::BUILTIN.to_vec();
    for f in [Formalization::Binary, Formalization::Dual, Formalization::Generative] {
        for (strategy, expect) in [(Strategy::Vanilla, false), (Strategy::Implicit, true), (Strategy::Explicit, false)] {
            let built = build_instances(&TrainingPlan::new(strategy, f), &data, &known).unwrap();
            assert!(!built.is_empty());
            assert!(built.iter().all(|i| i.aspect.is_some() == expect), "{f:?} {strategy:?}");
        }
    }
    let built = build_instances(&TrainingPlan::new(Strategy::Implicit, Formalization::Binary), &data, &known).unwrap();
    for d in &data {
        for i in built.iter().filter(|i| d.partition(Partition::Train).any(|e| e.text == i.text)) {
            assert_eq!(i.aspect.as_ref(), Some(&d.spec.aspect));
        }
    }
}

#[test]
fn plans_have_the_documented_stages() {
    for f in [Formalization::Binary, Formalization::Dual, Formalization::Generative] {
        assert_eq!(TrainingPlan::new(Strategy::Vanilla, f).stages.len(), 1);
        assert_eq!(TrainingPlan::new(Strategy::Implicit, f).stages.len(), 1);
        let explicit = TrainingPlan::new(Strategy::Explicit, f);
        assert_eq!(explicit.stages.len(), 2);
        assert_eq!(explicit.stages[0].kind, StageKind::AspectPretrain);
        assert_eq!(explicit.stages[1].kind, StageKind::Finetune);
    }
    assert!(TrainingPlan::new(Strategy::Implicit, Formalization::SeqCls).validate().is_err());
}

#[test]
fn finetune_defaults() {
    let b = OptimConfig::finetune_default(Formalization::Binary);
    assert_eq!(
        (b.learning_rate, b.batch_size, b.warmup_fraction, b.schedule, b.epochs, b.weight_decay),
        (2e-5, 16, 0.1, Schedule::Linear, 3, 0.01)
    );
    assert_eq!(OptimConfig::finetune_default(Formalization::Dual), b);
    let g = OptimConfig::finetune_default(Formalization::Generative);
    assert_eq!(
        (g.learning_rate, g.batch_size, g.warmup_fraction, g.schedule, g.epochs, g.weight_decay),
        (4e-5, 128, 0.01, Schedule::Cosine, 3, 0.01)
    );
    let p = OptimConfig::pretrain_default();
    assert_eq!((p.epochs, p.weight_decay), (3, 0.01));
}

#[test]
fn adamw_first_step_moves_by_the_rate() {
    let mut p = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
    let g = Tensor::from_vec(1, 3, vec![0.3, -4.0, 0.0]);
    let mut adam = AdamW::new(&[&p], 0.1);
    adam.step(vec![&mut p], &[g], 0.01);
    // bias-corrected moments give update g / |g| on the first step
    let want = [1.0 - 0.01 * (1.0 + 0.1), -2.0 - 0.01 * (-1.0 - 0.2), 0.5 - 0.01 * 0.05];
    for (a, b) in p.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn aspect_detection_generalizes_and_head_is_dropped() {
    // 3 aspects x 4 labels x 25 texts = 300 training texts
    let data = bench_with_tests(25, 10, 2);
    let train: Vec<Example> = data.iter().flat_map(|d| d.partition(Partition::Train).cloned()).collect();
    assert_eq!(train.len(), 300);
    let optim = OptimConfig {
        learning_rate: 3e-3,
        ..OptimConfig::pretrain_default()
    };
    let start = Model::new(ReferenceEncoder::new(zstc::encoder::EncoderConfig::default()).unwrap());
    let before: Vec<Tensor> = start.encoder.parameters().into_iter().cloned().collect();
    let (detector, log) = train_aspect_detector(start.clone(), &train, &optim).unwrap();
    assert!(!log.is_empty());
    let held_out: Vec<&Example> = data.iter().flat_map(|d| d.partition(Partition::Test)).collect();
    let labels = &detector.head().unwrap().labels;
    let correct = held_out
        .iter()
        .filter(|e| labels[seq_cls_predict(&detector, &e.text).unwrap().0] == e.aspect.name())
        .count();
    let accuracy = correct as f64 / held_out.len() as f64;
    assert!(accuracy >= 0.95, "held-out aspect accuracy {accuracy}");

    let (pretrained, _) = aspect_pretrain(start, &train, &optim).unwrap();
    assert!(pretrained.head.is_none());
    let after: Vec<Tensor> = pretrained.encoder.parameters().into_iter().cloned().collect();
    assert_ne!(before, after);
    assert_eq!(
        after,
        detector.encoder.parameters().into_iter().cloned().collect::<Vec<_>>()
    );
}

#[test]
fn single_aspect_corpus_is_rejected() {
    let data = small_bench(2, 0);
    let one: Vec<Example> = data[0].partition(Partition::Train).cloned().collect();
    let r = aspect_pretrain(fresh(Formalization::Binary, 0), &one, &OptimConfig::pretrain_default());
    assert!(matches!(r, Err(Error::SingleAspect)));
}

#[test]
fn autoregressive_pretraining_keeps_no_head() {
    let data = small_bench(2, 0);
    let train: Vec<Example> = data.iter().flat_map(|d| d.partition(Partition::Train).cloned()).collect();
    let (m, log) = aspect_pretrain(fresh(Formalization::Generative, 1), &train, &OptimConfig::pretrain_default()).unwrap();
    assert!(m.head.is_none());
    assert!(log.iter().all(|l| l.loss.is_finite()));
}

#[test]
fn finetune_is_seed_deterministic() {
    let data = small_bench(3, 4);
    let plan = quick(TrainingPlan::new(Strategy::Vanilla, Formalization::Binary), 5);
    let (a, la) = finetune(fresh(Formalization::Binary, 5), &plan, &data).unwrap();
    let (b, lb) = finetune(fresh(Formalization::Binary, 5), &plan, &data).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.parameters(), b.parameters());
}

#[test]
fn loss_falls_below_a_tenth_on_a_small_fixture() {
    let data = small_bench(4, 6);
    // 16 training texts from one dataset
    let one = vec![data[0].clone()];
    assert_eq!(one[0].partition(Partition::Train).count(), 16);
    let plan = TrainingPlan::new(Strategy::Vanilla, Formalization::SeqCls).map_optim(|o| {
        o.learning_rate = 3e-3;
        o.batch_size = 16;
        o.epochs = 300;
        o.warmup_fraction = 0.0;
        o.schedule = Schedule::Cosine;
    });
    let (_, log) = finetune(fresh(Formalization::SeqCls, 6), &plan, &one).unwrap();
    assert_eq!(log.len(), 300);
    let first = log[0].loss;
    let best = log.iter().map(|l| l.loss).fold(f64::INFINITY, f64::min);
    assert!(best < 0.1 * first, "{first} -> {best}");
}

#[test]
fn run_plan_writes_one_checkpoint_per_stage() {
    let data = small_bench(3, 7);
    for (strategy, n) in [(Strategy::Vanilla, 1), (Strategy::Implicit, 1), (Strategy::Explicit, 2)] {
        let dir = tempfile::tempdir().unwrap();
        let plan = quick(TrainingPlan::new(strategy, Formalization::Binary), 7);
        let (model, artifacts) = run_plan(&plan, fresh(Formalization::Binary, 7), &data, dir.path()).unwrap();
        assert_eq!(artifacts.checkpoints.len(), n);
        assert_eq!(artifacts.logs.len(), n);
        let mut entries: Vec<String> = fs::read_dir(dir.path().join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        entries.sort();
        assert_eq!(entries, (0..n).map(|i| i.to_string()).collect::<Vec<_>>());
        let last = load_checkpoint(artifacts.checkpoints.last().unwrap()).unwrap();
        assert_eq!(last.parameters(), model.parameters());
        if n == 2 {
            assert!(load_checkpoint(&artifacts.checkpoints[0]).unwrap().head.is_none());
        }
    }
}

#[test]
fn explicit_run_equals_manual_stages() {
    let data = small_bench(3, 8);
    for f in [Formalization::Binary, Formalization::Generative] {
        let plan = quick(TrainingPlan::new(Strategy::Explicit, f), 8);
        let auto_dir = tempfile::tempdir().unwrap();
        run_plan(&plan, fresh(f, 8), &data, auto_dir.path()).unwrap();

        let train: Vec<Example> = data.iter().flat_map(|d| d.partition(Partition::Train).cloned()).collect();
        let (pre, _) = aspect_pretrain(fresh(f, 8), &train, &plan.stages[0].optim).unwrap();
        let (done, _) = finetune(pre, &plan, &data).unwrap();
        let manual_dir = tempfile::tempdir().unwrap();
        save_checkpoint(&done, manual_dir.path()).unwrap();
        assert_eq!(
            checkpoint_bytes(&checkpoint_dir(auto_dir.path(), 1)),
            checkpoint_bytes(manual_dir.path()),
            "{f:?}"
        );
    }
}

#[test]
fn every_strategy_reproduces_its_checkpoints() {
    let data = small_bench(2, 9);
    for strategy in Strategy::ALL {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let plan = quick(TrainingPlan::new(strategy, Formalization::Dual), 9);
            let (_, a) = run_plan(&plan, fresh(Formalization::Dual, 9), &data, dir.path()).unwrap();
            let bytes: Vec<_> = a.checkpoints.iter().map(|c| checkpoint_bytes(c)).collect();
            let logs: Vec<_> = a.logs.iter().map(|l| fs::read(l).unwrap()).collect();
            (bytes, logs)
        };
        assert_eq!(run(), run(), "{strategy:?}");
    }
}

#[test]
fn mode_mismatch_is_rejected() {
    let data = small_bench(2, 0);
    let plan = TrainingPlan::new(Strategy::Vanilla, Formalization::Generative);
    let model = Model::new(ReferenceEncoder::new(small_config(Mode::Bidirectional, 0)).unwrap());
    assert!(matches!(finetune(model, &plan, &data), Err(Error::ModeMismatch { .. })));
    let out: Vec<Dataset> = data
        .into_iter()
        .map(|mut d| {
            d.spec.split = Split::OutOfDomain;
            d
        })
        .collect();
    let plan = TrainingPlan::new(Strategy::Vanilla, Formalization::Binary);
    assert!(finetune(fresh(Formalization::Binary, 0), &plan, &out).is_err());
}

fn strip(with: &[u32], block: &[u32]) -> Option<Vec<u32>> {
    (0..=with.len().saturating_sub(block.len())).find_map(|i| {
        (with[i..].starts_with(block)).then(|| [&with[..i], &with[i + block.len()..]].concat())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn injection_only_adds_the_aspect_block(
        text in "[a-z]{1,6}( [a-z]{1,6}){0,6}",
        label in "[a-z]{2,6}( [a-z]{2,6})?",
        which in 0usize..3,
    ) {
        let tok = zstc::encoder::Tokenizer::new(512, Aspect::BUILTIN.to_vec());
        let aspect = &Aspect::BUILTIN[which];
        let a = tok.aspect_token(aspect).unwrap();
        let sep = 2;

        let plain = binary_tokens(&tok, &text, &label, None, 48).unwrap();
        let with = binary_tokens(&tok, &text, &label, Some(aspect), 48).unwrap();
        prop_assert_eq!(with.len(), plain.len() + 2);
        prop_assert_eq!(strip(&with, &[sep, a]), Some(plain));

        let plain = dual_text_tokens(&tok, &text, None, 48).unwrap();
        let with = dual_text_tokens(&tok, &text, Some(aspect), 48).unwrap();
        prop_assert_eq!(strip(&with, &[a, sep]), Some(plain));

        let opts = strings(&[&label, "other"]);
        let plain = build_generative_prompt(&tok, &text, &opts, None, DEFAULT_TEMPLATE, 64).unwrap();
        let with = build_generative_prompt(&tok, &text, &opts, Some(aspect), DEFAULT_TEMPLATE, 64).unwrap();
        prop_assert_eq!(with.text.replacen(aspect.name(), "category", 1), plain.text);
    }

    #[test]
    fn schedule_warms_up_then_decays(
        lr in 1e-5f64..1e-2,
        warmup in 0.0f64..0.5,
        total in 1usize..400,
        cosine in any::<bool>(),
    ) {
        let o = OptimConfig {
            learning_rate: lr,
            warmup_fraction: warmup,
            schedule: if cosine { Schedule::Cosine } else { Schedule::Linear },
            ..OptimConfig::pretrain_default()
        };
        let rates: Vec<f64> = (0..total).map(|s| o.learning_rate_at(s, total)).collect();
        let w = o.warmup_steps(total);
        prop_assert!(rates.iter().all(|r| (0.0..=lr * (1.0 + 1e-12)).contains(r)));
        prop_assert!(rates[..w].windows(2).all(|p| p[1] >= p[0]));
        prop_assert!(rates[w.saturating_sub(1)..].windows(2).all(|p| p[1] <= p[0] + 1e-15));
        if w > 0 {
            prop_assert!((rates[w - 1] - lr).abs() < 1e-15);
        }
    }
}
