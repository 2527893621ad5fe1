//! Stage-by-stage runs on the toy corpus with short step budgets.

use promalign_core::harness::toy::{generate, ToyOptions};
use promalign_core::harness::{run_stage, Checkpoint, ModelKind, RunConfig, StageOutcome};
use promalign_core::pseudo_labels::read_cache;
use promalign_core::Error;

fn small(opts: ToyOptions) -> (tempfile::TempDir, promalign_core::harness::toy::ToyCorpus) {
    let dir = tempfile::tempdir().unwrap();
    let toy = generate(dir.path(), &opts).unwrap();
    (dir, toy)
}

fn opts() -> ToyOptions {
    ToyOptions {
        pairs: 16,
        ner_train: 6,
        ner_dev: 4,
        re_train: 8,
        re_dev: 4,
        ..ToyOptions::default()
    }
}

#[test]
fn all_stages_chain() {
    let (_dir, toy) = small(opts());

    let gen = RunConfig::load(&toy.gen_config).unwrap();
    let StageOutcome::PseudoLabels { path, entries } = run_stage(&gen).unwrap() else {
        panic!()
    };
    // Two objects per image plus one relation label each.
    assert_eq!(entries, 16 * 3);
    let cache = read_cache(&path).unwrap();
    assert!(cache
        .iter()
        .all(|e| (e.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6));

    let mut pre = RunConfig::load(&toy.pretrain_config).unwrap();
    pre.max_steps = 6;
    pre.checkpoint_every = 3;
    let StageOutcome::Pretrain(r) = run_stage(&pre).unwrap() else {
        panic!()
    };
    assert_eq!(r.log.len(), 6);
    assert!(r
        .log
        .iter()
        .all(|l| l.total.is_finite() && l.coe_samples > 0 && l.cir_samples > 0));
    let ck = Checkpoint::load(&r.checkpoint).unwrap();
    assert_eq!(ck.kind, ModelKind::Pretrain);
    assert_eq!(ck.step, 6);

    let mut ner = RunConfig::load(&toy.ner_config).unwrap();
    ner.max_steps = 4;
    ner.paths.init_checkpoint = Some(r.checkpoint.clone());
    let StageOutcome::Finetune(f) = run_stage(&ner).unwrap() else {
        panic!()
    };
    assert_eq!(f.losses.len(), 4);
    assert!(f.best_dev.is_some());

    let mut re = RunConfig::load(&toy.re_config).unwrap();
    re.max_steps = 4;
    re.paths.init_checkpoint = Some(r.checkpoint.clone());
    let StageOutcome::Finetune(f) = run_stage(&re).unwrap() else {
        panic!()
    };
    assert_eq!(f.losses.len(), 4);

    let ev = RunConfig::load(&toy.eval_ner_config).unwrap();
    let StageOutcome::Eval(rep) = run_stage(&ev).unwrap() else {
        panic!()
    };
    assert_eq!(rep.examples, 4);
    let out = ev.out_dir();
    assert!(out.join("metrics_dev.jsonl").exists());
    assert!(out.join("predictions_dev.txt").exists());

    let ev = RunConfig::load(&toy.eval_re_config).unwrap();
    let StageOutcome::Eval(rep) = run_stage(&ev).unwrap() else {
        panic!()
    };
    assert_eq!(rep.examples, 4);
}

#[test]
fn cache_mode_needs_a_cache() {
    let (_dir, toy) = small(opts());
    let mut pre = RunConfig::load(&toy.pretrain_config).unwrap();
    pre.pseudo_labels.on_the_fly = false;
    pre.max_steps = 2;
    assert!(matches!(run_stage(&pre), Err(Error::Config(_))));

    let gen = RunConfig::load(&toy.gen_config).unwrap();
    run_stage(&gen).unwrap();
    let StageOutcome::Pretrain(r) = run_stage(&pre).unwrap() else {
        panic!()
    };
    assert_eq!(r.log.len(), 2);
    assert_eq!(r.label_refreshes, 0);
}

#[test]
fn eval_rejects_a_checkpoint_of_the_other_task() {
    let (_dir, toy) = small(opts());
    let mut re = RunConfig::load(&toy.re_config).unwrap();
    re.max_steps = 1;
    let StageOutcome::Finetune(f) = run_stage(&re).unwrap() else {
        panic!()
    };
    let mut ev = RunConfig::load(&toy.eval_ner_config).unwrap();
    ev.paths.checkpoint = Some(f.final_checkpoint);
    assert!(matches!(run_stage(&ev), Err(Error::Config(_))));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err =
        RunConfig::from_toml_str("stage = \"pretrain\"\nlearning_rate = 1.0\n", std::path::Path::new(".")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn sequential_and_parallel_runs_agree() {
    use promalign_core::Parallelism;
    let (_dir, toy) = small(opts());
    let mut a = RunConfig::load(&toy.pretrain_config).unwrap();
    a.max_steps = 3;
    a.parallelism = Parallelism::Sequential;
    a.paths.out_dir = Some(toy.root.join("out/seq"));
    let mut b = a.clone();
    b.parallelism = Parallelism::Parallel;
    b.paths.out_dir = Some(toy.root.join("out/par"));
    let StageOutcome::Pretrain(ra) = run_stage(&a).unwrap() else {
        panic!()
    };
    let StageOutcome::Pretrain(rb) = run_stage(&b).unwrap() else {
        panic!()
    };
    assert_eq!(ra.log, rb.log);
    assert_eq!(
        Checkpoint::load(&ra.checkpoint).unwrap().params,
        Checkpoint::load(&rb.checkpoint).unwrap().params
    );
}
