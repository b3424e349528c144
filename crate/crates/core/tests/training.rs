mod common;

use std::path::Path;

use common::{tiny_bundle, tiny_config, tiny_data};
use tgr_core::data::epoch_batches;
use tgr_core::params::ParamSet;
use tgr_core::teacher::teacher_router_prefix;
use tgr_core::train::{
    checkpoint_dir, evaluate, probe_ids, read_metrics, run_training, train_teacher, without_wall_clock, Checkpoint,
    RoutingMode, RoutingTrace, TeacherRouterMode, TeacherState, TrainConfig, Trainer, Variant, METRICS_FILE,
    TRACE_FILE,
};
use tgr_core::Error;

fn metrics_sans_clock(dir: &Path) -> Vec<String> {
    read_metrics(&dir.join(METRICS_FILE))
        .unwrap()
        .iter()
        .map(|r| without_wall_clock(r).unwrap())
        .collect()
}

fn run(cfg: &TrainConfig, dir: &Path) {
    let data = tiny_data(5, 64, 32);
    let bundle = cfg.variant.needs_teacher().then(|| tiny_bundle(&cfg.model, cfg.seed));
    run_training(cfg, &data.train, &data.val, bundle, dir).unwrap();
}

fn subset(p: &ParamSet, prefix: &str) -> Vec<(String, Vec<u64>)> {
    p.iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn trainer_steps(cfg: &TrainConfig, steps: usize) -> Trainer {
    let data = tiny_data(5, 64, 32);
    let teacher = cfg
        .variant
        .needs_teacher()
        .then(|| TeacherState::new(tiny_bundle(&cfg.model, cfg.seed), &data.train, None, cfg).unwrap());
    let mut t = Trainer::new(cfg.clone(), data.train.len(), teacher).unwrap();
    if cfg.teacher.router_mode == TeacherRouterMode::Pretrained && t.teacher.is_some() {
        t.pretrain_teacher_router(data.train.len()).unwrap();
    }
    let mut done = 0;
    'outer: for epoch in 0.. {
        for ids in epoch_batches(data.train.len(), cfg.batch_size, cfg.seed, epoch, true) {
            if done == steps {
                break 'outer;
            }
            t.train_step(&data.train.batch(&ids).unwrap(), epoch + 1).unwrap();
            done += 1;
        }
    }
    t
}

#[test]
fn same_seed_gives_bit_identical_metrics_traces_and_checkpoints() {
    for variant in [Variant::Vmoe, Variant::Tgr, Variant::Dense] {
        let cfg = tiny_config(variant, 3);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&cfg, a.path());
        run(&cfg, b.path());
        let ma = metrics_sans_clock(a.path());
        assert!(!ma.is_empty());
        assert_eq!(ma, metrics_sans_clock(b.path()), "{variant:?}");
        if variant != Variant::Dense {
            let ta = std::fs::read(a.path().join(TRACE_FILE)).unwrap();
            assert_eq!(ta, std::fs::read(b.path().join(TRACE_FILE)).unwrap());
        }
        let ca = Checkpoint::load(&checkpoint_dir(a.path(), None)).unwrap();
        let cb = Checkpoint::load(&checkpoint_dir(b.path(), None)).unwrap();
        assert_eq!(ca.params.checksum(), cb.params.checksum());
    }
}

#[test]
fn different_seeds_give_different_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&tiny_config(Variant::Vmoe, 1), a.path());
    run(&tiny_config(Variant::Vmoe, 2), b.path());
    assert_ne!(metrics_sans_clock(a.path()), metrics_sans_clock(b.path()));
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Variant::Vmoe, 0);
    run(&cfg, dir.path());
    for rel in [
        "metrics.jsonl",
        "routing_trace.bin",
        "summary.json",
        "checkpoints/epoch_0002",
        "checkpoints/final",
    ] {
        assert!(dir.path().join(rel).exists(), "{rel}");
    }
    let records = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert!(records.windows(2).all(|w| w[0].step < w[1].step));
    let with_val: Vec<usize> = records
        .iter()
        .filter(|r| r.val_accuracy.is_some())
        .map(|r| r.epoch)
        .collect();
    assert_eq!(with_val, vec![1, 2, 3]);
    let trace = RoutingTrace::read(&dir.path().join(TRACE_FILE)).unwrap();
    let epochs: Vec<u32> = trace.snapshots.iter().map(|s| s.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    assert_eq!(trace.probe_tokens, 16 * 4);
}

#[test]
fn dense_run_has_no_routing_trace() {
    let dir = tempfile::tempdir().unwrap();
    run(&tiny_config(Variant::Dense, 0), dir.path());
    assert!(!dir.path().join(TRACE_FILE).exists());
    let records = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert!(records.iter().all(|r| r.utilization.is_empty()));
}

#[test]
fn checkpoint_round_trip_gives_identical_eval_outputs() {
    let data = tiny_data(5, 64, 32);
    let cfg = tiny_config(Variant::Vmoe, 4);
    let t = trainer_steps(&cfg, 6);
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::new(t.params.clone(), serde_json::to_value(&cfg).unwrap())
        .save(dir.path())
        .unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    let a = evaluate(&t.params, &cfg.model, &data.val, RoutingMode::Student, None, 7).unwrap();
    let b = evaluate(&loaded.params, &cfg.model, &data.val, RoutingMode::Student, None, 32).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.logits), bits(&b.logits));
    assert_eq!(a.assignments, b.assignments);
    assert_eq!(a, b);
}

#[test]
fn trace_holds_the_final_checkpoint_probe_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(5, 64, 32);
    let cfg = tiny_config(Variant::Vmoe, 6);
    run_training(&cfg, &data.train, &data.val, None, dir.path()).unwrap();
    let trace = RoutingTrace::read(&dir.path().join(TRACE_FILE)).unwrap();
    let ckpt = Checkpoint::load(&checkpoint_dir(dir.path(), None)).unwrap();
    let report = evaluate(&ckpt.params, &cfg.model, &data.val, RoutingMode::Student, None, 32).unwrap();
    let n = cfg.model.tokens_per_sample;
    let probe = probe_ids(data.val.len(), cfg.probe_set_size, cfg.seed);
    let expected: Vec<Vec<u16>> = report
        .assignments
        .values()
        .map(|all| probe.iter().flat_map(|&s| all[s * n..(s + 1) * n].to_vec()).collect())
        .collect();
    assert_eq!(trace.snapshots.last().unwrap().assignments, expected);
}

#[test]
fn first_half_variant_matches_tgr_until_the_switch() {
    let mut cfg = tiny_config(Variant::Tgr, 2);
    cfg.epochs = 4;
    let mut half = cfg.clone();
    half.variant = Variant::TgrFirstHalf;
    assert_eq!(half.distill_until_epoch(), 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, a.path());
    run(&half, b.path());
    let ra = read_metrics(&a.path().join(METRICS_FILE)).unwrap();
    let rb = read_metrics(&b.path().join(METRICS_FILE)).unwrap();
    let upto = |r: &[tgr_core::train::MetricsRecord], e: usize| {
        r.iter()
            .filter(|x| x.epoch <= e)
            .map(|x| without_wall_clock(x).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(upto(&ra, 2), upto(&rb, 2));
    assert_ne!(upto(&ra, 4), upto(&rb, 4));
    let late = rb.iter().filter(|r| r.epoch > 2);
    for r in late {
        assert!(r.teacher_loss.is_none(), "teacher router trained after the switch");
    }
}

#[test]
fn unguided_tgr_step_equals_vmoe_step() {
    // with the student load term switched on, at the standard load weight
    let mut tgr = tiny_config(Variant::Tgr, 8);
    tgr.weights.lambda_distill = 0.0;
    tgr.weights.lambda_ent = 0.0;
    tgr.teacher.student_load_term = true;
    let vmoe = tiny_config(Variant::Vmoe, 8);
    let a = trainer_steps(&tgr, 5);
    let b = trainer_steps(&vmoe, 5);
    assert_eq!(a.params.checksum(), b.params.checksum());

    // and with no load term in either arm
    tgr.teacher.student_load_term = false;
    let mut vmoe0 = vmoe.clone();
    vmoe0.weights.lambda_load = 0.0;
    let a = trainer_steps(&tgr, 5);
    let b = trainer_steps(&vmoe0, 5);
    assert_eq!(a.params.checksum(), b.params.checksum());
}

#[test]
fn teacher_backbone_is_never_modified() {
    for variant in [Variant::Tgr, Variant::UpperBound, Variant::DistillOnly] {
        let cfg = tiny_config(variant, 1);
        let before = tiny_bundle(&cfg.model, cfg.seed).backbone_checksum();
        let t = trainer_steps(&cfg, 8);
        let bundle = &t.teacher.as_ref().unwrap().bundle;
        assert_eq!(bundle.backbone_checksum(), before, "{variant:?}");
    }
}

#[test]
fn joint_teacher_router_trains_and_pretrained_router_stays_frozen() {
    let cfg = tiny_config(Variant::Tgr, 2);
    let initial = tiny_bundle(&cfg.model, cfg.seed).routers.checksum();
    let joint = trainer_steps(&cfg, 4);
    assert_ne!(joint.teacher.as_ref().unwrap().bundle.routers.checksum(), initial);

    let mut pre = cfg.clone();
    pre.teacher.router_mode = TeacherRouterMode::Pretrained;
    pre.teacher.pretrain_epochs = 2;
    pre.teacher.subset_fraction = 0.5;
    let after_pretrain = trainer_steps(&pre, 0).teacher.unwrap().bundle.routers.checksum();
    assert_ne!(after_pretrain, initial);
    let trained = trainer_steps(&pre, 6).teacher.unwrap().bundle.routers.checksum();
    assert_eq!(trained, after_pretrain);
}

#[test]
fn distill_only_router_learns_only_from_distillation() {
    let router = "blocks.2.moe.router";
    let mut cfg = tiny_config(Variant::DistillOnly, 3);
    let init = subset(&tgr_core::model::init_model(&cfg.model, 3).unwrap(), router);
    cfg.weights.lambda_distill = 0.0;
    let t = trainer_steps(&cfg, 4);
    assert_eq!(subset(&t.params, router), init);
    cfg.weights.lambda_distill = 5.0;
    let t = trainer_steps(&cfg, 4);
    assert_ne!(subset(&t.params, router), init);
}

#[test]
fn teacher_routed_training_moves_student_router_only_through_distillation() {
    let router = "blocks.2.moe.router";
    for variant in [Variant::UpperBound, Variant::StudentRouted] {
        let mut cfg = tiny_config(variant, 3);
        let init = subset(&tgr_core::model::init_model(&cfg.model, 3).unwrap(), router);
        cfg.weights.lambda_distill = 0.0;
        let t = trainer_steps(&cfg, 4);
        assert_eq!(subset(&t.params, router), init, "{variant:?}");
        let teacher_routers = t.teacher.as_ref().unwrap().bundle.routers.clone();
        assert_ne!(
            subset(&teacher_routers, &teacher_router_prefix(2)),
            subset(&tiny_bundle(&cfg.model, 3).routers, &teacher_router_prefix(2))
        );
    }
}

#[test]
fn small_set_is_memorized() {
    let data = tiny_data(9, 16, 16);
    for variant in [Variant::Dense, Variant::Vmoe] {
        let mut cfg = tiny_config(variant, 0);
        cfg.model.noise_std = 0.0;
        cfg.epochs = 150;
        cfg.base_lr = 1e-2;
        cfg.optimizer.weight_decay = 0.0;
        cfg.warmup_epochs = 5;
        let dir = tempfile::tempdir().unwrap();
        run_training(&cfg, &data.train, &data.val, None, dir.path()).unwrap();
        let ckpt = Checkpoint::load(&checkpoint_dir(dir.path(), None)).unwrap();
        let report = evaluate(&ckpt.params, &cfg.model, &data.train, RoutingMode::Student, None, 16).unwrap();
        assert_eq!(report.accuracy, 1.0, "{variant:?}");
    }
}

#[test]
fn teacher_variants_need_a_teacher() {
    let data = tiny_data(5, 32, 16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Variant::Tgr, 0);
    assert!(matches!(
        run_training(&cfg, &data.train, &data.val, None, dir.path()),
        Err(Error::Config(_))
    ));
    assert!(Trainer::new(cfg.clone(), 32, None).is_err());
    assert!(train_teacher(&cfg, &data.train, &data.val, dir.path()).is_err());
}

#[test]
fn trained_teacher_checkpoint_serves_a_student() {
    let data = tiny_data(5, 64, 32);
    let dir = tempfile::tempdir().unwrap();
    let mut tcfg = tiny_config(Variant::Dense, 0);
    tcfg.model = common::tiny_teacher_model();
    let summary = train_teacher(&tcfg, &data.train, &data.val, &dir.path().join("teacher")).unwrap();
    let ckpt = Checkpoint::load(&summary.checkpoint).unwrap();
    assert!(ckpt.frozen);
    assert_eq!(ckpt.info["epochs"], 3);

    let mut cfg = tiny_config(Variant::Tgr, 0);
    cfg.teacher_checkpoint = Some(summary.checkpoint.clone());
    cfg.validate().unwrap();
    let bundle = tgr_core::train::load_teacher(&cfg).unwrap();
    assert_eq!(bundle.backbone.checksum(), ckpt.params.checksum());
    let s = run_training(&cfg, &data.train, &data.val, Some(bundle), &dir.path().join("student")).unwrap();
    assert!(s.teacher_routed_accuracy.is_none());

    // an unfrozen checkpoint is refused
    let plain = tempfile::tempdir().unwrap();
    Checkpoint::new(ckpt.params.clone(), ckpt.config.clone())
        .save(plain.path())
        .unwrap();
    cfg.teacher_checkpoint = Some(plain.path().to_path_buf());
    assert!(tgr_core::train::load_teacher(&cfg).is_err());
}

#[test]
fn teacher_routed_runs_report_both_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Variant::UpperBound, 0);
    let data = tiny_data(5, 64, 32);
    let s = run_training(
        &cfg,
        &data.train,
        &data.val,
        Some(tiny_bundle(&cfg.model, 0)),
        dir.path(),
    )
    .unwrap();
    assert_eq!(s.teacher_routed_accuracy, Some(s.val_accuracy));
    assert!(s.student_routed_accuracy.is_some());
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let data = tiny_data(5, 64, 32);
    let mut cfg = tiny_config(Variant::Vmoe, 0);
    cfg.base_lr = 1e300;
    cfg.warmup_epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let err = run_training(&cfg, &data.train, &data.val, None, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn second_phase_warm_starts_everything_but_a_resized_head() {
    let dir = tempfile::tempdir().unwrap();
    let phase1 = tiny_data(5, 64, 32);
    let cfg1 = tiny_config(Variant::Vmoe, 0);
    let s1 = run_training(&cfg1, &phase1.train, &phase1.val, None, &dir.path().join("p1")).unwrap();

    let phase2 = tgr_core::data::generate_synthetic(&tgr_core::data::SyntheticSpec {
        num_classes: 6,
        seed: 77,
        ..phase1.spec.clone()
    })
    .unwrap();
    let mut cfg2 = tiny_config(Variant::Vmoe, 1);
    cfg2.model.num_classes = 6;
    cfg2.init_checkpoint = Some(s1.checkpoint.clone());
    let before = Checkpoint::load(&s1.checkpoint).unwrap().params;
    let mut fresh = tgr_core::model::init_model(&cfg2.model, 1).unwrap();
    let kept_fresh = tgr_core::train::warm_start(&mut fresh, &before).unwrap();
    assert_eq!(kept_fresh, vec!["head.b".to_string(), "head.w".to_string()]);

    let s2 = run_training(&cfg2, &phase2.train, &phase2.val, None, &dir.path().join("p2")).unwrap();
    let after = Checkpoint::load(&s2.checkpoint).unwrap().params;
    let probe = probe_ids(phase1.val.len(), 16, 0);
    let a = tgr_core::analytics::probe_assignments(&before, &cfg1.model, &phase1.val, &probe, 32).unwrap();
    let b = tgr_core::analytics::probe_assignments(&after, &cfg2.model, &phase1.val, &probe, 32).unwrap();
    let kept = tgr_core::analytics::layer_agreement(&a, &b).unwrap();
    assert!(kept.values().all(|v| (0.0..=1.0).contains(v)));

    // a checkpoint with nothing in common is refused
    let mut other = tgr_core::params::ParamSet::new();
    other.insert("unrelated", tgr_core::autodiff::Tensor::zeros(&[1]));
    assert!(tgr_core::train::warm_start(&mut fresh, &other).is_err());
}

#[test]
fn restored_run_carries_its_trained_teacher_router() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(5, 64, 32);
    let mut tcfg = tiny_config(Variant::Dense, 0);
    tcfg.model = common::tiny_teacher_model();
    let teacher = train_teacher(&tcfg, &data.train, &data.val, &dir.path().join("teacher")).unwrap();

    let mut cfg = tiny_config(Variant::Tgr, 0);
    cfg.teacher_checkpoint = Some(teacher.checkpoint);
    let bundle = tgr_core::train::load_teacher(&cfg).unwrap();
    let untrained = bundle.routers.clone();
    let s = run_training(&cfg, &data.train, &data.val, Some(bundle), &dir.path().join("tgr")).unwrap();

    let run = tgr_core::train::restore_run(&s.checkpoint).unwrap();
    assert_eq!(run.config, cfg);
    assert!(run.params.names().all(|n| !n.starts_with("teacher_router")));
    let t = run.teacher.as_ref().unwrap();
    assert_ne!(t.routers.checksum(), untrained.checksum());
    let eval = evaluate(&run.params, &cfg.model, &data.val, RoutingMode::Student, None, 32).unwrap();
    assert_eq!(eval.accuracy, s.val_accuracy);

    let probe = probe_ids(data.val.len(), 16, 0);
    let agree = tgr_core::analytics::run_router_agreement(&run, &data.val, &probe, 32).unwrap();
    assert_eq!(agree.keys().copied().collect::<Vec<_>>(), vec![2]);
}
