use std::collections::BTreeMap;

use super::*;
use crate::autodiff::Tensor;
use crate::params::ParamSet;

fn schedule() -> Schedule {
    Schedule {
        base_lr: 5e-4,
        warmup_start: 1e-6,
        warmup_steps: 50,
        total_steps: 600,
    }
}

#[test]
fn lr_schedule_endpoints() {
    let s = schedule();
    assert_eq!(s.lr_at(0), 1e-6);
    assert!((s.lr_at(25) - (1e-6 + 0.5 * (5e-4 - 1e-6))).abs() < 1e-18);
    assert_eq!(s.lr_at(50), 5e-4);
    assert!(s.lr_at(599).abs() <= 1e-12);
    assert!(s.lr_at(5000) >= 0.0);
    let mut prev = f64::INFINITY;
    for step in 50..600 {
        let lr = s.lr_at(step);
        assert!(lr <= prev);
        prev = lr;
    }
}

fn one_param(v: f64) -> ParamSet {
    [("w".to_string(), Tensor::full(&[3], v))].into_iter().collect()
}

#[test]
fn adamw_single_step_oracle() {
    let mut p = one_param(2.0);
    let mut opt = AdamW::new(AdamWConfig::default());
    let g = Tensor::new(vec![3], vec![0.5, -1.0, 0.0]).unwrap();
    opt.step(&mut p, &[("w".to_string(), g.clone())].into(), 0.1).unwrap();
    for (i, &gi) in g.data().iter().enumerate() {
        // First step: m̂ = g and v̂ = g².
        let decayed = 2.0 - 0.1 * 0.05 * 2.0;
        let want = decayed - 0.1 * gi / (gi.abs() + 1e-8);
        assert!((p.get("w").unwrap().data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn adamw_zero_and_missing_gradients() {
    let zero: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::zeros(&[3]))].into();
    let mut p = one_param(2.0);
    AdamW::new(AdamWConfig::default()).step(&mut p, &zero, 0.1).unwrap();
    assert!(p.get("w").unwrap().data().iter().all(|&v| v == 2.0 - 0.1 * 0.05 * 2.0));

    let mut p = one_param(2.0);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    AdamW::new(cfg).step(&mut p, &zero, 0.1).unwrap();
    assert_eq!(p, one_param(2.0));

    let mut p = one_param(2.0);
    AdamW::new(AdamWConfig::default())
        .step(&mut p, &BTreeMap::new(), 0.1)
        .unwrap();
    assert_eq!(p, one_param(2.0));

    let wrong: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::zeros(&[2]))].into();
    assert!(AdamW::new(cfg).step(&mut p, &wrong, 0.1).is_err());
}

fn sample_checkpoint() -> Checkpoint {
    let params: ParamSet = [
        (
            "b.w".to_string(),
            Tensor::new(vec![2, 2], vec![1.5, -0.25, 1e-300, 3.0]).unwrap(),
        ),
        ("a".to_string(), Tensor::scalar(std::f64::consts::PI)),
    ]
    .into_iter()
    .collect();
    let mut c = Checkpoint::new(params, serde_json::json!({"variant": "vmoe", "depth": 2}));
    c.metrics = Some("../../metrics.jsonl".into());
    c
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = sample_checkpoint();
    c.save(&dir.path().join("one")).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("one")).unwrap();
    assert_eq!(loaded, c);
    loaded.save(&dir.path().join("two")).unwrap();
    for f in [MANIFEST_FILE, BLOB_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join("one").join(f)).unwrap(),
            std::fs::read(dir.path().join("two").join(f)).unwrap()
        );
    }
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("one").join(MANIFEST_FILE)).unwrap()).unwrap();
    let names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, vec!["a", "b.w"]);
    assert_eq!(manifest.tensors[1].offset, 8);
}

#[test]
fn checkpoint_errors_are_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let c = sample_checkpoint();
    c.save(dir.path()).unwrap();
    assert!(matches!(
        Checkpoint::load_expecting(dir.path(), &serde_json::json!({"variant": "tgr"})),
        Err(crate::Error::Config(_))
    ));
    assert!(Checkpoint::load_expecting(dir.path(), &c.config).is_ok());
    assert!(Checkpoint::load_expecting_field(dir.path(), "depth", &3).is_err());
    let blob = dir.path().join(BLOB_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
    let err = Checkpoint::load(dir.path()).unwrap_err();
    assert!(matches!(err, crate::Error::Format { .. }), "{err}");
    assert!(err.to_string().contains("truncated"));
    let mut longer = bytes.clone();
    longer.push(0);
    std::fs::write(&blob, longer).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

#[test]
fn trace_round_trip_and_validation() {
    let mut t = RoutingTrace::new(2, 3, 4);
    t.push(Snapshot {
        epoch: 1,
        assignments: vec![vec![0, 1, 2], vec![3, 3, 0]],
    })
    .unwrap();
    t.push(Snapshot {
        epoch: 2,
        assignments: vec![vec![1, 1, 1], vec![0, 2, 3]],
    })
    .unwrap();
    assert!(t
        .push(Snapshot {
            epoch: 2,
            assignments: vec![vec![0; 3]; 2]
        })
        .is_err());
    assert!(t
        .push(Snapshot {
            epoch: 3,
            assignments: vec![vec![4, 0, 0], vec![0; 3]]
        })
        .is_err());
    assert!(t
        .push(Snapshot {
            epoch: 3,
            assignments: vec![vec![0; 2]; 2]
        })
        .is_err());
    let bytes = t.to_bytes();
    assert_eq!(&bytes[..4], b"TGRT");
    assert_eq!(bytes.len(), 20 + 2 * (4 + 2 * 2 * 3));
    let p = std::path::Path::new("t.bin");
    assert_eq!(RoutingTrace::from_bytes(&bytes, p).unwrap(), t);
    assert!(RoutingTrace::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'x';
    assert!(RoutingTrace::from_bytes(&bad, p).is_err());
}

#[test]
fn config_parsing() {
    let mut cfg = TrainConfig::new(Variant::Vmoe);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    let minimal = r#"{"variant": "vmoe", "model": {"depth": 2, "hidden_dim": 8, "heads": 2, "ffn_dim": 8,
        "num_classes": 3, "tokens_per_sample": 4, "input_dim": 5, "moe_layers": [2], "num_experts": 4}}"#;
    let parsed = TrainConfig::from_json(minimal).unwrap();
    assert_eq!(parsed.epochs, 60);
    assert_eq!(parsed.optimizer.weight_decay, 0.05);
    assert!(TrainConfig::from_json(&minimal.replace("\"variant\"", "\"varaint\"")).is_err());
    assert!(TrainConfig::from_json(&minimal.replace("vmoe", "dense")).is_err());

    cfg.variant = Variant::Tgr;
    assert!(cfg.validate().is_err());
    cfg.teacher_checkpoint = Some("t".into());
    assert!(cfg.validate().is_ok());
    cfg.variant = Variant::TgrFirstHalf;
    cfg.epochs = 7;
    assert_eq!(cfg.distill_until_epoch(), 4);
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
        assert_eq!(serde_json::to_value(v).unwrap(), serde_json::json!(v.name()));
    }
}
