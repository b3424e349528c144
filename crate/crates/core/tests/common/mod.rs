//! Tiny fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod composites;

use tgr_core::data::{generate_synthetic, SyntheticData, SyntheticSpec};
use tgr_core::model::{init_model, ModelConfig};
use tgr_core::teacher::{LayerMapping, TeacherBundle};
use tgr_core::train::{TrainConfig, Variant};

pub fn tiny_data(seed: u64, train: usize, val: usize) -> SyntheticData {
    generate_synthetic(&SyntheticSpec {
        num_classes: 4,
        num_components: 8,
        token_dim: 8,
        tokens_per_sample: 4,
        noise_sigma: 0.3,
        samples_train: train,
        samples_val: val,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

pub fn tiny_student(num_experts: usize, top_k: usize) -> ModelConfig {
    ModelConfig {
        depth: 2,
        hidden_dim: 8,
        heads: 2,
        ffn_dim: 16,
        num_classes: 4,
        tokens_per_sample: 4,
        input_dim: 8,
        moe_layers: vec![2],
        num_experts,
        top_k,
        noise_std: 1.0,
    }
}

pub fn tiny_teacher_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 12,
        ffn_dim: 24,
        moe_layers: Vec::new(),
        num_experts: 1,
        noise_std: 0.0,
        ..tiny_student(1, 1)
    }
}

/// Teacher with a randomly initialized (untrained) backbone.
pub fn tiny_bundle(student: &ModelConfig, seed: u64) -> TeacherBundle {
    let cfg = tiny_teacher_model();
    let backbone = init_model(&cfg, 1000 + seed).unwrap();
    TeacherBundle::new(cfg, backbone, student, LayerMapping::Aligned, seed).unwrap()
}

pub fn tiny_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(variant);
    cfg.model = if variant == Variant::Dense {
        tiny_student(1, 1).to_dense()
    } else {
        tiny_student(4, 1)
    };
    cfg.seed = seed;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.warmup_epochs = 1;
    cfg.base_lr = 5e-3;
    cfg.probe_set_size = 16;
    cfg.log_every_steps = 2;
    cfg.checkpoint_every_epochs = 2;
    cfg.eval_batch_size = 32;
    cfg
}
