use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::teacher::LayerMapping;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dense,
    Vmoe,
    VmoeZloss,
    Tgr,
    TgrFirstHalf,
    DistillOnly,
    UpperBound,
    StudentRouted,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Dense,
        Variant::Vmoe,
        Variant::VmoeZloss,
        Variant::Tgr,
        Variant::TgrFirstHalf,
        Variant::DistillOnly,
        Variant::UpperBound,
        Variant::StudentRouted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Vmoe => "vmoe",
            Variant::VmoeZloss => "vmoe_zloss",
            Variant::Tgr => "tgr",
            Variant::TgrFirstHalf => "tgr_first_half",
            Variant::DistillOnly => "distill_only",
            Variant::UpperBound => "upper_bound",
            Variant::StudentRouted => "student_routed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    pub fn needs_teacher(self) -> bool {
        matches!(
            self,
            Variant::Tgr | Variant::TgrFirstHalf | Variant::DistillOnly | Variant::UpperBound | Variant::StudentRouted
        )
    }

    /// Variants whose teacher router selects experts during training.
    pub fn teacher_routed(self) -> bool {
        matches!(self, Variant::UpperBound | Variant::StudentRouted)
    }
}

/// When the teacher router is optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherRouterMode {
    /// Updated on the student's mini-batches, one step per student step.
    #[default]
    Joint,
    /// Trained alone on a fixed subset first, then frozen.
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherOptions {
    pub layer_mapping: LayerMapping,
    pub router_mode: TeacherRouterMode,
    /// Fraction of the training set used by the pretrained router mode.
    pub subset_fraction: f64,
    pub pretrain_epochs: usize,
    /// Distill into the noisy rather than the clean student probabilities.
    pub kl_on_noisy: bool,
    /// Adds `λ_load · L_load` to the student objective (an ablation).
    pub student_load_term: bool,
}

impl Default for TeacherOptions {
    fn default() -> Self {
        TeacherOptions {
            layer_mapping: LayerMapping::Aligned,
            router_mode: TeacherRouterMode::Joint,
            subset_fraction: 1.0,
            pretrain_epochs: 10,
            kl_on_noisy: false,
            student_load_term: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    /// Directory of a synthetic dataset (`train.tgrd`, `val.tgrd`).
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Checkpoint to warm-start the student from (second training phase).
    /// Tensors whose name and shape match are copied; the rest, e.g. a
    /// classifier for a different class count, keep their fresh init.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub teacher: TeacherOptions,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::base_lr")]
    pub base_lr: f64,
    #[serde(default = "defaults::warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "defaults::warmup_start_lr")]
    pub warmup_start_lr: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::probe_set_size")]
    pub probe_set_size: usize,
    #[serde(default = "defaults::one")]
    pub trace_every_epochs: usize,
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every_epochs: usize,
    #[serde(default = "defaults::log_every")]
    pub log_every_steps: usize,
    #[serde(default = "defaults::eval_batch_size")]
    pub eval_batch_size: usize,
}

mod defaults {
    pub fn epochs() -> usize {
        60
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn base_lr() -> f64 {
        5e-4
    }
    pub fn warmup_epochs() -> usize {
        5
    }
    pub fn warmup_start_lr() -> f64 {
        1e-6
    }
    pub fn probe_set_size() -> usize {
        512
    }
    pub fn one() -> usize {
        1
    }
    pub fn checkpoint_every() -> usize {
        10
    }
    pub fn log_every() -> usize {
        20
    }
    pub fn eval_batch_size() -> usize {
        256
    }
}

impl TrainConfig {
    /// Desk-scale defaults for `variant` with the default student (or dense
    /// teacher-shaped model for [`Variant::Dense`]).
    pub fn new(variant: Variant) -> Self {
        let model = if variant == Variant::Dense {
            ModelConfig::student_default().to_dense()
        } else {
            ModelConfig::student_default()
        };
        TrainConfig {
            variant,
            model,
            data_dir: None,
            teacher_checkpoint: None,
            init_checkpoint: None,
            teacher: TeacherOptions::default(),
            weights: LossWeights::default(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            base_lr: defaults::base_lr(),
            warmup_epochs: defaults::warmup_epochs(),
            warmup_start_lr: defaults::warmup_start_lr(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            probe_set_size: defaults::probe_set_size(),
            trace_every_epochs: 1,
            checkpoint_every_epochs: defaults::checkpoint_every(),
            log_every_steps: defaults::log_every(),
            eval_batch_size: defaults::eval_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let dense = self.model.is_dense();
        if (self.variant == Variant::Dense) != dense {
            return Err(Error::Config(format!(
                "variant {} {} MoE layers",
                self.variant.name(),
                if dense { "requires" } else { "must not have" }
            )));
        }
        if self.variant.needs_teacher() && self.teacher_checkpoint.is_none() {
            return Err(Error::Config(format!(
                "variant {} needs teacher_checkpoint",
                self.variant.name()
            )));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("trace_every_epochs", self.trace_every_epochs),
            ("checkpoint_every_epochs", self.checkpoint_every_epochs),
            ("log_every_steps", self.log_every_steps),
            ("eval_batch_size", self.eval_batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.warmup_start_lr >= 0.0) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        if !(self.teacher.subset_fraction > 0.0 && self.teacher.subset_fraction <= 1.0) {
            return Err(Error::Config("teacher.subset_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Last epoch (1-based) during which distillation is active.
    pub fn distill_until_epoch(&self) -> usize {
        match self.variant {
            Variant::TgrFirstHalf => self.epochs.div_ceil(2),
            _ => self.epochs,
        }
    }
}
