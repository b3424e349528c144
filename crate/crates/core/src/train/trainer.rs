use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_dir, Checkpoint};
use super::config::{TeacherRouterMode, TrainConfig, Variant};
use super::metrics::{BreakdownMean, MetricsRecord, MetricsWriter};
use super::optim::{AdamW, Schedule};
use super::trace::{RoutingTrace, Snapshot};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{epoch_batches, Dataset, TokenBatch};
use crate::error::{Error, Result};
use crate::losses::{
    compose_student_loss, compose_teacher_loss, compose_upper_bound_losses, compose_vmoe_loss, task_loss,
    LossBreakdown, LossWeights,
};
use crate::model::{forward_dense, forward_student, init_model, ForwardRecord, ModelConfig, RouteBy, StudentOptions};
use crate::params::{BoundParams, ParamSet};
use crate::teacher::{teacher_route, teacher_router_step, FeatureCache, TeacherBundle};

/// Stream of the student's routing-noise generator.
const NOISE_STREAM: u64 = 7;
const PROBE_STREAM: u64 = 11;
const SUBSET_STREAM: u64 = 13;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACE_FILE: &str = "routing_trace.bin";
pub const SUMMARY_FILE: &str = "summary.json";

/// Teacher bundle plus cached features and its own optimizer state.
pub struct TeacherState {
    pub bundle: TeacherBundle,
    pub train_cache: FeatureCache,
    pub val_cache: Option<FeatureCache>,
    opt: AdamW,
    /// True once a pretrained router has been frozen.
    router_frozen: bool,
}

impl TeacherState {
    pub fn new(bundle: TeacherBundle, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<Self> {
        let train_cache = FeatureCache::build(&bundle, train, cfg.eval_batch_size)?;
        let val_cache = val
            .map(|v| FeatureCache::build(&bundle, v, cfg.eval_batch_size))
            .transpose()?;
        Ok(TeacherState {
            bundle,
            train_cache,
            val_cache,
            opt: AdamW::new(cfg.optimizer),
            router_frozen: false,
        })
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub student: LossBreakdown,
    pub teacher: Option<LossBreakdown>,
    pub correct: usize,
    pub count: usize,
    /// Top-1 selection counts per MoE layer under the routing actually used.
    pub utilization: BTreeMap<usize, Vec<usize>>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub teacher: Option<TeacherState>,
    opt: AdamW,
    rng: ChaCha8Rng,
    schedule: Schedule,
    /// Optimizer steps taken so far.
    pub step: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count()
}

fn utilization(rec: &ForwardRecord, num_experts: usize) -> BTreeMap<usize, Vec<usize>> {
    rec.selections
        .iter()
        .map(|(&l, sel)| {
            let mut counts = vec![0; num_experts];
            sel.top1().into_iter().for_each(|e| counts[e] += 1);
            (l, counts)
        })
        .collect()
}

fn take_grads(grads: &mut crate::autodiff::Gradients, bound: &BoundParams) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, &v) in bound.iter() {
        if let Some(t) = grads.take(v) {
            if !t.is_finite() {
                return Err(Error::Config(format!("non-finite gradient for {name}")));
            }
            out.insert(name.clone(), t);
        }
    }
    Ok(out)
}

impl Trainer {
    /// Fresh student initialized from `config.seed`.
    pub fn new(config: TrainConfig, train_len: usize, teacher: Option<TeacherState>) -> Result<Self> {
        config.validate_shape()?;
        if config.variant.needs_teacher() && teacher.is_none() {
            return Err(Error::Config(format!(
                "variant {} needs a teacher",
                config.variant.name()
            )));
        }
        let params = init_model(&config.model, config.seed)?;
        let steps_per_epoch = train_len.div_ceil(config.batch_size);
        let schedule = Schedule {
            base_lr: config.base_lr,
            warmup_start: config.warmup_start_lr,
            warmup_steps: config.warmup_epochs * steps_per_epoch,
            total_steps: config.epochs * steps_per_epoch,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(NOISE_STREAM);
        Ok(Trainer {
            opt: AdamW::new(config.optimizer),
            config,
            params,
            teacher,
            rng,
            schedule,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    fn distill_active(&self, epoch: usize) -> bool {
        epoch <= self.config.distill_until_epoch()
    }

    fn teacher_trainable(&self, epoch: usize) -> bool {
        let Some(t) = &self.teacher else { return false };
        if t.router_frozen || self.config.teacher.router_mode == TeacherRouterMode::Pretrained {
            return false;
        }
        self.config.variant.teacher_routed() || self.distill_active(epoch)
    }

    /// Trains the teacher router alone on a fixed subset of the training
    /// set and freezes it. Used by the pretrained router mode.
    pub fn pretrain_teacher_router(&mut self, train_len: usize) -> Result<Vec<LossBreakdown>> {
        let cfg = self.config.clone();
        let teacher = self
            .teacher
            .as_mut()
            .ok_or_else(|| Error::Config("no teacher to pretrain".into()))?;
        let keep = ((train_len as f64 * cfg.teacher.subset_fraction).round() as usize).clamp(1, train_len);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SUBSET_STREAM);
        let mut subset: Vec<usize> = (0..train_len).collect();
        subset.shuffle(&mut rng);
        subset.truncate(keep);
        subset.sort_unstable();
        let per_epoch = keep.div_ceil(cfg.batch_size);
        let schedule = Schedule {
            base_lr: cfg.base_lr,
            warmup_start: cfg.base_lr,
            warmup_steps: 0,
            total_steps: (cfg.teacher.pretrain_epochs * per_epoch).max(1),
        };
        let mut log = Vec::new();
        let mut step = 0;
        for epoch in 0..cfg.teacher.pretrain_epochs {
            for batch in epoch_batches(keep, cfg.batch_size, cfg.seed ^ 0x5eed, epoch, true) {
                let ids: Vec<usize> = batch.iter().map(|&i| subset[i]).collect();
                let feats = teacher.train_cache.gather(&ids)?;
                let lr = schedule.lr_at(step);
                log.push(teacher_router_step(
                    &mut teacher.bundle,
                    &feats,
                    &cfg.weights,
                    &mut teacher.opt,
                    lr,
                )?);
                step += 1;
            }
        }
        teacher.router_frozen = true;
        Ok(log)
    }

    /// One optimizer step for the student (and, where applicable, the
    /// teacher router) on `batch`. `epoch` is 1-based.
    pub fn train_step(&mut self, batch: &TokenBatch, epoch: usize) -> Result<StepOutput> {
        let step = self.step;
        self.step_impl(batch, epoch).map_err(|e| match e {
            Error::NonFinite { node, op } => Error::Divergence {
                epoch,
                step,
                reason: format!("non-finite value at node {node} ({op})"),
            },
            Error::Config(msg) if msg.starts_with("non-finite") => Error::Divergence {
                epoch,
                step,
                reason: msg,
            },
            other => other,
        })
    }

    fn step_impl(&mut self, batch: &TokenBatch, epoch: usize) -> Result<StepOutput> {
        let lr = self.lr();
        let cfg = &self.config;
        let variant = cfg.variant;
        let mut g = Graph::new();
        let student = self.params.bind(&mut g, true);
        let x = g.constant(batch.tokens.clone());
        let train_teacher = self.teacher_trainable(epoch);
        let distill_active = self.distill_active(epoch);

        let mut teacher_bound = None;
        let mut teacher_probs = BTreeMap::new();
        if let Some(t) = &self.teacher {
            let feats = t.train_cache.gather(&batch.ids)?;
            let routers = t.bundle.routers.bind(&mut g, train_teacher);
            teacher_probs = teacher_route(&mut g, &routers, &feats)?;
            teacher_bound = Some(routers);
        }

        let (rec, root, student_breakdown, teacher_terms): (ForwardRecord, Var, _, _) = match variant {
            Variant::Dense => {
                let rec = forward_dense(&mut g, &student, &cfg.model, x)?;
                let task = task_loss(&mut g, rec.logits, &batch.labels)?;
                let terms = compose_vmoe_loss(&mut g, task, &BTreeMap::new(), None, &cfg.weights)?;
                (rec, terms.total, terms, None)
            }
            Variant::Vmoe | Variant::VmoeZloss => {
                let rec = forward_student(&mut g, &student, &cfg.model, x, &mut self.rng, StudentOptions::train())?;
                let task = task_loss(&mut g, rec.logits, &batch.labels)?;
                let probs: BTreeMap<usize, Var> = rec.router_outputs.iter().map(|(&l, r)| (l, r.probs_noisy)).collect();
                let logits: BTreeMap<usize, Var> =
                    rec.router_outputs.iter().map(|(&l, r)| (l, r.logits_clean)).collect();
                let zl = (variant == Variant::VmoeZloss).then_some(&logits);
                let terms = compose_vmoe_loss(&mut g, task, &probs, zl, &cfg.weights)?;
                (rec, terms.total, terms, None)
            }
            Variant::Tgr | Variant::TgrFirstHalf | Variant::DistillOnly => {
                let opts = StudentOptions {
                    detach_gates: variant == Variant::DistillOnly,
                    ..StudentOptions::train()
                };
                let rec = forward_student(&mut g, &student, &cfg.model, x, &mut self.rng, opts)?;
                let task = task_loss(&mut g, rec.logits, &batch.labels)?;
                let pick = |noisy: bool| -> BTreeMap<usize, Var> {
                    rec.router_outputs
                        .iter()
                        .map(|(&l, r)| (l, if noisy { r.probs_noisy } else { r.probs_clean }))
                        .collect()
                };
                let student_probs = pick(cfg.teacher.kl_on_noisy);
                let load_probs = pick(true);
                let weights = LossWeights {
                    lambda_distill: if distill_active {
                        cfg.weights.lambda_distill
                    } else {
                        0.0
                    },
                    ..cfg.weights
                };
                let sterms = compose_student_loss(
                    &mut g,
                    task,
                    &student_probs,
                    &teacher_probs,
                    cfg.teacher.student_load_term.then_some(&load_probs),
                    &weights,
                )?;
                let tterms = if train_teacher {
                    Some(compose_teacher_loss(&mut g, &teacher_probs, &cfg.weights)?)
                } else {
                    None
                };
                let root = match &tterms {
                    Some(t) => g.add(sterms.total, t.total)?,
                    None => sterms.total,
                };
                (rec, root, sterms, tterms)
            }
            Variant::UpperBound | Variant::StudentRouted => {
                let opts = StudentOptions {
                    route_by: RouteBy::External(&teacher_probs),
                    ..StudentOptions::train()
                };
                let rec = forward_student(&mut g, &student, &cfg.model, x, &mut self.rng, opts)?;
                let task = task_loss(&mut g, rec.logits, &batch.labels)?;
                let student_probs: BTreeMap<usize, Var> =
                    rec.router_outputs.iter().map(|(&l, r)| (l, r.probs_clean)).collect();
                let ub = compose_upper_bound_losses(&mut g, task, &teacher_probs, &student_probs, &cfg.weights)?;
                let mut sterms = ub.student_router.clone();
                sterms.total = ub.student;
                sterms.task = Some(task);
                (rec, ub.combined, sterms, Some(ub.teacher))
            }
        };

        let student_values = student_breakdown.values(&g);
        let teacher_values = teacher_terms.as_ref().map(|t| t.values(&g));
        if !g.value(root).item().is_finite() {
            return Err(Error::Config("non-finite loss".into()));
        }
        let mut grads = g.backward(root)?;
        let sgrads = take_grads(&mut grads, &student)?;
        let tgrads = match (&teacher_bound, train_teacher) {
            (Some(b), true) => Some(take_grads(&mut grads, b)?),
            _ => None,
        };

        let logits = g.value(rec.logits).clone();
        let out = StepOutput {
            student: student_values,
            teacher: teacher_values,
            correct: count_correct(&logits, &batch.labels),
            count: batch.labels.len(),
            utilization: utilization(&rec, cfg.model.num_experts),
        };
        drop(g);
        self.opt.step(&mut self.params, &sgrads, lr)?;
        if let (Some(t), Some(tg)) = (self.teacher.as_mut(), tgrads) {
            t.opt.step(&mut t.bundle.routers, &tg, lr)?;
        }
        self.step += 1;
        Ok(out)
    }

    /// Student parameters plus, when present, the teacher router parameters.
    pub fn state_params(&self) -> ParamSet {
        let mut p = self.params.clone();
        if let Some(t) = &self.teacher {
            p.extend(t.bundle.routers.clone());
        }
        p
    }
}

impl TrainConfig {
    fn validate_shape(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if (self.variant == Variant::Dense) != self.model.is_dense() {
            return Err(Error::Config(format!(
                "variant {} does not match the model's MoE layers",
                self.variant.name()
            )));
        }
        Ok(())
    }
}

/// Which router selects experts at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub samples: usize,
    /// Top-1 selection counts per layer under the routing used.
    pub utilization: BTreeMap<usize, Vec<usize>>,
    /// Mean clean router probability per expert and layer.
    pub importance: BTreeMap<usize, Vec<f64>>,
    /// Top-1 expert per token (`sample · N + token`) under the routing used.
    #[serde(skip)]
    pub assignments: BTreeMap<usize, Vec<u16>>,
    /// The student router's own clean argmax per token.
    #[serde(skip)]
    pub student_top1: BTreeMap<usize, Vec<u16>>,
    /// The teacher router's argmax per token, when a teacher was supplied.
    #[serde(skip)]
    pub teacher_top1: BTreeMap<usize, Vec<u16>>,
    #[serde(skip)]
    pub logits: Vec<f64>,
}

fn row_argmax_u16(t: &Tensor) -> Vec<u16> {
    let (rows, _) = t.rows_cols();
    (0..rows).map(|r| argmax(t.row(r)) as u16).collect()
}

/// Noise-free evaluation in file order.
pub fn evaluate(
    params: &ParamSet,
    model: &ModelConfig,
    data: &Dataset,
    mode: RoutingMode,
    teacher: Option<(&TeacherBundle, &FeatureCache)>,
    batch_size: usize,
) -> Result<EvalReport> {
    if mode == RoutingMode::Teacher && teacher.is_none() {
        return Err(Error::Config("teacher-routed evaluation needs a teacher".into()));
    }
    let e = model.num_experts;
    let mut report = EvalReport {
        accuracy: 0.0,
        samples: data.len(),
        utilization: model.moe_layers.iter().map(|&l| (l, vec![0; e])).collect(),
        importance: model.moe_layers.iter().map(|&l| (l, vec![0.0; e])).collect(),
        assignments: BTreeMap::new(),
        student_top1: BTreeMap::new(),
        teacher_top1: BTreeMap::new(),
        logits: Vec::with_capacity(data.len() * model.num_classes),
    };
    let mut correct = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(batch.tokens.clone());
        let mut teacher_probs = BTreeMap::new();
        if let Some((bundle, cache)) = teacher {
            if !model.is_dense() {
                let routers = bundle.routers.bind(&mut g, false);
                teacher_probs = teacher_route(&mut g, &routers, &cache.gather(chunk)?)?;
            }
        }
        let rec = if model.is_dense() {
            forward_dense(&mut g, &p, model, x)?
        } else {
            let route_by = match mode {
                RoutingMode::Student => RouteBy::Student,
                RoutingMode::Teacher => RouteBy::External(&teacher_probs),
            };
            let opts = StudentOptions {
                route_by,
                ..StudentOptions::eval()
            };
            forward_student(&mut g, &p, model, x, &mut rng, opts)?
        };
        let logits = g.value(rec.logits);
        correct += count_correct(logits, &batch.labels);
        report.logits.extend_from_slice(logits.data());
        for (&l, sel) in &rec.selections {
            let top1 = sel.top1();
            let counts = report.utilization.get_mut(&l).expect("moe layer");
            top1.iter().for_each(|&x| counts[x] += 1);
            report
                .assignments
                .entry(l)
                .or_default()
                .extend(top1.iter().map(|&x| x as u16));
        }
        for (&l, r) in &rec.router_outputs {
            let probs = g.value(r.probs_clean);
            let imp = report.importance.get_mut(&l).expect("moe layer");
            for row in 0..probs.rows_cols().0 {
                for (acc, v) in imp.iter_mut().zip(probs.row(row)) {
                    *acc += v;
                }
            }
            report.student_top1.entry(l).or_default().extend(row_argmax_u16(probs));
        }
        for (&l, &pt) in &teacher_probs {
            report
                .teacher_top1
                .entry(l)
                .or_default()
                .extend(row_argmax_u16(g.value(pt)));
        }
    }
    let tokens = (data.len() * model.tokens_per_sample) as f64;
    for imp in report.importance.values_mut() {
        imp.iter_mut().for_each(|v| *v /= tokens);
    }
    report.accuracy = correct as f64 / data.len() as f64;
    Ok(report)
}

/// Fixed probe samples: the first `size` ids of a seeded permutation of the
/// validation split, in ascending order.
pub fn probe_ids(val_len: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROBE_STREAM);
    let mut ids: Vec<usize> = (0..val_len).collect();
    ids.shuffle(&mut rng);
    ids.truncate(size.min(val_len));
    ids.sort_unstable();
    ids
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    /// Validation accuracy under the variant's own inference routing.
    pub val_accuracy: f64,
    pub teacher_routed_accuracy: Option<f64>,
    pub student_routed_accuracy: Option<f64>,
    pub final_train_accuracy: f64,
    pub run_dir: PathBuf,
    pub metrics: PathBuf,
    pub trace: Option<PathBuf>,
    pub checkpoint: PathBuf,
}

/// Rebuilds a frozen teacher from its checkpoint for `config`'s student.
pub fn load_teacher(config: &TrainConfig) -> Result<TeacherBundle> {
    let dir = config
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("no teacher_checkpoint configured".into()))?;
    let ckpt = Checkpoint::load(dir)?;
    if !ckpt.frozen {
        return Err(Error::Config(format!(
            "{} is not a frozen teacher checkpoint",
            dir.display()
        )));
    }
    let teacher_cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::format("checkpoint manifest", dir.join("manifest.json"), e.to_string()))?;
    TeacherBundle::new(
        teacher_cfg.model,
        ckpt.params,
        &config.model,
        config.teacher.layer_mapping,
        config.seed,
    )
}

/// Copies every tensor of `source` whose name and shape match into
/// `params`. Returns the names left at their fresh initialization.
pub fn warm_start(params: &mut ParamSet, source: &ParamSet) -> Result<Vec<String>> {
    let mut fresh = Vec::new();
    for (name, t) in params.iter_mut() {
        match source.get(name) {
            Ok(s) if s.shape() == t.shape() => *t = s.clone(),
            _ => fresh.push(name.clone()),
        }
    }
    if fresh.len() == params.len() {
        return Err(Error::Config(
            "warm-start checkpoint shares no tensor with the model".into(),
        ));
    }
    Ok(fresh)
}

/// A finished run rebuilt from one of its checkpoints.
pub struct RestoredRun {
    pub config: TrainConfig,
    /// Student parameters only.
    pub params: ParamSet,
    /// Frozen teacher with the router weights saved in the checkpoint.
    pub teacher: Option<TeacherBundle>,
}

pub fn restore_run(checkpoint: &Path) -> Result<RestoredRun> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config: TrainConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::format("checkpoint manifest", checkpoint.join("manifest.json"), e.to_string()))?;
    let mut params = ckpt.params;
    let routers = params.filter_prefix("teacher_router.");
    for name in routers.names() {
        params.remove(name);
    }
    let teacher = if config.variant.needs_teacher() {
        let mut bundle = load_teacher(&config)?;
        if routers.len() != bundle.routers.len() {
            return Err(Error::Config(format!(
                "checkpoint {} holds {} teacher router tensors, expected {}",
                checkpoint.display(),
                routers.len(),
                bundle.routers.len()
            )));
        }
        bundle.routers = routers;
        Some(bundle)
    } else {
        None
    };
    Ok(RestoredRun {
        config,
        params,
        teacher,
    })
}

fn save_state(trainer: &Trainer, dir: &Path, frozen: bool, info: serde_json::Value) -> Result<()> {
    let mut ckpt = Checkpoint::new(trainer.state_params(), serde_json::to_value(&trainer.config)?);
    ckpt.frozen = frozen;
    ckpt.metrics = Some(format!("../../{METRICS_FILE}"));
    ckpt.info = info;
    ckpt.save(dir)
}

fn run_impl(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    teacher: Option<TeacherBundle>,
    out_dir: &Path,
    freeze: bool,
    on_epoch: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunSummary> {
    config.validate_shape()?;
    for (name, d) in [("train", train), ("val", val)] {
        if d.tokens_per_sample() != config.model.tokens_per_sample
            || d.token_dim() != config.model.input_dim
            || d.num_classes() > config.model.num_classes
        {
            return Err(Error::Config(format!(
                "{name} data does not match the model's input layout"
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let teacher_state = match teacher {
        Some(b) if config.variant.needs_teacher() => Some(TeacherState::new(b, train, Some(val), config)?),
        _ => None,
    };
    let mut trainer = Trainer::new(config.clone(), train.len(), teacher_state)?;
    if let Some(dir) = &config.init_checkpoint {
        warm_start(&mut trainer.params, &Checkpoint::load(dir)?.params)?;
    }
    if trainer.teacher.is_some() && config.teacher.router_mode == TeacherRouterMode::Pretrained {
        trainer.pretrain_teacher_router(train.len())?;
    }

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let probe = probe_ids(val.len(), config.probe_set_size, config.seed);
    let n = config.model.tokens_per_sample;
    let moe = !config.model.is_dense();
    let mut trace =
        moe.then(|| RoutingTrace::new(config.model.moe_layers.len(), probe.len() * n, config.model.num_experts));
    let trace_path = out_dir.join(TRACE_FILE);
    let primary_mode = if config.variant == Variant::UpperBound {
        RoutingMode::Teacher
    } else {
        RoutingMode::Student
    };

    let start = Instant::now();
    let mut window = BreakdownMean::default();
    let mut teacher_window = BreakdownMean::default();
    let mut window_correct = 0;
    let mut window_count = 0;
    let mut window_util: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut last_train_acc = 0.0;
    let mut last_report = None;
    for epoch in 1..=config.epochs {
        let batches = epoch_batches(train.len(), config.batch_size, config.seed, epoch - 1, true);
        let last = batches.len() - 1;
        for (i, ids) in batches.iter().enumerate() {
            let batch = train.batch(ids)?;
            let lr = trainer.lr();
            let out = trainer.train_step(&batch, epoch)?;
            window.add(&out.student);
            if let Some(t) = &out.teacher {
                teacher_window.add(t);
            }
            window_correct += out.correct;
            window_count += out.count;
            for (l, c) in out.utilization {
                let acc = window_util.entry(l).or_insert_with(|| vec![0; c.len()]);
                acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
            }
            let log_now = trainer.step % config.log_every_steps == 0 || i == last;
            if !log_now {
                continue;
            }
            let mut val_accuracy = None;
            if i == last {
                let teacher = trainer
                    .teacher
                    .as_ref()
                    .and_then(|t| t.val_cache.as_ref().map(|c| (&t.bundle, c)));
                let report = evaluate(
                    &trainer.params,
                    &config.model,
                    val,
                    primary_mode,
                    teacher,
                    config.eval_batch_size,
                )?;
                val_accuracy = Some(report.accuracy);
                if let Some(trace) = trace.as_mut() {
                    if epoch % config.trace_every_epochs == 0 || epoch == config.epochs {
                        let assignments = report
                            .assignments
                            .values()
                            .map(|all| {
                                probe
                                    .iter()
                                    .flat_map(|&s| all[s * n..(s + 1) * n].iter().copied())
                                    .collect()
                            })
                            .collect();
                        trace.push(Snapshot {
                            epoch: epoch as u32,
                            assignments,
                        })?;
                        trace.write(&trace_path)?;
                    }
                }
                last_report = Some(report);
            }
            last_train_acc = window_correct as f64 / window_count.max(1) as f64;
            let record = MetricsRecord {
                epoch,
                step: trainer.step,
                lr,
                loss: window.take(),
                teacher_loss: (!teacher_window.is_empty()).then(|| teacher_window.take()),
                train_accuracy: last_train_acc,
                val_accuracy,
                utilization: std::mem::take(&mut window_util),
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            };
            metrics.append(&record)?;
            if i == last {
                on_epoch(&record);
            }
            window_correct = 0;
            window_count = 0;
        }
        if epoch % config.checkpoint_every_epochs == 0 && epoch != config.epochs {
            save_state(
                &trainer,
                &checkpoint_dir(out_dir, Some(epoch)),
                false,
                serde_json::Value::Null,
            )?;
        }
    }

    let report = last_report.expect("at least one epoch");
    let (mut teacher_acc, mut student_acc) = (None, None);
    if config.variant.teacher_routed() {
        let t = trainer
            .teacher
            .as_ref()
            .expect("teacher-routed variants have a teacher");
        let tv = t.val_cache.as_ref().map(|c| (&t.bundle, c));
        let other_mode = if primary_mode == RoutingMode::Teacher {
            RoutingMode::Student
        } else {
            RoutingMode::Teacher
        };
        let other = evaluate(
            &trainer.params,
            &config.model,
            val,
            other_mode,
            tv,
            config.eval_batch_size,
        )?;
        let (ta, sa) = match primary_mode {
            RoutingMode::Teacher => (report.accuracy, other.accuracy),
            RoutingMode::Student => (other.accuracy, report.accuracy),
        };
        teacher_acc = Some(ta);
        student_acc = Some(sa);
    }
    let final_dir = checkpoint_dir(out_dir, None);
    let info = serde_json::json!({
        "seed": config.seed,
        "epochs": config.epochs,
        "val_accuracy": report.accuracy,
    });
    save_state(&trainer, &final_dir, freeze, info)?;
    let summary = RunSummary {
        variant: config.variant,
        seed: config.seed,
        epochs: config.epochs,
        steps: trainer.step,
        val_accuracy: report.accuracy,
        teacher_routed_accuracy: teacher_acc,
        student_routed_accuracy: student_acc,
        final_train_accuracy: last_train_acc,
        run_dir: out_dir.to_path_buf(),
        metrics: metrics_path,
        trace: moe.then_some(trace_path),
        checkpoint: final_dir,
    };
    let spath = out_dir.join(SUMMARY_FILE);
    std::fs::write(&spath, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&spath, e))?;
    Ok(summary)
}

/// Full training loop for `config`. Teacher-guided variants need `teacher`.
///
/// Writes `metrics.jsonl`, `routing_trace.bin` (MoE variants),
/// `checkpoints/epoch_NNNN` every `checkpoint_every_epochs`, and
/// `checkpoints/final` plus `summary.json` into `out_dir`.
pub fn run_training(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    teacher: Option<TeacherBundle>,
    out_dir: &Path,
) -> Result<RunSummary> {
    run_training_with(config, train, val, teacher, out_dir, &mut |_| {})
}

/// [`run_training`], calling `on_epoch` with each epoch's closing record.
pub fn run_training_with(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    teacher: Option<TeacherBundle>,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunSummary> {
    if config.variant.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!(
            "variant {} needs a teacher",
            config.variant.name()
        )));
    }
    run_impl(config, train, val, teacher, out_dir, false, on_epoch)
}

/// Trains a dense model with plain cross-entropy and writes its final
/// checkpoint with the frozen flag set, ready to serve as a teacher.
pub fn train_teacher(config: &TrainConfig, train: &Dataset, val: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    train_teacher_with(config, train, val, out_dir, &mut |_| {})
}

pub fn train_teacher_with(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunSummary> {
    if config.variant != Variant::Dense {
        return Err(Error::Config("a teacher must be trained with the dense variant".into()));
    }
    run_impl(config, train, val, None, out_dir, true, on_epoch)
}
