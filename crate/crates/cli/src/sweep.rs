use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use tgr_core::analytics::{consecutive_agreement, mean_value};
use tgr_core::data::load_synthetic;
use tgr_core::train::{load_teacher, run_training, RoutingTrace, TrainConfig, Variant};

use crate::analyze::DEFAULT_STRIDE;
use crate::commands::{data_dir, echo_run, read_json};
use crate::{usage, Global, SweepArgs};

pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    pub base: TrainConfig,
    pub experts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub jobs: usize,
    pub stride: u32,
}

#[derive(Clone, Debug)]
struct Arm {
    experts: usize,
    variant: Variant,
    seed: u64,
}

#[derive(Clone, Debug)]
struct Row {
    val_accuracy: f64,
    mean_consecutive_agreement: Option<f64>,
}

fn resolve(g: &Global, a: SweepArgs) -> Result<SweepOptions> {
    let cfg_path = g.config.clone().ok_or_else(|| {
        usage(
            "sweep",
            "sweep requires --config <FILE> (a base train config or a sweep run.json)",
        )
    })?;
    let value: serde_json::Value = read_json(&cfg_path)?;
    let mut o = if value.get("base").is_some() {
        serde_json::from_value::<SweepOptions>(value).with_context(|| format!("parsing {}", cfg_path.display()))?
    } else {
        let base: TrainConfig =
            serde_json::from_value(value).with_context(|| format!("parsing {}", cfg_path.display()))?;
        SweepOptions {
            seeds: vec![base.seed],
            base,
            experts: vec![2, 4, 8, 16],
            variants: vec![Variant::Vmoe, Variant::Tgr],
            jobs: 1,
            stride: DEFAULT_STRIDE,
        }
    };
    if !a.experts.is_empty() {
        o.experts = a.experts;
    }
    if !a.seeds.is_empty() {
        o.seeds = a.seeds;
    } else if let Some(s) = g.seed {
        o.seeds = vec![s];
    }
    if !a.variants.is_empty() {
        o.variants = a
            .variants
            .iter()
            .map(|v| Variant::parse(v).map_err(|e| usage("sweep", e.to_string())))
            .collect::<Result<_>>()?;
    }
    if let Some(j) = a.jobs {
        o.jobs = j;
    }
    if let Some(s) = a.stride {
        o.stride = s;
    }
    if let Some(e) = a.epochs {
        o.base.epochs = e;
    }
    if a.data.is_some() {
        o.base.data_dir = a.data;
    }
    if a.teacher.is_some() {
        o.base.teacher_checkpoint = a.teacher;
    }
    if o.experts.is_empty() || o.seeds.is_empty() || o.variants.is_empty() {
        return Err(usage("sweep", "experts, seeds and variants must be non-empty"));
    }
    if o.jobs == 0 {
        return Err(usage("sweep", "--jobs must be positive"));
    }
    if let Some(v) = o.variants.iter().find(|v| **v == Variant::Dense) {
        return Err(usage("sweep", format!("variant {} has no experts to sweep", v.name())));
    }
    Ok(o)
}

fn arm_config(o: &SweepOptions, arm: &Arm) -> TrainConfig {
    let mut cfg = o.base.clone();
    cfg.variant = arm.variant;
    cfg.seed = arm.seed;
    cfg.model.num_experts = arm.experts;
    cfg
}

fn arm_dir(root: &std::path::Path, arm: &Arm) -> PathBuf {
    root.join("runs")
        .join(format!("e{}", arm.experts))
        .join(arm.variant.name())
        .join(format!("seed{}", arm.seed))
}

pub fn run(g: &Global, a: SweepArgs) -> Result<()> {
    let o = resolve(g, a)?;
    let dir = data_dir(None, &o.base, "sweep")?;
    let mut arms = Vec::new();
    for &experts in &o.experts {
        for &variant in &o.variants {
            for &seed in &o.seeds {
                arms.push(Arm { experts, variant, seed });
            }
        }
    }
    for arm in &arms {
        arm_config(&o, arm).validate()?;
    }
    let data = load_synthetic(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let out = g.out_dir();
    echo_run(&out, &o)?;
    g.progress(format!(
        "sweep: {} runs, {} at a time",
        arms.len(),
        o.jobs.min(arms.len())
    ));

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Row>>>> = Mutex::new((0..arms.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..o.jobs.min(arms.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(arm) = arms.get(i) else { break };
                let res = run_arm(&o, arm, &data.train, &data.val, &out);
                if let Ok(r) = &res {
                    g.progress(format!(
                        "E={} {} seed {}: val_acc {:.4}",
                        arm.experts,
                        arm.variant.name(),
                        arm.seed,
                        r.val_accuracy
                    ));
                }
                results.lock().expect("no panics while holding the lock")[i] = Some(res);
            });
        }
    });

    let mut csv = String::from("experts,variant,seed,val_accuracy,mean_consecutive_agreement\n");
    for (arm, res) in arms.iter().zip(results.into_inner().expect("workers finished")) {
        let row = res
            .ok_or_else(|| anyhow!("run was never started"))?
            .with_context(|| format!("E={} {} seed {}", arm.experts, arm.variant.name(), arm.seed))?;
        let agreement = row
            .mean_consecutive_agreement
            .map(|v| v.to_string())
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            arm.experts,
            arm.variant.name(),
            arm.seed,
            row.val_accuracy,
            agreement
        ));
    }
    let path = out.join(SWEEP_FILE);
    std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    crate::emit(&csv)
}

fn run_arm(
    o: &SweepOptions,
    arm: &Arm,
    train: &tgr_core::data::Dataset,
    val: &tgr_core::data::Dataset,
    root: &std::path::Path,
) -> Result<Row> {
    let cfg = arm_config(o, arm);
    let bundle = cfg.variant.needs_teacher().then(|| load_teacher(&cfg)).transpose()?;
    let dir = arm_dir(root, arm);
    echo_run(&dir, &cfg)?;
    let summary = run_training(&cfg, train, val, bundle, &dir)?;
    let mean_consecutive_agreement = match &summary.trace {
        Some(p) => mean_value(&consecutive_agreement(&RoutingTrace::read(p)?, o.stride)?),
        None => None,
    };
    Ok(Row {
        val_accuracy: summary.val_accuracy,
        mean_consecutive_agreement,
    })
}
