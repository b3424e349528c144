use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tgr_core::data::{generate_synthetic, load_synthetic, Dataset, LabelRule, SyntheticSpec};
use tgr_core::model::ModelConfig;
use tgr_core::teacher::FeatureCache;
use tgr_core::train::{
    evaluate, load_teacher, restore_run, run_training_with, train_teacher_with, MetricsRecord, RoutingMode,
    TrainConfig, Variant,
};

use crate::{usage, Cli, Command, EvalArgs, GenDataArgs, Global, LabelRuleArg, PlotArgs, RoutingArg, Split, TrainArgs};

pub const RUN_FILE: &str = "run.json";

pub fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::TrainTeacher(a) => train(g, a, true),
        Command::Train(a) => train(g, a, false),
        Command::Eval(a) => eval(g, a),
        Command::Analyze(a) => crate::analyze::run(g, a.analysis),
        Command::Sweep(a) => crate::sweep::run(g, a),
        Command::Plot(a) => plot(g, a),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Config from `--config`, or `default` when none was given.
pub fn config_or<T: DeserializeOwned>(g: &Global, default: impl FnOnce() -> T) -> Result<T> {
    match &g.config {
        Some(p) => read_json(p),
        None => Ok(default()),
    }
}

/// Writes the fully resolved options to `<out>/run.json`.
pub fn echo_run<T: Serialize>(out: &Path, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(RUN_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(resolved)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    crate::emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn gen_data(g: &Global, a: GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = config_or(g, SyntheticSpec::default)?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { spec.$field = v; })* };
    }
    set!(classes => num_classes, components => num_components, token_dim => token_dim,
         tokens => tokens_per_sample, sigma => noise_sigma, train_samples => samples_train,
         val_samples => samples_val);
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    if let Some(r) = a.label_rule {
        spec.label_rule = match r {
            LabelRuleArg::MajorityComponent => LabelRule::MajorityComponent,
            LabelRuleArg::ComponentPairParity => LabelRule::ComponentPairParity,
        };
    }
    let out = g.out_dir();
    let data = generate_synthetic(&spec)?;
    data.write(&out)?;
    echo_run(&out, &spec)?;
    g.progress(format!(
        "wrote {} train / {} val samples to {}",
        data.train.len(),
        data.val.len(),
        out.display()
    ));
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let data = load_synthetic(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(match split {
        Split::Train => data.train,
        Split::Val => data.val,
    })
}

pub fn data_dir(flag: Option<PathBuf>, cfg: &TrainConfig, sub: &'static str) -> Result<PathBuf> {
    flag.or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| usage(sub, "no dataset: pass --data or set `data_dir` in the config"))
}

pub fn epoch_logger(g: &Global, total: usize) -> impl FnMut(&MetricsRecord) + '_ {
    move |r: &MetricsRecord| {
        g.progress(format!(
            "epoch {}/{} step {} lr {:.3e} loss {:.4} train_acc {:.4} val_acc {:.4} ({:.1}s)",
            r.epoch,
            total,
            r.step,
            r.lr,
            r.loss.total,
            r.train_accuracy,
            r.val_accuracy.unwrap_or(f64::NAN),
            r.wall_clock_seconds
        ))
    }
}

fn train(g: &Global, a: TrainArgs, teacher: bool) -> Result<()> {
    let sub = if teacher { "train-teacher" } else { "train" };
    let mut cfg: TrainConfig = match &g.config {
        Some(p) => read_json(p)?,
        None if teacher => {
            let mut c = TrainConfig::new(Variant::Dense);
            c.model = ModelConfig::teacher_default();
            c
        }
        None => return Err(usage(sub, "train requires --config <FILE>")),
    };
    if let Some(v) = &a.variant {
        cfg.variant = Variant::parse(v).map_err(|e| usage(sub, e.to_string()))?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(e) = a.experts {
        cfg.model.num_experts = e;
    }
    if a.data.is_some() {
        cfg.data_dir = a.data.clone();
    }
    if a.teacher.is_some() {
        cfg.teacher_checkpoint = a.teacher.clone();
    }
    if a.init.is_some() {
        cfg.init_checkpoint = a.init.clone();
    }
    if teacher && cfg.variant != Variant::Dense {
        return Err(usage(sub, "a teacher config must use the dense variant"));
    }
    let dir = data_dir(None, &cfg, sub)?;
    cfg.validate()?;
    let data = load_synthetic(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let out = g.out_dir();
    echo_run(&out, &cfg)?;
    g.progress(format!(
        "training {} (seed {}) into {}",
        cfg.variant.name(),
        cfg.seed,
        out.display()
    ));
    let mut log = epoch_logger(g, cfg.epochs);
    let summary = if teacher {
        train_teacher_with(&cfg, &data.train, &data.val, &out, &mut log)?
    } else {
        let bundle = cfg.variant.needs_teacher().then(|| load_teacher(&cfg)).transpose()?;
        run_training_with(&cfg, &data.train, &data.val, bundle, &out, &mut log)?
    };
    print_json(&summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "default_routing")]
    pub routing: RoutingMode,
}

fn default_split() -> Split {
    Split::Val
}

fn default_routing() -> RoutingMode {
    RoutingMode::Student
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: PathBuf,
    split: Split,
    routing: RoutingMode,
    #[serde(flatten)]
    report: tgr_core::train::EvalReport,
    /// Normalized top-1 routing entropy per layer.
    routing_entropy: std::collections::BTreeMap<usize, f64>,
}

fn eval(g: &Global, a: EvalArgs) -> Result<()> {
    let mut o: EvalOptions = config_or(g, || EvalOptions {
        checkpoint: None,
        data_dir: None,
        split: Split::Val,
        routing: RoutingMode::Student,
    })?;
    if a.checkpoint.is_some() {
        o.checkpoint = a.checkpoint;
    }
    if a.data.is_some() {
        o.data_dir = a.data;
    }
    if let Some(s) = a.split {
        o.split = s;
    }
    if let Some(r) = a.routing {
        o.routing = match r {
            RoutingArg::Student => RoutingMode::Student,
            RoutingArg::Teacher => RoutingMode::Teacher,
        };
    }
    let ckpt = o
        .checkpoint
        .clone()
        .ok_or_else(|| usage("eval", "eval requires --checkpoint <DIR>"))?;
    let run = restore_run(&ckpt)?;
    let dir = data_dir(o.data_dir.clone(), &run.config, "eval")?;
    o.data_dir = Some(dir.clone());
    let data = load_split(&dir, o.split)?;
    let out = g.out_dir();
    echo_run(&out, &o)?;
    let cache = match (&run.teacher, o.routing) {
        (Some(t), RoutingMode::Teacher) => Some(FeatureCache::build(t, &data, run.config.eval_batch_size)?),
        (None, RoutingMode::Teacher) => bail!("{} has no teacher router to route with", ckpt.display()),
        _ => None,
    };
    let teacher = run.teacher.as_ref().zip(cache.as_ref());
    let report = evaluate(
        &run.params,
        &run.config.model,
        &data,
        o.routing,
        teacher,
        run.config.eval_batch_size,
    )?;
    let routing_entropy = report
        .assignments
        .iter()
        .map(|(&l, a)| {
            Ok((
                l,
                tgr_core::analytics::normalized_routing_entropy(a, run.config.model.num_experts)?,
            ))
        })
        .collect::<tgr_core::Result<_>>()?;
    let output = EvalOutput {
        checkpoint: ckpt,
        split: o.split,
        routing: o.routing,
        report,
        routing_entropy,
    };
    let path = out.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&output)? + "\n")?;
    print_json(&output)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotOptions {
    pub inputs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub title: String,
    #[serde(default = "default_x_label")]
    pub x_label: String,
    #[serde(default = "default_y_label")]
    pub y_label: String,
}

fn default_x_label() -> String {
    "epoch".into()
}

fn default_y_label() -> String {
    "value".into()
}

/// Reads `x,series_name,value` rows, keeping series in first-seen order.
pub fn read_series(path: &Path) -> Result<Vec<tgr_core::analytics::Series>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "series_name", "value"] {
        bail!("{}: expected header x,series_name,value", path.display());
    }
    let mut out: Vec<tgr_core::analytics::Series> = Vec::new();
    for row in rdr.records() {
        let row = row.with_context(|| format!("reading {}", path.display()))?;
        let x: f64 = row[0]
            .parse()
            .with_context(|| format!("{}: bad x `{}`", path.display(), &row[0]))?;
        let v: f64 = row[2]
            .parse()
            .with_context(|| format!("{}: bad value `{}`", path.display(), &row[2]))?;
        let name = &row[1];
        match out.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, v)),
            None => out.push(tgr_core::analytics::Series {
                name: name.to_string(),
                points: vec![(x, v)],
            }),
        }
    }
    Ok(out)
}

fn plot(g: &Global, a: PlotArgs) -> Result<()> {
    let mut o: PlotOptions = config_or(g, || PlotOptions {
        inputs: Vec::new(),
        out: None,
        title: String::new(),
        x_label: default_x_label(),
        y_label: default_y_label(),
    })?;
    if !a.inputs.is_empty() {
        o.inputs = a.inputs;
    }
    if a.out.is_some() {
        o.out = a.out;
    }
    if let Some(t) = a.title {
        o.title = t;
    }
    if let Some(x) = a.x_label {
        o.x_label = x;
    }
    if let Some(y) = a.y_label {
        o.y_label = y;
    }
    if o.inputs.is_empty() {
        return Err(usage("plot", "plot requires at least one --input <CSV>"));
    }
    let out_dir = g.out_dir();
    let target = o.out.clone().unwrap_or_else(|| out_dir.join("plot.svg"));
    o.out = Some(target.clone());
    let format = tgr_core::analytics::PlotFormat::from_path(&target).map_err(|e| usage("plot", e.to_string()))?;
    let mut series = Vec::new();
    for p in &o.inputs {
        series.extend(read_series(p)?);
    }
    echo_run(&out_dir, &o)?;
    let text = match format {
        tgr_core::analytics::PlotFormat::Csv => tgr_core::analytics::render_csv(&series),
        tgr_core::analytics::PlotFormat::Svg => {
            tgr_core::analytics::render_svg(&series, &o.title, &o.x_label, &o.y_label)
        }
    };
    if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&target, text).with_context(|| format!("writing {}", target.display()))?;
    g.progress(format!("wrote {}", target.display()));
    Ok(())
}
