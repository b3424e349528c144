use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tgr_core::analytics::{
    agreement_with_final, consecutive_agreement, layer_agreement, mean_value, normalized_entropy,
    normalized_routing_entropy, probe_assignments, render_csv, run_router_agreement, Series,
};
use tgr_core::train::{evaluate, probe_ids, restore_run, RoutingMode, RoutingTrace};

use crate::commands::{config_or, data_dir, echo_run, load_split};
use crate::{usage, AgreementMode, Analysis, Global, Split};

/// Resolved options of one analysis; echoed to `run.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "analysis", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnalyzeOptions {
    Agreement {
        trace: Option<PathBuf>,
        mode: AgreementMode,
        stride: u32,
        label: Option<String>,
    },
    Entropy {
        trace: Option<PathBuf>,
        checkpoint: Option<PathBuf>,
        data_dir: Option<PathBuf>,
        mean_prob: bool,
    },
    TeacherAgreement {
        checkpoint: Option<PathBuf>,
        data_dir: Option<PathBuf>,
        probe_size: Option<usize>,
        seed: Option<u64>,
    },
    Utilization {
        checkpoint: Option<PathBuf>,
        data_dir: Option<PathBuf>,
        split: Split,
    },
    Preservation {
        before: Option<PathBuf>,
        after: Option<PathBuf>,
        data_dir: Option<PathBuf>,
        probe_size: Option<usize>,
        seed: Option<u64>,
    },
}

pub const DEFAULT_STRIDE: u32 = 5;

fn resolve(g: &Global, a: Analysis) -> Result<AnalyzeOptions> {
    let base: Option<AnalyzeOptions> = match &g.config {
        Some(_) => Some(config_or(g, || unreachable!())?),
        None => None,
    };
    let pick = |flag: Option<PathBuf>, cfg: Option<PathBuf>| flag.or(cfg);
    Ok(match (a, base) {
        (
            Analysis::Agreement {
                trace,
                mode,
                stride,
                label,
            },
            b,
        ) => {
            let (t0, m0, s0, l0) = match b {
                Some(AnalyzeOptions::Agreement {
                    trace,
                    mode,
                    stride,
                    label,
                }) => (trace, Some(mode), Some(stride), label),
                None => (None, None, None, None),
                Some(_) => return Err(usage("analyze", "--config holds a different analysis")),
            };
            AnalyzeOptions::Agreement {
                trace: pick(trace, t0),
                mode: mode.or(m0).unwrap_or(AgreementMode::Final),
                stride: stride.or(s0).unwrap_or(DEFAULT_STRIDE),
                label: label.or(l0),
            }
        }
        (
            Analysis::Entropy {
                trace,
                checkpoint,
                data,
                mean_prob,
            },
            b,
        ) => {
            let (t0, c0, d0, m0) = match b {
                Some(AnalyzeOptions::Entropy {
                    trace,
                    checkpoint,
                    data_dir,
                    mean_prob,
                }) => (trace, checkpoint, data_dir, mean_prob),
                None => (None, None, None, false),
                Some(_) => return Err(usage("analyze", "--config holds a different analysis")),
            };
            AnalyzeOptions::Entropy {
                trace: pick(trace, t0),
                checkpoint: pick(checkpoint, c0),
                data_dir: pick(data, d0),
                mean_prob: mean_prob || m0,
            }
        }
        (
            Analysis::TeacherAgreement {
                checkpoint,
                data,
                probe_size,
            },
            b,
        ) => {
            let (c0, d0, p0, s0) = match b {
                Some(AnalyzeOptions::TeacherAgreement {
                    checkpoint,
                    data_dir,
                    probe_size,
                    seed,
                }) => (checkpoint, data_dir, probe_size, seed),
                None => (None, None, None, None),
                Some(_) => return Err(usage("analyze", "--config holds a different analysis")),
            };
            AnalyzeOptions::TeacherAgreement {
                checkpoint: pick(checkpoint, c0),
                data_dir: pick(data, d0),
                probe_size: probe_size.or(p0),
                seed: g.seed.or(s0),
            }
        }
        (
            Analysis::Utilization {
                checkpoint,
                data,
                split,
            },
            b,
        ) => {
            let (c0, d0, s0) = match b {
                Some(AnalyzeOptions::Utilization {
                    checkpoint,
                    data_dir,
                    split,
                }) => (checkpoint, data_dir, Some(split)),
                None => (None, None, None),
                Some(_) => return Err(usage("analyze", "--config holds a different analysis")),
            };
            AnalyzeOptions::Utilization {
                checkpoint: pick(checkpoint, c0),
                data_dir: pick(data, d0),
                split: split.or(s0).unwrap_or(Split::Val),
            }
        }
        (
            Analysis::Preservation {
                before,
                after,
                data,
                probe_size,
            },
            b,
        ) => {
            let (b0, a0, d0, p0, s0) = match b {
                Some(AnalyzeOptions::Preservation {
                    before,
                    after,
                    data_dir,
                    probe_size,
                    seed,
                }) => (before, after, data_dir, probe_size, seed),
                None => (None, None, None, None, None),
                Some(_) => return Err(usage("analyze", "--config holds a different analysis")),
            };
            AnalyzeOptions::Preservation {
                before: pick(before, b0),
                after: pick(after, a0),
                data_dir: pick(data, d0),
                probe_size: probe_size.or(p0),
                seed: g.seed.or(s0),
            }
        }
    })
}

#[derive(Serialize)]
struct LayerReport {
    layers: BTreeMap<usize, f64>,
    mean: f64,
}

impl LayerReport {
    fn new(layers: BTreeMap<usize, f64>) -> Self {
        let mean = layers.values().sum::<f64>() / layers.len().max(1) as f64;
        LayerReport { layers, mean }
    }
}

fn required(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    p.clone()
        .ok_or_else(|| usage("analyze", format!("this analysis requires --{flag}")))
}

fn write_output(g: &Global, name: &str, text: &str) -> Result<()> {
    let path = g.out_dir().join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    crate::emit(text)
}

fn json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn run(g: &Global, a: Analysis) -> Result<()> {
    let o = resolve(g, a)?;
    let out = g.out_dir();
    echo_run(&out, &o)?;
    match &o {
        AnalyzeOptions::Agreement {
            trace,
            mode,
            stride,
            label,
        } => {
            let path = required(trace, "trace")?;
            let t = RoutingTrace::read(&path)?;
            let (points, default_label) = match mode {
                AgreementMode::Final => (agreement_with_final(&t)?, "agreement_with_final"),
                AgreementMode::Consecutive => (consecutive_agreement(&t, *stride)?, "consecutive_agreement"),
            };
            if let Some(m) = mean_value(&points) {
                g.progress(format!("mean {default_label}: {m:.4}"));
            }
            let series = Series::from_epochs(label.clone().unwrap_or_else(|| default_label.into()), &points);
            let name = match mode {
                AgreementMode::Final => "agreement_final.csv",
                AgreementMode::Consecutive => "agreement_consecutive.csv",
            };
            write_output(g, name, &render_csv(&[series]))
        }
        AnalyzeOptions::Entropy {
            trace: Some(path),
            mean_prob,
            ..
        } => {
            if *mean_prob {
                return Err(usage(
                    "analyze",
                    "--mean-prob needs --checkpoint; traces hold top-1 ids only",
                ));
            }
            let t = RoutingTrace::read(path)?;
            let mut series: Vec<Series> = (0..t.num_layers)
                .map(|i| Series {
                    name: format!("moe_layer_{i}"),
                    points: Vec::new(),
                })
                .collect();
            for s in &t.snapshots {
                for (i, ids) in s.assignments.iter().enumerate() {
                    series[i]
                        .points
                        .push((s.epoch as f64, normalized_routing_entropy(ids, t.num_experts)?));
                }
            }
            write_output(g, "entropy.csv", &render_csv(&series))
        }
        AnalyzeOptions::Entropy {
            checkpoint,
            data_dir: d,
            mean_prob,
            ..
        } => {
            let ckpt = checkpoint
                .clone()
                .ok_or_else(|| usage("analyze", "entropy requires --trace or --checkpoint"))?;
            let run = restore_run(&ckpt)?;
            let data = load_split(&data_dir(d.clone(), &run.config, "analyze")?, Split::Val)?;
            let report = evaluate(
                &run.params,
                &run.config.model,
                &data,
                RoutingMode::Student,
                None,
                run.config.eval_batch_size,
            )?;
            let e = run.config.model.num_experts;
            let layers = if *mean_prob {
                report
                    .importance
                    .iter()
                    .map(|(&l, imp)| Ok((l, normalized_entropy(imp))))
                    .collect::<Result<_>>()?
            } else {
                report
                    .assignments
                    .iter()
                    .map(|(&l, ids)| Ok((l, normalized_routing_entropy(ids, e)?)))
                    .collect::<Result<_>>()?
            };
            write_output(g, "entropy.json", &json(&LayerReport::new(layers))?)
        }
        AnalyzeOptions::TeacherAgreement {
            checkpoint,
            data_dir: d,
            probe_size,
            seed,
        } => {
            let run = restore_run(&required(checkpoint, "checkpoint")?)?;
            let data = load_split(&data_dir(d.clone(), &run.config, "analyze")?, Split::Val)?;
            let size = probe_size.unwrap_or(run.config.probe_set_size);
            let probe = probe_ids(data.len(), size, seed.unwrap_or(run.config.seed));
            let layers = run_router_agreement(&run, &data, &probe, run.config.eval_batch_size)?;
            write_output(g, "teacher_agreement.json", &json(&LayerReport::new(layers))?)
        }
        AnalyzeOptions::Utilization {
            checkpoint,
            data_dir: d,
            split,
        } => {
            let run = restore_run(&required(checkpoint, "checkpoint")?)?;
            let data = load_split(&data_dir(d.clone(), &run.config, "analyze")?, *split)?;
            let report = evaluate(
                &run.params,
                &run.config.model,
                &data,
                RoutingMode::Student,
                None,
                run.config.eval_batch_size,
            )?;
            #[derive(Serialize)]
            struct Layer<'a> {
                counts: &'a [usize],
                importance: &'a [f64],
            }
            let layers: BTreeMap<usize, Layer> = report
                .utilization
                .iter()
                .map(|(l, c)| {
                    (
                        *l,
                        Layer {
                            counts: c,
                            importance: &report.importance[l],
                        },
                    )
                })
                .collect();
            write_output(g, "utilization.json", &json(&layers)?)
        }
        AnalyzeOptions::Preservation {
            before,
            after,
            data_dir: d,
            probe_size,
            seed,
        } => {
            let a = restore_run(&required(before, "before")?)?;
            let b = restore_run(&required(after, "after")?)?;
            let data = load_split(&data_dir(d.clone(), &a.config, "analyze")?, Split::Val)?;
            let size = probe_size.unwrap_or(a.config.probe_set_size);
            let probe = probe_ids(data.len(), size, seed.unwrap_or(a.config.seed));
            let bs = a.config.eval_batch_size;
            let pa = probe_assignments(&a.params, &a.config.model, &data, &probe, bs)?;
            let pb = probe_assignments(&b.params, &b.config.model, &data, &probe, bs)?;
            write_output(
                g,
                "preservation.json",
                &json(&LayerReport::new(layer_agreement(&pa, &pb)?))?,
            )
        }
    }
}
