//! Routing-consistency measurements over traces and evaluation outputs,
//! plus CSV/SVG emission of the resulting series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::teacher::FeatureCache;
use crate::train::{evaluate, RestoredRun, RoutingMode, RoutingTrace};

/// Fraction of positions where two assignments agree.
pub fn agreement(a: &[u16], b: &[u16]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Analytics(format!(
            "assignment lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Analytics("no tokens to compare".into()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Mean over tokens of `|A ∩ B| / K` for top-K expert sets.
pub fn set_overlap_agreement(a: &[Vec<usize>], b: &[Vec<usize>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Analytics(
            "set overlap needs equal, non-empty token lists".into(),
        ));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Analytics("top-K sets must share a positive K".into()));
        }
        total += x.iter().filter(|e| y.contains(e)).count() as f64 / x.len() as f64;
    }
    Ok(total / a.len() as f64)
}

fn mean_layer_agreement(a: &[Vec<u16>], b: &[Vec<u16>]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Analytics("trace has no MoE layers".into()));
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += agreement(x, y)?;
    }
    Ok(sum / a.len() as f64)
}

/// `(epoch, agreement with the final snapshot)`, averaged over layers.
pub fn agreement_with_final(trace: &RoutingTrace) -> Result<Vec<(u32, f64)>> {
    let last = trace
        .snapshots
        .last()
        .ok_or_else(|| Error::Analytics("empty routing trace".into()))?;
    trace
        .snapshots
        .iter()
        .map(|s| Ok((s.epoch, mean_layer_agreement(&s.assignments, &last.assignments)?)))
        .collect()
}

/// `(e + stride, agreement between epochs e and e + stride)` for every such
/// pair present in the trace, averaged over layers.
pub fn consecutive_agreement(trace: &RoutingTrace, stride: u32) -> Result<Vec<(u32, f64)>> {
    if stride == 0 {
        return Err(Error::Analytics("stride must be positive".into()));
    }
    if trace.snapshots.is_empty() {
        return Err(Error::Analytics("empty routing trace".into()));
    }
    let by_epoch: BTreeMap<u32, &Vec<Vec<u16>>> = trace.snapshots.iter().map(|s| (s.epoch, &s.assignments)).collect();
    let mut out = Vec::new();
    for (&e, a) in &by_epoch {
        if let Some(b) = by_epoch.get(&(e + stride)) {
            out.push((e + stride, mean_layer_agreement(a, b)?));
        }
    }
    Ok(out)
}

pub fn mean_value(series: &[(u32, f64)]) -> Option<f64> {
    (!series.is_empty()).then(|| series.iter().map(|p| p.1).sum::<f64>() / series.len() as f64)
}

/// First epoch from which the series stays at or above `threshold`.
pub fn settles_at(series: &[(u32, f64)], threshold: f64) -> Option<u32> {
    let mut settled = None;
    for &(e, v) in series {
        if v >= threshold {
            settled.get_or_insert(e);
        } else {
            settled = None;
        }
    }
    settled
}

/// First epoch at which the series reaches `threshold`.
pub fn first_reaching(series: &[(u32, f64)], threshold: f64) -> Option<u32> {
    series.iter().find(|p| p.1 >= threshold).map(|p| p.0)
}

/// Per-layer agreement of two assignment maps over the same tokens.
pub fn layer_agreement(a: &BTreeMap<usize, Vec<u16>>, b: &BTreeMap<usize, Vec<u16>>) -> Result<BTreeMap<usize, f64>> {
    if a.len() != b.len() {
        return Err(Error::Analytics(format!("{} layers vs {}", a.len(), b.len())));
    }
    a.iter()
        .map(|(&l, x)| {
            let y = b
                .get(&l)
                .ok_or_else(|| Error::Analytics(format!("no assignments for layer {l}")))?;
            Ok((l, agreement(x, y)?))
        })
        .collect()
}

/// Per-layer fraction of tokens on which two routers' argmax experts agree.
pub fn teacher_student_agreement(
    student: &BTreeMap<usize, Vec<u16>>,
    teacher: &BTreeMap<usize, Vec<u16>>,
) -> Result<BTreeMap<usize, f64>> {
    layer_agreement(student, teacher)
}

/// Noise-free student top-1 assignments of the probe samples' tokens.
pub fn probe_assignments(
    params: &ParamSet,
    model: &ModelConfig,
    data: &Dataset,
    probe: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<usize, Vec<u16>>> {
    let sub = data.subset(probe)?;
    Ok(evaluate(params, model, &sub, RoutingMode::Student, None, batch_size)?.assignments)
}

/// Teacher and student routers of a restored run, both noise-free, on the
/// probe samples.
pub fn run_router_agreement(
    run: &RestoredRun,
    data: &Dataset,
    probe: &[usize],
    batch_size: usize,
) -> Result<BTreeMap<usize, f64>> {
    let teacher = run
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Analytics("the run has no teacher router".into()))?;
    let sub = data.subset(probe)?;
    let cache = FeatureCache::build(teacher, &sub, batch_size)?;
    let report = evaluate(
        &run.params,
        &run.config.model,
        &sub,
        RoutingMode::Student,
        Some((teacher, &cache)),
        batch_size,
    )?;
    teacher_student_agreement(&report.student_top1, &report.teacher_top1)
}

/// `H(q) / ln E` for a distribution `q` over E experts; 1.0 when `E = 1`.
pub fn normalized_entropy(q: &[f64]) -> f64 {
    if q.len() <= 1 {
        return 1.0;
    }
    let h: f64 = q.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    // a collapsed q sums to -0.0; report it as 0.0
    (h / (q.len() as f64).ln()).max(0.0)
}

/// Normalized entropy of the empirical top-1 selection frequencies.
///
/// [`normalized_entropy`] of an importance vector gives the mean-probability
/// variant.
pub fn normalized_routing_entropy(assignments: &[u16], num_experts: usize) -> Result<f64> {
    if num_experts == 0 || assignments.is_empty() {
        return Err(Error::Analytics("need at least one expert and one token".into()));
    }
    let counts = utilization_counts(assignments, num_experts)?;
    let n = assignments.len() as f64;
    Ok(normalized_entropy(
        &counts.iter().map(|&c| c as f64 / n).collect::<Vec<_>>(),
    ))
}

pub fn utilization_counts(assignments: &[u16], num_experts: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; num_experts];
    for &e in assignments {
        *counts
            .get_mut(e as usize)
            .ok_or_else(|| Error::Analytics(format!("expert id {e} >= E = {num_experts}")))? += 1;
    }
    Ok(counts)
}

/// Top-1 counts plus mean-probability importance for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Utilization {
    pub counts: Vec<usize>,
    pub importance: Vec<f64>,
}

/// `probs` is row-major `[tokens, E]`.
pub fn utilization_histogram(probs: &[f64], num_experts: usize) -> Result<Utilization> {
    if num_experts == 0 || probs.is_empty() || !probs.len().is_multiple_of(num_experts) {
        return Err(Error::Analytics(
            "probabilities must be a non-empty [tokens, E] matrix".into(),
        ));
    }
    let tokens = probs.len() / num_experts;
    let mut counts = vec![0; num_experts];
    let mut importance = vec![0.0; num_experts];
    for row in probs.chunks(num_experts) {
        let mut best = 0;
        for (e, &p) in row.iter().enumerate() {
            importance[e] += p;
            if p > row[best] {
                best = e;
            }
        }
        counts[best] += 1;
    }
    importance.iter_mut().for_each(|v| *v /= tokens as f64);
    Ok(Utilization { counts, importance })
}

/// A named line of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn from_epochs(name: impl Into<String>, points: &[(u32, f64)]) -> Self {
        Series {
            name: name.into(),
            points: points.iter().map(|&(e, v)| (e as f64, v)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotFormat {
    Csv,
    Svg,
}

impl PlotFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(PlotFormat::Csv),
            Some("svg") => Ok(PlotFormat::Svg),
            _ => Err(Error::Analytics(format!(
                "cannot infer plot format from {}",
                path.display()
            ))),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(series: &[Series]) -> String {
    let mut out = String::from("x,series_name,value\n");
    for s in series {
        for &(x, y) in &s.points {
            let _ = writeln!(out, "{x},{},{y}", csv_field(&s.name));
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Self-contained line chart with axes, ticks, legend and title.
pub fn render_svg(series: &[Series], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        out,
        r#"<g stroke="black"><line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle">{4}</text>"#,
            sx(xv),
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{0:.1}" y1="{2:.1}" x2="{1:.1}" y2="{2:.1}" stroke="black"/><text x="{3:.1}" y="{4:.1}" text-anchor="end">{5}</text>"#,
            left - 5.0,
            left,
            sy(yv),
            left - 8.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0:.1}" text-anchor="middle" transform="rotate(-90 16 {0:.1})">{1}</text>"#,
        top + ph / 2.0,
        xml_escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.points.is_empty() {
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            xml_escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

pub fn emit_plot_data(series: &[Series], path: &Path, format: PlotFormat, title: &str) -> Result<()> {
    let text = match format {
        PlotFormat::Csv => render_csv(series),
        PlotFormat::Svg => render_svg(series, title, "epoch", "value"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
