use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Global optimizer step count after this record's last step.
    pub step: usize,
    pub lr: f64,
    /// Student objective, averaged over the steps since the previous record.
    pub loss: LossBreakdown,
    /// Teacher-router objective, when a teacher router is trained.
    pub teacher_loss: Option<LossBreakdown>,
    pub train_accuracy: f64,
    /// Present on the last record of each epoch.
    pub val_accuracy: Option<f64>,
    /// Top-1 selection counts per MoE layer over the same steps.
    pub utilization: BTreeMap<usize, Vec<usize>>,
    pub wall_clock_seconds: f64,
}

pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)? + "\n";
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// A record's JSON with the wall-clock field removed, for comparing runs.
pub fn without_wall_clock(record: &MetricsRecord) -> Result<String> {
    let mut v = serde_json::to_value(record)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("wall_clock_seconds");
    }
    Ok(v.to_string())
}

/// Running mean of loss breakdowns between two metrics records.
#[derive(Clone, Debug, Default)]
pub struct BreakdownMean {
    sum: LossBreakdown,
    count: usize,
}

impl BreakdownMean {
    pub fn add(&mut self, b: &LossBreakdown) {
        let s = &mut self.sum;
        s.total += b.total;
        if let Some(t) = b.task {
            *s.task.get_or_insert(0.0) += t;
        }
        for (dst, src) in [
            (&mut s.load, &b.load),
            (&mut s.entropy, &b.entropy),
            (&mut s.distill, &b.distill),
            (&mut s.zloss, &b.zloss),
        ] {
            for (&l, &v) in src {
                *dst.entry(l).or_insert(0.0) += v;
            }
        }
        self.count += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// The mean so far; resets the accumulator.
    pub fn take(&mut self) -> LossBreakdown {
        let n = self.count.max(1) as f64;
        let mut m = std::mem::take(&mut self.sum);
        self.count = 0;
        m.total /= n;
        if let Some(t) = m.task.as_mut() {
            *t /= n;
        }
        for map in [&mut m.load, &mut m.entropy, &mut m.distill, &mut m.zloss] {
            map.values_mut().for_each(|v| *v /= n);
        }
        m
    }
}
