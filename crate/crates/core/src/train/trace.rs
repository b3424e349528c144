//! Routing-trace files: header `TGRT`, version, num_layers, probe_tokens and
//! E as little-endian u32, then per snapshot an epoch u32 followed by
//! `num_layers × probe_tokens` little-endian u16 expert ids.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TGRT";
const VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub epoch: u32,
    /// `assignments[layer][token]`, layers in ascending MoE-layer order.
    pub assignments: Vec<Vec<u16>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTrace {
    pub num_layers: usize,
    pub probe_tokens: usize,
    pub num_experts: usize,
    pub snapshots: Vec<Snapshot>,
}

impl RoutingTrace {
    pub fn new(num_layers: usize, probe_tokens: usize, num_experts: usize) -> Self {
        RoutingTrace {
            num_layers,
            probe_tokens,
            num_experts,
            snapshots: Vec::new(),
        }
    }

    pub fn push(&mut self, snapshot: Snapshot) -> Result<()> {
        self.check(&snapshot)?;
        if self.snapshots.last().is_some_and(|s| s.epoch >= snapshot.epoch) {
            return Err(Error::Analytics("snapshot epochs must increase".into()));
        }
        self.snapshots.push(snapshot);
        Ok(())
    }

    fn check(&self, s: &Snapshot) -> Result<()> {
        if s.assignments.len() != self.num_layers || s.assignments.iter().any(|l| l.len() != self.probe_tokens) {
            return Err(Error::Analytics(format!(
                "snapshot for epoch {} does not cover {} layers x {} tokens",
                s.epoch, self.num_layers, self.probe_tokens
            )));
        }
        if let Some(&bad) = s
            .assignments
            .iter()
            .flatten()
            .find(|&&e| e as usize >= self.num_experts)
        {
            return Err(Error::Analytics(format!("expert id {bad} >= E = {}", self.num_experts)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.snapshots.len() * (4 + 2 * self.num_layers * self.probe_tokens));
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.num_layers as u32,
            self.probe_tokens as u32,
            self.num_experts as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.snapshots {
            out.extend_from_slice(&s.epoch.to_le_bytes());
            for &e in s.assignments.iter().flatten() {
                out.extend_from_slice(&e.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format("routing trace", path, d);
        if bytes.len() < HEADER {
            return Err(bad("shorter than the header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(bad(format!("unsupported version {}", word(4))));
        }
        let mut trace = RoutingTrace::new(word(8) as usize, word(12) as usize, word(16) as usize);
        let snap_len = 4 + 2 * trace.num_layers * trace.probe_tokens;
        let body = &bytes[HEADER..];
        if !body.len().is_multiple_of(snap_len) {
            return Err(bad(format!(
                "{} body bytes is not a whole number of snapshots",
                body.len()
            )));
        }
        for chunk in body.chunks_exact(snap_len) {
            let epoch = u32::from_le_bytes(chunk[..4].try_into().unwrap());
            let ids: Vec<u16> = chunk[4..]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let assignments = if trace.probe_tokens == 0 {
                vec![Vec::new(); trace.num_layers]
            } else {
                ids.chunks(trace.probe_tokens).map(<[u16]>::to_vec).collect()
            };
            trace
                .push(Snapshot { epoch, assignments })
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok(trace)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
