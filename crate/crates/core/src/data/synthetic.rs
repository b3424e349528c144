use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// How a sample's label is derived from its component ids. Component `m`
/// belongs to class `m mod C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// The class holding a strict plurality of the tokens. Draws without a
    /// unique plurality are rejected and redrawn.
    MajorityComponent,
    /// `(class(token 0) + class(token 1)) mod C`.
    ComponentPairParity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_components: usize,
    pub token_dim: usize,
    pub tokens_per_sample: usize,
    pub noise_sigma: f64,
    pub samples_train: usize,
    pub samples_val: usize,
    pub seed: u64,
    pub label_rule: LabelRule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            num_components: 16,
            token_dim: 16,
            tokens_per_sample: 16,
            noise_sigma: 0.35,
            samples_train: 8000,
            samples_val: 2000,
            seed: 0,
            label_rule: LabelRule::MajorityComponent,
        }
    }
}

/// Minimum pairwise angle between prototypes.
const MIN_ANGLE_DEG: f64 = 30.0;
const PROTOTYPE_ATTEMPTS: usize = 10_000;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.token_dim == 0 || self.tokens_per_sample == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if self.num_components < self.num_classes {
            return Err(Error::Config(format!(
                "num_components ({}) must be >= num_classes ({})",
                self.num_components, self.num_classes
            )));
        }
        if self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Config("num_classes must fit u16 labels".into()));
        }
        if self.samples_train == 0 || self.samples_val == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.label_rule == LabelRule::ComponentPairParity && self.tokens_per_sample < 2 {
            return Err(Error::Config("pair-parity labels need at least two tokens".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    /// `M` unit-norm prototypes of length `D_in`.
    pub prototypes: Vec<Vec<f64>>,
    pub train: Dataset,
    pub val: Dataset,
}

fn prototypes(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let max_cos = MIN_ANGLE_DEG.to_radians().cos();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.num_components);
    let mut attempts = 0;
    while out.len() < spec.num_components {
        attempts += 1;
        if attempts > PROTOTYPE_ATTEMPTS {
            return Err(Error::Config(format!(
                "cannot place {} prototypes in {} dimensions at >= {MIN_ANGLE_DEG} degrees apart",
                spec.num_components, spec.token_dim
            )));
        }
        let v: Vec<f64> = (0..spec.token_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        // Stored tokens are f32; round here so the separation holds for them too.
        let v: Vec<f64> = v.iter().map(|x| (x / norm) as f32 as f64).collect();
        let far = out
            .iter()
            .all(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
        if far {
            out.push(v);
        }
    }
    Ok(out)
}

/// Component ids for one sample and the label they imply.
fn draw_components(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    let c = spec.num_classes;
    loop {
        let comps: Vec<usize> = (0..spec.tokens_per_sample)
            .map(|_| rng.random_range(0..spec.num_components))
            .collect();
        match spec.label_rule {
            LabelRule::ComponentPairParity => {
                let y = (comps[0] % c + comps[1] % c) % c;
                return (comps, y);
            }
            LabelRule::MajorityComponent => {
                let mut counts = vec![0usize; c];
                for &m in &comps {
                    counts[m % c] += 1;
                }
                let best = *counts.iter().max().unwrap();
                if counts.iter().filter(|&&k| k == best).count() == 1 {
                    let y = counts.iter().position(|&k| k == best).unwrap();
                    return (comps, y);
                }
            }
        }
    }
}

fn split(spec: &SyntheticSpec, protos: &[Vec<f64>], count: usize, stream: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut tokens = Vec::with_capacity(count * spec.tokens_per_sample * spec.token_dim);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let (comps, y) = draw_components(spec, &mut rng);
        for m in comps {
            for &p in &protos[m] {
                let v = if spec.noise_sigma > 0.0 {
                    p + noise.sample(&mut rng)
                } else {
                    p
                };
                tokens.push(v as f32 as f64);
            }
        }
        labels.push(y);
    }
    Dataset::new(tokens, labels, spec.tokens_per_sample, spec.token_dim, spec.num_classes)
}

/// Deterministic in `spec`: the same spec always yields the same data.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let protos = prototypes(spec)?;
    let train = split(spec, &protos, spec.samples_train, 1)?;
    let val = split(spec, &protos, spec.samples_val, 2)?;
    Ok(SyntheticData {
        spec: spec.clone(),
        prototypes: protos,
        train,
        val,
    })
}

impl SyntheticData {
    /// Writes `train.tgrd`, `val.tgrd` and a `spec.json` echo into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_shard(&dir.join("train.tgrd"))?;
        self.val.write_shard(&dir.join("val.tgrd"))?;
        let path = dir.join("spec.json");
        let json = serde_json::to_string_pretty(&self.spec)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Reads a directory written by [`SyntheticData::write`].
pub fn load_synthetic(dir: &Path) -> Result<SyntheticData> {
    let path = dir.join("spec.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    let train = Dataset::read_shard(&dir.join("train.tgrd"))?;
    let val = Dataset::read_shard(&dir.join("val.tgrd"))?;
    for (name, d, n) in [("train", &train, spec.samples_train), ("val", &val, spec.samples_val)] {
        if d.len() != n || d.token_dim() != spec.token_dim || d.tokens_per_sample() != spec.tokens_per_sample {
            return Err(Error::format(
                "shard",
                dir.join(format!("{name}.tgrd")),
                "does not match spec.json",
            ));
        }
    }
    Ok(SyntheticData {
        prototypes: prototypes(&spec)?,
        spec,
        train,
        val,
    })
}
