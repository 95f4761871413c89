//! Run configuration and its flat `dotted.key = value` text form.
//!
//! Keys mirror the JSON layout of [`RunConfig`]: `train.steps_max`,
//! `data.blob.dim`, `loss.beta1`. Values of string fields are taken verbatim;
//! every other value is parsed as a JSON literal (`true`, `3`, `[0.5, 0.5]`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clustering::Linkage;
use crate::encoders::StConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, PreTaskFlags};
use crate::model::{ArchConfig, ModelKind, TaskKind};
use crate::par::Execution;
use crate::taskgen::{BlobPool, GpParams, PolyIntervals, SplitMode, TaskDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Gp,
    Poly,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden: usize,
    pub latent: usize,
    pub depth: usize,
    pub heads: usize,
    pub sab_blocks: usize,
    pub pma_seeds: usize,
    pub inducing: usize,
    pub ln_affine: bool,
    pub identity_features: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Feld,
            hidden: 32,
            latent: 32,
            depth: 2,
            heads: 4,
            sab_blocks: 2,
            pma_seeds: 1,
            inducing: 0,
            ln_affine: true,
            identity_features: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: DataKind,
    /// Regression input domain; `None` picks the per-task default.
    pub domain: Option<(f64, f64)>,
    pub gp: GpParams,
    pub poly_weights: [f64; 4],
    pub poly_intervals: PolyIntervals,
    pub poly_noise: f64,
    pub blob: BlobPool,
    pub region_weights: Option<Vec<f64>>,
    /// Classes per classification episode.
    pub way: usize,
    /// Training context size is drawn uniformly from this range per batch.
    pub context_min: usize,
    pub context_max: usize,
    /// Target points per episode (per class for classification).
    pub target: usize,
    pub mode: SplitMode,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            task: DataKind::Poly,
            domain: None,
            gp: GpParams::default(),
            poly_weights: [0.25; 4],
            poly_intervals: PolyIntervals::default(),
            poly_noise: 0.0,
            blob: BlobPool::default(),
            region_weights: None,
            way: 5,
            context_min: 3,
            context_max: 10,
            target: 50,
            mode: SplitMode::Interpolate,
        }
    }
}

impl DataSection {
    pub fn distribution(&self) -> Result<TaskDistribution> {
        Ok(match self.task {
            DataKind::Gp => TaskDistribution::Gp {
                params: self.gp,
                domain: self.domain.unwrap_or((-2.0, 2.0)),
            },
            DataKind::Poly => TaskDistribution::Poly {
                weights: self.poly_weights,
                intervals: self.poly_intervals.clone(),
                domain: self.domain.unwrap_or((-5.0, 5.0)),
                noise: self.poly_noise,
            },
            DataKind::Classification => {
                let n = self.blob.regions;
                let region_weights = self.region_weights.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
                if region_weights.len() != n {
                    return Err(Error::Config(format!("data.region_weights needs {n} entries")));
                }
                TaskDistribution::Classification {
                    pool: self.blob.clone(),
                    region_weights,
                }
            }
        })
    }

    pub fn x_dim(&self) -> usize {
        match self.task {
            DataKind::Classification => self.blob.dim,
            _ => 1,
        }
    }

    pub fn way(&self) -> usize {
        match self.task {
            DataKind::Classification => self.way,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps_max: usize,
    /// Step budget of every per-cluster model.
    pub cluster_steps_max: usize,
    pub batch: usize,
    pub lr: f64,
    /// Validation rounds without improvement before stopping; 0 disables.
    pub patience: usize,
    pub valid_every: usize,
    pub valid_tasks: usize,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps_max: 30_000,
            cluster_steps_max: 20_000,
            batch: 16,
            lr: 5e-4,
            patience: 20,
            valid_every: 250,
            valid_tasks: 200,
            log_every: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Purity,
    /// Label-free fallback.
    Silhouette,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTwoSampling {
    /// Fresh tasks drawn at the cluster's family ratios.
    Ratio,
    /// Replay of the cluster's own catalog tasks.
    Members,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    /// Fixed cluster count; 0 selects it from `k_min..=k_max`.
    pub k: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub linkage: Linkage,
    pub selection: Selection,
    pub catalog_tasks: usize,
    /// Context size of the embedded tasks.
    pub catalog_shot: usize,
    pub sampling: StageTwoSampling,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k: 0,
            k_min: 1,
            k_max: 8,
            linkage: Linkage::Average,
            selection: Selection::Purity,
            catalog_tasks: 1000,
            catalog_shot: 5,
            sampling: StageTwoSampling::Ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: usize,
    /// Context size of evaluation episodes.
    pub shot: usize,
    pub mode: SplitMode,
    /// Latent draws per prediction; 0 uses the posterior mean.
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: 1000,
            shot: 5,
            mode: SplitMode::Interpolate,
            samples: 16,
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub execution: Execution,
    pub model: ModelSection,
    pub data: DataSection,
    pub loss: LossConfig,
    pub pretask: PreTaskFlags,
    pub train: TrainSection,
    pub cluster: ClusterSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            execution: Execution::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            loss: LossConfig::default(),
            pretask: PreTaskFlags::default(),
            train: TrainSection::default(),
            cluster: ClusterSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let d = &self.data;
        if d.context_min == 0 || d.context_min > d.context_max || d.context_max > d.target {
            return Err(Error::Config("need 1 <= data.context_min <= data.context_max <= data.target".into()));
        }
        if self.eval.tasks == 0 {
            return Err(Error::Config("eval.tasks must be >= 1".into()));
        }
        if self.eval.shot == 0 || self.eval.shot > d.target {
            return Err(Error::Config("eval.shot must lie in 1..=data.target".into()));
        }
        if self.train.batch == 0 || self.train.valid_every == 0 {
            return Err(Error::Config("train.batch and train.valid_every must be >= 1".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.cluster.k_min == 0 || self.cluster.k_min > self.cluster.k_max {
            return Err(Error::Config("need 1 <= cluster.k_min <= cluster.k_max".into()));
        }
        if let Some((lo, hi)) = d.domain {
            if !(lo < hi) {
                return Err(Error::Config("data.domain must satisfy lo < hi".into()));
            }
        }
        d.distribution()?;
        self.arch().validate_for(self.model.kind)
    }

    pub fn arch(&self) -> ArchConfig {
        let m = &self.model;
        ArchConfig {
            task: if self.data.task == DataKind::Classification {
                TaskKind::Classification
            } else {
                TaskKind::Regression
            },
            x_dim: self.data.x_dim(),
            y_dim: 1,
            way: self.data.way(),
            hidden: m.hidden,
            latent: m.latent,
            depth: m.depth,
            st: StConfig {
                num_sab_blocks: m.sab_blocks,
                num_heads: m.heads,
                feature_dim: m.hidden,
                num_inducing: m.inducing,
                pma_seeds: m.pma_seeds,
            },
            ln_affine: m.ln_affine,
            identity_features: m.identity_features,
        }
    }

    /// Parses flat `key = value` text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::default().with_overrides(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            return Self::from_json(&text);
        }
        Self::from_text(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides. Every unknown key is reported at once.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        let known = flat_keys(&root);
        let unknown: Vec<&str> = pairs
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !known.contains_key(*k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        for (key, raw) in pairs {
            let slot = lookup(&mut root, key).ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
            *slot = parse_value(slot, raw).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        }
        let cfg: RunConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// All settable keys with their current values.
    pub fn flat(&self) -> Result<BTreeMap<String, Value>> {
        Ok(flat_keys(&serde_json::to_value(self)?))
    }
}

/// `key=value` override strings as given on the command line.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))
        })
        .collect()
}

fn flat_keys(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

fn lookup<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(root, |v, part| match v {
        Value::Object(map) => map.get_mut(part),
        _ => None,
    })
}

fn parse_value(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    match current {
        Value::String(_) => Ok(Value::String(raw.trim_matches('"').to_string())),
        _ => {
            if let Ok(v) = serde_json::from_str::<Value>(raw) {
                return Ok(v);
            }
            // Bare words for optional string-like fields.
            if current.is_null() {
                return Ok(Value::String(raw.to_string()));
            }
            Err(format!("cannot parse `{raw}`"))
        }
    }
}
