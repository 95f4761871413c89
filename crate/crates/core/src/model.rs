//! Model variants and the batched view of episodes they consume.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoders::{ConventionalDecoder, Decoder, DecoderInput, DecoderOutput, FeatureExtractor, LinearDecoder};
use crate::encoders::{pool_way, AnpEncoder, Encoder, NpEncoder, SetInput, StConfig, StEncoder};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::Rng;
use crate::taskgen::{LabeledView, TaskView};
use crate::tensor::{Bound, Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::variational::GaussianVar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "CNP")]
    Cnp,
    #[serde(rename = "NP")]
    Np,
    #[serde(rename = "ANP")]
    Anp,
    #[serde(rename = "NP_FE")]
    NpFe,
    #[serde(rename = "NP_LD")]
    NpLd,
    #[serde(rename = "FELD")]
    Feld,
    /// Pre-task, clustering and per-cluster FELD models.
    #[serde(rename = "MAHA")]
    Maha,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Cnp,
        ModelKind::Np,
        ModelKind::Anp,
        ModelKind::NpFe,
        ModelKind::NpLd,
        ModelKind::Feld,
        ModelKind::Maha,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Cnp => "CNP",
            ModelKind::Np => "NP",
            ModelKind::Anp => "ANP",
            ModelKind::NpFe => "NP_FE",
            ModelKind::NpLd => "NP_LD",
            ModelKind::Feld => "FELD",
            ModelKind::Maha => "MAHA",
        }
    }

    pub fn has_latent(&self) -> bool {
        *self != ModelKind::Cnp
    }

    pub fn flexible_encoder(&self) -> bool {
        matches!(self, ModelKind::NpFe | ModelKind::Feld | ModelKind::Maha)
    }

    pub fn linear_decoder(&self) -> bool {
        matches!(self, ModelKind::NpLd | ModelKind::Feld | ModelKind::Maha)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.name().replace('_', "+").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub task: TaskKind,
    pub x_dim: usize,
    pub y_dim: usize,
    pub way: usize,
    /// Width of every hidden layer and of the decoder feature space.
    pub hidden: usize,
    pub latent: usize,
    /// Hidden layers of each rFF stack.
    pub depth: usize,
    pub st: StConfig,
    pub ln_affine: bool,
    /// Use `g = identity` in the linear decoder (requires `x_dim == hidden`).
    pub identity_features: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Regression,
            x_dim: 1,
            y_dim: 1,
            way: 1,
            hidden: 32,
            latent: 32,
            depth: 2,
            st: StConfig::default(),
            ln_affine: true,
            identity_features: false,
        }
    }
}

impl ArchConfig {
    pub fn regression(&self) -> bool {
        self.task == TaskKind::Regression
    }

    pub fn validate_for(&self, kind: ModelKind) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.x_dim == 0 || self.y_dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if kind.flexible_encoder() || kind == ModelKind::Anp {
            if self.st.feature_dim != self.hidden {
                return Err(Error::Config("st feature_dim must equal model.hidden".into()));
            }
            self.st.validate()?;
        }
        if !self.regression() {
            if !kind.linear_decoder() {
                return Err(Error::Config(format!("{kind} has no classification head; use NP_LD, FELD or MAHA")));
            }
            if self.way < 2 {
                return Err(Error::Config("classification needs way >= 2".into()));
            }
        }
        if self.identity_features && self.x_dim != self.hidden {
            return Err(Error::Config("identity features require x_dim == hidden".into()));
        }
        Ok(())
    }
}

/// Episodes of identical sizes stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub way: usize,
    /// `[batch, context, dim_x]`
    pub context_x: Tensor,
    /// `[batch, context, dim_y]`
    pub context_y: Tensor,
    /// `[batch, target, dim_x]`
    pub target_x: Tensor,
    /// `[batch, target, dim_y]`; present only for training batches.
    pub target_y: Option<Tensor>,
}

impl Batch {
    pub fn observed(views: &[TaskView<'_>]) -> Result<Self> {
        let first = views.first().ok_or_else(|| Error::contract("empty batch"))?;
        let way = first.way;
        if views.iter().any(|v| v.way != way) {
            return Err(Error::contract("mixed way counts in one batch"));
        }
        let stack = |f: &dyn Fn(&TaskView<'_>) -> Tensor| -> Result<Tensor> {
            Tensor::stack(&views.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            size: views.len(),
            way,
            context_x: stack(&|v| v.context_x.clone())?,
            context_y: stack(&|v| v.context_y.clone())?,
            target_x: stack(&|v| v.target_x.clone())?,
            target_y: None,
        })
    }

    pub fn labeled(views: &[LabeledView<'_>]) -> Result<Self> {
        let tasks: Vec<TaskView<'_>> = views.iter().map(|v| v.task).collect();
        let mut b = Self::observed(&tasks)?;
        b.target_y = Some(Tensor::stack(&views.iter().map(|v| v.target_y.clone()).collect::<Vec<_>>())?);
        Ok(b)
    }

    pub fn context_len(&self) -> usize {
        self.context_x.shape()[1]
    }

    pub fn target_len(&self) -> usize {
        self.target_x.shape()[1]
    }

    pub fn target_y(&self) -> Result<&Tensor> {
        self.target_y
            .as_ref()
            .ok_or_else(|| Error::contract("batch carries no target outputs"))
    }

    /// Target labels in row order (classification).
    pub fn target_labels(&self) -> Result<Vec<usize>> {
        Ok(self.target_y()?.data().iter().map(|&y| y as usize).collect())
    }
}

/// Predictive summary over the targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Regression {
        /// `[batch, target, dim_y]`, Monte-Carlo average of the means.
        mean: Tensor,
        /// Moment-matched predictive variance.
        variance: Tensor,
        /// Per-sample means and variances, `samples × [batch, target, dim_y]`.
        sample_means: Vec<Tensor>,
        sample_vars: Vec<Tensor>,
    },
    Classification {
        /// `[batch, target, way]`, averaged class probabilities.
        probs: Tensor,
    },
}

/// A neural-process model: parameters plus architecture.
#[derive(Clone, Debug)]
pub struct NeuralProcess {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl NeuralProcess {
    pub fn new(kind: ModelKind, arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate_for(kind)?;
        let mut rng = Rng::derived(seed, "init", 0);
        let mut store = ParamStore::new();
        let regression = arch.regression();
        let d = arch.hidden;
        let out = if regression { 2 * arch.y_dim } else { arch.way };
        let r_dim = match (kind.linear_decoder(), regression) {
            (true, true) => out * d,
            _ => d,
        };
        let z_dim = kind.has_latent().then_some(arch.latent);
        let set_in = if regression { arch.x_dim + arch.y_dim } else { arch.x_dim };
        let encoder = if kind.flexible_encoder() {
            Encoder::SetTransformer(StEncoder::new(&mut store, set_in, &arch.st, r_dim, z_dim, &mut rng)?)
        } else if kind == ModelKind::Anp {
            Encoder::Attentive(AnpEncoder::new(
                &mut store,
                set_in,
                arch.x_dim,
                d,
                arch.st.num_heads,
                arch.st.num_sab_blocks,
                r_dim,
                z_dim,
                &mut rng,
            )?)
        } else {
            Encoder::MeanPool(NpEncoder::new(&mut store, set_in, d, arch.depth, r_dim, z_dim, &mut rng)?)
        };
        let decoder = if kind.linear_decoder() {
            let g = if arch.identity_features {
                FeatureExtractor::Identity
            } else {
                // One lift for regression inputs, three layers for classification inputs.
                let sizes: Vec<usize> = if regression {
                    vec![arch.x_dim, d, d]
                } else {
                    vec![arch.x_dim, d, d, d]
                };
                FeatureExtractor::Mlp(Mlp::new(&mut store, "decoder.g", &sizes, &mut rng)?)
            };
            Decoder::Linear(LinearDecoder::new(
                &mut store,
                g,
                d,
                z_dim,
                regression,
                out,
                arch.ln_affine,
                &mut rng,
            )?)
        } else {
            let in_dim = arch.x_dim + r_dim + z_dim.unwrap_or(0);
            Decoder::Conventional(ConventionalDecoder::new(&mut store, in_dim, d, arch.depth, arch.y_dim, &mut rng)?)
        };
        Ok(Self {
            kind,
            arch,
            store,
            encoder,
            decoder,
        })
    }

    pub fn regression(&self) -> bool {
        self.arch.regression()
    }

    fn set_from<'g>(&self, g: &'g Graph, batch: &Batch, x: &Tensor, y: &Tensor) -> Result<SetInput<'g>> {
        let b = batch.size;
        let n = x.shape()[1];
        if self.regression() {
            let xs = g.constant(x.clone());
            let points = Var::concat(&[xs, g.constant(y.clone())], 2)?;
            Ok(SetInput {
                points,
                xs,
                batch: b,
                way: 1,
            })
        } else {
            let way = batch.way;
            if !n.is_multiple_of(way) {
                return Err(Error::contract(format!("{n} points cannot be split evenly over {way} ways")));
            }
            let shot = n / way;
            // Each class must occupy one contiguous block of the shot axis.
            for (row, labels) in y.data().chunks(n).enumerate() {
                for (i, &l) in labels.iter().enumerate() {
                    if l as usize != i / shot {
                        return Err(Error::contract(format!(
                            "task {row}: points are not grouped by label in equal blocks"
                        )));
                    }
                }
            }
            let dx = x.shape()[2];
            let xs = g.constant(x.reshape(&[b * way, shot, dx])?);
            Ok(SetInput {
                points: xs,
                xs,
                batch: b,
                way,
            })
        }
    }

    pub fn context_set<'g>(&self, g: &'g Graph, batch: &Batch) -> Result<SetInput<'g>> {
        self.set_from(g, batch, &batch.context_x, &batch.context_y)
    }

    pub fn target_set<'g>(&self, g: &'g Graph, batch: &Batch) -> Result<SetInput<'g>> {
        self.set_from(g, batch, &batch.target_x, batch.target_y()?)
    }

    pub fn decode<'g>(&self, p: &Bound<'g>, target_x: Var<'g>, r: Var<'g>, z: Option<Var<'g>>) -> Result<DecoderOutput<'g>> {
        self.decoder.decode(p, &DecoderInput { target_x, r, z })
    }

    /// Predictive distribution from the context only, averaging
    /// `samples` draws of `z ~ q(z | C)`. The posterior mean is used when
    /// `samples == 0`.
    pub fn predict(&self, batch: &Batch, samples: usize, rng: &mut Rng) -> Result<Prediction> {
        let g = Graph::new();
        let p = g.bind_frozen(&self.store);
        let ctx = self.context_set(&g, batch)?;
        let tx = g.constant(batch.target_x.clone());
        let r = self.encoder.deterministic(&p, &ctx, tx)?;
        let q = self.encoder.latent(&p, &ctx)?;
        let draws: Vec<Option<Var<'_>>> = match &q {
            None => vec![None],
            Some(q) if samples == 0 => vec![Some(q.mean)],
            Some(q) => (0..samples)
                .map(|_| q.reparameterize(rng).map(|s| Some(s.value)))
                .collect::<Result<_>>()?,
        };
        let outs: Vec<DecoderOutput<'_>> = draws
            .into_iter()
            .map(|z| self.decode(&p, tx, r, z))
            .collect::<Result<_>>()?;
        if self.regression() {
            let mut sample_means = Vec::new();
            let mut sample_vars = Vec::new();
            for o in &outs {
                let gv = o.gaussian()?;
                sample_means.push(gv.mean.value());
                sample_vars.push(gv.variance().value());
            }
            let s = sample_means.len() as f64;
            let n = sample_means[0].len();
            let shape = sample_means[0].shape().to_vec();
            let mut mean = vec![0.0; n];
            let mut second = vec![0.0; n];
            for (m, v) in sample_means.iter().zip(&sample_vars) {
                for i in 0..n {
                    mean[i] += m.data()[i] / s;
                    second[i] += (v.data()[i] + m.data()[i] * m.data()[i]) / s;
                }
            }
            let variance = second.iter().zip(&mean).map(|(q, m)| (q - m * m).max(0.0)).collect();
            Ok(Prediction::Regression {
                mean: Tensor::new(&shape, mean)?,
                variance: Tensor::new(&shape, variance)?,
                sample_means,
                sample_vars,
            })
        } else {
            let mut probs: Option<Vec<f64>> = None;
            let mut shape = Vec::new();
            for o in &outs {
                let pr = o.logits()?.softmax(2)?.value();
                shape = pr.shape().to_vec();
                match &mut probs {
                    None => probs = Some(pr.data().iter().map(|v| v / outs.len() as f64).collect()),
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(pr.data()) {
                            *a += v / outs.len() as f64;
                        }
                    }
                }
            }
            Ok(Prediction::Classification {
                probs: Tensor::new(&shape, probs.unwrap_or_default())?,
            })
        }
    }

    /// Means of the way-pooled context posterior `q(z̄ | C)`, one row per task.
    pub fn embed_context(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let p = g.bind_frozen(&self.store);
        let ctx = self.context_set(&g, batch)?;
        let q = self
            .encoder
            .latent(&p, &ctx)?
            .ok_or_else(|| Error::contract(format!("{} has no latent path to embed", self.kind)))?;
        let pooled: GaussianVar<'_> = pool_way(&q)?;
        let mu = pooled.mean.value();
        let dz = *mu.shape().last().unwrap_or(&0);
        Ok(mu.data().chunks(dz).map(|c| c.to_vec()).collect())
    }
}

impl NeuralProcess {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut config = BTreeMap::new();
        config.insert("arch".to_string(), serde_json::to_string(&self.arch)?);
        Ok(Checkpoint::from_store(self.kind.name(), config, &self.store))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ckpt
            .model_kind
            .parse()
            .map_err(|_| Error::Checkpoint(format!("unknown model kind `{}`", ckpt.model_kind)))?;
        let arch_json = ckpt
            .config
            .get("arch")
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks the architecture".into()))?;
        let arch: ArchConfig =
            serde_json::from_str(arch_json).map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;
        let mut model = Self::new(kind, arch, 0)?;
        ckpt.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
