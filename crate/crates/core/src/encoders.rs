//! Set encoders producing the deterministic representation `r` and the
//! parameters of the latent posterior `q(z | set)`.
//!
//! Sets arrive as [`SetInput`]: `[batch·way, shot, feature]`. In regression
//! `way = 1` and each point is the concatenation `[x, y]`; in classification
//! the shot axis has already been partitioned by label so every row of the
//! leading axis holds the points of a single class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, AttentionPool, Linear, Mlp, MultiHeadAttention};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamStore, Var};
use crate::variational::{GaussianVar, VarianceTransform};

/// Set Transformer composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StConfig {
    pub num_sab_blocks: usize,
    pub num_heads: usize,
    pub feature_dim: usize,
    /// Inducing points per block; only full self-attention (0) is supported.
    pub num_inducing: usize,
    pub pma_seeds: usize,
}

impl Default for StConfig {
    fn default() -> Self {
        Self {
            num_sab_blocks: 2,
            num_heads: 4,
            feature_dim: 32,
            num_inducing: 0,
            pma_seeds: 1,
        }
    }
}

impl StConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.feature_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "feature_dim {} must be divisible by num_heads {}",
                self.feature_dim, self.num_heads
            )));
        }
        if self.num_inducing != 0 {
            return Err(Error::Config("inducing-point attention is not supported; set num_inducing = 0".into()));
        }
        if self.pma_seeds == 0 {
            return Err(Error::Config("pma_seeds must be at least 1".into()));
        }
        Ok(())
    }
}

/// A batch of sets on the graph.
#[derive(Clone, Copy, Debug)]
pub struct SetInput<'g> {
    /// `[batch·way, shot, feature]`
    pub points: Var<'g>,
    /// Inputs only, `[batch·way, shot, dim_x]` (attention keys).
    pub xs: Var<'g>,
    pub batch: usize,
    pub way: usize,
}

impl SetInput<'_> {
    pub fn shot(&self) -> usize {
        self.points.shape()[1]
    }
}

/// Output of a full encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'g> {
    /// `[batch, rows, r_dim]`; rows is 1 (shot-independent), the number of
    /// target points (ANP) or `way` (classification).
    pub r: Var<'g>,
    /// `q(z | set)` with mean and raw scale `[batch, way, z_dim]`.
    pub z: Option<GaussianVar<'g>>,
}

/// Batch-pooled representation `r̄` and way-pooled posterior `q(z̄ | set)`.
#[derive(Clone, Copy, Debug)]
pub struct PooledLatents<'g> {
    /// `[1, rows, r_dim]`, shared by every task of the batch.
    pub r_bar: Var<'g>,
    /// `[batch, 1, z_dim]`, shared by every way of a task.
    pub z_bar: Option<GaussianVar<'g>>,
}

fn check_nonempty(set: &SetInput<'_>) -> Result<()> {
    if set.shot() == 0 {
        return Err(Error::contract("encoder called on an empty set"));
    }
    Ok(())
}

/// Mean over the shot axis followed by regrouping `[batch·way, 1, d]` into
/// `[batch, way, d]`.
fn pool_shot<'g>(h: Var<'g>, set: &SetInput<'g>) -> Result<Var<'g>> {
    let d = *h.shape().last().unwrap_or(&0);
    h.mean_over(1, false)?.reshape(&[set.batch, set.way, d])
}

fn split_gaussian<'g>(params: Var<'g>, z_dim: usize) -> Result<GaussianVar<'g>> {
    let axis = params.rank() - 1;
    GaussianVar::new(
        params.narrow(axis, 0, z_dim)?,
        params.narrow(axis, z_dim, z_dim)?,
        VarianceTransform::BoundedSigmoid,
    )
}

/// Mean-pool encoder: two independent rFF stacks pooled over shot.
#[derive(Clone, Debug)]
pub struct NpEncoder {
    pub det: Mlp,
    pub lat: Option<Mlp>,
    pub z_dim: usize,
}

impl NpEncoder {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        depth: usize,
        r_dim: usize,
        z_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let sizes = |out: usize| {
            let mut s = vec![in_dim];
            s.extend(std::iter::repeat_n(hidden, depth));
            s.push(out);
            s
        };
        Ok(Self {
            det: Mlp::new(store, "encoder.det", &sizes(r_dim), rng)?,
            lat: z_dim
                .map(|z| Mlp::new(store, "encoder.lat", &sizes(2 * z), rng))
                .transpose()?,
            z_dim: z_dim.unwrap_or(0),
        })
    }

    pub fn deterministic<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>) -> Result<Var<'g>> {
        check_nonempty(set)?;
        pool_shot(self.det.forward(p, set.points)?, set)
    }

    pub fn latent<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>) -> Result<Option<GaussianVar<'g>>> {
        check_nonempty(set)?;
        let Some(lat) = &self.lat else { return Ok(None) };
        let h = pool_shot(lat.forward(p, set.points)?, set)?;
        Ok(Some(split_gaussian(h, self.z_dim)?))
    }
}

/// Attentive encoder: self-attention over the context, then multi-head
/// cross-attention from target inputs (queries) to context inputs (keys) on
/// the deterministic path. The latent path self-attends and mean-pools.
#[derive(Clone, Debug)]
pub struct AnpEncoder {
    pub det_embed: Mlp,
    pub det_self: Vec<AttentionBlock>,
    pub x_embed: Mlp,
    pub cross: MultiHeadAttention,
    pub det_out: Linear,
    pub lat_embed: Option<Mlp>,
    pub lat_self: Vec<AttentionBlock>,
    pub lat_out: Option<Linear>,
    pub z_dim: usize,
}

impl AnpEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        x_dim: usize,
        hidden: usize,
        heads: usize,
        blocks: usize,
        r_dim: usize,
        z_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let det_self = (0..blocks)
            .map(|i| AttentionBlock::new(store, &format!("encoder.det.sab{i}"), hidden, heads, rng))
            .collect::<Result<_>>()?;
        let (lat_embed, lat_self, lat_out) = match z_dim {
            Some(z) => (
                Some(Mlp::new(store, "encoder.lat.embed", &[in_dim, hidden, hidden], rng)?),
                (0..blocks)
                    .map(|i| AttentionBlock::new(store, &format!("encoder.lat.sab{i}"), hidden, heads, rng))
                    .collect::<Result<_>>()?,
                Some(Linear::new(store, "encoder.lat.out", hidden, 2 * z, rng)?),
            ),
            None => (None, Vec::new(), None),
        };
        Ok(Self {
            det_embed: Mlp::new(store, "encoder.det.embed", &[in_dim, hidden, hidden], rng)?,
            det_self,
            x_embed: Mlp::new(store, "encoder.x_embed", &[x_dim, hidden, hidden], rng)?,
            cross: MultiHeadAttention::new(store, "encoder.cross", (hidden, hidden, hidden), hidden, heads, rng)?,
            det_out: Linear::new(store, "encoder.det.out", hidden, r_dim, rng)?,
            lat_embed,
            lat_self,
            lat_out,
            z_dim: z_dim.unwrap_or(0),
        })
    }

    /// `r` per target point: `[batch, targets, r_dim]`.
    pub fn deterministic<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>, target_x: Var<'g>) -> Result<Var<'g>> {
        check_nonempty(set)?;
        if set.way != 1 {
            return Err(Error::contract("attentive encoder supports regression only"));
        }
        let mut values = self.det_embed.forward(p, set.points)?;
        for block in &self.det_self {
            values = block.self_attend(p, values)?;
        }
        let keys = self.x_embed.forward(p, set.xs)?;
        let queries = self.x_embed.forward(p, target_x)?;
        let r = self.cross.forward(p, queries, keys, values)?;
        self.det_out.forward(p, r)
    }

    pub fn latent<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>) -> Result<Option<GaussianVar<'g>>> {
        check_nonempty(set)?;
        let (Some(embed), Some(out)) = (&self.lat_embed, &self.lat_out) else {
            return Ok(None);
        };
        let mut h = embed.forward(p, set.points)?;
        for block in &self.lat_self {
            h = block.self_attend(p, h)?;
        }
        let pooled = pool_shot(h, set)?;
        Ok(Some(split_gaussian(out.forward(p, pooled)?, self.z_dim)?))
    }
}

/// One Set Transformer path: embedding, self-attention blocks, attention
/// pooling and an output projection.
#[derive(Clone, Debug)]
pub struct StStack {
    pub embed: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub pool: AttentionPool,
    pub out: Linear,
    pub seeds: usize,
    pub feature: usize,
}

impl StStack {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, cfg: &StConfig, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        Ok(Self {
            embed: Linear::new(store, &format!("{name}.embed"), in_dim, d, rng)?,
            blocks: (0..cfg.num_sab_blocks)
                .map(|i| AttentionBlock::new(store, &format!("{name}.sab{i}"), d, cfg.num_heads, rng))
                .collect::<Result<_>>()?,
            pool: AttentionPool::new(store, &format!("{name}.pma"), d, cfg.num_heads, cfg.pma_seeds, rng)?,
            out: Linear::new(store, &format!("{name}.out"), cfg.pma_seeds * d, out_dim, rng)?,
            seeds: cfg.pma_seeds,
            feature: d,
        })
    }

    /// `[batch·way, shot, in]` → `[batch, way, out]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>) -> Result<Var<'g>> {
        let mut h = self.embed.forward(p, set.points)?;
        for block in &self.blocks {
            h = block.self_attend(p, h)?;
        }
        let pooled = self
            .pool
            .forward(p, h)?
            .reshape(&[set.batch, set.way, self.seeds * self.feature])?;
        self.out.forward(p, pooled)
    }
}

/// Flexible encoder: independent Set Transformer stacks for both paths.
#[derive(Clone, Debug)]
pub struct StEncoder {
    pub det: StStack,
    pub lat: Option<StStack>,
    pub z_dim: usize,
}

impl StEncoder {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        cfg: &StConfig,
        r_dim: usize,
        z_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            det: StStack::new(store, "encoder.det", in_dim, cfg, r_dim, rng)?,
            lat: z_dim
                .map(|z| StStack::new(store, "encoder.lat", in_dim, cfg, 2 * z, rng))
                .transpose()?,
            z_dim: z_dim.unwrap_or(0),
        })
    }

    pub fn deterministic<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>) -> Result<Var<'g>> {
        check_nonempty(set)?;
        self.det.forward(p, set)
    }

    pub fn latent<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>) -> Result<Option<GaussianVar<'g>>> {
        check_nonempty(set)?;
        let Some(lat) = &self.lat else { return Ok(None) };
        Ok(Some(split_gaussian(lat.forward(p, set)?, self.z_dim)?))
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    MeanPool(NpEncoder),
    Attentive(AnpEncoder),
    SetTransformer(StEncoder),
}

impl Encoder {
    /// Deterministic path. `target_x` (`[batch, targets, dim_x]`) is only
    /// read by the attentive encoder.
    pub fn deterministic<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>, target_x: Var<'g>) -> Result<Var<'g>> {
        match self {
            Encoder::MeanPool(e) => e.deterministic(p, set),
            Encoder::Attentive(e) => e.deterministic(p, set, target_x),
            Encoder::SetTransformer(e) => e.deterministic(p, set),
        }
    }

    /// Latent posterior parameters, `None` for deterministic-only models.
    pub fn latent<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>) -> Result<Option<GaussianVar<'g>>> {
        match self {
            Encoder::MeanPool(e) => e.latent(p, set),
            Encoder::Attentive(e) => e.latent(p, set),
            Encoder::SetTransformer(e) => e.latent(p, set),
        }
    }

    pub fn encode<'g>(&self, p: &Bound<'g>, set: &SetInput<'g>, target_x: Var<'g>) -> Result<EncoderOutput<'g>> {
        Ok(EncoderOutput {
            r: self.deterministic(p, set, target_x)?,
            z: self.latent(p, set)?,
        })
    }
}

/// Mean of `r` over the batch axis, kept with size 1.
pub fn pool_batch<'g>(r: Var<'g>) -> Result<Var<'g>> {
    r.mean_over(0, true)
}

/// Mean of the posterior parameters over the way axis. With a single way
/// (regression) the input is returned untouched.
pub fn pool_way<'g>(z: &GaussianVar<'g>) -> Result<GaussianVar<'g>> {
    if z.mean.shape()[1] == 1 {
        return Ok(*z);
    }
    GaussianVar::new(z.mean.mean_over(1, true)?, z.raw_scale.mean_over(1, true)?, z.transform)
}

/// Dimension-wise pooling: `r̄ = MeanPool_batch(r)` and
/// `[μ_z̄, ω_z̄] = MeanPool_way([μ_z, ω_z])`.
pub fn pool_dimensionwise<'g>(out: &EncoderOutput<'g>) -> Result<PooledLatents<'g>> {
    Ok(PooledLatents {
        r_bar: pool_batch(out.r)?,
        z_bar: out.z.as_ref().map(pool_way).transpose()?,
    })
}
