//! Training objectives: the (A)NP objective and the pre-task objective with
//! dimension-wise pooling and auto-encoding.
//!
//! Reductions: the likelihood term is averaged over target points and tasks,
//! the KL term is summed over latent dimensions (and ways) and averaged over
//! tasks.

use serde::{Deserialize, Serialize};

use crate::decoders::DecoderOutput;
use crate::encoders::{pool_batch, pool_way, SetInput};
use crate::error::{Error, Result};
use crate::model::{Batch, NeuralProcess};
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, Var};
use crate::variational::{categorical_nll, gaussian_nll, kl_divergence, GaussianVar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub mc_samples_train: usize,
    pub mc_samples_eval: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            mc_samples_train: 1,
            mc_samples_eval: 16,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return Err(Error::Config("loss.beta1 and loss.beta2 must be >= 0".into()));
        }
        if self.mc_samples_train == 0 || self.mc_samples_eval == 0 {
            return Err(Error::Config("loss.mc_samples_* must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ablation switches of the pre-task objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreTaskFlags {
    /// Dimension-wise pooling of `r` over the batch and of `z` over ways.
    pub pool: bool,
    /// Compute the deterministic path from the target set instead of the context.
    pub auto_encode: bool,
}

impl Default for PreTaskFlags {
    fn default() -> Self {
        Self {
            pool: true,
            auto_encode: true,
        }
    }
}

impl PreTaskFlags {
    pub fn label(&self) -> &'static str {
        match (self.pool, self.auto_encode) {
            (false, false) => "none",
            (true, false) => "pool",
            (false, true) => "ae",
            (true, true) => "pool+ae",
        }
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub step: usize,
}

/// The loss terms still attached to their graph.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub nll: Var<'g>,
    pub kl: Var<'g>,
    /// Weight on the KL term (β₁ or β₂).
    pub beta: f64,
}

impl LossTerms<'_> {
    pub fn report(&self, step: usize) -> LossReport {
        LossReport {
            total: self.total.item(),
            nll: self.nll.item(),
            kl: self.kl.item(),
            step,
        }
    }
}

/// Everything an extra loss term may look at.
pub struct LossContext<'a, 'g> {
    pub model: &'a NeuralProcess,
    pub params: &'a Bound<'g>,
    pub batch: &'a Batch,
    pub context: SetInput<'g>,
    pub target: SetInput<'g>,
}

/// Extension point for additional regularizers added to the total loss.
/// No implementation ships with the crate.
pub trait ExtraTerm {
    fn evaluate<'g>(&self, cx: &LossContext<'_, 'g>) -> Result<Var<'g>>;
}

fn check_sizes(batch: &Batch) -> Result<()> {
    if batch.context_len() == 0 {
        return Err(Error::contract("empty context set"));
    }
    if batch.target_len() == 0 {
        return Err(Error::contract("empty target set"));
    }
    Ok(())
}

/// Likelihood of the batch targets averaged over `zs` (one decoder pass per
/// latent draw; a single pass with `None` for deterministic models).
fn likelihood<'g>(
    model: &NeuralProcess,
    p: &Bound<'g>,
    batch: &Batch,
    target_x: Var<'g>,
    r: Var<'g>,
    zs: &[Option<Var<'g>>],
) -> Result<Var<'g>> {
    let g = target_x.graph();
    let ty = g.constant(batch.target_y()?.clone());
    let labels = if model.regression() { Vec::new() } else { batch.target_labels()? };
    let mut acc: Option<Var<'g>> = None;
    for &z in zs {
        let term = match model.decode(p, target_x, r, z)? {
            DecoderOutput::Gaussian(pred) => gaussian_nll(&pred, ty)?,
            DecoderOutput::Logits(logits) => categorical_nll(logits, &labels)?,
        };
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::contract("no latent samples"))?;
    Ok(sum.scale(1.0 / zs.len() as f64))
}

fn draws<'g>(q: Option<&GaussianVar<'g>>, samples: usize, rng: &mut Rng) -> Result<Vec<Option<Var<'g>>>> {
    match q {
        None => Ok(vec![None]),
        Some(q) => (0..samples).map(|_| Ok(Some(q.reparameterize(rng)?.value))).collect(),
    }
}

fn assemble<'g>(g: &'g Graph, nll: Var<'g>, kl: Option<Var<'g>>, beta: f64, batch: usize, extra: Option<Var<'g>>) -> Result<LossTerms<'g>> {
    let kl = match kl {
        Some(k) => k.scale(1.0 / batch as f64),
        None => g.scalar(0.0),
    };
    let mut total = if beta == 0.0 { nll } else { nll.add(kl.scale(beta))? };
    if let Some(e) = extra {
        total = total.add(e)?;
    }
    Ok(LossTerms { total, nll, kl, beta })
}

/// `−E_{q(z|T)}[log p(T_y | T_x, r_C, z)] + β₁·KL(q(z|T) ‖ q(z|C))` on `g`.
pub fn loss_anp_terms<'g>(
    model: &NeuralProcess,
    p: &Bound<'g>,
    batch: &Batch,
    cfg: &LossConfig,
    rng: &mut Rng,
    extra: Option<&dyn ExtraTerm>,
) -> Result<LossTerms<'g>> {
    check_sizes(batch)?;
    let g = p.vars().first().map(|v| v.graph()).ok_or_else(|| Error::contract("model has no parameters"))?;
    let ctx = model.context_set(g, batch)?;
    let tgt = model.target_set(g, batch)?;
    let tx = g.constant(batch.target_x.clone());
    let r = model.encoder.deterministic(p, &ctx, tx)?;
    let q_c = model.encoder.latent(p, &ctx)?;
    let q_t = model.encoder.latent(p, &tgt)?;
    let zs = draws(q_t.as_ref(), cfg.mc_samples_train, rng)?;
    let nll = likelihood(model, p, batch, tx, r, &zs)?;
    let kl = match (&q_t, &q_c) {
        (Some(qt), Some(qc)) => Some(kl_divergence(qt, qc)?),
        _ => None,
    };
    let extra = extra
        .map(|e| {
            e.evaluate(&LossContext {
                model,
                params: p,
                batch,
                context: ctx,
                target: tgt,
            })
        })
        .transpose()?;
    assemble(g, nll, kl, cfg.beta1, batch.size, extra)
}

/// Pre-task objective
/// `−E_{q(z̄|T)}[log p(T_y | T_x, r̄_T, z̄)] + β₂·KL(q(z̄|T) ‖ q(z̄|C))`.
///
/// `flags` switches off pooling (`r`, `z` used per task and per way) or
/// auto-encoding (`r` computed from the context).
pub fn loss_pre_terms<'g>(
    model: &NeuralProcess,
    p: &Bound<'g>,
    batch: &Batch,
    cfg: &LossConfig,
    flags: PreTaskFlags,
    rng: &mut Rng,
) -> Result<LossTerms<'g>> {
    check_sizes(batch)?;
    let g = p.vars().first().map(|v| v.graph()).ok_or_else(|| Error::contract("model has no parameters"))?;
    let ctx = model.context_set(g, batch)?;
    let tgt = model.target_set(g, batch)?;
    let tx = g.constant(batch.target_x.clone());
    let r_src = if flags.auto_encode { &tgt } else { &ctx };
    let mut r = model.encoder.deterministic(p, r_src, tx)?;
    let mut q_c = model.encoder.latent(p, &ctx)?;
    let mut q_t = model.encoder.latent(p, &tgt)?;
    if flags.pool {
        r = pool_batch(r)?;
        q_c = q_c.as_ref().map(pool_way).transpose()?;
        q_t = q_t.as_ref().map(pool_way).transpose()?;
    }
    let zs = draws(q_t.as_ref(), cfg.mc_samples_train, rng)?;
    let nll = likelihood(model, p, batch, tx, r, &zs)?;
    let kl = match (&q_t, &q_c) {
        (Some(qt), Some(qc)) => Some(kl_divergence(qt, qc)?),
        _ => None,
    };
    assemble(g, nll, kl, cfg.beta2, batch.size, None)
}

pub fn loss_anp(model: &NeuralProcess, batch: &Batch, cfg: &LossConfig, rng: &mut Rng) -> Result<LossReport> {
    let g = Graph::new();
    let p = g.bind_frozen(&model.store);
    Ok(loss_anp_terms(model, &p, batch, cfg, rng, None)?.report(0))
}

pub fn loss_pre(model: &NeuralProcess, batch: &Batch, cfg: &LossConfig, flags: PreTaskFlags, rng: &mut Rng) -> Result<LossReport> {
    let g = Graph::new();
    let p = g.bind_frozen(&model.store);
    Ok(loss_pre_terms(model, &p, batch, cfg, flags, rng)?.report(0))
}
