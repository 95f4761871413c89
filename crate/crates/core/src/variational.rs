//! Gaussian heads with bounded variances, reparameterized sampling, closed
//! form KL divergence and the two likelihood terms.
//!
//! The graph-level types ([`GaussianVar`], [`LatentSample`]) are what the
//! models use. [`DiagonalGaussian`] is the plain-value counterpart; its
//! methods evaluate the same graph code on a scratch [`Graph`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const VARIANCE_FLOOR: f64 = 0.1;
const VARIANCE_SPAN: f64 = 0.9;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Map from the raw scale ω to a variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceTransform {
    /// `0.1 + 0.9·sigmoid(ω)`, used for latent posteriors.
    BoundedSigmoid,
    /// `0.1 + 0.9·softplus(ω)`, used for predictive distributions.
    BoundedSoftplus,
    /// Zero variance (the deterministic path).
    Deterministic,
}

/// Diagonal Gaussian whose parameters live on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar<'g> {
    pub mean: Var<'g>,
    pub raw_scale: Var<'g>,
    pub transform: VarianceTransform,
}

/// A reparameterized draw `value = mean + sqrt(variance) ∘ noise`.
#[derive(Clone, Debug)]
pub struct LatentSample<'g> {
    pub value: Var<'g>,
    pub mean: Var<'g>,
    pub variance: Var<'g>,
    pub noise: Tensor,
}

impl<'g> GaussianVar<'g> {
    pub fn new(mean: Var<'g>, raw_scale: Var<'g>, transform: VarianceTransform) -> Result<Self> {
        if mean.shape() != raw_scale.shape() {
            return Err(Error::shape("gaussian", &mean.shape(), &raw_scale.shape()));
        }
        Ok(Self {
            mean,
            raw_scale,
            transform,
        })
    }

    pub fn variance(&self) -> Var<'g> {
        match self.transform {
            VarianceTransform::BoundedSigmoid => self
                .raw_scale
                .sigmoid()
                .scale(VARIANCE_SPAN)
                .add_scalar(VARIANCE_FLOOR),
            VarianceTransform::BoundedSoftplus => self
                .raw_scale
                .softplus()
                .scale(VARIANCE_SPAN)
                .add_scalar(VARIANCE_FLOOR),
            VarianceTransform::Deterministic => self.raw_scale.scale(0.0),
        }
    }

    pub fn reparameterize(&self, rng: &mut Rng) -> Result<LatentSample<'g>> {
        let shape = self.mean.shape();
        let n = shape.iter().product();
        self.reparameterize_with(Tensor::new(&shape, rng.normals(n))?)
    }

    /// Reparameterization with a caller-supplied standard-normal draw.
    pub fn reparameterize_with(&self, noise: Tensor) -> Result<LatentSample<'g>> {
        if self.transform == VarianceTransform::Deterministic {
            return Err(Error::contract("reparameterize on a deterministic Gaussian"));
        }
        let variance = self.variance();
        let eps = self.mean.graph().constant(noise.clone());
        let value = self.mean.add(variance.sqrt().mul(eps)?)?;
        Ok(LatentSample {
            value,
            mean: self.mean,
            variance,
            noise,
        })
    }

    /// The mean as a sample with zero noise.
    pub fn mean_sample(&self) -> Result<LatentSample<'g>> {
        self.reparameterize_with(Tensor::zeros(&self.mean.shape()))
    }
}

/// `KL(q ‖ p)` for diagonal Gaussians, summed over every element.
pub fn kl_divergence<'g>(q: &GaussianVar<'g>, p: &GaussianVar<'g>) -> Result<Var<'g>> {
    if q.transform == VarianceTransform::Deterministic || p.transform == VarianceTransform::Deterministic {
        return Err(Error::contract("KL with a deterministic operand"));
    }
    let (vq, vp) = (q.variance(), p.variance());
    let d2 = q.mean.sub(p.mean)?.square();
    // 0.5·[ln(vp/vq) + (vq + (μq-μp)²)/vp - 1]
    let log_ratio = vp.ln().sub(vq.ln())?;
    let quad = vq.add(d2)?.div(vp)?;
    Ok(log_ratio.add(quad)?.add_scalar(-1.0).sum().scale(0.5))
}

/// Negative log density of `y` under `pred`, summed over the last axis and
/// averaged over every other axis (target points and batch).
pub fn gaussian_nll<'g>(pred: &GaussianVar<'g>, y: Var<'g>) -> Result<Var<'g>> {
    if pred.transform != VarianceTransform::BoundedSoftplus {
        return Err(Error::contract("gaussian_nll expects a BoundedSoftplus prediction"));
    }
    let shape = pred.mean.shape();
    if y.shape() != shape {
        return Err(Error::shape("gaussian_nll", &shape, &y.shape()));
    }
    let var = pred.variance();
    let per = var
        .ln()
        .add_scalar(LN_2PI)
        .add(y.sub(pred.mean)?.square().div(var)?)?
        .scale(0.5);
    let rows = per.value().len() / shape.last().copied().unwrap_or(1).max(1);
    Ok(per.sum().scale(1.0 / rows as f64))
}

/// Mean softmax cross-entropy. `logits` is `[.., way]`, `labels` has one
/// entry per logit row.
pub fn categorical_nll<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    let way = *shape.last().ok_or_else(|| Error::contract("scalar logits"))?;
    let rows = logits.value().len() / way.max(1);
    if labels.len() != rows {
        return Err(Error::shape("categorical_nll", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= way) {
        return Err(Error::contract(format!("label {bad} out of range for {way} classes")));
    }
    let logp = logits.reshape(&[rows, way])?.log_softmax(1)?;
    let mut onehot = vec![0.0; rows * way];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * way + l] = 1.0;
    }
    let mask = logits.graph().constant(Tensor::new(&[rows, way], onehot)?);
    Ok(logp.mul(mask)?.sum().scale(-1.0 / rows as f64))
}

/// Plain-value diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub raw_scale: Vec<f64>,
    pub transform: VarianceTransform,
}

/// Plain-value counterpart of [`LatentSample`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSampleValue {
    pub value: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub noise: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, raw_scale: Vec<f64>, transform: VarianceTransform) -> Result<Self> {
        if mean.len() != raw_scale.len() {
            return Err(Error::shape("gaussian", &[mean.len()], &[raw_scale.len()]));
        }
        Ok(Self {
            mean,
            raw_scale,
            transform,
        })
    }

    pub fn deterministic(mean: Vec<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            raw_scale: vec![0.0; n],
            transform: VarianceTransform::Deterministic,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn on<'g>(&self, g: &'g Graph) -> GaussianVar<'g> {
        GaussianVar {
            mean: g.variable(Tensor::vector(self.mean.clone())),
            raw_scale: g.variable(Tensor::vector(self.raw_scale.clone())),
            transform: self.transform,
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        let g = Graph::new();
        self.on(&g).variance().to_vec()
    }

    pub fn reparameterize(&self, rng: &mut Rng) -> Result<LatentSampleValue> {
        let g = Graph::new();
        let s = self.on(&g).reparameterize(rng)?;
        Ok(LatentSampleValue {
            value: s.value.to_vec(),
            mean: s.mean.to_vec(),
            variance: s.variance.to_vec(),
            noise: s.noise.to_vec(),
        })
    }

    pub fn kl_divergence(&self, p: &DiagonalGaussian) -> Result<f64> {
        if self.dim() != p.dim() {
            return Err(Error::shape("kl", &[self.dim()], &[p.dim()]));
        }
        let g = Graph::new();
        Ok(kl_divergence(&self.on(&g), &p.on(&g))?.item())
    }

    /// NLL of a single observation vector (one target point).
    pub fn nll(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::shape("gaussian_nll", &[self.dim()], &[y.len()]));
        }
        let g = Graph::new();
        let pred = self.on(&g);
        let y = g.constant(Tensor::vector(y.to_vec()));
        Ok(gaussian_nll(&pred, y)?.item())
    }
}
