//! Decoders: the conventional rFF head over `[T_x, r, z]` and the linear
//! decoder `g(T_x) · W` with `W = LN(r + rFF(z))ᵀ`.

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamStore, Var};
use crate::variational::{GaussianVar, VarianceTransform};

/// Operands shared by both decoders.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInput<'g> {
    /// `[batch, targets, dim_x]`
    pub target_x: Var<'g>,
    /// `r` or `r̄`: `[batch or 1, rows, r_dim]`
    pub r: Var<'g>,
    /// A sample of `z` or `z̄`: `[batch, 1 or way, z_dim]`
    pub z: Option<Var<'g>>,
}

/// Decoder output: a predictive Gaussian over `T_y` or classification logits.
#[derive(Clone, Copy, Debug)]
pub enum DecoderOutput<'g> {
    Gaussian(GaussianVar<'g>),
    /// `[batch, targets, way]`
    Logits(Var<'g>),
}

impl<'g> DecoderOutput<'g> {
    pub fn gaussian(&self) -> Result<&GaussianVar<'g>> {
        match self {
            DecoderOutput::Gaussian(g) => Ok(g),
            DecoderOutput::Logits(_) => Err(Error::contract("expected a regression head")),
        }
    }

    pub fn logits(&self) -> Result<Var<'g>> {
        match self {
            DecoderOutput::Logits(l) => Ok(*l),
            DecoderOutput::Gaussian(_) => Err(Error::contract("expected a classification head")),
        }
    }
}

fn split_prediction<'g>(out: Var<'g>, y_dim: usize) -> Result<GaussianVar<'g>> {
    GaussianVar::new(
        out.narrow(2, 0, y_dim)?,
        out.narrow(2, y_dim, y_dim)?,
        VarianceTransform::BoundedSoftplus,
    )
}

/// `[μ, ω] = rFF([T_x, r, z])`, regression only.
#[derive(Clone, Debug)]
pub struct ConventionalDecoder {
    pub mlp: Mlp,
    pub y_dim: usize,
}

impl ConventionalDecoder {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        depth: usize,
        y_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut sizes = vec![in_dim];
        sizes.extend(std::iter::repeat_n(hidden, depth));
        sizes.push(2 * y_dim);
        Ok(Self {
            mlp: Mlp::new(store, "decoder.mlp", &sizes, rng)?,
            y_dim,
        })
    }

    pub fn decode<'g>(&self, p: &Bound<'g>, input: &DecoderInput<'g>) -> Result<GaussianVar<'g>> {
        let ts = input.target_x.shape();
        let (b, m) = (ts[0], ts[1]);
        let expand = |v: Var<'g>| -> Result<Var<'g>> {
            let s = v.shape();
            if s.len() != 3 || (s[1] != 1 && s[1] != m) || (s[0] != 1 && s[0] != b) {
                return Err(Error::shape("conventional decoder", &ts, &s));
            }
            v.broadcast_to(&[b, m, s[2]])
        };
        let mut parts = vec![input.target_x, expand(input.r)?];
        if let Some(z) = input.z {
            parts.push(expand(z)?);
        }
        let h = Var::concat(&parts, 2)?;
        if h.shape()[2] != self.mlp.layers[0].fan_in {
            return Err(Error::shape("conventional decoder", &h.shape(), &[self.mlp.layers[0].fan_in]));
        }
        split_prediction(self.mlp.forward(p, h)?, self.y_dim)
    }
}

/// Feature extractor `g` applied to target inputs.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    Identity,
    Mlp(Mlp),
}

impl FeatureExtractor {
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        match self {
            FeatureExtractor::Identity => Ok(x),
            FeatureExtractor::Mlp(m) => m.forward(p, x),
        }
    }
}

/// Output of [`LinearDecoder::weights`], kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LinearDecoderWeights<'g> {
    /// `[batch, feature, out]`
    pub w: Var<'g>,
}

/// Feature-wise linear modulation of `g(T_x)` by latent-generated weights.
///
/// Regression packs the `out = 2·dim_y` rows of `W` into a single
/// `out·feature` vector of `r` (and of `rFF(z)`); classification has one row
/// per way.
#[derive(Clone, Debug)]
pub struct LinearDecoder {
    pub g: FeatureExtractor,
    pub zff: Option<Mlp>,
    pub ln: LayerNorm,
    pub feature: usize,
    pub out: usize,
    pub regression: bool,
    pub y_dim: usize,
}

impl LinearDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        g: FeatureExtractor,
        feature: usize,
        z_dim: Option<usize>,
        regression: bool,
        out: usize,
        ln_affine: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let packed = if regression { out * feature } else { feature };
        Ok(Self {
            g,
            zff: z_dim
                .map(|z| Mlp::new(store, "decoder.zff", &[z, feature, packed], rng))
                .transpose()?,
            ln: LayerNorm::new(store, "decoder.ln", feature, ln_affine)?,
            feature,
            out,
            regression,
            y_dim: out / 2,
        })
    }

    /// `W = LN(r + rFF(z))ᵀ`.
    pub fn weights<'g>(&self, p: &Bound<'g>, r: Var<'g>, z: Option<Var<'g>>) -> Result<LinearDecoderWeights<'g>> {
        let rs = r.shape();
        let rows = |v: Var<'g>| -> Result<Var<'g>> {
            let s = v.shape();
            if self.regression {
                if s[1] != 1 || s[2] != self.out * self.feature {
                    return Err(Error::shape("linear decoder", &s, &[1, self.out * self.feature]));
                }
                v.reshape(&[s[0], self.out, self.feature])
            } else {
                if s[2] != self.feature {
                    return Err(Error::shape("linear decoder", &s, &[self.feature]));
                }
                Ok(v)
            }
        };
        let mut h = rows(r)?;
        if let (Some(zff), Some(z)) = (&self.zff, z) {
            h = h.add(rows(zff.forward(p, z)?)?)?;
        } else if rs.len() != 3 {
            return Err(Error::shape("linear decoder", &rs, &[3]));
        }
        let w = self.ln.forward(p, h)?.transpose()?;
        Ok(LinearDecoderWeights { w })
    }

    pub fn decode<'g>(&self, p: &Bound<'g>, input: &DecoderInput<'g>) -> Result<DecoderOutput<'g>> {
        let features = self.g.forward(p, input.target_x)?;
        let fd = *features.shape().last().unwrap_or(&0);
        if fd != self.feature {
            return Err(Error::shape("linear decoder features", &features.shape(), &[self.feature]));
        }
        let w = self.weights(p, input.r, input.z)?.w;
        let out = features.matmul(w)?;
        if self.regression {
            Ok(DecoderOutput::Gaussian(split_prediction(out, self.y_dim)?))
        } else {
            Ok(DecoderOutput::Logits(out))
        }
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Conventional(ConventionalDecoder),
    Linear(LinearDecoder),
}

impl Decoder {
    pub fn decode<'g>(&self, p: &Bound<'g>, input: &DecoderInput<'g>) -> Result<DecoderOutput<'g>> {
        match self {
            Decoder::Conventional(d) => Ok(DecoderOutput::Gaussian(d.decode(p, input)?)),
            Decoder::Linear(d) => d.decode(p, input),
        }
    }
}
