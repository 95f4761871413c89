//! Layers shared by the encoders and decoders.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamId, ParamStore, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w: store.weight(format!("{name}.w"), fan_in, fan_out, rng)?,
            b: store.zeros(format!("{name}.b"), &[fan_out])?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}

/// Row-wise feed-forward stack (ReLU between layers, linear output).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::contract("mlp needs at least input and output size"));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, mut x: Var<'g>) -> Result<Var<'g>> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, x)?;
            if i < last {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Option<ParamId>,
    pub bias: Option<ParamId>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, affine: bool) -> Result<Self> {
        if !affine {
            return Ok(Self { gain: None, bias: None });
        }
        Ok(Self {
            gain: Some(store.ones(format!("{name}.gain"), &[dim])?),
            bias: Some(store.zeros(format!("{name}.bias"), &[dim])?),
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(self.gain.map(|g| p.get(g)), self.bias.map(|b| p.get(b)), LAYER_NORM_EPS)
    }
}

/// Scaled dot-product attention with `heads` parallel heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::contract(format!("attention dim {dim} not divisible by {heads} heads")));
        }
        let (dq, dk, dv) = dims;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.wq"), dq, dim, rng)?,
            k: Linear::new(store, &format!("{name}.wk"), dk, dim, rng)?,
            v: Linear::new(store, &format!("{name}.wv"), dv, dim, rng)?,
            o: Linear::new(store, &format!("{name}.wo"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    fn split_heads<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let (b, n) = (s[0], s[1]);
        x.reshape(&[b, n, self.heads, self.dim / self.heads])?
            .permute(&[0, 2, 1, 3])
    }

    /// `queries [B, n, dq]`, `keys [B, m, dk]`, `values [B, m, dv]` →
    /// `([B, n, dim], attention weights [B, heads, n, m])`.
    pub fn forward_with_weights<'g>(
        &self,
        p: &Bound<'g>,
        queries: Var<'g>,
        keys: Var<'g>,
        values: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (qs, ks) = (queries.shape(), keys.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || ks[1] != values.shape()[1] {
            return Err(Error::shape("attention", &qs, &ks));
        }
        if ks[1] == 0 {
            return Err(Error::contract("attention over an empty key set"));
        }
        let (b, n) = (qs[0], qs[1]);
        let q = self.split_heads(self.q.forward(p, queries)?)?;
        let k = self.split_heads(self.k.forward(p, keys)?)?.transpose()?;
        let v = self.split_heads(self.v.forward(p, values)?)?;
        let dh = (self.dim / self.heads) as f64;
        let weights = q.matmul(k)?.scale(1.0 / dh.sqrt()).softmax(3)?;
        let heads = weights.matmul(v)?;
        let merged = heads.permute(&[0, 2, 1, 3])?.reshape(&[b, n, self.dim])?;
        Ok((self.o.forward(p, merged)?, weights))
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, queries: Var<'g>, keys: Var<'g>, values: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward_with_weights(p, queries, keys, values)?.0)
    }
}

/// Multihead attention block: `H = LN(X + MHA(X, Y, Y))`, `out = LN(H + rFF(H))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.mha"), (dim, dim, dim), dim, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, true)?,
            ff: Mlp::new(store, &format!("{name}.ff"), &[dim, dim, dim], rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, true)?,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
        let h = self.ln1.forward(p, x.add(self.attn.forward(p, x, y, y)?)?)?;
        self.ln2.forward(p, h.add(self.ff.forward(p, h)?)?)
    }

    /// Self-attention block over a set.
    pub fn self_attend<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.forward(p, x, x)
    }
}

/// Pooling by multihead attention with learned seed vectors.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub seeds: ParamId,
    pub num_seeds: usize,
    pub ff: Mlp,
    pub block: AttentionBlock,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, num_seeds: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..num_seeds * dim).map(|_| rng.uniform(-bound, bound)).collect();
        let seeds = store.add(format!("{name}.seeds"), crate::Tensor::new(&[1, num_seeds, dim], data)?)?;
        Ok(Self {
            seeds,
            num_seeds,
            ff: Mlp::new(store, &format!("{name}.ff"), &[dim, dim], rng)?,
            block: AttentionBlock::new(store, &format!("{name}.mab"), dim, heads, rng)?,
        })
    }

    /// `[B, n, dim]` → `[B, num_seeds, dim]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let seeds = p.get(self.seeds).broadcast_to(&[s[0], self.num_seeds, s[2]])?;
        self.block.forward(p, seeds, self.ff.forward(p, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn single_key_attention_returns_its_value() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3, 0);
        let mha = MultiHeadAttention::new(&mut store, "a", (2, 2, 3), 4, 2, &mut rng).unwrap();
        let g = Graph::new();
        let p = g.bind(&store);
        let v = g.constant(Tensor::new(&[1, 1, 3], vec![0.2, -0.5, 1.0]).unwrap());
        let k = g.constant(Tensor::new(&[1, 1, 2], vec![0.3, 0.3]).unwrap());
        let q1 = g.constant(Tensor::new(&[1, 2, 2], vec![5.0, -1.0, 0.0, 9.0]).unwrap());
        let (out, w) = mha.forward_with_weights(&p, q1, k, v).unwrap();
        assert!(w.to_vec().iter().all(|&x| x == 1.0));
        let o = out.to_vec();
        assert_eq!(o[..4], o[4..]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3, 0);
        assert!(MultiHeadAttention::new(&mut store, "a", (2, 2, 2), 6, 4, &mut rng).is_err());
    }
}
