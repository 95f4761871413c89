//! Differentiable operations on [`Var`].

use super::graph::Var;
use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out` (row-major), the flat index of the element of
/// `inp` it reads under right-aligned broadcasting.
/// Input element read for output element `i` of a broadcast.
enum Index {
    Direct,
    /// The input repeats with this period (it matches a suffix of the output).
    Cyclic(usize),
    Table(Vec<usize>),
}

impl Index {
    fn of(out: &[usize], inp: &[usize]) -> Self {
        let core: Vec<usize> = inp.iter().copied().skip_while(|&d| d == 1).collect();
        if out.ends_with(&core) {
            let period = numel(&core);
            if period == numel(out) {
                Index::Direct
            } else {
                Index::Cyclic(period.max(1))
            }
        } else {
            Index::Table(broadcast_offsets(out, inp))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Index::Direct => i,
            Index::Cyclic(p) => i % p,
            Index::Table(t) => t[i],
        }
    }
}

fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let r = out.len();
    let pad = r - inp.len();
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for d in (0..inp.len()).rev() {
        if inp[d] != 1 {
            strides[d + pad] = s;
        }
        s *= inp[d];
    }
    let n = numel(out);
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offs
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { axis, rank })
    } else {
        Ok(())
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for d in (0..r.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

// c[n×m] += a[n×k] · b[k×m]
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            let bl = &b[l * m..(l + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(bl) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent partial sums so the loop vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for j in 0..4 {
            acc[j] += a[j] * b[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// c[n×k] += g[n×m] · b[k×m]ᵀ
fn gemm_bt(g: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let gi = &g[i * m..(i + 1) * m];
        for l in 0..k {
            let bl = &b[l * m..(l + 1) * m];
            c[i * k + l] += dot(gi, bl);
        }
    }
}

// c[k×m] += a[n×k]ᵀ · g[n×m]
fn gemm_at(a: &[f64], g: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let gi = &g[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            let cl = &mut c[l * m..(l + 1) * m];
            for (cv, gv) in cl.iter_mut().zip(gi) {
                *cv += av * gv;
            }
        }
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    fn binary(self, other: Var<'g>, op: BinOp, name: &'static str) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let same = a.shape() == b.shape();
        let out_shape = if same {
            a.shape().to_vec()
        } else {
            broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?
        };
        let n = numel(&out_shape);
        let (oa, ob) = if same {
            (Index::Direct, Index::Direct)
        } else {
            (Index::of(&out_shape, a.shape()), Index::of(&out_shape, b.shape()))
        };
        let ad = a.data();
        let bd = b.data();
        let ia = |i: usize| oa.at(i);
        let ib = |i: usize| ob.at(i);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (ad[ia(i)], bd[ib(i)]);
            out.push(match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            });
        }
        let (la, lb) = (a.len(), b.len());
        let back = Box::new(move |g: &[f64], mask: &[bool]| {
            let ia = |i: usize| oa.at(i);
            let ib = |i: usize| ob.at(i);
            let (ad, bd) = (a.data(), b.data());
            let mut ga = mask[0].then(|| vec![0.0; la]);
            let mut gb = mask[1].then(|| vec![0.0; lb]);
            for (i, &gi) in g.iter().enumerate() {
                let (ja, jb) = (ia(i), ib(i));
                let (da, db) = match op {
                    BinOp::Add => (gi, gi),
                    BinOp::Sub => (gi, -gi),
                    BinOp::Mul => (gi * bd[jb], gi * ad[ja]),
                    BinOp::Div => (gi / bd[jb], -gi * ad[ja] / (bd[jb] * bd[jb])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ja] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[jb] += db;
                }
            }
            vec![ga, gb]
        });
        Ok(self
            .graph
            .push(Tensor::from_parts(out_shape, out), &[self, other], back))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Mul, "mul")
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Div, "div")
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let yc = y.clone();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            let gx = g
                .iter()
                .zip(x.data())
                .zip(yc.data())
                .map(|((gi, xi), yi)| gi * df(*xi, *yi))
                .collect();
            vec![Some(gx)]
        });
        self.graph.push(y, &[self], back)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Batched matrix product with broadcasting over leading dimensions.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let m = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if bb.is_empty() {
            return Ok(self.matmul_shared(other, n * numel(ba), k, m));
        }
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let oa = broadcast_offsets(&batch, ba);
        let ob = broadcast_offsets(&batch, bb);
        let nb = oa.len();
        let mut out = vec![0.0; nb * n * m];
        for t in 0..nb {
            gemm(
                &a.data()[oa[t] * n * k..(oa[t] + 1) * n * k],
                &b.data()[ob[t] * k * m..(ob[t] + 1) * k * m],
                &mut out[t * n * m..(t + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let mut shape = batch;
        shape.extend_from_slice(&[n, m]);
        let back = Box::new(move |g: &[f64], mask: &[bool]| {
            let mut ga = mask[0].then(|| vec![0.0; a.len()]);
            let mut gb = mask[1].then(|| vec![0.0; b.len()]);
            for t in 0..nb {
                let gt = &g[t * n * m..(t + 1) * n * m];
                if let Some(ga) = ga.as_mut() {
                    gemm_bt(
                        gt,
                        &b.data()[ob[t] * k * m..(ob[t] + 1) * k * m],
                        &mut ga[oa[t] * n * k..(oa[t] + 1) * n * k],
                        n,
                        k,
                        m,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    gemm_at(
                        &a.data()[oa[t] * n * k..(oa[t] + 1) * n * k],
                        gt,
                        &mut gb[ob[t] * k * m..(ob[t] + 1) * k * m],
                        n,
                        k,
                        m,
                    );
                }
            }
            vec![ga, gb]
        });
        Ok(self
            .graph
            .push(Tensor::from_parts(shape, out), &[self, other], back))
    }

    /// `[.., n, k] · [k, m]`: the batch axes fold into the rows of one GEMM.
    fn matmul_shared(self, other: Var<'g>, rows: usize, k: usize, m: usize) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let mut out = vec![0.0; rows * m];
        gemm(a.data(), b.data(), &mut out, rows, k, m);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap_or(&mut 0) = m;
        let back = Box::new(move |g: &[f64], mask: &[bool]| {
            let ga = mask[0].then(|| {
                let mut ga = vec![0.0; a.len()];
                gemm_bt(g, b.data(), &mut ga, rows, k, m);
                ga
            });
            let gb = mask[1].then(|| {
                let mut gb = vec![0.0; b.len()];
                gemm_at(a.data(), g, &mut gb, rows, k, m);
                gb
            });
            vec![ga, gb]
        });
        self.graph.push(Tensor::from_parts(shape, out), &[self, other], back)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let back = Box::new(|g: &[f64], _: &[bool]| vec![Some(g.to_vec())]);
        Ok(self.graph.push(y, &[self], back))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let r = x.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", x.shape(), perm));
        }
        let (data, shape) = permute_data(x.data(), x.shape(), perm);
        let mut inverse = vec![0; r];
        for (d, &p) in perm.iter().enumerate() {
            inverse[p] = d;
        }
        let out_shape = shape.clone();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            vec![Some(permute_data(g, &out_shape, &inverse).0)]
        });
        Ok(self.graph.push(Tensor::from_parts(shape, data), &[self], back))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Axis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis(axis, base.len())?;
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let back = Box::new(move |g: &[f64], mask: &[bool]| {
            let mut grads: Vec<Option<Vec<f64>>> = widths
                .iter()
                .zip(mask)
                .map(|(&w, &m)| m.then(|| Vec::with_capacity(outer * w)))
                .collect();
            for o in 0..outer {
                let mut start = o * total;
                for (gr, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(gr) = gr.as_mut() {
                        gr.extend_from_slice(&g[start..start + w]);
                    }
                    start += w;
                }
            }
            grads
        });
        Ok(first
            .graph
            .push(Tensor::from_parts(shape, out), parts, back))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(axis, x.rank())?;
        if start + len > x.shape()[axis] {
            return Err(Error::shape("narrow", x.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let n_in = x.len();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            let mut gx = vec![0.0; n_in];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        });
        Ok(self.graph.push(Tensor::from_parts(shape, out), &[self], back))
    }

    /// Gathers slices `indices` along `axis`; repeated indices are allowed.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(axis, x.rank())?;
        let (outer, full, inner) = split_axis(x.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= full) {
            return Err(Error::shape("index_select", x.shape(), &[bad]));
        }
        let idx = indices.to_vec();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in &idx {
                let base = (o * full + i) * inner;
                out.extend_from_slice(&x.data()[base..base + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = idx.len();
        let n_in = x.len();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            let mut gx = vec![0.0; n_in];
            let mut src = 0;
            for o in 0..outer {
                for &i in &idx {
                    let base = (o * full + i) * inner;
                    for (a, b) in gx[base..base + inner].iter_mut().zip(&g[src..src + inner]) {
                        *a += b;
                    }
                    src += inner;
                }
            }
            vec![Some(gx)]
        });
        Ok(self.graph.push(Tensor::from_parts(shape, out), &[self], back))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        match broadcast_shape(x.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", x.shape(), shape)),
        }
        let offs = broadcast_offsets(shape, x.shape());
        let out: Vec<f64> = offs.iter().map(|&o| x.data()[o]).collect();
        let n_in = x.len();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            let mut gx = vec![0.0; n_in];
            for (gi, &o) in g.iter().zip(&offs) {
                gx[o] += gi;
            }
            vec![Some(gx)]
        });
        Ok(self
            .graph
            .push(Tensor::from_parts(shape.to_vec(), out), &[self], back))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let s: f64 = x.data().iter().sum();
        let n = x.len();
        let back = Box::new(move |g: &[f64], _: &[bool]| vec![Some(vec![g[0]; n])]);
        self.graph.push(Tensor::scalar(s), &[self], back)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_over(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        self.reduce_axis(axis, keepdim, false)
    }

    /// Arithmetic mean along `axis`; the axis is dropped unless `keepdim`.
    pub fn mean_over(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        self.reduce_axis(axis, keepdim, true)
    }

    fn reduce_axis(self, axis: usize, keepdim: bool, mean: bool) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(axis, x.rank())?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let w = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (d, s) in dst.iter_mut().zip(&x.data()[base..base + inner]) {
                    *d += s;
                }
            }
            if mean {
                for d in dst.iter_mut() {
                    *d /= len as f64;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let n_in = x.len();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            let mut gx = vec![0.0; n_in];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for (d, s) in gx[base..base + inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d = s * w;
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.graph.push(Tensor::from_parts(shape, out), &[self], back))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(axis, x.rank())?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x.data()[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (x.data()[at(l)] - mx).exp();
                    y[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[at(l)] /= s;
                }
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let yc = y.clone();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            let yd = yc.data();
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * yd[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = yd[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.graph.push(y, &[self], back))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(axis, x.rank())?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x.data()[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|l| (x.data()[at(l)] - mx).exp()).sum::<f64>().ln();
                for l in 0..len {
                    y[at(l)] = x.data()[at(l)] - lse;
                }
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let yc = y.clone();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            let yd = yc.data();
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let s: f64 = (0..len).map(|l| g[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = g[at(l)] - yd[at(l)].exp() * s;
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.graph.push(y, &[self], back))
    }

    /// Normalizes every row of the last axis to zero mean and unit variance,
    /// with variance floor `eps`. Statistics are per row, never across rows.
    pub fn normalize_last(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&1);
        let rows = x.len() / d.max(1);
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in y[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let yc = y.clone();
        let back = Box::new(move |g: &[f64], _: &[bool]| {
            let yd = yc.data();
            let mut gx = vec![0.0; yd.len()];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &yd[r * d..(r + 1) * d];
                let gm = gr.iter().sum::<f64>() / d as f64;
                let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = inv_std[r] * (gr[j] - gm - yr[j] * gym);
                }
            }
            vec![Some(gx)]
        });
        self.graph.push(y, &[self], back)
    }

    /// Layer normalization over the feature (last) axis with optional affine.
    pub fn layer_norm(self, gain: Option<Var<'g>>, bias: Option<Var<'g>>, eps: f64) -> Result<Var<'g>> {
        let mut y = self.normalize_last(eps);
        if let Some(g) = gain {
            y = y.mul(g)?;
        }
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        Ok(y)
    }
}
