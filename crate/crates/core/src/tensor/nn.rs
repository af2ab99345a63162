use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Float, Rng, Tensor};
use crate::error::{bail, Result};

impl<T: Float> Tensor<T> {
    /// [M, K] · [K, N]
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 {
            bail!(Dimension, "matmul needs rank 2, got {:?} and {:?}", self.shape(), other.shape());
        }
        let a = self.reshape(&[1, self.dim(0), self.dim(1)])?;
        let b = other.reshape(&[1, other.dim(0), other.dim(1)])?;
        a.bmm(&b)?.reshape(&[self.dim(0), other.dim(1)])
    }

    /// Batched [B, M, K] · [B, K, N] → [B, M, N]
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 3 || other.rank() != 3 || self.dim(0) != other.dim(0) || self.dim(2) != other.dim(1) {
            bail!(Dimension, "bmm: incompatible {:?} and {:?}", self.shape(), other.shape());
        }
        let (b, m, k, n) = (self.dim(0), self.dim(1), self.dim(2), other.dim(2));
        let mut out = vec![T::zero(); b * m * n];
        for bi in 0..b {
            gemm_nn(
                m,
                k,
                n,
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let (x, y) = (self.clone(), other.clone());
        Ok(Tensor::from_op(vec![b, m, n], out, "bmm", vec![self.clone(), other.clone()], move |g| {
            let gx = x.requires_grad().then(|| {
                let mut gx = vec![T::zero(); b * m * k];
                for bi in 0..b {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        &y.data()[bi * k * n..(bi + 1) * k * n],
                        &mut gx[bi * m * k..(bi + 1) * m * k],
                    );
                }
                gx
            });
            let gy = y.requires_grad().then(|| {
                let mut gy = vec![T::zero(); b * k * n];
                for bi in 0..b {
                    gemm_tn(
                        k,
                        m,
                        n,
                        &x.data()[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gy[bi * k * n..(bi + 1) * k * n],
                    );
                }
                gy
            });
            vec![gx, gy]
        }))
    }

    /// Affine map: x[N, I] · wᵀ + b with w stored [O, I].
    pub fn linear(&self, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || w.rank() != 2 || w.dim(1) != self.dim(1) || b.shape() != [w.dim(0)] {
            bail!(
                Dimension,
                "linear: x {:?}, w {:?}, b {:?}",
                self.shape(),
                w.shape(),
                b.shape()
            );
        }
        let (n, i, o) = (self.dim(0), self.dim(1), w.dim(0));
        let mut out = vec![T::zero(); n * o];
        gemm_nt(n, i, o, self.data(), w.data(), &mut out);
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let (x, wc, bc) = (self.clone(), w.clone(), b.clone());
        Ok(Tensor::from_op(
            vec![n, o],
            out,
            "linear",
            vec![self.clone(), w.clone(), b.clone()],
            move |g| {
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); n * i];
                    gemm_nn(n, o, i, g, wc.data(), &mut gx);
                    gx
                });
                let gw = wc.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); o * i];
                    gemm_tn(o, n, i, g, x.data(), &mut gw);
                    gw
                });
                let gb = bc.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            bail!(Dimension, "softmax of a scalar");
        }
        let d = *self.shape().last().expect("rank >= 1");
        let mut out = vec![T::zero(); self.numel()];
        for (row, o) in self.data().chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - mx).exp();
                s += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= s;
            }
        }
        let y = if Tensor::tracks(&[self]) { out.clone() } else { Vec::new() };
        Ok(Tensor::from_op(self.shape().to_vec(), out, "softmax", vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), xr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                for ((xv, &gv), &yv) in xr.iter_mut().zip(gr).zip(yr) {
                    *xv = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Group normalization over [N, C, ...] with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            bail!(Dimension, "group_norm needs [N, C, ...], got {:?}", self.shape());
        }
        let (n, c) = (self.dim(0), self.dim(1));
        if groups == 0 || c % groups != 0 {
            bail!(Config, "group_norm: {c} channels not divisible into {groups} groups");
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            bail!(Dimension, "group_norm affine shapes {:?}/{:?} for {c} channels", gamma.shape(), beta.shape());
        }
        let spatial: usize = self.shape()[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * spatial;
        let mf = T::lit(m as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); n * groups];
        for b in 0..n {
            for gi in 0..groups {
                let off = (b * c + gi * cpg) * spatial;
                let xs = &self.data()[off..off + m];
                let mean = xs.iter().fold(T::zero(), |s, &v| s + v) / mf;
                let var = xs.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / mf;
                let r = T::one() / (var + eps).sqrt();
                rstd[b * groups + gi] = r;
                for (h, &v) in xhat[off..off + m].iter_mut().zip(xs) {
                    *h = (v - mean) * r;
                }
            }
        }
        let mut out = xhat.clone();
        for b in 0..n {
            for ch in 0..c {
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let off = (b * c + ch) * spatial;
                for v in &mut out[off..off + spatial] {
                    *v = *v * ga + be;
                }
            }
        }
        let (x, gam, bet) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            "group_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            gg[ch] += g[off + s] * xhat[off + s];
                            gb[ch] += g[off + s];
                        }
                    }
                }
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for gi in 0..groups {
                            let r = rstd[b * groups + gi];
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for cc in 0..cpg {
                                let ch = gi * cpg + cc;
                                let off = (b * c + ch) * spatial;
                                let ga = gam.data()[ch];
                                for s in 0..spatial {
                                    let d = g[off + s] * ga;
                                    mean_d += d;
                                    mean_dx += d * xhat[off + s];
                                }
                            }
                            mean_d /= mf;
                            mean_dx /= mf;
                            for cc in 0..cpg {
                                let ch = gi * cpg + cc;
                                let off = (b * c + ch) * spatial;
                                let ga = gam.data()[ch];
                                for s in 0..spatial {
                                    let d = g[off + s] * ga;
                                    gx[off + s] = r * (d - mean_d - xhat[off + s] * mean_dx);
                                }
                            }
                        }
                    }
                    gx
                });
                vec![gx, gam.requires_grad().then_some(gg), bet.requires_grad().then_some(gb)]
            },
        ))
    }

    /// Row lookup: table [V, D], one index per output row.
    pub fn embedding(&self, indices: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            bail!(Dimension, "embedding table must be [V, D], got {:?}", self.shape());
        }
        let (v, d) = (self.dim(0), self.dim(1));
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            bail!(Index, "embedding index {bad} out of range for {v} rows");
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(vec![indices.len(), d], out, "embedding", vec![self.clone()], move |g| {
            let mut gt = vec![T::zero(); v * d];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g[r * d + j];
                }
            }
            vec![Some(gt)]
        }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(self), self [N, C].
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.dim(0) != labels.len() {
            bail!(Dimension, "cross_entropy: logits {:?} for {} labels", self.shape(), labels.len());
        }
        let (n, c) = (self.dim(0), self.dim(1));
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            bail!(Index, "label {bad} out of range for {c} classes");
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (r, (row, p)) in self.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for (pv, &v) in p.iter_mut().zip(row) {
                *pv = (v - mx).exp();
                s += *pv;
            }
            for pv in p.iter_mut() {
                *pv /= s;
            }
            loss += s.ln() + mx - row[labels[r]];
        }
        let nf = T::lit(n as f64);
        let labels = labels.to_vec();
        Ok(Tensor::from_op(vec![], vec![loss / nf], "cross_entropy", vec![self.clone()], move |g| {
            let mut gx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * c + l] -= T::one();
            }
            for v in &mut gx {
                *v *= g[0] / nf;
            }
            vec![Some(gx)]
        }))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by 1/(1−p).
    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            bail!(Config, "dropout probability {p} outside [0, 1)");
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        self.mul(&Tensor::from_vec(mask, self.shape())?)
    }
}
