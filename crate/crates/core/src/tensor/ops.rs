use super::{numel, Float, Tensor};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

impl<T: Float> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
        let scalar_rhs = other.rank() == 0 && self.rank() != 0;
        if !scalar_rhs && self.shape() != other.shape() {
            bail!(
                Dimension,
                "{}: shapes {:?} and {:?} differ",
                op.name(),
                self.shape(),
                other.shape()
            );
        }
        let data: Vec<T> = if scalar_rhs {
            let b = other.data()[0];
            self.data().iter().map(|&a| op.apply(a, b)).collect()
        } else {
            self.data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| op.apply(a, b))
                .collect()
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            op.name(),
            vec![self.clone(), other.clone()],
            move |g| {
                let bv = |i: usize| if scalar_rhs { b.data()[0] } else { b.data()[i] };
                let ga: Option<Vec<T>> = a.requires_grad().then(|| match op {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(i, &gi)| gi * bv(i)).collect(),
                    Binary::Div => g.iter().enumerate().map(|(i, &gi)| gi / bv(i)).collect(),
                });
                let gb: Option<Vec<T>> = b.requires_grad().then(|| {
                    let per: Vec<T> = match op {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&x| -x).collect(),
                        Binary::Mul => g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).collect(),
                        Binary::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| -gi * a.data()[i] / (bv(i) * bv(i)))
                            .collect(),
                    };
                    if scalar_rhs {
                        vec![per.into_iter().fold(T::zero(), |s, x| s + x)]
                    } else {
                        per
                    }
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map with derivative `dfdx(x, y)` evaluated at input `x`
    /// and output `y`.
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        dfdx: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        if !Tensor::tracks(&[self]) {
            return Tensor::from_op(self.shape().to_vec(), data, name, vec![], |_| vec![]);
        }
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op(self.shape().to_vec(), data, name, vec![self.clone()], move |g| {
            let gx = g
                .iter()
                .zip(x.data())
                .zip(&y)
                .map(|((&gi, &xi), &yi)| gi * dfdx(xi, yi))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary("add_scalar", |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.unary("mul_scalar", |x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// x·σ(x)
    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Sum of all elements in row-major order, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], "sum", vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.numel() as f64);
        let s = self.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let len = self.numel();
        Tensor::from_op(vec![], vec![s / n], "mean", vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / n; len])]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            bail!(
                Dimension,
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            );
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            "reshape",
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Concatenation along axis 1 (channels for NCHW, features for NC).
    pub fn cat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            bail!(Contract, "cat_channels of nothing");
        };
        if first.rank() < 2 {
            bail!(Dimension, "cat_channels needs rank >= 2, got {:?}", first.shape());
        }
        let n = first.dim(0);
        let inner: usize = first.shape()[2..].iter().product();
        for p in parts {
            if p.rank() != first.rank() || p.dim(0) != n || p.shape()[2..] != first.shape()[2..] {
                bail!(
                    Dimension,
                    "cat_channels: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                );
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.dim(1) * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for b in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[b * w..(b + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[1] = parts.iter().map(|p| p.dim(1)).sum();
        Ok(Tensor::from_op(
            shape,
            data,
            "cat_channels",
            parts.iter().map(|p| (*p).clone()).collect(),
            move |g| {
                let mut out: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(n * w)).collect();
                for b in 0..n {
                    let mut off = b * total;
                    for (o, &w) in out.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                out.into_iter().map(Some).collect()
            },
        ))
    }

    /// [B, M, N] → [B, N, M]
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            bail!(Dimension, "transpose_last needs rank 3, got {:?}", self.shape());
        }
        let (b, m, n) = (self.dim(0), self.dim(1), self.dim(2));
        let mut data = Vec::with_capacity(self.numel());
        for bi in 0..b {
            data.extend(super::kernels::transpose(m, n, &self.data()[bi * m * n..(bi + 1) * m * n]));
        }
        Ok(Tensor::from_op(
            vec![b, n, m],
            data,
            "transpose_last",
            vec![self.clone()],
            move |g| {
                let mut gx = Vec::with_capacity(g.len());
                for bi in 0..b {
                    gx.extend(super::kernels::transpose(n, m, &g[bi * m * n..(bi + 1) * m * n]));
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if self.rank() == 0 || start + len > self.dim(0) {
            bail!(
                Index,
                "narrow_batch {start}..{} out of range for {:?}",
                start + len,
                self.shape()
            );
        }
        let row: usize = self.shape()[1..].iter().product();
        let data = self.data()[start * row..(start + len) * row].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let total = self.numel();
        Ok(Tensor::from_op(shape, data, "narrow_batch", vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); total];
            gx[start * row..(start + len) * row].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Concatenation along the leading axis.
    pub fn cat_batch(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            bail!(Contract, "cat_batch of nothing");
        };
        for p in parts {
            if p.rank() == 0 || p.shape()[1..] != first.shape()[1..] {
                bail!(Dimension, "cat_batch: {:?} vs {:?}", p.shape(), first.shape());
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let mut data = Vec::with_capacity(sizes.iter().sum());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = parts.iter().map(|p| p.dim(0)).sum();
        Ok(Tensor::from_op(
            shape,
            data,
            "cat_batch",
            parts.iter().map(|p| (*p).clone()).collect(),
            move |g| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let v = g[off..off + s].to_vec();
                        off += s;
                        Some(v)
                    })
                    .collect()
            },
        ))
    }
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn add_values() {
        let a = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::<f32>::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_one_is_bitwise_identity() {
        let x = Tensor::<f32>::random_normal(&[3, 7], &mut Rng::new(5));
        let y = x.mul_scalar(1.0);
        let one = Tensor::<f32>::scalar(1.0);
        let z = x.mul(&one).unwrap();
        for ((a, b), c) in x.data().iter().zip(y.data()).zip(z.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(a.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = Tensor::<f32>::zeros(&[2]);
        let b = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(a.add(&b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn add_grad_is_one() {
        let a = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let b = Tensor::<f64>::param(vec![0.5, 0.5, 0.5], &[3]).unwrap();
        a.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 3]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn scalar_rhs_grad_sums() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = Tensor::<f64>::param(vec![2.0], &[]).unwrap();
        a.mul(&s).unwrap().sum().backward().unwrap();
        assert_eq!(s.grad().unwrap(), vec![6.0]);
        assert_eq!(a.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn cat_and_narrow_roundtrip() {
        let a = Tensor::<f32>::random_normal(&[2, 3, 2, 2], &mut Rng::new(1));
        let b = Tensor::<f32>::random_normal(&[2, 1, 2, 2], &mut Rng::new(2));
        let c = Tensor::cat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        assert_eq!(&c.data()[0..12], &a.data()[0..12]);
        assert_eq!(&c.data()[12..16], &b.data()[0..4]);
        let d = Tensor::cat_batch(&[&a, &a]).unwrap();
        assert_eq!(d.narrow_batch(2, 2).unwrap().data(), a.data());
    }
}
