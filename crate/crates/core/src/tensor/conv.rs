use super::kernels::{gemm_nn, transpose};
use super::{Float, Tensor};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

impl Conv2dOptions {
    pub fn same3x3() -> Self {
        Self { stride: 1, pad: 1 }
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * pad;
    if kernel > padded {
        bail!(Config, "conv2d: kernel {kernel} exceeds padded {axis} {padded}");
    }
    if !(padded - kernel).is_multiple_of(stride) {
        bail!(
            Config,
            "conv2d: {axis} {size} with kernel {kernel}, stride {stride}, pad {pad} gives a non-integer output size"
        );
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies inside [0, w).
fn valid_span(g: &Geometry, kj: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let last = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (first.min(last), last)
}

/// Unfolds one image [C, H, W] into columns [C·kh·kw, Ho·Wo].
fn im2col<T: Float>(g: &Geometry, x: &[T], col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (first, last) = valid_span(g, kj);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        out.fill(T::zero());
                        continue;
                    }
                    out[..first].fill(T::zero());
                    out[last..].fill(T::zero());
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    let x0 = first * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[first..last].copy_from_slice(&src[x0..x0 + last - first]);
                    } else {
                        for (o, v) in out[first..last].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (first, last) = valid_span(g, kj);
                if first == last {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    let x0 = first * g.stride + kj - g.pad;
                    let vals = &src[oy * g.wo + first..oy * g.wo + last];
                    for (d, v) in dst[x0..].iter_mut().step_by(g.stride).zip(vals) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

impl<T: Float> Tensor<T> {
    /// 2-D cross-correlation. x [N, C, H, W], w [K, C, kh, kw], bias [K].
    ///
    /// Each output is Σ_{c, ki, kj} w·x accumulated in that order from zero,
    /// then the bias is added.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, opts: Conv2dOptions) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 || weight.dim(1) != self.dim(1) {
            bail!(Dimension, "conv2d: input {:?}, weight {:?}", self.shape(), weight.shape());
        }
        if opts.stride == 0 {
            bail!(Config, "conv2d: stride must be positive");
        }
        if let Some(b) = bias {
            if b.shape() != [weight.dim(0)] {
                bail!(Dimension, "conv2d: bias {:?} for {} kernels", b.shape(), weight.dim(0));
            }
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (k, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
        let g = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            ho: out_extent(h, kh, opts.stride, opts.pad, "height")?,
            wo: out_extent(w, kw, opts.stride, opts.pad, "width")?,
            stride: opts.stride,
            pad: opts.pad,
        };
        let (ck, p) = (g.cols(), g.positions());
        let img = c * h * w;
        let tracking = Tensor::tracks(&[self, weight]);
        let keep_cols = tracking && weight.requires_grad() && !g.is_pointwise();
        let mut cols = if keep_cols { vec![T::zero(); n * ck * p] } else { Vec::new() };
        let mut scratch = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
        let mut out = vec![T::zero(); n * k * p];
        for b in 0..n {
            let x = &self.data()[b * img..(b + 1) * img];
            let col: &[T] = if g.is_pointwise() {
                x
            } else {
                let dst = if keep_cols { &mut cols[b * ck * p..(b + 1) * ck * p] } else { &mut scratch[..] };
                im2col(&g, x, dst);
                dst
            };
            let o = &mut out[b * k * p..(b + 1) * k * p];
            gemm_nn(k, ck, p, weight.data(), col, o);
            if let Some(bias) = bias {
                for (row, &bv) in o.chunks_mut(p).zip(bias.data()) {
                    for v in row {
                        *v += bv;
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let (x, wt, bs) = (self.clone(), weight.clone(), bias.cloned());
        Ok(Tensor::from_op(vec![n, k, g.ho, g.wo], out, "conv2d", inputs, move |gout| {
            let gx = x.requires_grad().then(|| {
                let wt_t = transpose(k, ck, wt.data());
                let mut gx = vec![T::zero(); n * img];
                let mut dcol = vec![T::zero(); ck * p];
                for b in 0..n {
                    let go = &gout[b * k * p..(b + 1) * k * p];
                    if g.is_pointwise() {
                        gemm_nn(ck, k, p, &wt_t, go, &mut gx[b * img..(b + 1) * img]);
                    } else {
                        dcol.fill(T::zero());
                        gemm_nn(ck, k, p, &wt_t, go, &mut dcol);
                        col2im(&g, &dcol, &mut gx[b * img..(b + 1) * img]);
                    }
                }
                gx
            });
            // Accumulated as gwᵀ = Σ_b col·goᵀ so only the small go is transposed.
            let gw = wt.requires_grad().then(|| {
                let mut gw_t = vec![T::zero(); ck * k];
                for b in 0..n {
                    let go_t = transpose(k, p, &gout[b * k * p..(b + 1) * k * p]);
                    let col = if g.is_pointwise() {
                        &x.data()[b * img..(b + 1) * img]
                    } else {
                        &cols[b * ck * p..(b + 1) * ck * p]
                    };
                    gemm_nn(ck, p, k, col, &go_t, &mut gw_t);
                }
                transpose(ck, k, &gw_t)
            });
            let gb = bs.as_ref().filter(|b| b.requires_grad()).map(|_| {
                let mut gb = vec![T::zero(); k];
                for b in 0..n {
                    for (kk, row) in gout[b * k * p..(b + 1) * k * p].chunks(p).enumerate() {
                        gb[kk] += row.iter().fold(T::zero(), |s, &v| s + v);
                    }
                }
                gb
            });
            let mut res = vec![gx, gw];
            if bs.is_some() {
                res.push(gb);
            }
            res
        }))
    }

    /// Zero padding of the two spatial axes of [N, C, H, W].
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            bail!(Dimension, "pad2d needs [N, C, H, W], got {:?}", self.shape());
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..h {
                let src = &self.data()[(plane * h + y) * w..(plane * h + y + 1) * w];
                let d0 = (plane * ho + y + top) * wo + left;
                out[d0..d0 + w].copy_from_slice(src);
            }
        }
        Ok(Tensor::from_op(vec![n, c, ho, wo], out, "pad2d", vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(n * c * h * w);
            for plane in 0..n * c {
                for y in 0..h {
                    let s0 = (plane * ho + y + top) * wo + left;
                    gx.extend_from_slice(&g[s0..s0 + w]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour ×2 upsampling of [N, C, H, W].
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            bail!(Dimension, "upsample needs [N, C, H, W], got {:?}", self.shape());
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    out[(plane * ho + y) * wo + x] = self.data()[(plane * h + y / 2) * w + x / 2];
                }
            }
        }
        Ok(Tensor::from_op(vec![n, c, ho, wo], out, "upsample_nearest2x", vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                for y in 0..ho {
                    for x in 0..wo {
                        gx[(plane * h + y / 2) * w + x / 2] += g[(plane * ho + y) * wo + x];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// 2×2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2x2(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 || !self.dim(2).is_multiple_of(2) || !self.dim(3).is_multiple_of(2) {
            bail!(Dimension, "avg_pool2x2 needs [N, C, even H, even W], got {:?}", self.shape());
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    let at = |dy: usize, dx: usize| self.data()[(plane * h + 2 * y + dy) * w + 2 * x + dx];
                    out[(plane * ho + y) * wo + x] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
                }
            }
        }
        Ok(Tensor::from_op(vec![n, c, ho, wo], out, "avg_pool2x2", vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        gx[(plane * h + y) * w + x] = g[(plane * ho + y / 2) * wo + x / 2] * quarter;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Spatial mean: [N, C, H, W] → [N, C].
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            bail!(Dimension, "global_avg_pool needs [N, C, H, W], got {:?}", self.shape());
        }
        let (n, c) = (self.dim(0), self.dim(1));
        let s = self.dim(2) * self.dim(3);
        let sf = T::lit(s as f64);
        let out: Vec<T> = self
            .data()
            .chunks(s)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / sf)
            .collect();
        Ok(Tensor::from_op(vec![n, c], out, "global_avg_pool", vec![self.clone()], move |g| {
            let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v / sf, s)).collect();
            vec![Some(gx)]
        }))
    }

    /// Adds v [N, C] to every spatial position of x [N, C, H, W].
    pub fn add_per_channel(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 4 || v.shape() != [self.dim(0), self.dim(1)] {
            bail!(Dimension, "add_per_channel: x {:?}, v {:?}", self.shape(), v.shape());
        }
        let s = self.dim(2) * self.dim(3);
        let mut out = self.data().to_vec();
        for (plane, &bv) in out.chunks_mut(s).zip(v.data()) {
            for x in plane {
                *x += bv;
            }
        }
        let (xc, vc) = (self.clone(), v.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), out, "add_per_channel", vec![self.clone(), v.clone()], move |g| {
            let gx = xc.requires_grad().then(|| g.to_vec());
            let gv = vc
                .requires_grad()
                .then(|| g.chunks(s).map(|p| p.iter().fold(T::zero(), |a, &x| a + x)).collect());
            vec![gx, gv]
        }))
    }

    /// Mirror along the width axis of [N, C, H, W].
    pub fn flip_width(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            bail!(Dimension, "flip_width needs [N, C, H, W], got {:?}", self.shape());
        }
        let w = self.dim(3);
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(w) {
            row.reverse();
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, "flip_width", vec![self.clone()], move |g| {
            let mut gx = g.to_vec();
            for row in gx.chunks_mut(w) {
                row.reverse();
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Direct nested-loop cross-correlation, summing c, ki, kj in order.
    fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &[f32], stride: usize, pad: usize) -> Vec<f32> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (k, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; n * k * ho * wo];
        for bi in 0..n {
            for kk in 0..k {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f32;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    let xv = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    } else {
                                        0.0
                                    };
                                    acc += w.data()[((kk * c + ci) * kh + ki) * kw + kj] * xv;
                                }
                            }
                        }
                        out[((bi * k + kk) * ho + oy) * wo + ox] = acc + b[kk];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle_exactly() {
        let mut rng = Rng::new(21);
        let x = Tensor::<f32>::random_normal(&[1, 1, 4, 4], &mut rng);
        let w = Tensor::<f32>::random_normal(&[1, 1, 3, 3], &mut rng);
        let y = x.conv2d(&w, None, Conv2dOptions::same3x3()).unwrap();
        assert_eq!(y.data(), naive_conv(&x, &w, &[0.0], 1, 1).as_slice());

        let x = Tensor::<f32>::random_normal(&[2, 3, 7, 5], &mut rng);
        let w = Tensor::<f32>::random_normal(&[4, 3, 3, 3], &mut rng);
        let b = Tensor::<f32>::random_normal(&[4], &mut rng);
        for (stride, pad) in [(1, 1), (2, 0), (1, 0)] {
            if (7 + 2 * pad - 3) % stride != 0 || (5 + 2 * pad - 3) % stride != 0 {
                continue;
            }
            let y = x.conv2d(&w, Some(&b), Conv2dOptions { stride, pad }).unwrap();
            assert_eq!(y.data(), naive_conv(&x, &w, b.data(), stride, pad).as_slice());
        }
        let w1 = Tensor::<f32>::random_normal(&[2, 3, 1, 1], &mut rng);
        let y = x.conv2d(&w1, Some(&b.narrow_batch(0, 2).unwrap()), Conv2dOptions::default()).unwrap();
        assert_eq!(y.data(), naive_conv(&x, &w1, &b.data()[..2], 1, 0).as_slice());
    }

    #[test]
    fn geometry_sweep_matches_naive_and_adjoint() {
        let mut rng = Rng::new(22);
        for (h, wd) in [(5, 7), (6, 6), (3, 4)] {
            for k in 1..=4 {
                for stride in 1..=3 {
                    for pad in 0..=2 {
                        let padded = (h + 2 * pad, wd + 2 * pad);
                        if k > padded.0.min(padded.1) || (padded.0 - k) % stride != 0 || (padded.1 - k) % stride != 0 {
                            continue;
                        }
                        let opts = Conv2dOptions { stride, pad };
                        let xv = Tensor::<f32>::random_normal(&[2, 2, h, wd], &mut rng);
                        let x = Tensor::param(xv.data().to_vec(), xv.shape()).unwrap();
                        let w = Tensor::<f32>::random_normal(&[3, 2, k, k], &mut rng);
                        let y = x.conv2d(&w, None, opts).unwrap();
                        assert_eq!(y.data(), naive_conv(&xv, &w, &[0.0; 3], stride, pad).as_slice());
                        // <conv(e_i), r> summed over one-hot inputs equals the backward pass.
                        let r = Tensor::<f32>::random_normal(y.shape(), &mut rng);
                        y.mul(&r).unwrap().sum().backward().unwrap();
                        let gx = x.grad().unwrap();
                        for (i, g) in gx.iter().enumerate() {
                            let mut e = vec![0.0f32; xv.data().len()];
                            e[i] = 1.0;
                            let ye = naive_conv(&Tensor::from_vec(e, xv.shape()).unwrap(), &w, &[0.0; 3], stride, pad);
                            let want: f32 = ye.iter().zip(r.data()).map(|(a, b)| a * b).sum();
                            assert!((g - want).abs() < 1e-4, "k {k} s {stride} p {pad}: {g} vs {want}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f32>::random_normal(&[1, 1, 4, 4], &mut Rng::new(1));
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        let y = x.conv2d(&w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Tensor::<f32>::random_normal(&[2, 3, 5, 5], &mut Rng::new(1));
        let w = Tensor::<f32>::zeros(&[4, 3, 3, 3]);
        let b = Tensor::<f32>::from_vec(vec![0.5, -1.0, 2.0, 0.0], &[4]).unwrap();
        let y = x.conv2d(&w, Some(&b), Conv2dOptions::same3x3()).unwrap();
        for (i, plane) in y.data().chunks(25).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[i % 4]));
        }
    }

    #[test]
    fn non_integer_output_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let r = x.conv2d(&w, None, Conv2dOptions { stride: 2, pad: 1 });
        assert!(matches!(r, Err(crate::Error::Config(_))));
        let padded = x.pad2d(0, 1, 0, 1).unwrap();
        let y = padded.conv2d(&w, None, Conv2dOptions { stride: 2, pad: 0 }).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[1, 2, 7, 9]);
        let w = Tensor::<f32>::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&w, None, Conv2dOptions { stride: 2, pad: 0 }).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 4]);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = Tensor::<f64>::random_normal(&[2, 3, 3, 3], &mut Rng::new(4));
        let y = x.upsample_nearest2x().unwrap().avg_pool2x2().unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let x = Tensor::<f32>::random_normal(&[1, 3, 2, 5], &mut Rng::new(4));
        assert_eq!(x.flip_width().unwrap().flip_width().unwrap().data(), x.data());
    }
}
