//! Raw NCHW kernels used by the graph ops. Each forward has a matching
//! backward that the graph calls with the upstream gradient.

use crate::{ShapeError, Tensor};

/// Upper bound on the number of `f64`s in one im2col buffer (16 MiB).
const COLS_BUDGET: usize = 1 << 21;

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above spell out the extents matrixmultiply
    // reads and writes; every caller passes slices covering them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self, ShapeError> {
        let (n, ci, h, w) = x.dims4()?;
        let (co, wci, kh, kw) = weight.dims4()?;
        if wci != ci {
            return Err(ShapeError::new(format!(
                "conv2d: input has {ci} channels but kernel expects {wci}"
            )));
        }
        if stride == 0 {
            return Err(ShapeError::new("conv2d: stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(ShapeError::new(format!(
                "conv2d: {kh}×{kw} kernel larger than padded {h}×{w} input"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn rows_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s)
        };
        let last_ix = self.w + self.pad - 1;
        if last_ix < kx {
            return (0, 0);
        }
        let hi = ((last_ix - kx) / s + 1).min(self.wo);
        (lo.min(hi), hi)
    }
}

fn im2col(g: &ConvGeom, x: &[f64], oy0: usize, oy1: usize, cols: &mut [f64]) {
    let p = (oy1 - oy0) * g.wo;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for oy in oy0..oy1 {
                    let seg = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(0.0);
                    seg[hi..].fill(0.0);
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        seg[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            seg[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], oy0: usize, oy1: usize, dx: &mut [f64]) {
    let p = (oy1 - oy0) * g.wo;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let seg = &src[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += seg[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor, ShapeError> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.co {
            return Err(ShapeError::new(format!(
                "conv2d: bias has {} entries for {} output channels",
                b.len(),
                g.co
            )));
        }
    }
    let mut out = Tensor::zeros(&[g.n, g.co, g.ho, g.wo]);
    let in_plane = g.ci * g.h * g.w;
    let out_plane = g.co * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    let k = g.k();
    let wdata = weight.data();
    let rows = g.rows_per_chunk();
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * rows * g.wo]
    };
    for n in 0..g.n {
        let xn = &x.data()[n * in_plane..(n + 1) * in_plane];
        let yn = &mut out.data_mut()[n * out_plane..(n + 1) * out_plane];
        if g.pointwise() {
            gemm(g.co, g.ci, hw_out, wdata, g.ci, 1, xn, hw_out, 1, 0.0, yn, hw_out, 1);
        } else {
            let mut oy0 = 0;
            while oy0 < g.ho {
                let oy1 = (oy0 + rows).min(g.ho);
                let p = (oy1 - oy0) * g.wo;
                im2col(&g, xn, oy0, oy1, &mut cols);
                gemm(
                    g.co,
                    k,
                    p,
                    wdata,
                    k,
                    1,
                    &cols,
                    p,
                    1,
                    0.0,
                    &mut yn[oy0 * g.wo..],
                    hw_out,
                    1,
                );
                oy0 = oy1;
            }
        }
        if let Some(b) = bias {
            for (co, bv) in b.data().iter().enumerate() {
                for v in &mut yn[co * hw_out..(co + 1) * hw_out] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads, ShapeError> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    let in_plane = g.ci * g.h * g.w;
    let out_plane = g.co * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    let k = g.k();
    let wdata = weight.data();
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut db = Tensor::zeros(&[g.co]);
    let rows = g.rows_per_chunk();
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * rows * g.wo]
    };
    let mut dcols = if g.pointwise() || !need_dx {
        Vec::new()
    } else {
        vec![0.0; k * rows * g.wo]
    };
    for n in 0..g.n {
        let xn = &x.data()[n * in_plane..(n + 1) * in_plane];
        let dyn_ = &dy.data()[n * out_plane..(n + 1) * out_plane];
        for (co, acc) in db.data_mut().iter_mut().enumerate() {
            *acc += dyn_[co * hw_out..(co + 1) * hw_out].iter().sum::<f64>();
        }
        if g.pointwise() {
            gemm(g.co, hw_out, g.ci, dyn_, hw_out, 1, xn, 1, hw_out, 1.0, dw.data_mut(), g.ci, 1);
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx.data_mut()[n * in_plane..(n + 1) * in_plane];
                gemm(g.ci, g.co, hw_out, wdata, 1, g.ci, dyn_, hw_out, 1, 0.0, dxn, hw_out, 1);
            }
            continue;
        }
        let mut oy0 = 0;
        while oy0 < g.ho {
            let oy1 = (oy0 + rows).min(g.ho);
            let p = (oy1 - oy0) * g.wo;
            let dy_chunk = &dyn_[oy0 * g.wo..];
            im2col(&g, xn, oy0, oy1, &mut cols);
            gemm(g.co, p, k, dy_chunk, hw_out, 1, &cols, 1, p, 1.0, dw.data_mut(), k, 1);
            if let Some(dx) = dx.as_mut() {
                gemm(k, g.co, p, wdata, 1, k, dy_chunk, hw_out, 1, 0.0, &mut dcols, p, 1);
                let dxn = &mut dx.data_mut()[n * in_plane..(n + 1) * in_plane];
                col2im(&g, &dcols, oy0, oy1, dxn);
            }
            oy0 = oy1;
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Max pooling; also returns the flat input index chosen for every output.
pub(crate) fn max_pool2d_forward(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<usize>), ShapeError> {
    let (n, c, h, w) = x.dims4()?;
    if kernel == 0 || stride == 0 || pad >= kernel || h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(ShapeError::new(format!(
            "max_pool2d: invalid kernel {kernel} / stride {stride} / pad {pad} for {h}×{w}"
        )));
    }
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if xd[idx] > best || best_idx == usize::MAX {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                od[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn max_pool2d_backward(in_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (g, &i) in dy.data().iter().zip(argmax) {
        d[i] += g;
    }
    dx
}

/// Source taps `(i0, i1, frac)` for ×2 bilinear upsampling with half-pixel
/// centres, clamped at the borders.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x_forward(x: &Tensor) -> Result<Tensor, ShapeError> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(ShapeError::new("upsample2x: empty spatial extent"));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
                let bot = r1[x0] * (1.0 - lx) + r1[x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2x_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(in_shape);
    let dd = dx.data_mut();
    let gd = dy.data();
    for plane in 0..n * c {
        let g = &gd[plane * ho * wo..(plane + 1) * ho * wo];
        let d = &mut dd[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                d[y0 * w + x1] += v * (1.0 - ly) * lx;
                d[y1 * w + x0] += v * ly * (1.0 - lx);
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over the N, H and W axes.
pub(crate) fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>), ShapeError> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += d[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Tensor {
        let g = ConvGeom::new(x, wt, stride, pad).unwrap();
        Tensor::from_fn(&[g.n, g.co, g.ho, g.wo], |i| {
            let ox = i % g.wo;
            let oy = (i / g.wo) % g.ho;
            let co = (i / (g.wo * g.ho)) % g.co;
            let n = i / (g.wo * g.ho * g.co);
            let mut acc = 0.0;
            for ci in 0..g.ci {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            continue;
                        }
                        acc += x.data()[((n * g.ci + ci) * g.h + iy as usize) * g.w + ix as usize]
                            * wt.data()[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 1, 0), (1, 2, 0)] {
            let x = pseudo(&[2, 3, 9, 10], 1);
            let w = pseudo(&[4, 3, k, k], 2);
            let fast = conv2d_forward(&x, &w, None, s, p).unwrap();
            let slow = naive_conv(&x, &w, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <dy, conv(x)> is bilinear, so <dy, conv(dx_dir)> must equal <dx, dx_dir>.
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = pseudo(&[2, 3, 8, 6], 3);
            let w = pseudo(&[5, 3, k, k], 4);
            let y = conv2d_forward(&x, &w, None, s, p).unwrap();
            let dy = pseudo(y.shape(), 5);
            let grads = conv2d_backward(&x, &w, &dy, s, p, true).unwrap();
            let dir = pseudo(x.shape(), 6);
            let lhs = dy.dot(&conv2d_forward(&dir, &w, None, s, p).unwrap());
            let rhs = grads.dx.unwrap().dot(&dir);
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
            let wdir = pseudo(w.shape(), 7);
            let lhs = dy.dot(&conv2d_forward(&x, &wdir, None, s, p).unwrap());
            assert!((lhs - grads.dw.dot(&wdir)).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::full(&[1, 2, 3, 5], 0.25);
        let y = upsample2x_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 10]);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_interpolates_interior() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample2x_forward(&x).unwrap();
        // Half-pixel centres: outputs sample at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let (y, idx) = max_pool2d_forward(&x, 3, 2, 1).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(idx, vec![5, 7, 13, 15]);
    }
}
