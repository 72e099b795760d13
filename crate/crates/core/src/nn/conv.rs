//! Image kernels: im2col convolution, pooling, nearest upsampling and the
//! sliding box filter. All tensors are NCHW.

use super::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// 1x1, stride 1, unpadded: the column matrix is the input itself.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Column matrix of one sample, shape `(C*kh*kw, P)`.
fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow, p) = (g.out_h(), g.out_w(), g.p());
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..][..ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let lo = g.pad.saturating_sub(kx).min(ow);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(ow).max(lo);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let s0 = lo + kx - g.pad;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow, p) = (g.out_h(), g.out_w(), g.p());
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..][..g.w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx).min(ow);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(ow).max(lo);
                        let d0 = lo + kx - g.pad;
                        for (d, &v) in drow[d0..d0 + hi - lo].iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let (xs, os) = (g.c_in * g.h * g.w, g.c_out * p);
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); g.n * os];
    for n in 0..g.n {
        let xn = &x[n * xs..][..xs];
        let c: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        T::gemm(g.c_out, k, p, T::one(), w, false, c, false, T::zero(), &mut out[n * os..][..os]);
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.k(), g.p());
    let (xs, os) = (g.c_in * g.h * g.w, g.c_out * p);
    let mut cols = vec![T::zero(); k * p];
    let mut dw = want_dw.then(|| vec![T::zero(); g.c_out * k]);
    let mut dx = want_dx.then(|| vec![T::zero(); g.n * xs]);
    for n in 0..g.n {
        let gn = &grad[n * os..][..os];
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * xs..][..xs];
            let c: &[T] = if g.pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            T::gemm(g.c_out, p, k, T::one(), gn, false, c, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * xs..][..xs];
            if g.pointwise() {
                T::gemm(k, g.c_out, p, T::one(), w, true, gn, false, T::zero(), dxn);
            } else {
                T::gemm(k, g.c_out, p, T::one(), w, true, gn, false, T::zero(), &mut cols);
                col2im(g, &cols, dxn);
            }
        }
    }
    (dx, dw)
}

/// Non-overlapping mean pool with window `k` (floor on ragged edges).
pub fn avg_pool_forward<T: Float>(shape: &[usize], x: &[T], k: usize) -> (Vec<usize>, Vec<T>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::c((k * k) as f64);
    let mut out = vec![T::zero(); nc * oh * ow];
    for i in 0..nc {
        let plane = &x[i * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += plane[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[(i * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
    (vec![shape[0], shape[1], oh, ow], out)
}

pub fn avg_pool_backward<T: Float>(shape: &[usize], grad: &[T], k: usize) -> Vec<T> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::c((k * k) as f64);
    let mut dx = vec![T::zero(); nc * h * w];
    for i in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = grad[(i * oh + oy) * ow + ox] * inv;
                for dy in 0..k {
                    for ddx in 0..k {
                        dx[i * h * w + (oy * k + dy) * w + ox * k + ddx] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 stride-2 max pool. Returns output shape, values and the flat argmax
/// of each window (first maximum wins).
pub fn max_pool2_forward<T: Float>(shape: &[usize], x: &[T]) -> (Vec<usize>, Vec<T>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for i in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = i * h * w + oy * 2 * w + ox * 2;
                let mut best = base;
                for off in [1, w, w + 1] {
                    if x[base + off] > x[best] {
                        best = base + off;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (vec![shape[0], shape[1], oh, ow], out, arg)
}

pub fn upsample2_forward<T: Float>(shape: &[usize], x: &[T]) -> (Vec<usize>, Vec<T>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); nc * oh * ow];
    for i in 0..nc {
        for y in 0..oh {
            for xx in 0..ow {
                out[(i * oh + y) * ow + xx] = x[(i * h + y / 2) * w + xx / 2];
            }
        }
    }
    (vec![shape[0], shape[1], oh, ow], out)
}

pub fn upsample2_backward<T: Float>(shape: &[usize], grad: &[T]) -> Vec<T> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); nc * h * w];
    for i in 0..nc {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(i * h + y / 2) * w + xx / 2] += grad[(i * oh + y) * ow + xx];
            }
        }
    }
    dx
}

/// Mean over every `k x k` window fully inside the plane (stride 1).
pub fn box_filter_forward<T: Float>(shape: &[usize], x: &[T], k: usize) -> (Vec<usize>, Vec<T>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let inv = T::one() / T::c((k * k) as f64);
    let mut out = vec![T::zero(); nc * oh * ow];
    let mut rows = vec![T::zero(); h * ow];
    for i in 0..nc {
        let plane = &x[i * h * w..][..h * w];
        // horizontal window sums, then vertical
        for y in 0..h {
            for ox in 0..ow {
                rows[y * ow + ox] = plane[y * w + ox..][..k].iter().copied().sum();
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    s += rows[(oy + dy) * ow + ox];
                }
                out[(i * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
    (vec![shape[0], shape[1], oh, ow], out)
}

pub fn box_filter_backward<T: Float>(shape: &[usize], grad: &[T], k: usize) -> Vec<T> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let inv = T::one() / T::c((k * k) as f64);
    let mut dx = vec![T::zero(); nc * h * w];
    let mut cols = vec![T::zero(); h * ow];
    for i in 0..nc {
        let g = &grad[i * oh * ow..][..oh * ow];
        cols.fill(T::zero());
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] * inv;
                for dy in 0..k {
                    cols[(oy + dy) * ow + ox] += v;
                }
            }
        }
        let plane = &mut dx[i * h * w..][..h * w];
        for y in 0..h {
            for ox in 0..ow {
                let v = cols[y * ow + ox];
                for d in &mut plane[y * w + ox..][..k] {
                    *d += v;
                }
            }
        }
    }
    dx
}
