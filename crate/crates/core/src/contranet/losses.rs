//! Training objectives of the conditional generator, on the tape and as
//! plain scalar functions.

use crate::error::{Error, Result};
use crate::nn::{Float, Var};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// `0.5 * sum_j (exp(lv_j) + mu_j^2 - 1 - lv_j)` per row of `N x J` inputs,
/// where `lv` is the log-variance. Returns shape `[N]`.
pub fn kl_var<'t, T: Float>(mu: Var<'t, T>, logvar: Var<'t, T>) -> Var<'t, T> {
    let n = mu.shape()[0];
    logvar.exp().add(mu.sqr()).sub(logvar).add_scalar(-T::one()).sum_keep(&[1]).reshape(vec![n]).mul_scalar(T::c(0.5))
}

/// Per-sample SSIM (mean over valid 7x7 windows and channels) of NCHW inputs,
/// population statistics. Returns shape `[N]`.
pub fn ssim_var<'t, T: Float>(x: Var<'t, T>, y: Var<'t, T>) -> Var<'t, T> {
    let n = x.shape()[0];
    let k = SSIM_WINDOW;
    let (c1, c2) = (T::c(SSIM_C1), T::c(SSIM_C2));
    let mx = x.box_filter(k);
    let my = y.box_filter(k);
    let sxx = x.sqr().box_filter(k).sub(mx.sqr());
    let syy = y.sqr().box_filter(k).sub(my.sqr());
    let sxy = x.mul(y).box_filter(k).sub(mx.mul(my));
    let two = T::c(2.0);
    let num = mx.mul(my).mul_scalar(two).add_scalar(c1).mul(sxy.mul_scalar(two).add_scalar(c2));
    let den = mx.sqr().add(my.sqr()).add_scalar(c1).mul(sxx.add(syy).add_scalar(c2));
    num.div(den).mean_keep(&[1, 2, 3]).reshape(vec![n])
}

/// `||x - x'||^2 / D + lambda * (1 - SSIM)` per sample. Returns `[N]`.
pub fn distance_var<'t, T: Float>(x: Var<'t, T>, xr: Var<'t, T>, lambda: f64) -> Var<'t, T> {
    let n = x.shape()[0];
    let mse = x.sub(xr).sqr().mean_keep(&[1, 2, 3]).reshape(vec![n]);
    let ssim = ssim_var(x, xr);
    mse.add(ssim.neg().add_scalar(T::one()).mul_scalar(T::c(lambda)))
}

/// Non-saturating generator term `-log sigmoid(s)` = `softplus(-s)`.
pub fn gen_adv_var<'t, T: Float>(score: Var<'t, T>) -> Var<'t, T> {
    score.neg().softplus()
}

/// `-log sigmoid(s_real) - log(1 - sigmoid(s_fake))`, per sample.
pub fn dis_var<'t, T: Float>(s_real: Var<'t, T>, s_fake: Var<'t, T>) -> Var<'t, T> {
    s_real.neg().softplus().add(s_fake.softplus())
}

/// Scalar KL between `N(mu, var)` and `N(0, 1)` summed over coordinates.
pub fn kl_term(mu: &[f64], var: &[f64]) -> Result<f64> {
    if mu.len() != var.len() {
        return Err(Error::Shape { expected: vec![mu.len()], got: vec![var.len()] });
    }
    if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Precondition(format!("variance {v} must be positive")));
    }
    Ok(0.5 * mu.iter().zip(var).map(|(m, s)| s + m * m - 1.0 - s.ln()).sum::<f64>())
}

fn check_same(a: &crate::data::Image, b: &crate::data::Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { expected: a.shape().to_vec(), got: b.shape().to_vec() });
    }
    Ok(())
}

/// SSIM of two images with a uniform 7x7 window over valid positions,
/// averaged over windows and channels.
pub fn ssim(a: &crate::data::Image, b: &crate::data::Image) -> Result<f64> {
    check_same(a, b)?;
    let [c, h, w] = a.shape();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Precondition(format!("images smaller than the {k}x{k} SSIM window")));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let kk = (k * k) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.channel(ch), b.channel(ch));
        // summed-area tables of x, y, x^2, y^2, xy
        let mut s = vec![[0.0f64; 5]; (h + 1) * (w + 1)];
        for yy in 0..h {
            for xx in 0..w {
                let (u, v) = (pa[yy * w + xx] as f64, pb[yy * w + xx] as f64);
                let vals = [u, v, u * u, v * v, u * v];
                for q in 0..5 {
                    s[(yy + 1) * (w + 1) + xx + 1][q] = vals[q] + s[yy * (w + 1) + xx + 1][q] + s[(yy + 1) * (w + 1) + xx][q]
                        - s[yy * (w + 1) + xx][q];
                }
            }
        }
        let rect = |q: usize, y0: usize, x0: usize| {
            s[(y0 + k) * (w + 1) + x0 + k][q] - s[y0 * (w + 1) + x0 + k][q] - s[(y0 + k) * (w + 1) + x0][q]
                + s[y0 * (w + 1) + x0][q]
        };
        for y0 in 0..oh {
            for x0 in 0..ow {
                let mx = rect(0, y0, x0) / kk;
                let my = rect(1, y0, x0) / kk;
                let vx = rect(2, y0, x0) / kk - mx * mx;
                let vy = rect(3, y0, x0) / kk - my * my;
                let cxy = rect(4, y0, x0) / kk - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

/// `||a - b||^2 / D + lambda * (1 - SSIM(a, b))`.
pub fn reconstruction_distance(a: &crate::data::Image, b: &crate::data::Image, lambda: f64) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).sum::<f64>()
        / a.dim() as f64;
    Ok(mse + lambda * (1.0 - ssim(a, b)?))
}
