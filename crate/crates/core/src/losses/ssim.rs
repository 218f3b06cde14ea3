//! Gaussian-window SSIM over full ("valid") windows, with its gradient.

use crate::error::{Error, Result};
use crate::maps::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn gaussian_window() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable correlation keeping only fully covered windows.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of `filter_valid`.
fn filter_valid_transpose(g: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).cloned().collect()
}

fn check(a: &Image, b: &Image) -> Result<()> {
    a.same_shape(b)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::dims(format!(
            "image {}x{} is smaller than the {WINDOW}x{WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    Ok(())
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Moments {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    Moments {
        mx: filter_valid(x, w, h, k),
        my: filter_valid(y, w, h, k),
        exx: filter_valid(&xx, w, h, k),
        eyy: filter_valid(&yy, w, h, k),
        exy: filter_valid(&xy, w, h, k),
    }
}

/// Mean structural similarity, averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..3 {
        let m = moments(&channel(a, ch), &channel(b, ch), w, h, &k);
        let n = m.mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (mx, my) = (m.mx[i], m.my[i]);
            let sxx = m.exx[i] - mx * mx;
            let syy = m.eyy[i] - my * my;
            let sxy = m.exy[i] - mx * my;
            acc += ((2.0 * mx * my + C1) * (2.0 * sxy + C2))
                / ((mx * mx + my * my + C1) * (sxx + syy + C2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// SSIM and its gradient with respect to the first image.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = gaussian_window();
    let mut total = 0.0;
    let mut grad = vec![0.0; a.data.len()];
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let m = moments(&x, &y, w, h, &k);
        let n = m.mx.len();
        let scale = 1.0 / (3.0 * n as f64);
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        let mut acc = 0.0;
        for i in 0..n {
            let (mx, my) = (m.mx[i], m.my[i]);
            let sxx = m.exx[i] - mx * mx;
            let syy = m.eyy[i] - my * my;
            let sxy = m.exy[i] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = sxx + syy + C2;
            let s = (a1 * a2) / (b1 * b2);
            acc += s;
            let ds_a1 = a2 / (b1 * b2);
            let ds_a2 = a1 / (b1 * b2);
            let ds_b1 = -s / b1;
            let ds_b2 = -s / b2;
            g_mu[i] = scale
                * (ds_a1 * 2.0 * my + ds_b1 * 2.0 * mx - ds_a2 * 2.0 * my - ds_b2 * 2.0 * mx);
            g_xx[i] = scale * ds_b2;
            g_xy[i] = scale * 2.0 * ds_a2;
        }
        total += acc / n as f64;
        let t_mu = filter_valid_transpose(&g_mu, w, h, &k);
        let t_xx = filter_valid_transpose(&g_xx, w, h, &k);
        let t_xy = filter_valid_transpose(&g_xy, w, h, &k);
        for p in 0..w * h {
            grad[p * 3 + ch] = t_mu[p] + 2.0 * x[p] * t_xx[p] + y[p] * t_xy[p];
        }
    }
    Ok((total / 3.0, grad))
}
