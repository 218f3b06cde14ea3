//! Tile-binned front-to-back alpha compositing and its exact adjoint.

use rayon::prelude::*;

use super::project::Splat;

pub const TILE: usize = 16;
/// Contributions with alpha below this are skipped (forward and adjoint alike).
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// 3-sigma footprint as a squared Mahalanobis radius.
pub const MAX_MAHALANOBIS_SQ: f64 = 9.0;
pub(crate) const DEPTH_EPS: f64 = 1e-8;

// Per-splat gradient record layout.
pub(crate) const G_MEAN: usize = 0;
pub(crate) const G_CONIC: usize = 2;
pub(crate) const G_OPACITY: usize = 5;
pub(crate) const G_COLOR: usize = 6;
pub(crate) const G_DEPTH: usize = 9;
pub(crate) const G_FEAT: usize = 10;

pub(crate) fn grad_stride(feat_dim: usize) -> usize {
    G_FEAT + feat_dim
}

/// Depth-sorted splats plus their optional feature payload.
pub(crate) struct Layer {
    pub splats: Vec<Splat>,
    pub feat_dim: usize,
    /// `splats.len() * feat_dim`, aligned with `splats`.
    pub feats: Vec<f64>,
    pub background: [f64; 3],
    pub width: usize,
    pub height: usize,
}

pub(crate) struct LayerImage {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub feat: Vec<f64>,
    /// Hash of the ordered (pixel, splat) contribution lists.
    pub signature: u64,
}

/// Per-pixel upstream gradients; `None` channels are treated as zero.
#[derive(Default, Clone, Copy)]
pub(crate) struct Upstream<'a> {
    pub color: Option<&'a [f64]>,
    pub alpha: Option<&'a [f64]>,
    pub depth: Option<&'a [f64]>,
    pub feat: Option<&'a [f64]>,
}

struct Tiles {
    tiles_x: usize,
    lists: Vec<Vec<u32>>,
}

impl Layer {
    fn bin(&self) -> Tiles {
        let tiles_x = self.width.div_ceil(TILE);
        let tiles_y = self.height.div_ceil(TILE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in self.splats.iter().enumerate() {
            let [x0, x1, y0, y1] = s.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    lists[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Tiles { tiles_x, lists }
    }

    fn tile_pixels(&self, tiles: &Tiles, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % tiles.tiles_x;
        let ty = tile / tiles.tiles_x;
        let xs = tx * TILE..((tx + 1) * TILE).min(self.width);
        let ys = ty * TILE..((ty + 1) * TILE).min(self.height);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }

    fn feat(&self, k: usize) -> &[f64] {
        &self.feats[k * self.feat_dim..(k + 1) * self.feat_dim]
    }
}

/// Opacity-weighted Gaussian value at pixel center `(x, y)`, or `None` when skipped.
#[inline]
fn evaluate(s: &Splat, x: usize, y: usize) -> Option<(f64, f64, f64, f64)> {
    let [x0, x1, y0, y1] = s.bbox;
    if x < x0 || x > x1 || y < y0 || y > y1 {
        return None;
    }
    let dx = x as f64 - s.mean[0];
    let dy = y as f64 - s.mean[1];
    let [a, b, c] = s.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if q > MAX_MAHALANOBIS_SQ {
        return None;
    }
    let g = (-0.5 * q).exp();
    let alpha = s.opacity * g;
    if alpha < MIN_ALPHA {
        return None;
    }
    Some((alpha, g, dx, dy))
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    // FNV-1a over the 8 bytes of v
    let mut h = h;
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

struct TileOut {
    color: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    feat: Vec<f64>,
    hash: u64,
}

pub(crate) fn forward(layer: &Layer) -> LayerImage {
    let (w, h, fd) = (layer.width, layer.height, layer.feat_dim);
    let tiles = layer.bin();
    let outs: Vec<TileOut> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &tiles.lists[tile];
            let mut out = TileOut {
                color: Vec::new(),
                alpha: Vec::new(),
                depth: Vec::new(),
                feat: Vec::new(),
                hash: FNV_OFFSET,
            };
            let mut f = vec![0.0; fd];
            for (x, y) in layer.tile_pixels(&tiles, tile) {
                let mut t = 1.0;
                let mut col = [0.0; 3];
                let mut acc = 0.0;
                let mut dnum = 0.0;
                f.iter_mut().for_each(|v| *v = 0.0);
                for &k in list {
                    let k = k as usize;
                    let s = &layer.splats[k];
                    let Some((a, _, _, _)) = evaluate(s, x, y) else {
                        continue;
                    };
                    out.hash = mix(mix(out.hash, (y * w + x) as u64), s.source as u64);
                    let wgt = a * t;
                    for ch in 0..3 {
                        col[ch] += s.color[ch] * wgt;
                    }
                    acc += wgt;
                    dnum += s.depth * wgt;
                    for (fv, sv) in f.iter_mut().zip(layer.feat(k)) {
                        *fv += sv * wgt;
                    }
                    t *= 1.0 - a;
                }
                for ch in 0..3 {
                    out.color.push(col[ch] + t * layer.background[ch]);
                }
                out.alpha.push(acc);
                out.depth.push(dnum / acc.max(DEPTH_EPS));
                out.feat.extend_from_slice(&f);
            }
            out
        })
        .collect();

    let mut img = LayerImage {
        color: vec![0.0; w * h * 3],
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
        feat: vec![0.0; w * h * fd],
        signature: FNV_OFFSET,
    };
    for (tile, out) in outs.into_iter().enumerate() {
        img.signature = mix(img.signature, out.hash);
        for (n, (x, y)) in layer.tile_pixels(&tiles, tile).enumerate() {
            let i = y * w + x;
            img.color[i * 3..i * 3 + 3].copy_from_slice(&out.color[n * 3..n * 3 + 3]);
            img.alpha[i] = out.alpha[n];
            img.depth[i] = out.depth[n];
            img.feat[i * fd..(i + 1) * fd].copy_from_slice(&out.feat[n * fd..(n + 1) * fd]);
        }
    }
    img
}

struct Contribution {
    k: usize,
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    trans: f64,
}

/// Screen-space gradients, `layer.splats.len() * grad_stride(feat_dim)` values.
pub(crate) fn backward(layer: &Layer, up: &Upstream) -> Vec<f64> {
    let (w, fd) = (layer.width, layer.feat_dim);
    let stride = grad_stride(fd);
    let tiles = layer.bin();
    let locals: Vec<Vec<f64>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &tiles.lists[tile];
            let mut local = vec![0.0; list.len() * stride];
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut behind_f = vec![0.0; fd];
            for (x, y) in layer.tile_pixels(&tiles, tile) {
                let i = y * w + x;
                let gc = up.color.map(|c| [c[i * 3], c[i * 3 + 1], c[i * 3 + 2]]);
                let ga = up.alpha.map_or(0.0, |a| a[i]);
                let gd = up.depth.map_or(0.0, |d| d[i]);
                let gf = up.feat.map(|f| &f[i * fd..(i + 1) * fd]);
                if gc.is_none() && ga == 0.0 && gd == 0.0 && gf.is_none() {
                    continue;
                }

                contribs.clear();
                let mut t = 1.0;
                let mut acc = 0.0;
                let mut dnum = 0.0;
                for (n, &k) in list.iter().enumerate() {
                    let s = &layer.splats[k as usize];
                    let Some((alpha, gauss, dx, dy)) = evaluate(s, x, y) else {
                        continue;
                    };
                    contribs.push(Contribution {
                        k: n,
                        alpha,
                        gauss,
                        dx,
                        dy,
                        trans: t,
                    });
                    acc += alpha * t;
                    dnum += s.depth * alpha * t;
                    t *= 1.0 - alpha;
                }
                if contribs.is_empty() {
                    continue;
                }
                let norm = acc.max(DEPTH_EPS);
                let depth = dnum / norm;
                let g_dnum = gd / norm;
                let g_acc = if acc > DEPTH_EPS { ga - gd * depth / acc } else { ga };

                let mut behind_c = layer.background;
                let mut behind_a = 0.0;
                let mut behind_d = 0.0;
                behind_f.iter_mut().for_each(|v| *v = 0.0);
                for c in contribs.iter().rev() {
                    let k = list[c.k] as usize;
                    let s = &layer.splats[k];
                    let rec = &mut local[c.k * stride..(c.k + 1) * stride];
                    let wgt = c.alpha * c.trans;
                    let mut d_alpha = 0.0;
                    if let Some(gc) = gc {
                        for ch in 0..3 {
                            rec[G_COLOR + ch] += gc[ch] * wgt;
                            d_alpha += gc[ch] * (s.color[ch] - behind_c[ch]);
                            behind_c[ch] = s.color[ch] * c.alpha + (1.0 - c.alpha) * behind_c[ch];
                        }
                    }
                    d_alpha += g_acc * (1.0 - behind_a);
                    behind_a = c.alpha + (1.0 - c.alpha) * behind_a;
                    rec[G_DEPTH] += g_dnum * wgt;
                    d_alpha += g_dnum * (s.depth - behind_d);
                    behind_d = s.depth * c.alpha + (1.0 - c.alpha) * behind_d;
                    if let Some(gf) = gf {
                        let sf = layer.feat(k);
                        for d in 0..fd {
                            rec[G_FEAT + d] += gf[d] * wgt;
                            d_alpha += gf[d] * (sf[d] - behind_f[d]);
                            behind_f[d] = sf[d] * c.alpha + (1.0 - c.alpha) * behind_f[d];
                        }
                    }
                    d_alpha *= c.trans;

                    rec[G_OPACITY] += d_alpha * c.gauss;
                    let d_q = -0.5 * c.gauss * d_alpha * s.opacity;
                    rec[G_CONIC] += d_q * c.dx * c.dx;
                    rec[G_CONIC + 1] += d_q * c.dx * c.dy;
                    rec[G_CONIC + 2] += d_q * c.dy * c.dy;
                    let [ca, cb, cc] = s.conic;
                    rec[G_MEAN] += d_q * (-2.0 * (ca * c.dx + cb * c.dy));
                    rec[G_MEAN + 1] += d_q * (-2.0 * (cb * c.dx + cc * c.dy));
                }
            }
            local
        })
        .collect();

    let mut grads = vec![0.0; layer.splats.len() * stride];
    for (tile, local) in locals.iter().enumerate() {
        for (n, &k) in tiles.lists[tile].iter().enumerate() {
            let k = k as usize;
            let dst = &mut grads[k * stride..(k + 1) * stride];
            for (d, s) in dst.iter_mut().zip(&local[n * stride..(n + 1) * stride]) {
                *d += s;
            }
        }
    }
    grads
}
