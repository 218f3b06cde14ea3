//! Instance-guided contrastive loss over per-instance mean anchors.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::norm;
use crate::error::{Error, Result};
use crate::maps::{FeatureMap, InstanceMask};

pub const DEFAULT_SAMPLE_BUDGET: usize = 4096;

/// Which foreground pixels enter the positive and denominator sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Full,
    /// At most `budget` pixels, split across instances proportionally to area.
    Stratified { budget: usize, seed: u64 },
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Stratified {
            budget: DEFAULT_SAMPLE_BUDGET,
            seed: 0,
        }
    }
}

struct Instance {
    /// Every pixel of the instance, ascending.
    pixels: Vec<usize>,
    /// Unnormalized mean feature over `pixels`.
    anchor: Vec<f64>,
    /// Range into the sampled-pixel list.
    range: std::ops::Range<usize>,
}

struct Setup {
    instances: Vec<Instance>,
    /// Sampled pixels grouped by instance.
    sampled: Vec<usize>,
    /// Unit features of `sampled` (zero when the feature has zero norm).
    unit: Vec<f64>,
    norms: Vec<f64>,
}

fn quotas(sizes: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if budget >= total {
        return sizes.to_vec();
    }
    let mut q: Vec<usize> = sizes.iter().map(|&n| n * budget / total).collect();
    let mut rest = budget - q.iter().sum::<usize>();
    // largest remainder first, ties by instance order
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&k| std::cmp::Reverse((sizes[k] * budget) % total));
    for k in order {
        if rest == 0 {
            break;
        }
        if q[k] < sizes[k] {
            q[k] += 1;
            rest -= 1;
        }
    }
    q
}

fn setup(feat: &FeatureMap, mask: &InstanceMask, alpha: f64, sampling: Sampling) -> Result<Setup> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("contrastive temperature must be > 0"));
    }
    if feat.width != mask.width || feat.height != mask.height {
        return Err(Error::dims(format!(
            "features {}x{} vs mask {}x{}",
            feat.width, feat.height, mask.width, mask.height
        )));
    }
    if feat.dim == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &id) in mask.data.iter().enumerate() {
        if id != 0 {
            groups.entry(id).or_default().push(i);
        }
    }
    if groups.is_empty() {
        return Err(Error::NoForeground);
    }
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let (quota, mut rng) = match sampling {
        Sampling::Full => (sizes.clone(), None),
        Sampling::Stratified { budget, seed } => (quotas(&sizes, budget), Some(ChaCha8Rng::seed_from_u64(seed))),
    };

    let d = feat.dim;
    let mut instances = Vec::new();
    let mut sampled = Vec::new();
    for ((id, pixels), q) in groups.into_iter().zip(quota) {
        if q == 0 {
            log::warn!("instance {id} received no sampled pixels and is dropped");
            continue;
        }
        let start = sampled.len();
        match rng.as_mut() {
            Some(rng) if q < pixels.len() => {
                let mut pick = rand::seq::index::sample(rng, pixels.len(), q).into_vec();
                pick.sort_unstable();
                sampled.extend(pick.into_iter().map(|k| pixels[k]));
            }
            _ => sampled.extend_from_slice(&pixels),
        }
        let mut anchor = vec![0.0; d];
        for &p in &pixels {
            for (a, f) in anchor.iter_mut().zip(feat.at(p)) {
                *a += f;
            }
        }
        let inv = 1.0 / pixels.len() as f64;
        anchor.iter_mut().for_each(|a| *a *= inv);
        instances.push(Instance {
            pixels,
            anchor,
            range: start..sampled.len(),
        });
    }
    if instances.is_empty() {
        return Err(Error::NoForeground);
    }

    let mut unit = vec![0.0; sampled.len() * d];
    let mut norms = vec![0.0; sampled.len()];
    for (n, &p) in sampled.iter().enumerate() {
        let f = feat.at(p);
        let l = norm(f);
        norms[n] = l;
        if l > 0.0 {
            for (u, v) in unit[n * d..(n + 1) * d].iter_mut().zip(f) {
                *u = v / l;
            }
        }
    }
    Ok(Setup {
        instances,
        sampled,
        unit,
        norms,
    })
}

fn unit_of(v: &[f64]) -> (Vec<f64>, f64) {
    let l = norm(v);
    if l > 0.0 {
        (v.iter().map(|x| x / l).collect(), l)
    } else {
        (vec![0.0; v.len()], 0.0)
    }
}

/// Per-anchor scaled similarities `cos(anchor, f_j) / alpha` over sampled pixels.
fn logits(s: &Setup, a_hat: &[f64], alpha: f64, d: usize) -> Vec<f64> {
    s.unit
        .chunks_exact(d)
        .map(|u| u.iter().zip(a_hat).map(|(x, y)| x * y).sum::<f64>() / alpha)
        .collect()
}

/// `-log(sum_pos exp / sum_all exp)` with a shared max shift.
fn anchor_term(z: &[f64], pos: std::ops::Range<usize>) -> (f64, f64, f64, f64) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let den: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let num: f64 = z[pos].iter().map(|v| (v - m).exp()).sum();
    (den.ln() - num.ln(), m, num, den)
}

/// Contrastive loss averaged over instances that received samples.
pub fn instance_contrastive_loss(feat: &FeatureMap, mask: &InstanceMask, alpha: f64, sampling: Sampling) -> Result<f64> {
    let s = setup(feat, mask, alpha, sampling)?;
    let d = feat.dim;
    let terms: Vec<f64> = s
        .instances
        .par_iter()
        .map(|inst| {
            let (a_hat, _) = unit_of(&inst.anchor);
            let z = logits(&s, &a_hat, alpha, d);
            anchor_term(&z, inst.range.clone()).0
        })
        .collect();
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Loss and its gradient with respect to every pixel feature.
pub fn instance_contrastive_loss_with_grad(
    feat: &FeatureMap,
    mask: &InstanceMask,
    alpha: f64,
    sampling: Sampling,
) -> Result<(f64, Vec<f64>)> {
    let s = setup(feat, mask, alpha, sampling)?;
    let d = feat.dim;
    let k_inv = 1.0 / s.instances.len() as f64;
    let mut grad = vec![0.0; feat.data.len()];
    let mut total = 0.0;
    for inst in &s.instances {
        let (a_hat, a_norm) = unit_of(&inst.anchor);
        let z = logits(&s, &a_hat, alpha, d);
        let (term, m, num, den) = anchor_term(&z, inst.range.clone());
        total += term;
        let mut g_anchor = vec![0.0; d];
        for (n, &zj) in z.iter().enumerate() {
            let e = (zj - m).exp();
            let mut c = e / den;
            if inst.range.contains(&n) {
                c -= e / num;
            }
            // d/dcos through the temperature
            let c = c * k_inv / alpha;
            if c == 0.0 {
                continue;
            }
            let cos = zj * alpha;
            let u = &s.unit[n * d..(n + 1) * d];
            if s.norms[n] > 0.0 {
                let p = s.sampled[n];
                let g = &mut grad[p * d..(p + 1) * d];
                for k in 0..d {
                    g[k] += c * (a_hat[k] - cos * u[k]) / s.norms[n];
                }
            }
            if a_norm > 0.0 {
                for k in 0..d {
                    g_anchor[k] += c * (u[k] - cos * a_hat[k]) / a_norm;
                }
            }
        }
        let share = 1.0 / inst.pixels.len() as f64;
        for &p in &inst.pixels {
            for (g, ga) in grad[p * d..(p + 1) * d].iter_mut().zip(&g_anchor) {
                *g += ga * share;
            }
        }
    }
    Ok((total * k_inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct double loop: no shift, cosine recomputed per pair.
    fn brute(feat: &FeatureMap, mask: &InstanceMask, alpha: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            }
        };
        let ids = mask.ids();
        let mut loss = 0.0;
        for &k in &ids {
            let mut anchor = vec![0.0; feat.dim];
            let mut n = 0.0;
            for i in 0..mask.data.len() {
                if mask.data[i] == k {
                    for (a, f) in anchor.iter_mut().zip(feat.at(i)) {
                        *a += f;
                    }
                    n += 1.0;
                }
            }
            anchor.iter_mut().for_each(|a| *a /= n);
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..mask.data.len() {
                if mask.data[j] == 0 {
                    continue;
                }
                let e = (cos(&anchor, feat.at(j)) / alpha).exp();
                den += e;
                if mask.data[j] == k {
                    num += e;
                }
            }
            loss -= (num / den).ln();
        }
        loss / ids.len() as f64
    }

    fn random_fixture(rng: &mut ChaCha8Rng, w: usize, h: usize, d: usize, k: u16) -> (FeatureMap, InstanceMask) {
        let data = (0..w * h * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ids = (0..w * h).map(|_| rng.gen_range(0..=k)).collect();
        (
            FeatureMap::from_data(w, h, d, data).unwrap(),
            InstanceMask::from_data(w, h, ids).unwrap(),
        )
    }

    #[test]
    fn single_instance_is_zero() {
        let f = FeatureMap::from_data(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5]).unwrap();
        let m = InstanceMask::from_data(2, 2, vec![3; 4]).unwrap();
        assert!(instance_contrastive_loss(&f, &m, 0.07, Sampling::Full).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_features_give_ln2() {
        let f = FeatureMap::from_data(4, 4, 3, [0.2, 0.5, -0.1].repeat(16)).unwrap();
        let m = InstanceMask::from_data(4, 4, (0..16).map(|i| 1 + (i % 2) as u16).collect()).unwrap();
        let l = instance_contrastive_loss(&f, &m, 0.07, Sampling::Full).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_instances_match_brute_force() {
        let ids: Vec<u16> = (0..16).map(|i| if i < 8 { 1 } else { 2 }).collect();
        let data: Vec<f64> = ids.iter().flat_map(|&k| if k == 1 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        let f = FeatureMap::from_data(4, 4, 2, data).unwrap();
        let m = InstanceMask::from_data(4, 4, ids).unwrap();
        let l = instance_contrastive_loss(&f, &m, 0.1, Sampling::Full).unwrap();
        assert!((l - brute(&f, &m, 0.1)).abs() < 1e-9);
        assert!(l < 1e-4);
    }

    #[test]
    fn random_fixtures_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (f, m) = random_fixture(&mut rng, 9, 7, 5, 4);
            let a = instance_contrastive_loss(&f, &m, 0.07, Sampling::Full).unwrap();
            assert!((a - brute(&f, &m, 0.07)).abs() < 1e-9);
        }
    }

    #[test]
    fn relabeling_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, m) = random_fixture(&mut rng, 8, 8, 4, 3);
        let perm = [0u16, 7, 2, 5];
        let relabeled = InstanceMask::from_data(8, 8, m.data.iter().map(|&v| perm[v as usize]).collect()).unwrap();
        let a = instance_contrastive_loss(&f, &m, 0.1, Sampling::Full).unwrap();
        let b = instance_contrastive_loss(&f, &relabeled, 0.1, Sampling::Full).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn errors_and_sampling() {
        let f = FeatureMap::new(4, 4, 2);
        let bg = InstanceMask::new(4, 4);
        assert!(matches!(
            instance_contrastive_loss(&f, &bg, 0.1, Sampling::Full),
            Err(Error::NoForeground)
        ));
        assert!(instance_contrastive_loss(&f, &bg, 0.0, Sampling::Full).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, m) = random_fixture(&mut rng, 16, 16, 3, 3);
        let s = Sampling::Stratified { budget: 40, seed: 1 };
        let a = instance_contrastive_loss(&f, &m, 0.1, s).unwrap();
        assert_eq!(a, instance_contrastive_loss(&f, &m, 0.1, s).unwrap());
        let big = Sampling::Stratified { budget: 10_000, seed: 1 };
        assert_eq!(
            instance_contrastive_loss(&f, &m, 0.1, big).unwrap(),
            instance_contrastive_loss(&f, &m, 0.1, Sampling::Full).unwrap()
        );
    }

    #[test]
    fn quotas_sum_to_budget() {
        assert_eq!(quotas(&[10, 10, 10], 7).iter().sum::<usize>(), 7);
        assert_eq!(quotas(&[1, 1000], 10), vec![0, 10]);
        assert_eq!(quotas(&[3, 4], 100), vec![3, 4]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (f, m) = random_fixture(&mut rng, 5, 4, 3, 3);
        let (l, g) = instance_contrastive_loss_with_grad(&f, &m, 0.2, Sampling::Full).unwrap();
        assert!((l - instance_contrastive_loss(&f, &m, 0.2, Sampling::Full).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..f.data.len() {
            let mut p = f.clone();
            let mut q = f.clone();
            p.data[i] += h;
            q.data[i] -= h;
            let fd = (instance_contrastive_loss(&p, &m, 0.2, Sampling::Full).unwrap()
                - instance_contrastive_loss(&q, &m, 0.2, Sampling::Full).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }
}
