//! Helpers shared by the integration test targets: a tiny double-precision
//! network and brute-force reference implementations.

#![allow(dead_code)]

pub mod equivalence;
pub mod gradients;

use crossres::network::{BackboneConfig, NetworkBundle, NetworkConfig};
use crossres::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const TINY_H: usize = 16;
pub const TINY_W: usize = 8;

pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        height: TINY_H,
        width: TINY_W,
        backbone: BackboneConfig {
            stem_stride: 1,
            channels: [1, 1, 1, 1, 1],
            strides: [2, 2, 1, 1, 1],
        },
        disc_width: 2,
        num_classes: 3,
        ..Default::default()
    }
}

/// A network under 1k parameters whose weights are all perturbed away from
/// their initial values, so zero-initialised layers do not hide gradients.
pub fn tiny_network(cfg: NetworkConfig, seed: u64) -> (NetworkBundle, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = NetworkBundle::init(cfg, &mut store, &mut rng).unwrap();
    let noise = Normal::new(0.0, 0.3).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    (net, store)
}

pub fn rand_images(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let len = n * 3 * h * w;
    Tensor::from_vec(&[n, 3, h, w], (0..len).map(|_| rng.gen_range(0.05..0.95)).collect())
}

// ---------------------------------------------------------------- retrieval

/// CMC curve and mAP by exhaustive enumeration: every gallery item is scored
/// against every query with an explicit distance, ties are broken by gallery
/// index, and same-identity same-camera entries are dropped.
pub fn brute_force_cmc_map(
    queries: &[Vec<f32>],
    query_ids: &[usize],
    query_cams: &[usize],
    gallery: &[Vec<f32>],
    gallery_ids: &[usize],
    gallery_cams: &[usize],
) -> (Vec<f64>, f64) {
    let g = gallery.len();
    let mut hits_at = vec![0usize; g];
    let mut ap_sum = 0.0;
    for (qi, q) in queries.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .map(|(gi, e)| {
                let d: f64 = q.iter().zip(e).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                (d, gi)
            })
            .collect();
        // selection sort: deliberately not the library's sort
        for i in 0..scored.len() {
            let mut best = i;
            for j in i + 1..scored.len() {
                if scored[j].0 < scored[best].0 || (scored[j].0 == scored[best].0 && scored[j].1 < scored[best].1) {
                    best = j;
                }
            }
            scored.swap(i, best);
        }
        let kept: Vec<usize> = scored
            .iter()
            .map(|&(_, gi)| gi)
            .filter(|&gi| !(gallery_ids[gi] == query_ids[qi] && gallery_cams[gi] == query_cams[qi]))
            .collect();
        let relevant: Vec<bool> = kept.iter().map(|&gi| gallery_ids[gi] == query_ids[qi]).collect();
        let first = relevant.iter().position(|&r| r).expect("query without a match");
        for slot in hits_at.iter_mut().skip(first) {
            *slot += 1;
        }
        let mut found = 0;
        let mut precision_sum = 0.0;
        for (k, &r) in relevant.iter().enumerate() {
            if r {
                found += 1;
                precision_sum += found as f64 / (k + 1) as f64;
            }
        }
        ap_sum += precision_sum / found as f64;
    }
    let n = queries.len() as f64;
    (hits_at.iter().map(|&h| h as f64 / n).collect(), ap_sum / n)
}

// ------------------------------------------------------------------ triplet

/// Batch-hard triplet loss by enumerating every (anchor, positive, negative)
/// triple among labelled rows: for each anchor, the hinge of its hardest
/// positive against its hardest negative.
pub fn triplet_oracle(u: &[Vec<f64>], labels: &[usize], labeled: &[bool], margin: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = u.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in (0..n).filter(|&i| labeled[i]) {
        let mut worst: Option<f64> = None;
        for p in (0..n).filter(|&i| labeled[i] && i != a && labels[i] == labels[a]) {
            for m in (0..n).filter(|&i| labeled[i] && labels[i] != labels[a]) {
                let v = dist(&u[a], &u[p]) - dist(&u[a], &u[m]);
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        if let Some(w) = worst {
            total += (w + margin).max(0.0);
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

// --------------------------------------------------------------------- SSIM

/// SSIM over every 11×11 window, weighted by a 2-D Gaussian (σ = 1.5) built
/// directly rather than separably, averaged over windows and channels.
/// Images are interleaved `H×W×3`.
pub fn ssim_oracle(x: &[f32], y: &[f32], h: usize, w: usize) -> f64 {
    const K: usize = 11;
    let sigma: f64 = 1.5;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut kernel = [[0.0f64; K]; K];
    let mut norm = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let mut per_channel = 0.0;
    for c in 0..3 {
        let px = |img: &[f32], r: usize, col: usize| img[(r * w + col) * 3 + c] as f64;
        let mut sum = 0.0;
        let mut count = 0;
        for r0 in 0..=h - K {
            for c0 in 0..=w - K {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let k = kernel[i][j] / norm;
                        let (a, b) = (px(x, r0 + i, c0 + j), px(y, r0 + i, c0 + j));
                        mx += k * a;
                        my += k * b;
                        xx += k * a * a;
                        yy += k * b * b;
                        xy += k * a * b;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += sum / count as f64;
    }
    per_channel / 3.0
}
