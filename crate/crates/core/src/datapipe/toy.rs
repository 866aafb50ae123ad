//! Procedural pedestrian-like identities for desk-scale experiments.
//!
//! Each identity owns a fixed appearance (shirt and trouser colours, optional
//! horizontal stripes, hair colour, and a few coloured blobs). Each camera
//! owns a background and a global colour tint. Each image jitters the figure
//! position, brightness, and adds pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::derive_seed;

use super::{DatasetConfig, ImageRecord};

const NOISE_STD: f64 = 0.02;
const MAX_SHIFT_FRAC: f32 = 0.1;
const MAX_BRIGHTNESS: f32 = 0.1;

struct Blob {
    u: f32,
    v: f32,
    radius: f32,
    color: [f32; 3],
}

struct Appearance {
    shirt: [f32; 3],
    trousers: [f32; 3],
    stripe: Option<([f32; 3], f32, f32)>,
    hair: [f32; 3],
    blobs: Vec<Blob>,
}

struct CameraLook {
    tint: [f32; 3],
    background: [f32; 3],
    gradient: f32,
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

impl Appearance {
    fn sample(rng: &mut impl Rng) -> Self {
        let stripe = rng
            .gen_bool(0.6)
            .then(|| (color(rng), rng.gen_range(0.05..0.1), rng.gen_range(0.0..1.0)));
        let blobs = (0..rng.gen_range(1..=3))
            .map(|_| Blob {
                u: rng.gen_range(0.3..0.7),
                v: rng.gen_range(0.25..0.85),
                radius: rng.gen_range(0.1..0.2),
                color: color(rng),
            })
            .collect();
        Self {
            shirt: color(rng),
            trousers: color(rng),
            stripe,
            hair: color(rng),
            blobs,
        }
    }

    /// Colour at normalised body coordinates, or `None` outside the figure.
    /// `aspect` is `height / width`, used to keep blobs circular.
    fn shade(&self, u: f32, v: f32, aspect: f32) -> Option<[f32; 3]> {
        let head_du = (u - 0.5) / 0.16;
        let head_dv = (v - 0.12) / 0.08;
        if head_du * head_du + head_dv * head_dv <= 1.0 {
            return Some(if v < 0.1 { self.hair } else { [0.9, 0.75, 0.62] });
        }
        let torso = (0.22..=0.78).contains(&u) && (0.2..0.55).contains(&v);
        let legs = (0.28..=0.72).contains(&u) && (0.55..0.95).contains(&v) && !(v > 0.72 && (0.47..0.53).contains(&u));
        if !torso && !legs {
            return None;
        }
        for b in &self.blobs {
            // distances in units of image width
            let du = u - b.u;
            let dv = (v - b.v) * aspect;
            if du * du + dv * dv <= b.radius * b.radius {
                return Some(b.color);
            }
        }
        if torso {
            if let Some((c, period, phase)) = self.stripe {
                if (((v - 0.2) / period + phase).floor() as i64).rem_euclid(2) == 0 {
                    return Some(c);
                }
            }
            Some(self.shirt)
        } else {
            Some(self.trousers)
        }
    }
}

impl CameraLook {
    fn sample(rng: &mut impl Rng) -> Self {
        let gray: f32 = rng.gen_range(0.25..0.75);
        Self {
            tint: [rng.gen_range(0.88..1.12), rng.gen_range(0.88..1.12), rng.gen_range(0.88..1.12)],
            background: [
                gray + rng.gen_range(-0.08..0.08),
                gray + rng.gen_range(-0.08..0.08),
                gray + rng.gen_range(-0.08..0.08),
            ],
            gradient: rng.gen_range(-0.15..0.15),
        }
    }
}

/// Render the whole toy dataset. Records are ordered identity-major, then
/// camera, then image index; all are HR and labelled.
pub fn generate_toy_dataset(cfg: &DatasetConfig) -> Vec<ImageRecord> {
    let (h, w) = (cfg.height, cfg.width);
    let aspect = h as f32 / w as f32;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let cameras: Vec<CameraLook> = (0..cfg.cameras)
        .map(|c| CameraLook::sample(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, c as u64]))))
        .collect();
    let mut records = Vec::with_capacity(cfg.num_records());
    for id in 0..cfg.num_identities {
        let look = Appearance::sample(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, id as u64])));
        for (cam, camera) in cameras.iter().enumerate() {
            for k in 0..cfg.images_per_id_per_cam {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, id as u64, cam as u64, k as u64]));
                let max_shift = MAX_SHIFT_FRAC * w as f32;
                let dx = rng.gen_range(-max_shift..=max_shift);
                let dy = rng.gen_range(-max_shift..=max_shift);
                let brightness = rng.gen_range(-MAX_BRIGHTNESS..=MAX_BRIGHTNESS);
                let mut pixels = Vec::with_capacity(h * w * 3);
                for y in 0..h {
                    for x in 0..w {
                        let u = (x as f32 + 0.5 - dx) / w as f32;
                        let v = (y as f32 + 0.5 - dy) / h as f32;
                        let base = look.shade(u, v, aspect).unwrap_or_else(|| {
                            let g = camera.gradient * (y as f32 / h as f32 - 0.5);
                            camera.background.map(|c| c + g)
                        });
                        for c in 0..3 {
                            let val = base[c] * camera.tint[c] + brightness + noise.sample(&mut rng) as f32;
                            pixels.push(val.clamp(0.0, 1.0));
                        }
                    }
                }
                records.push(ImageRecord {
                    height: h,
                    width: w,
                    pixels,
                    identity: id,
                    camera: cam,
                    rate: 1,
                    labeled: true,
                });
            }
        }
    }
    records
}
