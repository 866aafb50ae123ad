//! Area down-sampling and bilinear resizing of interleaved RGB images.

use crate::error::{Error, Result};

use super::ImageRecord;

/// Per-output-sample list of `(input index, weight)` for area resampling of
/// a length-`src` axis to length `dst`. Weights in each list sum to one.
fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, (overlap / scale) as f32));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Per-output-sample `(i0, i1, frac)` for half-pixel-centred bilinear
/// sampling of a length-`src` axis at length `dst`.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (x - i0 as f64) as f32)
        })
        .collect()
}

/// Box-average (area) resampling to `(dh, dw)`. Exact block means when the
/// target divides the source.
pub fn area_resize(pixels: &[f32], h: usize, w: usize, dh: usize, dw: usize) -> Vec<f32> {
    let ty = area_taps(h, dh);
    let tx = area_taps(w, dw);
    // rows first: (dh, w)
    let mut tmp = vec![0.0f32; dh * w * 3];
    for (oy, taps) in ty.iter().enumerate() {
        for &(iy, wy) in taps {
            let src = &pixels[iy * w * 3..(iy + 1) * w * 3];
            for (d, &s) in tmp[oy * w * 3..(oy + 1) * w * 3].iter_mut().zip(src) {
                *d += wy * s;
            }
        }
    }
    let mut out = vec![0.0f32; dh * dw * 3];
    for oy in 0..dh {
        for (ox, taps) in tx.iter().enumerate() {
            for &(ix, wx) in taps {
                for c in 0..3 {
                    out[(oy * dw + ox) * 3 + c] += wx * tmp[(oy * w + ix) * 3 + c];
                }
            }
        }
    }
    out
}

/// Bilinear resampling (half-pixel centres, edge clamp) to `(dh, dw)`.
pub fn bilinear_resize(pixels: &[f32], h: usize, w: usize, dh: usize, dw: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, dh);
    let tx = bilinear_taps(w, dw);
    let mut out = vec![0.0f32; dh * dw * 3];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for c in 0..3 {
                let p = |y: usize, x: usize| pixels[(y * w + x) * 3 + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * dw + ox) * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Down-sample by `rate` with area averaging, then bilinearly up-sample back
/// to the original size.
pub fn degrade(pixels: &[f32], h: usize, w: usize, rate: u32) -> Vec<f32> {
    let r = rate as usize;
    let (sh, sw) = ((h / r).max(1), (w / r).max(1));
    let small = area_resize(pixels, h, w, sh, sw);
    let mut up = bilinear_resize(&small, sh, sw, h, w);
    for v in &mut up {
        *v = v.clamp(0.0, 1.0);
    }
    up
}

/// Synthesize the low-resolution counterpart of an HR record.
pub fn synthesize_lr(hr: &ImageRecord, rate: u32) -> Result<ImageRecord> {
    if hr.rate != 1 {
        return Err(Error::Precondition(format!(
            "LR synthesis requires an HR record, got rate {}",
            hr.rate
        )));
    }
    if rate < 2 {
        return Err(Error::Precondition(format!("down-sampling rate must be >= 2, got {rate}")));
    }
    if hr.height / rate as usize == 0 || hr.width / rate as usize == 0 {
        return Err(Error::Precondition(format!(
            "rate {rate} collapses a {}x{} image",
            hr.height, hr.width
        )));
    }
    Ok(ImageRecord {
        pixels: degrade(&hr.pixels, hr.height, hr.width, rate),
        rate,
        ..hr.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(h: usize, w: usize, pixels: Vec<f32>) -> ImageRecord {
        ImageRecord {
            height: h,
            width: w,
            pixels,
            identity: 3,
            camera: 1,
            rate: 1,
            labeled: true,
        }
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let hr = record(64, 32, vec![0.5; 64 * 32 * 3]);
        let lr = synthesize_lr(&hr, 4).unwrap();
        assert_eq!(lr.rate, 4);
        assert_eq!((lr.identity, lr.camera), (3, 1));
        assert!(lr.pixels.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn rejects_rate_one_and_lr_input() {
        let hr = record(4, 4, vec![0.0; 48]);
        assert!(synthesize_lr(&hr, 1).is_err());
        let lr = synthesize_lr(&hr, 2).unwrap();
        assert!(synthesize_lr(&lr, 2).is_err());
    }

    #[test]
    fn checkerboard_collapses_to_half_gray() {
        let mut px = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                let v = ((x + y) % 2) as f32;
                px.extend_from_slice(&[v, v, v]);
            }
        }
        let small = area_resize(&px, 4, 4, 2, 2);
        assert!(small.iter().all(|&v| (v - 0.5).abs() < 1e-7));
        let lr = synthesize_lr(&record(4, 4, px), 2).unwrap();
        assert!(lr.pixels.iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn area_weights_cover_fractional_blocks() {
        for (src, dst) in [(64, 21), (32, 10), (7, 3)] {
            for taps in area_taps(src, dst) {
                let s: f32 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let px: Vec<f32> = (0..5 * 3 * 3).map(|i| i as f32 / 45.0).collect();
        assert_eq!(bilinear_resize(&px, 5, 3, 5, 3), px);
    }
}
