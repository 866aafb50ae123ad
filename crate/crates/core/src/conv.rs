//! im2col convolution kernels over `[N, C, H, W]` batches.

use crate::scalar::Scalar;

/// Static geometry of one square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        conv_out_hw(self.h, self.w, self.k, self.stride, self.pad)
    }

    /// Rows of the column matrix (`C_in·k·k`).
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Columns of the column matrix (`N·H_out·W_out`).
    pub fn positions(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }
}

pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Output columns `ox` whose input column `ox·stride + kx - pad` lies in
/// `[0, w)`, as a half-open range.
fn valid_range(out: usize, w: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if w + pad > k_off { ((w - 1 + pad - k_off) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfold `x` into a `[C·k·k, N·Ho·Wo]` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols_n = g.positions();
    let mut cols = vec![T::zero(); g.patch() * cols_n];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(wo, g.w, kx, g.stride, g.pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let ix_lo = ox_lo * g.stride + kx - g.pad;
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst = &mut dst_row[(n * ho + oy) * wo + ox_lo..(n * ho + oy) * wo + ox_hi];
                        let src_row = &src[iy * g.w + ix_lo..(iy + 1) * g.w];
                        if g.stride == 1 {
                            dst.copy_from_slice(&src_row[..dst.len()]);
                        } else {
                            for (d, &v) in dst.iter_mut().zip(src_row.iter().step_by(g.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input-shaped buffer.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let cols_n = g.positions();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(wo, g.w, kx, g.stride, g.pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let ix_lo = ox_lo * g.stride + kx - g.pad;
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let base = (n * g.c_in + c) * g.h * g.w;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &src_row[(n * ho + oy) * wo + ox_lo..(n * ho + oy) * wo + ox_hi];
                        let dst = &mut dx[base + iy * g.w + ix_lo..base + (iy + 1) * g.w];
                        if g.stride == 1 {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (d, &s) in dst.iter_mut().step_by(g.stride).zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[C, N·HW]` matrix to `[N, C, H, W]`.
pub fn cmajor_to_nchw<T: Scalar>(m: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * hw];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .copy_from_slice(&m[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]);
        }
    }
    out
}

/// `[N, C, H, W]` to `[C, N·HW]` matrix.
pub fn nchw_to_cmajor<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * hw];
    for ni in 0..n {
        for ci in 0..c {
            out[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]
                .copy_from_slice(&x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        }
    }
    out
}

/// Forward convolution. Returns `(output NCHW, column matrix)`.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let cols = im2col(x, g);
    let p = g.positions();
    let kk = g.patch();
    let mut out = vec![T::zero(); g.c_out * p];
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(
        g.c_out, kk, p, T::one(), w, kk as isize, 1, &cols, p as isize, 1, beta, &mut out, p as isize, 1,
    );
    (cmajor_to_nchw(&out, g.n, g.c_out, ho * wo), cols)
}

/// Gradients of a convolution given the saved column matrix.
///
/// Returns `(dx, dw, db)`; `dx` is only computed when requested.
pub fn conv_backward<T: Scalar>(
    dy: &[T],
    w: &[T],
    cols: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let p = g.positions();
    let kk = g.patch();
    let dym = nchw_to_cmajor(dy, g.n, g.c_out, ho * wo);
    let db = dym.chunks(p).map(|row| row.iter().copied().sum()).collect();
    let dw = want_dw.then(|| {
        let mut dw = vec![T::zero(); g.c_out * kk];
        T::gemm(
            g.c_out, p, kk, T::one(), &dym, p as isize, 1, cols, 1, p as isize, T::zero(), &mut dw,
            kk as isize, 1,
        );
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); kk * p];
        T::gemm(
            kk, g.c_out, p, T::one(), w, 1, kk as isize, &dym, p as isize, 1, T::zero(), &mut dcols,
            p as isize, 1,
        );
        let mut dx = vec![T::zero(); g.n * g.c_in * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}
