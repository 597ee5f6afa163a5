//! im2col-based convolution kernels. These work on raw slices; the graph
//! layer in `autodiff` wires them into forward and backward passes.
//!
//! Layouts:
//! - activations are NCHW
//! - conv2d kernels are `[out, in, k, k]`
//! - conv_transpose2d kernels are `[in, out, k, k]`, i.e. the same tensor
//!   that would map the transposed output back through `conv2d`
//! - column buffers are `[c * k * k, n * ho * wo]`, one column per output site

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, MatRef, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        if self.h + 2 * self.pad < self.k || self.w + 2 * self.pad < self.k {
            return Err(Error::Shape(format!(
                "spatial dims {}x{} with pad {} smaller than kernel {} (axes 2,3)",
                self.h, self.w, self.pad, self.k
            )));
        }
        Ok(())
    }

    fn col_width(&self) -> usize {
        self.c * self.k * self.k
    }
}

pub fn conv_transpose_out(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let full = (h - 1) * stride + k;
    if full <= 2 * pad {
        return Err(Error::Shape(format!(
            "transposed conv output non-positive: ({h}-1)*{stride} - 2*{pad} + {k}"
        )));
    }
    Ok(full - 2 * pad)
}

/// Output sites `ox` whose input column `ox * s + kx - p` lies in `[0, w)`.
fn valid_range(wo: usize, w: usize, kx: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kx).div_ceil(s);
    // largest ox with ox * s + kx < w + p
    let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Column buffer `[c * k * k, n * ho * wo]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad);
    let np = g.n * ho * wo;
    let mut cols = vec![T::zero(); g.col_width() * np];
    // one input plane at a time so it stays in cache across all k*k taps
    for ci in 0..g.c {
        for b in 0..g.n {
            let plane = &x[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = valid_range(wo, g.w, kx, s, p);
                    let row = &mut cols[((ci * k + ky) * k + kx) * np + b * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let line = &plane[iy as usize * g.w..][..g.w];
                        let dst = &mut row[oy * wo..][..wo];
                        for ox in lo..hi {
                            dst[ox] = line[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column buffer back onto an NCHW image (adjoint of `im2col`).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (k, s, p) = (g.k, g.stride, g.pad);
    let np = g.n * ho * wo;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for b in 0..g.n {
            let plane = &mut x[(b * g.c + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = valid_range(wo, g.w, kx, s, p);
                    let row = &cols[((ci * k + ky) * k + kx) * np + b * ho * wo..][..ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * g.w..][..g.w];
                        let src = &row[oy * wo..][..wo];
                        for ox in lo..hi {
                            let ix = ox * s + kx - p;
                            line[ix] = line[ix] + src[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, hw]` -> `[c, n * hw]`
pub fn nchw_to_cn<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            out[(ci * n + b) * hw..][..hw].copy_from_slice(&x[(b * c + ci) * hw..][..hw]);
        }
    }
    out
}

/// `[c, n * hw]` -> `[n, c, hw]`
pub fn cn_to_nchw<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for b in 0..n {
            out[(b * c + ci) * hw..][..hw].copy_from_slice(&x[(ci * n + b) * hw..][..hw]);
        }
    }
    out
}

/// Returns the NCHW output and the column buffer (kept for backward).
pub fn conv2d_forward<T: Scalar>(x: &[T], g: &ConvGeom, kernel: &[T], out_ch: usize) -> (Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let cols = im2col(x, g);
    let np = g.n * ho * wo;
    let mut y = vec![T::zero(); out_ch * np];
    matmul_into(MatRef::new(kernel, out_ch, g.col_width()), MatRef::new(&cols, g.col_width(), np), T::zero(), &mut y);
    (cn_to_nchw(&y, g.n, out_ch, ho * wo), cols)
}

/// Gradients of `conv2d_forward` w.r.t. input and kernel.
pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    cols: &[T],
    g: &ConvGeom,
    kernel: &[T],
    out_ch: usize,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let np = g.n * ho * wo;
    let cw = g.col_width();
    let dy = nchw_to_cn(dy, g.n, out_ch, ho * wo);
    let dk = need_dk.then(|| {
        let mut dk = vec![T::zero(); out_ch * cw];
        matmul_into(MatRef::new(&dy, out_ch, np), MatRef::new(cols, cw, np).t(), T::zero(), &mut dk);
        dk
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); cw * np];
        matmul_into(MatRef::new(kernel, out_ch, cw).t(), MatRef::new(&dy, out_ch, np), T::zero(), &mut dcols);
        col2im(&dcols, g)
    });
    (dx, dk)
}

/// Geometry of the conv2d whose adjoint is the requested transposed conv:
/// the transposed conv's output is that conv2d's input.
pub fn transpose_geom(n: usize, out_ch: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
    let ho = conv_transpose_out(h, k, stride, pad)?;
    let wo = conv_transpose_out(w, k, stride, pad)?;
    let g = ConvGeom { n, c: out_ch, h: ho, w: wo, k, stride, pad };
    g.validate()?;
    let (ih, iw) = g.out_hw();
    if ih != h || iw != w {
        return Err(Error::Shape(format!("transposed conv geometry mismatch: {ih}x{iw} vs {h}x{w}")));
    }
    Ok(g)
}

/// `x: [n, in_ch, h, w]`, kernel `[in_ch, out_ch * k * k]`.
/// Returns the output and `x` in `[in_ch, n * h * w]` layout (kept for backward).
pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], in_ch: usize, g: &ConvGeom, kernel: &[T]) -> (Vec<T>, Vec<T>) {
    let (h, w) = g.out_hw();
    let np = g.n * h * w;
    let x_cn = nchw_to_cn(x, g.n, in_ch, h * w);
    let mut dcols = vec![T::zero(); g.col_width() * np];
    matmul_into(
        MatRef::new(kernel, in_ch, g.col_width()).t(),
        MatRef::new(&x_cn, in_ch, np),
        T::zero(),
        &mut dcols,
    );
    (col2im(&dcols, g), x_cn)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    dy: &[T],
    x_cn: &[T],
    in_ch: usize,
    g: &ConvGeom,
    kernel: &[T],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (h, w) = g.out_hw();
    let np = g.n * h * w;
    let cw = g.col_width();
    let cols = im2col(dy, g);
    let dk = need_dk.then(|| {
        let mut dk = vec![T::zero(); in_ch * cw];
        matmul_into(MatRef::new(x_cn, in_ch, np), MatRef::new(&cols, cw, np).t(), T::zero(), &mut dk);
        dk
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); in_ch * np];
        matmul_into(MatRef::new(kernel, in_ch, cw), MatRef::new(&cols, cw, np), T::zero(), &mut dx);
        cn_to_nchw(&dx, g.n, in_ch, h * w)
    });
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { n: 2, c: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn channel_major_round_trip() {
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let r = nchw_to_cn(&x, 2, 3, 4);
        assert_eq!(r[..8], [0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(cn_to_nchw(&r, 2, 3, 4), x);
    }

    #[test]
    fn valid_ranges_match_bounds_checks() {
        for (w, k, s, p) in [(5, 3, 2, 1), (8, 4, 2, 1), (4, 1, 1, 0), (3, 3, 1, 2), (6, 4, 3, 0)] {
            let wo = (w + 2 * p - k) / s + 1;
            for kx in 0..k {
                let (lo, hi) = valid_range(wo, w, kx, s, p);
                for ox in 0..wo {
                    let ix = (ox * s + kx) as isize - p as isize;
                    assert_eq!((lo..hi).contains(&ox), ix >= 0 && ix < w as isize, "w{w} k{k} s{s} p{p} kx{kx} ox{ox}");
                }
            }
        }
    }

    #[test]
    fn transposed_output_extent() {
        assert_eq!(conv_transpose_out(4, 4, 2, 1).unwrap(), 8);
        assert_eq!(conv_transpose_out(2, 2, 2, 0).unwrap(), 4);
        assert_eq!(conv_transpose_out(5, 1, 1, 0).unwrap(), 5);
    }
}
