//! Same-padded stride-1 convolution kernels for a single sample.
//!
//! Narrow layers use a direct row-wise formulation; wider layers lower to
//! im2col followed by a matrix product. Both accumulate in a fixed order.

use crate::scalar::Scalar;

/// Channel-product threshold at or below which the direct kernel is used.
const DIRECT_MAX_CHANNEL_PRODUCT: usize = 16;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn direct(&self) -> bool {
        self.cin * self.cout <= DIRECT_MAX_CHANNEL_PRODUCT
    }

    /// Overlapping column ranges `(dst, src)` for horizontal kernel tap `j`.
    fn tap(&self, j: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let pw = self.kw / 2;
        let w = self.w;
        if j >= pw {
            let s = (j - pw).min(w);
            (0..w - s, s..w)
        } else {
            let s = (pw - j).min(w);
            (s..w, 0..w - s)
        }
    }

    /// Source row feeding output row `y` through vertical tap `i`.
    fn src_row(&self, y: usize, i: usize) -> Option<usize> {
        let sy = (y + i).checked_sub(self.kh / 2)?;
        (sy < self.h).then_some(sy)
    }
}

#[allow(clippy::too_many_arguments)]
fn mm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T]) {
    let a_strides = if ta { (1, m) } else { (k, 1) };
    let b_strides = if tb { (1, k) } else { (n, 1) };
    T::gemm(m, k, n, a, a_strides, b, b_strides, c, (n, 1), false);
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.hw();
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * hw;
                let dst = &mut cols[row..row + hw];
                let (dr, sr) = g.tap(j);
                for y in 0..g.h {
                    let out_row = &mut dst[y * g.w..(y + 1) * g.w];
                    out_row.fill(T::zero());
                    if let Some(sy) = g.src_row(y, i) {
                        let src = &plane[sy * g.w..(sy + 1) * g.w];
                        out_row[dr.clone()].copy_from_slice(&src[sr.clone()]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.hw();
    for c in 0..g.cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * hw;
                let src = &cols[row..row + hw];
                let (dr, sr) = g.tap(j);
                for y in 0..g.h {
                    if let Some(sy) = g.src_row(y, i) {
                        let dst = &mut plane[sy * g.w..(sy + 1) * g.w];
                        for (d, &s) in dst[sr.clone()].iter_mut().zip(&src[y * g.w..(y + 1) * g.w][dr.clone()]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight fixed accumulation lanes (vectorizable, order fixed).
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    s + (pairs[0] + pairs[2]) + (pairs[1] + pairs[3])
}

/// `out[cout, h, w] = weight ⋆ x[cin, h, w]`, without bias.
pub(crate) fn forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom, out: &mut [T]) {
    let hw = g.hw();
    if g.direct() {
        out.fill(T::zero());
        for co in 0..g.cout {
            let o_plane = &mut out[co * hw..(co + 1) * hw];
            for ci in 0..g.cin {
                let x_plane = &x[ci * hw..(ci + 1) * hw];
                for i in 0..g.kh {
                    for y in 0..g.h {
                        let Some(sy) = g.src_row(y, i) else { continue };
                        let src = &x_plane[sy * g.w..(sy + 1) * g.w];
                        let dst = &mut o_plane[y * g.w..(y + 1) * g.w];
                        for j in 0..g.kw {
                            let wt = weight[((co * g.cin + ci) * g.kh + i) * g.kw + j];
                            let (dr, sr) = g.tap(j);
                            axpy(&mut dst[dr], wt, &src[sr]);
                        }
                    }
                }
            }
        }
    } else {
        let mut cols = vec![T::zero(); g.kdim() * hw];
        im2col(x, g, &mut cols);
        mm(g.cout, g.kdim(), hw, weight, false, &cols, false, out);
    }
}

/// Input and weight gradients for one sample; `dx` is overwritten, `dw` receives
/// this sample's contribution (overwritten).
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let hw = g.hw();
    if g.direct() {
        if let Some(dx) = dx {
            dx.fill(T::zero());
            for co in 0..g.cout {
                let g_plane = &grad[co * hw..(co + 1) * hw];
                for ci in 0..g.cin {
                    let dx_plane = &mut dx[ci * hw..(ci + 1) * hw];
                    for i in 0..g.kh {
                        for y in 0..g.h {
                            let Some(sy) = g.src_row(y, i) else { continue };
                            let gr = &g_plane[y * g.w..(y + 1) * g.w];
                            let dst = &mut dx_plane[sy * g.w..(sy + 1) * g.w];
                            for j in 0..g.kw {
                                let wt = weight[((co * g.cin + ci) * g.kh + i) * g.kw + j];
                                let (dr, sr) = g.tap(j);
                                axpy(&mut dst[sr], wt, &gr[dr]);
                            }
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw {
            for co in 0..g.cout {
                let g_plane = &grad[co * hw..(co + 1) * hw];
                for ci in 0..g.cin {
                    let x_plane = &x[ci * hw..(ci + 1) * hw];
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let (dr, sr) = g.tap(j);
                            let mut s = T::zero();
                            for y in 0..g.h {
                                let Some(sy) = g.src_row(y, i) else { continue };
                                s += dot(
                                    &g_plane[y * g.w..(y + 1) * g.w][dr.clone()],
                                    &x_plane[sy * g.w..(sy + 1) * g.w][sr.clone()],
                                );
                            }
                            dw[((co * g.cin + ci) * g.kh + i) * g.kw + j] = s;
                        }
                    }
                }
            }
        }
    } else {
        if let Some(dw) = dw {
            let mut cols = vec![T::zero(); g.kdim() * hw];
            im2col(x, g, &mut cols);
            mm(g.cout, hw, g.kdim(), grad, false, &cols, true, dw);
        }
        if let Some(dx) = dx {
            let mut dcols = vec![T::zero(); g.kdim() * hw];
            mm(g.kdim(), g.cout, hw, weight, true, grad, false, &mut dcols);
            dx.fill(T::zero());
            col2im(&dcols, g, dx);
        }
    }
}
