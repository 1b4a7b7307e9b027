//! Raw slice kernels behind the graph ops. No shape checking happens here;
//! callers validate geometry first.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Output rows computed per rayon task in the matmul kernels.
const ROW_BLOCK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Stride-1, dilation-1 convolution geometry over NHWC input and
/// `[Kh, Kw, IN, OUT]` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_channels: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], padding: Padding) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || x[3] != w[2] {
            return None;
        }
        let (kh, kw) = (w[0], w[1]);
        if kh == 0 || kw == 0 || w[3] == 0 {
            return None;
        }
        let (pad_top, pad_left, out_h, out_w) = match padding {
            Padding::Valid => {
                if kh > x[1] || kw > x[2] {
                    return None;
                }
                (0, 0, x[1] - kh + 1, x[2] - kw + 1)
            }
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, x[1], x[2]),
        };
        Some(ConvGeometry {
            batch: x[0],
            height: x[1],
            width: x[2],
            in_channels: x[3],
            kernel_h: kh,
            kernel_w: kw,
            out_channels: w[3],
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_channels]
    }

    #[inline]
    fn src_row(&self, oh: usize, i: usize) -> Option<usize> {
        (oh + i).checked_sub(self.pad_top).filter(|&r| r < self.height)
    }

    #[inline]
    fn src_col(&self, ow: usize, j: usize) -> Option<usize> {
        (ow + j).checked_sub(self.pad_left).filter(|&c| c < self.width)
    }

    /// Number of (output, tap) pairs that land inside the input, i.e. the
    /// multiplies actually executed divided by `IN * OUT`.
    pub fn active_taps(&self) -> u64 {
        let rows = (0..self.out_h)
            .flat_map(|oh| (0..self.kernel_h).map(move |i| (oh, i)))
            .filter(|&(oh, i)| self.src_row(oh, i).is_some())
            .count() as u64;
        let cols = (0..self.out_w)
            .flat_map(|ow| (0..self.kernel_w).map(move |j| (ow, j)))
            .filter(|&(ow, j)| self.src_col(ow, j).is_some())
            .count() as u64;
        self.batch as u64 * rows * cols
    }

    pub fn multiplies(&self) -> u64 {
        self.active_taps() * (self.in_channels * self.out_channels) as u64
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let per_sample_out = g.out_h * g.out_w * cout;
    let per_sample_in = g.height * g.width * cin;
    let mut out = vec![T::zero(); g.batch * per_sample_out];
    out.par_chunks_mut(per_sample_out.max(1))
        .enumerate()
        .for_each(|(b, out_b)| {
            let x_b = &x[b * per_sample_in..(b + 1) * per_sample_in];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let o0 = (oh * g.out_w + ow) * cout;
                    let acc = &mut out_b[o0..o0 + cout];
                    for i in 0..g.kernel_h {
                        let Some(ih) = g.src_row(oh, i) else { continue };
                        for j in 0..g.kernel_w {
                            let Some(iw) = g.src_col(ow, j) else { continue };
                            let px = &x_b[(ih * g.width + iw) * cin..][..cin];
                            let w_ij = &w[(i * g.kernel_w + j) * cin * cout..][..cin * cout];
                            for (c, &xv) in px.iter().enumerate() {
                                let wrow = &w_ij[c * cout..(c + 1) * cout];
                                for (a, &wv) in acc.iter_mut().zip(wrow) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input<T: Scalar>(gy: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let per_sample_out = g.out_h * g.out_w * cout;
    let per_sample_in = g.height * g.width * cin;
    // [Kh, Kw, OUT, IN] so the innermost loop runs over contiguous IN.
    let taps = g.kernel_h * g.kernel_w;
    let mut wt = vec![T::zero(); w.len()];
    for t in 0..taps {
        for c in 0..cin {
            for o in 0..cout {
                wt[(t * cout + o) * cin + c] = w[(t * cin + c) * cout + o];
            }
        }
    }
    let mut gx = vec![T::zero(); g.batch * per_sample_in];
    gx.par_chunks_mut(per_sample_in.max(1))
        .enumerate()
        .for_each(|(b, gx_b)| {
            let gy_b = &gy[b * per_sample_out..(b + 1) * per_sample_out];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let gy_px = &gy_b[(oh * g.out_w + ow) * cout..][..cout];
                    for i in 0..g.kernel_h {
                        let Some(ih) = g.src_row(oh, i) else { continue };
                        for j in 0..g.kernel_w {
                            let Some(iw) = g.src_col(ow, j) else { continue };
                            let gx_px = &mut gx_b[(ih * g.width + iw) * cin..][..cin];
                            if cin < 4 {
                                let w_ij = &w[(i * g.kernel_w + j) * cin * cout..][..cin * cout];
                                for (c, slot) in gx_px.iter_mut().enumerate() {
                                    let wrow = &w_ij[c * cout..(c + 1) * cout];
                                    let mut s = T::zero();
                                    for (&wv, &gv) in wrow.iter().zip(gy_px) {
                                        s += wv * gv;
                                    }
                                    *slot += s;
                                }
                                continue;
                            }
                            let wt_ij = &wt[(i * g.kernel_w + j) * cout * cin..][..cout * cin];
                            for (o, &gv) in gy_px.iter().enumerate() {
                                let wrow = &wt_ij[o * cin..(o + 1) * cin];
                                for (slot, &wv) in gx_px.iter_mut().zip(wrow) {
                                    *slot += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    gx
}

/// Gradient with respect to the weights. Each kernel tap is reduced by one
/// task in a fixed order, so results do not depend on thread count.
pub fn conv2d_backward_weight<T: Scalar>(x: &[T], gy: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let mut gw = vec![T::zero(); g.kernel_h * g.kernel_w * cin * cout];
    gw.par_chunks_mut((cin * cout).max(1)).enumerate().for_each(|(tap, acc)| {
        let (i, j) = (tap / g.kernel_w, tap % g.kernel_w);
        for b in 0..g.batch {
            for oh in 0..g.out_h {
                let Some(ih) = g.src_row(oh, i) else { continue };
                for ow in 0..g.out_w {
                    let Some(iw) = g.src_col(ow, j) else { continue };
                    let px = &x[((b * g.height + ih) * g.width + iw) * cin..][..cin];
                    let gy_px = &gy[((b * g.out_h + oh) * g.out_w + ow) * cout..][..cout];
                    for (c, &xv) in px.iter().enumerate() {
                        let row = &mut acc[c * cout..(c + 1) * cout];
                        for (a, &gv) in row.iter_mut().zip(gy_px) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
    });
    gw
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if n == 0 {
        return c;
    }
    c.par_chunks_mut(n * ROW_BLOCK)
        .enumerate()
        .for_each(|(blk, rows)| {
            for (r, crow) in rows.chunks_mut(n).enumerate() {
                let i = blk * ROW_BLOCK + r;
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        });
    c
}

/// `a^T b` for `a: [k, m]`, `b: [k, n]` -> `[m, n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if n == 0 {
        return c;
    }
    c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
        for p in 0..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// `a b^T` for `a: [m, k]`, `b: [n, k]` -> `[m, n]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if n == 0 {
        return c;
    }
    c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *cv = s;
        }
    });
    c
}
