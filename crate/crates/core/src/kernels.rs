//! Slice-level dense kernels shared by forward and backward passes.
//!
//! Loop orders are fixed so every reduction sums in the same sequence on
//! every run.

use crate::scalar::Scalar;

/// `out[n×m] += a[n×k] · b[k×m]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k×m] += aᵀ · b` for `a[n×k]`, `b[n×m]`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let brow = &b[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[n×k] += a · bᵀ` for `a[n×m]`, `b[k×m]`.
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// Geometry of a 2-D convolution over a `C×H×W` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output coordinates `o` whose input tap `o*stride + k - pad` is in `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < out_len && lo * self.stride + k < self.pad {
            lo += 1;
        }
        let mut hi = out_len;
        while hi > lo && (hi - 1) * self.stride + k >= self.pad + len {
            hi -= 1;
        }
        (lo, hi)
    }

    /// Calls `f(weight_index, out_index, in_index, c_out)` for every live tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for ky in 0..self.kh {
                    let (y0, y1) = self.valid(ky, self.h, oh);
                    for kx in 0..self.kw {
                        let (x0, x1) = self.valid(kx, self.w, ow);
                        let widx = ((co * self.c_in + ci) * self.kh + ky) * self.kw + kx;
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let obase = (co * oh + oy) * ow;
                            let ibase = (ci * self.h + iy) * self.w;
                            for ox in x0..x1 {
                                let ix = ox * self.stride + kx - self.pad;
                                f(widx, obase + ox, ibase + ix, co);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); g.c_out * plane];
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out[co * plane..(co + 1) * plane].iter_mut().for_each(|o| *o = bv);
        }
    }
    g.for_each_tap(|wi, oi, ii, _| out[oi] = out[oi] + w[wi] * x[ii]);
    out
}

/// Returns `(grad_x, grad_w, grad_b)`; each is computed only when requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    if gx.is_some() || gw.is_some() {
        g.for_each_tap(|wi, oi, ii, _| {
            let go = grad_out[oi];
            if let Some(gx) = gx.as_mut() {
                gx[ii] = gx[ii] + w[wi] * go;
            }
            if let Some(gw) = gw.as_mut() {
                gw[wi] = gw[wi] + go * x[ii];
            }
        });
    }
    let gb = need.2.then(|| {
        let plane = g.out_h() * g.out_w();
        (0..g.c_out)
            .map(|co| grad_out[co * plane..(co + 1) * plane].iter().copied().sum())
            .collect()
    });
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition with explicit bounds checks.
    fn conv_naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = crate::rng::SeededRng::new(5);
        for &(stride, pad, h) in &[(1, 1, 5), (2, 1, 8), (2, 1, 7), (1, 0, 4)] {
            let g = ConvGeom {
                c_in: 2,
                c_out: 3,
                h,
                w: h + 1,
                kh: 3,
                kw: 3,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * h * (h + 1)).map(|_| rng.normal()).collect();
            let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.normal()).collect();
            let fast = conv2d_forward(&g, &x, &w, None);
            let slow = conv_naive(&g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3×2
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ·a for a 2×3 is 3×3
        let mut ata = [0.0; 9];
        matmul_at_b_acc(&a, &a, &mut ata, 2, 3, 3);
        assert_eq!(ata, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        let mut aat = [0.0; 4];
        matmul_a_bt_acc(&a, &a, &mut aat, 2, 3, 2);
        assert_eq!(aat, [14.0, 32.0, 32.0, 77.0]);
    }
}
