//! Numeric kernels behind the tape ops. All buffers are row-major `f64`.

use rayon::prelude::*;

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t`/`b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial geometry of a square-kernel convolution with "same"-style padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Output indices `o` in `[lo, hi)` such that `o*stride + tap - pad` lies in `[0, len)`.
    #[inline]
    fn valid(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        // o*s + tap - pad <= len - 1  =>  o <= (len - 1 + pad - tap) / s
        let hi = if len + self.pad < tap + 1 {
            0
        } else {
            ((len - 1 + self.pad - tap) / s + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }

    pub fn is_identity_window(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Unfolds one `c×h×w` image into a `(c·k·k) × (ho·wo)` column matrix.
pub(crate) fn im2col(x: &[f64], c: usize, g: &ConvGeom, col: &mut [f64]) {
    let p = g.ho * g.wo;
    col.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let off = ox_lo + kx - g.pad;
                        d[ox_lo..ox_hi].copy_from_slice(&src[off..off + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            d[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto a `c×h×w` image (accumulating).
pub(crate) fn col2im(col: &[f64], c: usize, g: &ConvGeom, x: &mut [f64]) {
    let p = g.ho * g.wo;
    for ci in 0..c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    let d = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        d[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// Dense convolution forward. `x` is `n×cin×h×w`, `w` is `cout×cin×k×k`.
pub(crate) fn conv_forward(x: &[f64], n: usize, cin: usize, w: &[f64], cout: usize, g: &ConvGeom) -> Vec<f64> {
    let in_sz = cin * g.h * g.w;
    let p = g.ho * g.wo;
    let kk = cin * g.k * g.k;
    let mut out = vec![0.0; n * cout * p];
    out.par_chunks_mut(cout * p)
        .enumerate()
        .for_each(|(i, o)| {
            let xi = &x[i * in_sz..(i + 1) * in_sz];
            if g.is_identity_window() {
                gemm(cout, kk, p, w, false, xi, false, o, 0.0);
            } else {
                let mut col = vec![0.0; kk * p];
                im2col(xi, cin, g, &mut col);
                gemm(cout, kk, p, w, false, &col, false, o, 0.0);
            }
        });
    out
}

/// Dense convolution backward. Returns `(dx, dw)`; either may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    g: &ConvGeom,
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = cin * g.h * g.w;
    let p = g.ho * g.wo;
    let kk = cin * g.k * g.k;
    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x[i * in_sz..(i + 1) * in_sz];
            let dyi = &dy[i * cout * p..(i + 1) * cout * p];
            let col_owned;
            let col: &[f64] = if g.is_identity_window() {
                xi
            } else {
                let mut c = vec![0.0; kk * p];
                if need_dw {
                    im2col(xi, cin, g, &mut c);
                }
                col_owned = c;
                &col_owned
            };
            let dw = need_dw.then(|| {
                let mut dw = vec![0.0; cout * kk];
                gemm(cout, p, kk, dyi, false, col, true, &mut dw, 0.0);
                dw
            });
            let dx = need_dx.then(|| {
                if g.is_identity_window() {
                    let mut dx = vec![0.0; in_sz];
                    gemm(kk, cout, p, w, true, dyi, false, &mut dx, 0.0);
                    dx
                } else {
                    let mut dcol = vec![0.0; kk * p];
                    gemm(kk, cout, p, w, true, dyi, false, &mut dcol, 0.0);
                    let mut dx = vec![0.0; in_sz];
                    col2im(&dcol, cin, g, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(n * in_sz);
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_ref().expect("dx computed"));
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut acc = vec![0.0; cout * kk];
        for (_, d) in &per_sample {
            for (a, b) in acc.iter_mut().zip(d.as_ref().expect("dw computed")) {
                *a += b;
            }
        }
        acc
    });
    (dx, dw)
}

/// Depthwise convolution forward. `x` is `n×c×h×w`, `w` is `c×1×k×k`.
pub(crate) fn depthwise_forward(x: &[f64], n: usize, c: usize, w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let p = g.ho * g.wo;
    let kk = g.k * g.k;
    let mut out = vec![0.0; n * c * p];
    out.par_chunks_mut(p).enumerate().for_each(|(plane_idx, o)| {
        let ci = plane_idx % c;
        let xp = &x[plane_idx * hw..(plane_idx + 1) * hw];
        let wk = &w[ci * kk..(ci + 1) * kk];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                let wv = wk[ky * g.k + kx];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xp[iy * g.w..(iy + 1) * g.w];
                    let d = &mut o[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        d[ox] += wv * src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    });
    let _ = n;
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f64],
    n: usize,
    c: usize,
    w: &[f64],
    g: &ConvGeom,
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.h * g.w;
    let p = g.ho * g.wo;
    let kk = g.k * g.k;
    // One task per (sample, channel) plane; results reduced in plane order.
    let per_plane: Vec<(Vec<f64>, Vec<f64>)> = (0..n * c)
        .into_par_iter()
        .map(|plane_idx| {
            let ci = plane_idx % c;
            let xp = &x[plane_idx * hw..(plane_idx + 1) * hw];
            let dyp = &dy[plane_idx * p..(plane_idx + 1) * p];
            let wk = &w[ci * kk..(ci + 1) * kk];
            let mut dx = if need_dx { vec![0.0; hw] } else { Vec::new() };
            let mut dw = vec![0.0; if need_dw { kk } else { 0 }];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let (ox_lo, ox_hi) = g.valid(kx, g.w, g.wo);
                    let wv = wk[ky * g.k + kx];
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let d = &dyp[oy * g.wo..(oy + 1) * g.wo];
                        let base = iy * g.w;
                        for ox in ox_lo..ox_hi {
                            let ix = base + ox * g.stride + kx - g.pad;
                            if need_dw {
                                acc += d[ox] * xp[ix];
                            }
                            if need_dx {
                                dx[ix] += wv * d[ox];
                            }
                        }
                    }
                    if need_dw {
                        dw[ky * g.k + kx] = acc;
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut out = Vec::with_capacity(n * c * hw);
        for (d, _) in &per_plane {
            out.extend_from_slice(d);
        }
        out
    });
    let dw = need_dw.then(|| {
        let mut acc = vec![0.0; c * kk];
        for (plane_idx, (_, d)) in per_plane.iter().enumerate() {
            let ci = plane_idx % c;
            for (a, b) in acc[ci * kk..(ci + 1) * kk].iter_mut().zip(d) {
                *a += b;
            }
        }
        acc
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], cin: usize, w: &[f64], cout: usize, g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; cout * g.ho * g.wo];
        for co in 0..cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                s += w[((co * cin + ci) * g.k + ky) * g.k + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * g.ho + oy) * g.wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn output_geometry_halves_rounding_up() {
        assert_eq!(ConvGeom::new(7, 7, 3, 2).ho, 4);
        assert_eq!(ConvGeom::new(8, 8, 3, 2).ho, 4);
        assert_eq!(ConvGeom::new(7, 7, 1, 2).ho, 4);
        assert_eq!(ConvGeom::new(5, 5, 3, 1).ho, 5);
    }

    #[test]
    fn im2col_conv_matches_naive_loops() {
        let cin = 3;
        let cout = 4;
        for &(h, k, s) in &[(7, 3, 1), (7, 3, 2), (6, 1, 2), (5, 1, 1), (8, 3, 2)] {
            let g = ConvGeom::new(h, h, k, s);
            let x: Vec<f64> = (0..cin * h * h).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let fast = conv_forward(&x, 1, cin, &w, cout, &g);
            let slow = naive_conv(&x, cin, &w, cout, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "h={h} k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let c = 2;
        let g = ConvGeom::new(5, 5, 3, 2);
        let x: Vec<f64> = (0..c * 25).map(|i| (i as f64).sin()).collect();
        let rows = c * 9;
        let y: Vec<f64> = (0..rows * g.ho * g.wo).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut col = vec![0.0; rows * g.ho * g.wo];
        im2col(&x, c, &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * 25];
        col2im(&y, c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
