//! Dense compute kernels: zero-padded convolution via banded im2col + SGEMM,
//! and bilinear 2x upsampling.

use std::cell::RefCell;

use super::tensor::Tensor;

thread_local! {
    static SCRATCH: RefCell<(Vec<f32>, Vec<f32>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` with per-thread scratch buffers of at least `a` and `b`
/// elements. Contents are unspecified on entry.
fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [f32], &mut [f32]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let (x, y) = &mut *bufs;
        if x.len() < a {
            x.resize(a, 0.0);
        }
        if y.len() < b {
            y.resize(b, 0.0);
        }
        f(&mut x[..a], &mut y[..b])
    })
}

/// Output channel count up to which stride-1 convolutions run as direct
/// row accumulations instead of im2col + GEMM.
const DIRECT_MAX_OUT: usize = 4;

/// Upper bound on im2col buffer elements; larger outputs are processed in
/// horizontal bands.
const MAX_COL_ELEMS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn band_rows(&self, ow: usize, oh: usize) -> usize {
        (MAX_COL_ELEMS / (self.patch_len() * ow).max(1)).clamp(1, oh)
    }
}

/// `C = A·B + beta·C` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    assert!(k == 0 || (max_index(m, k, rsa, csa) as usize) < a.len());
    assert!(k == 0 || (max_index(k, n, rsb, csb) as usize) < b.len());
    assert!((max_index(m, n, rsc, csc) as usize) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches for
    // non-negative strides, which is all this module passes.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc,
            csc,
        );
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies
/// inside a row of width `w`.
fn valid_cols(g: &ConvGeom, kx: usize, w: usize, ow: usize) -> (usize, usize) {
    let (p, s) = (g.pad(), g.stride);
    let lo = p.saturating_sub(kx).div_ceil(s);
    let hi = (w + p).saturating_sub(kx).div_ceil(s).min(ow);
    (lo.min(hi), hi)
}

/// Fills `col` (patch_len × rows·ow) for output rows `[y0, y0 + rows)`.
fn im2col(x: &Tensor, g: &ConvGeom, ow: usize, y0: usize, rows: usize, col: &mut [f32]) {
    let n = rows * ow;
    let (p, s) = (g.pad(), g.stride);
    let mut r = 0;
    for ic in 0..g.in_c {
        let plane = x.plane(ic);
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx, x.w, ow);
                let dst = &mut col[r * n..(r + 1) * n];
                for oy in 0..rows {
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (y0 + oy) * s + ky;
                    if iy < p || iy - p >= x.h || lo == hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - p) * x.w..(iy - p + 1) * x.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let start = lo * s + kx - p;
                    if s == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, &x) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` into `dx`.
fn col2im(dcol: &[f32], g: &ConvGeom, ow: usize, y0: usize, rows: usize, dx: &mut Tensor) {
    let n = rows * ow;
    let (p, s) = (g.pad(), g.stride);
    let (h, w) = (dx.h, dx.w);
    let mut r = 0;
    for ic in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx, w, ow);
                let src = &dcol[r * n..(r + 1) * n];
                let plane = dx.plane_mut(ic);
                for oy in 0..rows {
                    let iy = (y0 + oy) * s + ky;
                    if iy < p || iy - p >= h || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[(iy - p) * w..(iy - p + 1) * w];
                    let start = lo * s + kx - p;
                    let from = &src[oy * ow + lo..oy * ow + hi];
                    for (d, v) in dst[start..].iter_mut().step_by(s).zip(from) {
                        *d += v;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Stride-1 convolution as shifted-row multiply-adds into `out` (zeroed).
fn conv_direct(x: &Tensor, weight: &[f32], g: &ConvGeom, out: &mut Tensor) {
    let (h, w, k, p) = (x.h, x.w, g.k, g.pad());
    let mut acc = vec![0.0f32; w];
    for oc in 0..g.out_c {
        for oy in 0..h {
            acc.fill(0.0);
            for ic in 0..g.in_c {
                let plane = x.plane(ic);
                for ky in 0..k {
                    let iy = oy + ky;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let src = &plane[(iy - p) * w..(iy - p + 1) * w];
                    let taps = &weight[((oc * g.in_c + ic) * k + ky) * k..][..k];
                    for (kx, &wt) in taps.iter().enumerate() {
                        let (lo, hi) = valid_cols(g, kx, w, w);
                        if lo == hi {
                            continue;
                        }
                        let start = lo + kx - p;
                        for (a, &v) in acc[lo..hi].iter_mut().zip(&src[start..start + hi - lo]) {
                            *a += wt * v;
                        }
                    }
                }
            }
            out.plane_mut(oc)[oy * w..(oy + 1) * w].copy_from_slice(&acc);
        }
    }
}

/// Zero-padded convolution (correlation convention). `weight` is
/// `out_c × in_c × k × k`.
pub fn conv2d(x: &Tensor, weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Tensor {
    assert_eq!(x.c, g.in_c, "conv input channels");
    let (oh, ow) = g.out_hw(x.h, x.w);
    let mut out = Tensor::zeros(g.out_c, oh, ow);
    let ohw = oh * ow;
    let kk = g.patch_len();
    if g.is_pointwise() {
        gemm(g.out_c, kk, ohw, weight, (kk as isize, 1), &x.data, (ohw as isize, 1), 0.0, &mut out.data, (ohw as isize, 1));
    } else if g.stride == 1 && g.out_c <= DIRECT_MAX_OUT {
        conv_direct(x, weight, g, &mut out);
    } else {
        let band = g.band_rows(ow, oh);
        with_scratch(kk * band * ow, 0, |col, _| {
            let mut y0 = 0;
            while y0 < oh {
                let rows = band.min(oh - y0);
                let n = rows * ow;
                im2col(x, g, ow, y0, rows, &mut col[..kk * n]);
                gemm(
                    g.out_c,
                    kk,
                    n,
                    weight,
                    (kk as isize, 1),
                    &col[..kk * n],
                    (n as isize, 1),
                    0.0,
                    &mut out.data[y0 * ow..],
                    (ohw as isize, 1),
                );
                y0 += rows;
            }
        });
    }
    if let Some(bias) = bias {
        for (oc, b) in bias.iter().enumerate() {
            out.plane_mut(oc).iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx` is set.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f32],
    dy: &Tensor,
    g: &ConvGeom,
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
    need_dx: bool,
) -> Option<Tensor> {
    let (oh, ow) = (dy.h, dy.w);
    let ohw = oh * ow;
    let kk = g.patch_len();
    if let Some(db) = dbias {
        for (oc, d) in db.iter_mut().enumerate() {
            *d += dy.plane(oc).iter().sum::<f32>();
        }
    }
    let mut dx = need_dx.then(|| Tensor::zeros(x.c, x.h, x.w));
    if g.is_pointwise() {
        // dW += dY · Xᵀ
        gemm(g.out_c, ohw, kk, &dy.data, (ohw as isize, 1), &x.data, (1, ohw as isize), 1.0, dweight, (kk as isize, 1));
        if let Some(dx) = dx.as_mut() {
            // dX = Wᵀ · dY
            gemm(kk, g.out_c, ohw, weight, (1, kk as isize), &dy.data, (ohw as isize, 1), 0.0, &mut dx.data, (ohw as isize, 1));
        }
        return dx;
    }
    let band = g.band_rows(ow, oh);
    let dcol_len = if need_dx { kk * band * ow } else { 0 };
    with_scratch(kk * band * ow, dcol_len, |col, dcol| {
        let mut y0 = 0;
        while y0 < oh {
            let rows = band.min(oh - y0);
            let n = rows * ow;
            im2col(x, g, ow, y0, rows, &mut col[..kk * n]);
            let dy_band = &dy.data[y0 * ow..];
            gemm(g.out_c, n, kk, dy_band, (ohw as isize, 1), &col[..kk * n], (1, n as isize), 1.0, dweight, (kk as isize, 1));
            if let Some(dx) = dx.as_mut() {
                gemm(kk, g.out_c, n, weight, (1, kk as isize), dy_band, (ohw as isize, 1), 0.0, &mut dcol[..kk * n], (n as isize, 1));
                col2im(&dcol[..kk * n], g, ow, y0, rows, dx);
            }
            y0 += rows;
        }
    });
    dx
}

/// Source index pair and weight of the far sample for half-pixel-centred 2x
/// bilinear upsampling along one axis.
fn upsample_taps(out: usize, n: usize) -> (usize, usize, f32) {
    let src = ((out as f32 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f32)
}

pub fn upsample2x(x: &Tensor) -> Tensor {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let cols: Vec<_> = (0..ow).map(|ox| upsample_taps(ox, x.w)).collect();
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for oy in 0..oh {
            let (y0, y1, fy) = upsample_taps(oy, x.h);
            let (r0, r1) = (&src[y0 * x.w..(y0 + 1) * x.w], &src[y1 * x.w..(y1 + 1) * x.w]);
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
                dst[oy * ow + ox] = top + fy * (bottom - top);
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, h, w);
    let cols: Vec<_> = (0..dy.w).map(|ox| upsample_taps(ox, w)).collect();
    for c in 0..dy.c {
        let src = dy.plane(c);
        let dst = dx.plane_mut(c);
        for oy in 0..dy.h {
            let (y0, y1, fy) = upsample_taps(oy, h);
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = src[oy * dy.w + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, wt: &[f32], bias: &[f32], g: &ConvGeom) -> Tensor {
        let (oh, ow) = g.out_hw(x.h, x.w);
        let p = g.pad() as isize;
        let mut out = Tensor::zeros(g.out_c, oh, ow);
        for oc in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc] as f64;
                    for ic in 0..g.in_c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - p;
                                let ix = (ox * g.stride + kx) as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    let wi = ((oc * g.in_c + ic) * g.k + ky) * g.k + kx;
                                    acc += wt[wi] as f64 * x.plane(ic)[iy as usize * x.w + ix as usize] as f64;
                                }
                            }
                        }
                    }
                    out.plane_mut(oc)[oy * ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [
            ConvGeom { in_c: 3, out_c: 5, k: 3, stride: 1 },
            ConvGeom { in_c: 4, out_c: 2, k: 3, stride: 2 },
            ConvGeom { in_c: 6, out_c: 3, k: 1, stride: 1 },
            ConvGeom { in_c: 2, out_c: 1, k: 7, stride: 1 },
        ] {
            let x = random_tensor(&mut rng, g.in_c, 10, 8);
            let wt: Vec<f32> = (0..g.out_c * g.patch_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..g.out_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv2d(&x, &wt, Some(&b), &g);
            let slow = naive_conv(&x, &wt, &b, &g);
            assert_eq!((fast.h, fast.w), (slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-4, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> is bilinear in (x, w): its gradients are the adjoints.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in [
            ConvGeom { in_c: 3, out_c: 4, k: 3, stride: 1 },
            ConvGeom { in_c: 3, out_c: 4, k: 3, stride: 2 },
            ConvGeom { in_c: 5, out_c: 2, k: 1, stride: 1 },
        ] {
            let x = random_tensor(&mut rng, g.in_c, 6, 6);
            let wt: Vec<f32> = (0..g.out_c * g.patch_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = conv2d(&x, &wt, None, &g);
            let dy = random_tensor(&mut rng, y.c, y.h, y.w);
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; g.out_c];
            let dx = conv2d_backward(&x, &wt, &dy, &g, &mut dw, Some(&mut db), true).unwrap();
            let inner: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| (a * b) as f64).sum();
            let via_dx: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| (a * b) as f64).sum();
            let via_dw: f64 = wt.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
            assert!((inner - via_dx).abs() < 1e-3, "{g:?}");
            assert!((inner - via_dw).abs() < 1e-3, "{g:?}");
            for (oc, d) in db.iter().enumerate() {
                assert!((d - dy.plane(oc).iter().sum::<f32>()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn banded_conv_matches_single_band() {
        // Wide enough that band_rows < out rows.
        let g = ConvGeom { in_c: 64, out_c: 2, k: 3, stride: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 64, 40, 1024);
        assert!(g.band_rows(1024, 40) < 40);
        let wt: Vec<f32> = (0..2 * g.patch_len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let fast = conv2d(&x, &wt, None, &g);
        let slow = naive_conv(&x, &wt, &[0.0, 0.0], &g);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn upsample_constant_and_adjoint() {
        let x = Tensor::from_vec(1, 2, 2, vec![0.3; 4]);
        assert!(upsample2x(&x).data.iter().all(|v| (v - 0.3).abs() < 1e-7));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 2, 3, 5);
        let y = upsample2x(&x);
        let dy = random_tensor(&mut rng, 2, 6, 10);
        let dx = upsample2x_backward(&dy, 3, 5);
        let lhs: f32 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
