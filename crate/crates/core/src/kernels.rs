//! Low-level compute kernels shared by the autodiff ops.
//!
//! Every kernel reduces each output element in one fixed sequential order,
//! so results do not depend on the worker count. Parallelism is only over
//! disjoint output rows (see [`crate::par`]).

use crate::par::for_each_row;
use crate::scalar::Scalar;

/// Dot product with eight-lane fixed association (vectorizable without
/// reassociation, hence deterministic).
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let lanes = n / 8 * 8;
    let mut acc = [T::zero(); 8];
    let mut i = 0;
    while i < lanes {
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
        acc[4] = acc[4] + a[i + 4] * b[i + 4];
        acc[5] = acc[5] + a[i + 5] * b[i + 5];
        acc[6] = acc[6] + a[i + 6] * b[i + 6];
        acc[7] = acc[7] + a[i + 7] * b[i + 7];
        i += 8;
    }
    let mut s = ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
    while i < n {
        s = s + a[i] * b[i];
        i += 1;
    }
    s
}

/// `y += alpha * x`.
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// `c += a · b` for row-major `a [m,k]`, `b [k,n]`, `c [m,n]`.
/// `c` must be pre-initialized (zeros or bias). Four output rows share each
/// pass over `b` (register blocking); per-element reduction order is fixed.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, 4 * n, |block, c_rows| {
        let i0 = block * 4;
        let rows = c_rows.len() / n;
        if rows == 4 {
            let (c01, c23) = c_rows.split_at_mut(2 * n);
            let (c0, c1) = c01.split_at_mut(n);
            let (c2, c3) = c23.split_at_mut(n);
            for p in 0..k {
                let a0 = a[i0 * k + p];
                let a1 = a[(i0 + 1) * k + p];
                let a2 = a[(i0 + 2) * k + p];
                let a3 = a[(i0 + 3) * k + p];
                let br = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    let bv = br[j];
                    c0[j] = c0[j] + a0 * bv;
                    c1[j] = c1[j] + a1 * bv;
                    c2[j] = c2[j] + a2 * bv;
                    c3[j] = c3[j] + a3 * bv;
                }
            }
        } else {
            for (r, c_row) in c_rows.chunks_mut(n).enumerate() {
                let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (p, &a_ip) in a_row.iter().enumerate() {
                    axpy(a_ip, &b[p * n..(p + 1) * n], c_row);
                }
            }
        }
    });
}

/// `c += a · bᵀ` for row-major `a [m,k]`, `b [nb,k]`, `c [m,nb]`.
/// 2x2 blocks of dots share their operand loads.
pub(crate) fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, nb: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), nb * k);
    debug_assert_eq!(c.len(), m * nb);
    for_each_row(c, 2 * nb, |block, c_rows| {
        let i0 = block * 2;
        let rows = c_rows.len() / nb;
        if rows == 2 {
            let a0 = &a[i0 * k..(i0 + 1) * k];
            let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
            let (c0, c1) = c_rows.split_at_mut(nb);
            let mut j = 0;
            while j + 2 <= nb {
                let b0 = &b[j * k..(j + 1) * k];
                let b1 = &b[(j + 1) * k..(j + 2) * k];
                let (d00, d01, d10, d11) = dot4(a0, a1, b0, b1);
                c0[j] = c0[j] + d00;
                c0[j + 1] = c0[j + 1] + d01;
                c1[j] = c1[j] + d10;
                c1[j + 1] = c1[j + 1] + d11;
                j += 2;
            }
            if j < nb {
                let bj = &b[j * k..(j + 1) * k];
                c0[j] = c0[j] + dot(a0, bj);
                c1[j] = c1[j] + dot(a1, bj);
            }
        } else {
            for (r, c_row) in c_rows.chunks_mut(nb).enumerate() {
                let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (j, cj) in c_row.iter_mut().enumerate() {
                    *cj = *cj + dot(a_row, &b[j * k..(j + 1) * k]);
                }
            }
        }
    });
}

/// Four simultaneous dot products over shared operands, each with the same
/// fixed association as [`dot`].
fn dot4<T: Scalar>(a0: &[T], a1: &[T], b0: &[T], b1: &[T]) -> (T, T, T, T) {
    let n = a0.len();
    let lanes = n / 4 * 4;
    let mut s = [[T::zero(); 4]; 4];
    let mut i = 0;
    while i < lanes {
        for l in 0..4 {
            let (x0, x1, y0, y1) = (a0[i + l], a1[i + l], b0[i + l], b1[i + l]);
            s[0][l] = s[0][l] + x0 * y0;
            s[1][l] = s[1][l] + x0 * y1;
            s[2][l] = s[2][l] + x1 * y0;
            s[3][l] = s[3][l] + x1 * y1;
        }
        i += 4;
    }
    let mut out = [T::zero(); 4];
    for (o, lanes) in out.iter_mut().zip(&s) {
        *o = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    }
    while i < n {
        out[0] = out[0] + a0[i] * b0[i];
        out[1] = out[1] + a0[i] * b1[i];
        out[2] = out[2] + a1[i] * b0[i];
        out[3] = out[3] + a1[i] * b1[i];
        i += 1;
    }
    (out[0], out[1], out[2], out[3])
}

/// Row-major transpose of `a [m,n]` into a new `[n,m]` buffer.
pub(crate) fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Output extent of a strided convolution axis.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// im2col over a batch `xs [N,C,H,W]` into `col [C*kh*kw, N*oh*ow]`, image
/// `ni`'s columns at `[ni*oh*ow, (ni+1)*oh*ow)`. One wide buffer lets the
/// whole convolution run as a single matmul.
pub(crate) fn im2col_all<T: Scalar>(
    xs: &[T],
    n: usize,
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    let ncols = n * oh * ow;
    debug_assert_eq!(col.len(), c * kh * kw * ncols);
    for_each_row(col, ncols, |r, row| {
        let kx = r % kw;
        let ky = (r / kw) % kh;
        let ci = r / (kh * kw);
        for ni in 0..n {
            let plane = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let block = &mut row[ni * oh * ow..(ni + 1) * oh * ow];
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let dst = &mut block[oy * ow..(oy + 1) * ow];
                if iy < 0 || iy >= h as isize {
                    for d in dst.iter_mut() {
                        *d = T::zero();
                    }
                    continue;
                }
                let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                if kx >= pad && (ow - 1) * stride + kx - pad < w && stride == 1 {
                    dst.copy_from_slice(&src[kx - pad..kx - pad + ow]);
                } else {
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    });
}

/// Gather-form col2im over a batch: `dx += scatter(dcol)` where `dcol` is
/// `[C*kh*kw, N*oh*ow]`. Each input element sums its own contributions, so
/// planes parallelize safely.
pub(crate) fn col2im_gather_all<T: Scalar>(
    dcol: &[T],
    n: usize,
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let ncols = n * oh * ow;
    debug_assert_eq!(dx.len(), n * c * h * w);
    for_each_row(dx, h * w, |plane, dplane| {
        let ni = plane / c;
        let ci = plane % c;
        let col0 = ni * oh * ow;
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = T::zero();
                for ky in 0..kh {
                    let oy_num = iy + pad;
                    if oy_num < ky {
                        continue;
                    }
                    let oy_num = oy_num - ky;
                    if oy_num % stride != 0 {
                        continue;
                    }
                    let oy = oy_num / stride;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..kw {
                        let ox_num = ix + pad;
                        if ox_num < kx {
                            continue;
                        }
                        let ox_num = ox_num - kx;
                        if ox_num % stride != 0 {
                            continue;
                        }
                        let ox = ox_num / stride;
                        if ox >= ow {
                            continue;
                        }
                        let r = (ci * kh + ky) * kw + kx;
                        acc = acc + dcol[r * ncols + col0 + oy * ow + ox];
                    }
                }
                dplane[iy * w + ix] = dplane[iy * w + ix] + acc;
            }
        }
    });
}

/// im2col for one output temporal slice of a 3x3x3, stride-1, pad-1 3D
/// convolution. `x [C,T,H,W]`, `col [C*27, H*W]`.
pub(crate) fn im2col_3d_slice<T: Scalar>(
    x: &[T],
    (c, t, h, w): (usize, usize, usize, usize),
    t_out: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c * 27 * h * w);
    for_each_row(col, h * w, |r, row| {
        let kx = r % 3;
        let ky = (r / 3) % 3;
        let kt = (r / 9) % 3;
        let ci = r / 27;
        let tz = t_out as isize + kt as isize - 1;
        if tz < 0 || tz >= t as isize {
            for d in row.iter_mut() {
                *d = T::zero();
            }
            return;
        }
        let plane = &x[(ci * t + tz as usize) * h * w..(ci * t + tz as usize + 1) * h * w];
        for oy in 0..h {
            let iy = oy as isize + ky as isize - 1;
            let dst = &mut row[oy * w..(oy + 1) * w];
            if iy < 0 || iy >= h as isize {
                for d in dst.iter_mut() {
                    *d = T::zero();
                }
                continue;
            }
            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = ox as isize + kx as isize - 1;
                *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
            }
        }
    });
}

/// Serial scatter of one temporal slice's column gradient back into
/// `dx [C,T,H,W]` (slices overlap in t, so this stays single-threaded).
pub(crate) fn col2im_scatter_3d_slice<T: Scalar>(
    dcol: &[T],
    (c, t, h, w): (usize, usize, usize, usize),
    t_out: usize,
    dx: &mut [T],
) {
    for ci in 0..c {
        for kt in 0..3 {
            let tz = t_out as isize + kt as isize - 1;
            if tz < 0 || tz >= t as isize {
                continue;
            }
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = ((ci * 3 + kt) * 3 + ky) * 3 + kx;
                    let src = &dcol[r * h * w..(r + 1) * h * w];
                    let dst = &mut dx[(ci * t + tz as usize) * h * w..(ci * t + tz as usize + 1) * h * w];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox as isize + kx as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                let d = (iy as usize) * w + ix as usize;
                                dst[d] = dst[d] + src[oy * w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-output-index source taps for 2x bilinear upsampling under the
/// half-pixel-center convention: output i samples input at i/2 - 0.25,
/// clamped at the borders.
pub(crate) fn up2x_axis_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = i as f64 / 2.0 - 0.25;
            let src = src.clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Row softmax over `x [m,n]`, stabilized by row-max subtraction.
pub(crate) fn softmax_rows_forward<T: Scalar>(x: &[T], m: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Softmax backward: `dx_i = s_i * (g_i - sum_j g_j s_j)` per row.
pub(crate) fn softmax_rows_backward<T: Scalar>(s: &[T], g: &[T], m: usize, n: usize, dx: &mut [T]) {
    for i in 0..m {
        let s_row = &s[i * n..(i + 1) * n];
        let g_row = &g[i * n..(i + 1) * n];
        let dx_row = &mut dx[i * n..(i + 1) * n];
        let inner = dot(s_row, g_row);
        for ((d, &sv), &gv) in dx_row.iter_mut().zip(s_row).zip(g_row) {
            *d = *d + sv * (gv - inner);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.25 - 1.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[p * 4 + j];
                }
                assert!((c[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_bt_matches_plain() {
        let a: Vec<f64> = (0..15).map(|v| (v as f64).sin()).collect(); // 3x5
        let b: Vec<f64> = (0..20).map(|v| (v as f64).cos()).collect(); // 4x5
        let bt = transpose(&b, 4, 5); // 5x4
        let mut c1 = vec![0.0; 12];
        let mut c2 = vec![0.0; 12];
        matmul_bt_acc(&a, &b, &mut c1, 3, 5, 4);
        matmul_acc(&a, &bt, &mut c2, 3, 5, 4);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn up2x_taps_center_convention() {
        let taps = up2x_axis_taps(4);
        assert_eq!(taps.len(), 8);
        // Output 0 clamps to input 0; output 1 sits a quarter past input 0.
        assert_eq!(taps[0].0, 0);
        assert_eq!(taps[0].1, 1);
        assert!((taps[0].2 - 0.0).abs() < 1e-12);
        assert_eq!(taps[1].0, 0);
        assert!((taps[1].2 - 0.25).abs() < 1e-12);
    }
}
