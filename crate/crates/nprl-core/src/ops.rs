//! Low-level kernels behind the graph ops. All loops have a fixed evaluation
//! order so results are bit-reproducible; reductions are split into eight
//! independent lanes (still a fixed order) so LLVM can vectorize them.

use alloc::vec;
use alloc::vec::Vec;

use crate::elem::Elem;

pub const KERNEL: usize = 3;

/// Output spatial extent of a valid (no padding) convolution.
pub fn conv_out_extent(input: usize, stride: usize) -> usize {
    (input - KERNEL) / stride + 1
}

/// C[m x n] += A[m x k] * B[k x n]
pub fn matmul_acc<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// Lane-split dot product; deterministic and SIMD-friendly.
pub fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [E::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] = acc[l] + a[base + l] * b[base + l];
        }
    }
    let mut tail = E::ZERO;
    for i in chunks * LANES..a.len() {
        tail = tail + a[i] * b[i];
    }
    // pairwise fold keeps the order fixed
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// C[m x n] += A[m x kk] * B[n x kk]^T  (both operands row-contiguous)
pub fn matmul_abt_acc<E: Elem>(a: &[E], b: &[E], m: usize, kk: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(b.len(), n * kk);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * kk..(i + 1) * kk];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * kk..(j + 1) * kk];
            *o = *o + dot(a_row, b_row);
        }
    }
}

/// C[k x n] += A[p x k]^T * B[p x n]
pub fn matmul_atb_acc<E: Elem>(a: &[E], b: &[E], p_dim: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), p_dim * k);
    debug_assert_eq!(b.len(), p_dim * n);
    debug_assert_eq!(out.len(), k * n);
    for p in 0..p_dim {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let a_pi = a[p * k + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_pi * bv;
            }
        }
    }
}

/// Unrolls one image (C x H x W) into columns (C*9 x OH*OW) for a valid 3x3
/// convolution with the given stride.
pub fn im2col<E: Elem>(x: &[E], c: usize, h: usize, w: usize, stride: usize, cols: &mut [E]) {
    let oh = conv_out_extent(h, stride);
    let ow = conv_out_extent(w, stride);
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * KERNEL * KERNEL * oh * ow);
    let plane = oh * ow;
    for ci in 0..c {
        let x_ch = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ci * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                for oy in 0..oh {
                    let src = &x_ch[(oy * stride + ky) * w + kx..];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        dst.copy_from_slice(&src[..ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back into an image gradient (inverse of
/// `im2col` with accumulation where windows overlap).
pub fn col2im_add<E: Elem>(cols: &[E], c: usize, h: usize, w: usize, stride: usize, dx: &mut [E]) {
    let oh = conv_out_extent(h, stride);
    let ow = conv_out_extent(w, stride);
    debug_assert_eq!(dx.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * KERNEL * KERNEL * oh * ow);
    let plane = oh * ow;
    for ci in 0..c {
        let dx_ch = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ci * KERNEL + ky) * KERNEL + kx) * plane..][..plane];
                for oy in 0..oh {
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst = &mut dx_ch[(oy * stride + ky) * w + kx..];
                    for (ox, &s) in src.iter().enumerate() {
                        dst[ox * stride] = dst[ox * stride] + s;
                    }
                }
            }
        }
    }
}

/// Batched valid 3x3 convolution forward. `x`: N x Cin x H x W, `w`:
/// Cout x Cin x 3 x 3, `bias`: Cout. Returns N x Cout x OH x OW.
pub fn conv2d_forward<E: Elem>(
    x: &[E],
    w: &[E],
    bias: &[E],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    stride: usize,
) -> Vec<E> {
    let oh = conv_out_extent(h, stride);
    let ow = conv_out_extent(wd, stride);
    let plane = oh * ow;
    let kk = cin * KERNEL * KERNEL;
    let mut out = vec![E::ZERO; n * cout * plane];
    let mut cols = vec![E::ZERO; kk * plane];
    for img in 0..n {
        im2col(&x[img * cin * h * wd..(img + 1) * cin * h * wd], cin, h, wd, stride, &mut cols);
        let o = &mut out[img * cout * plane..(img + 1) * cout * plane];
        for (co, orow) in o.chunks_exact_mut(plane).enumerate() {
            let b = bias[co];
            for v in orow.iter_mut() {
                *v = b;
            }
        }
        matmul_acc(w, &cols, cout, kk, plane, o);
    }
    out
}

/// Backward pass of the batched convolution. Returns (dx, dw, db); `dx` is
/// `None` when `need_dx` is false (saves the col2im pass for input leaves).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Elem>(
    x: &[E],
    w: &[E],
    dy: &[E],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    stride: usize,
    need_dx: bool,
) -> (Option<Vec<E>>, Vec<E>, Vec<E>) {
    let oh = conv_out_extent(h, stride);
    let ow = conv_out_extent(wd, stride);
    let plane = oh * ow;
    let kk = cin * KERNEL * KERNEL;
    let mut dw = vec![E::ZERO; cout * kk];
    let mut db = vec![E::ZERO; cout];
    let mut dx = if need_dx { Some(vec![E::ZERO; n * cin * h * wd]) } else { None };
    let mut cols = vec![E::ZERO; kk * plane];
    let mut col_grad = vec![E::ZERO; kk * plane];
    for img in 0..n {
        let dy_img = &dy[img * cout * plane..(img + 1) * cout * plane];
        // bias: plain row sums
        for (co, dyrow) in dy_img.chunks_exact(plane).enumerate() {
            let mut s = E::ZERO;
            for &v in dyrow {
                s = s + v;
            }
            db[co] = db[co] + s;
        }
        im2col(&x[img * cin * h * wd..(img + 1) * cin * h * wd], cin, h, wd, stride, &mut cols);
        matmul_abt_acc(dy_img, &cols, cout, plane, kk, &mut dw);
        if let Some(dx) = dx.as_mut() {
            for v in col_grad.iter_mut() {
                *v = E::ZERO;
            }
            matmul_atb_acc(w, dy_img, cout, kk, plane, &mut col_grad);
            col2im_add(&col_grad, cin, h, wd, stride, &mut dx[img * cin * h * wd..(img + 1) * cin * h * wd]);
        }
    }
    (dx, dw, db)
}

/// Per-channel mean and inverse standard deviation over batch and space.
/// Returns (mean, inv_std, biased_var) per channel.
pub fn batch_stats<E: Elem>(x: &[E], n: usize, c: usize, plane: usize, eps: E) -> (Vec<E>, Vec<E>, Vec<E>) {
    let m = E::from_usize(n * plane);
    let mut mean = vec![E::ZERO; c];
    let mut var = vec![E::ZERO; c];
    for img in 0..n {
        for ch in 0..c {
            let s = &x[(img * c + ch) * plane..][..plane];
            let mut acc = E::ZERO;
            for &v in s {
                acc = acc + v;
            }
            mean[ch] = mean[ch] + acc;
        }
    }
    for v in mean.iter_mut() {
        *v = *v / m;
    }
    for img in 0..n {
        for ch in 0..c {
            let mu = mean[ch];
            let s = &x[(img * c + ch) * plane..][..plane];
            let mut acc = E::ZERO;
            for &v in s {
                let d = v - mu;
                acc = acc + d * d;
            }
            var[ch] = var[ch] + acc;
        }
    }
    for v in var.iter_mut() {
        *v = *v / m;
    }
    let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
    (mean, inv_std, var)
}

/// y = gamma * (x - mean) * inv_std + beta, fused as y = a*x + b per channel.
pub fn batchnorm_apply<E: Elem>(
    x: &[E],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    beta: &[E],
) -> Vec<E> {
    let mut y = vec![E::ZERO; x.len()];
    for img in 0..n {
        for ch in 0..c {
            let a = gamma[ch] * inv_std[ch];
            let b = beta[ch] - a * mean[ch];
            let xs = &x[(img * c + ch) * plane..][..plane];
            let ys = &mut y[(img * c + ch) * plane..][..plane];
            for (yo, &xv) in ys.iter_mut().zip(xs.iter()) {
                *yo = a * xv + b;
            }
        }
    }
    y
}

/// Batchnorm backward. When `stats_from_batch` is true the mean/inv_std were
/// computed from this batch (training mode) and carry gradient; otherwise they
/// are constants (eval mode).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<E: Elem>(
    x: &[E],
    dy: &[E],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    stats_from_batch: bool,
    need_dx: bool,
) -> (Option<Vec<E>>, Vec<E>, Vec<E>) {
    let m = E::from_usize(n * plane);
    // per-channel reductions: sum(dy), sum(dy * xhat)
    let mut sum_dy = vec![E::ZERO; c];
    let mut sum_dy_xhat = vec![E::ZERO; c];
    for img in 0..n {
        for ch in 0..c {
            let mu = mean[ch];
            let is = inv_std[ch];
            let xs = &x[(img * c + ch) * plane..][..plane];
            let dys = &dy[(img * c + ch) * plane..][..plane];
            let mut s = E::ZERO;
            let mut sx = E::ZERO;
            for (&xv, &dv) in xs.iter().zip(dys.iter()) {
                s = s + dv;
                sx = sx + dv * ((xv - mu) * is);
            }
            sum_dy[ch] = sum_dy[ch] + s;
            sum_dy_xhat[ch] = sum_dy_xhat[ch] + sx;
        }
    }
    let dgamma = sum_dy_xhat.clone();
    let dbeta = sum_dy.clone();
    let dx = if need_dx {
        let mut dx = vec![E::ZERO; x.len()];
        for img in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                let is = inv_std[ch];
                let g = gamma[ch];
                let xs = &x[(img * c + ch) * plane..][..plane];
                let dys = &dy[(img * c + ch) * plane..][..plane];
                let dxs = &mut dx[(img * c + ch) * plane..][..plane];
                if stats_from_batch {
                    let k1 = sum_dy[ch] / m;
                    let k2 = sum_dy_xhat[ch] / m;
                    for ((dxo, &dv), &xv) in dxs.iter_mut().zip(dys.iter()).zip(xs.iter()) {
                        let xhat = (xv - mu) * is;
                        *dxo = g * is * (dv - k1 - xhat * k2);
                    }
                } else {
                    let a = g * is;
                    for (dxo, &dv) in dxs.iter_mut().zip(dys.iter()) {
                        *dxo = a * dv;
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    (dx, dgamma, dbeta)
}

/// Row-wise softmax with max subtraction. `logits`: N x K, returns probs.
pub fn softmax_rows<E: Elem>(logits: &[E], n: usize, k: usize) -> Vec<E> {
    let mut probs = vec![E::ZERO; logits.len()];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let prow = &mut probs[i * k..(i + 1) * k];
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maximum(v);
        }
        let mut sum = E::ZERO;
        for (p, &v) in prow.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *p = e;
            sum = sum + e;
        }
        let inv = E::ONE / sum;
        for p in prow.iter_mut() {
            *p = *p * inv;
        }
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng;
    use rand::Rng;

    fn rand_vec(n: usize, rng: &mut rng::SeedRng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut r = rng::derive(11, "matmul");
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (2, 3, 4), (5, 7, 3), (8, 16, 9)] {
            let a = rand_vec(m * k, &mut r);
            let b = rand_vec(k * n, &mut r);
            let mut out = vec![0.0; m * n];
            matmul_acc(&a, &b, m, k, n, &mut out);
            let want = reference::naive_matmul(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn transposed_matmuls_match_naive() {
        let mut r = rng::derive(12, "matmul-t");
        let (m, kk, n) = (4usize, 13usize, 6usize);
        let a = rand_vec(m * kk, &mut r);
        let b = rand_vec(n * kk, &mut r);
        let mut out = vec![0.0; m * n];
        matmul_abt_acc(&a, &b, m, kk, n, &mut out);
        // naive: C[i][j] = sum_p A[i][p] * B[j][p]
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..kk {
                    s += a[i * kk + p] * b[j * kk + p];
                }
                assert!((out[i * n + j] - s).abs() < 1e-12);
            }
        }

        let (pd, k2, n2) = (5usize, 3usize, 7usize);
        let a2 = rand_vec(pd * k2, &mut r);
        let b2 = rand_vec(pd * n2, &mut r);
        let mut out2 = vec![0.0; k2 * n2];
        matmul_atb_acc(&a2, &b2, pd, k2, n2, &mut out2);
        for i in 0..k2 {
            for j in 0..n2 {
                let mut s = 0.0;
                for p in 0..pd {
                    s += a2[p * k2 + i] * b2[p * n2 + j];
                }
                assert!((out2[i * n2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_forward_matches_naive_oracle() {
        let mut r = rng::derive(13, "conv");
        for &(n, cin, h, w, cout, stride) in
            &[(1usize, 2usize, 4usize, 4usize, 3usize, 1usize), (2, 1, 5, 7, 2, 2), (1, 3, 9, 9, 4, 2), (2, 2, 6, 5, 3, 1)]
        {
            let x = rand_vec(n * cin * h * w, &mut r);
            let wt = rand_vec(cout * cin * 9, &mut r);
            let b = rand_vec(cout, &mut r);
            let got = conv2d_forward(&x, &wt, &b, n, cin, h, w, cout, stride);
            let want = reference::naive_conv2d(&x, &wt, &b, n, cin, h, w, cout, stride);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-6, "conv mismatch {} vs {}", g, w);
            }
        }
    }

    #[test]
    fn im2col_col2im_roundtrip_counts_window_uses() {
        // every input cell receives exactly the number of windows covering it
        let (c, h, w, stride) = (1usize, 5usize, 5usize, 1usize);
        let x = vec![1.0f64; c * h * w];
        let oh = conv_out_extent(h, stride);
        let ow = conv_out_extent(w, stride);
        let mut cols = vec![0.0; c * 9 * oh * ow];
        im2col(&x, c, h, w, stride, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im_add(&cols, c, h, w, stride, &mut back);
        // center cell of a 5x5 with 3x3 windows is covered 9 times
        assert_eq!(back[2 * 5 + 2], 9.0);
        // corner is covered once
        assert_eq!(back[0], 1.0);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let logits = vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0];
        let p = softmax_rows(&logits, 2, 3);
        for row in p.chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_is_stable_at_huge_magnitudes() {
        let logits = vec![1.0e4f32, -1.0e4, 0.0];
        let p = softmax_rows(&logits, 1, 3);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-6);
    }
}
