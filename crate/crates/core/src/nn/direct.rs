//! Direct 3x3x3 stride-1 "same" convolution kernels.
//!
//! For the narrow layers used here, unfolding the input (im2col) costs more
//! than the arithmetic, so these kernels accumulate whole output rows from
//! shifted rows of a zero-padded input instead. The hot loops are compiled
//! twice, once with AVX2/FMA enabled, and dispatched at runtime.

use super::tensor::Tensor;

/// Zero-pads every `[D][H][W]` row block by one voxel on each side.
fn pad1(x: &Tensor) -> (Vec<f32>, [usize; 3]) {
    let [d, h, w] = x.dims;
    let pd = [d + 2, h + 2, w + 2];
    let ps = pd[0] * pd[1] * pd[2];
    let rows = x.c * x.n;
    let mut out = vec![0f32; rows * ps];
    for r in 0..rows {
        let src = &x.data[r * d * h * w..(r + 1) * d * h * w];
        let dst = &mut out[r * ps..(r + 1) * ps];
        for z in 0..d {
            for y in 0..h {
                let o = ((z + 1) * pd[1] + y + 1) * pd[2] + 1;
                dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..(z * h + y + 1) * w]);
            }
        }
    }
    (out, pd)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[inline(always)]
fn forward_rows(xp: &[f32], pd: [usize; 3], x: &Tensor, wt: &[f32], cout: usize, y: &mut Tensor) {
    let cin = x.c;
    let [d, h, w] = x.dims;
    let ps = pd[0] * pd[1] * pd[2];
    let s = d * h * w;
    let mut acc = vec![0f32; cout * w];
    for j in 0..x.n {
        for z in 0..d {
            for yy in 0..h {
                acc.fill(0.0);
                for ci in 0..cin {
                    let base = (ci * x.n + j) * ps;
                    for kz in 0..3 {
                        for ky in 0..3 {
                            let o = base + ((z + kz) * pd[1] + yy + ky) * pd[2];
                            let src = &xp[o..o + w + 2];
                            let (s0, s1, s2) = (&src[..w], &src[1..w + 1], &src[2..w + 2]);
                            let wk = &wt[(ci * 9 + kz * 3 + ky) * cout * 3..][..cout * 3];
                            for (a, wc) in acc.chunks_exact_mut(w).zip(wk.chunks_exact(3)) {
                                let (w0, w1, w2) = (wc[0], wc[1], wc[2]);
                                for i in 0..w {
                                    a[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
                                }
                            }
                        }
                    }
                }
                for (co, a) in acc.chunks_exact(w).enumerate() {
                    let o = (co * x.n + j) * s + (z * h + yy) * w;
                    y.data[o..o + w].copy_from_slice(a);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_rows_avx2(
    xp: &[f32],
    pd: [usize; 3],
    x: &Tensor,
    wt: &[f32],
    cout: usize,
    y: &mut Tensor,
) {
    forward_rows(xp, pd, x, wt, cout, y)
}

/// `y[co] = sum_ci w[co][ci] * x[ci]` with weights laid out `[cout][cin * 27]`.
/// No bias is added.
pub(crate) fn conv3_forward(x: &Tensor, weight: &[f32], cout: usize) -> Tensor {
    let cin = x.c;
    let (xp, pd) = pad1(x);
    // Reorder to [ci][kz][ky][co][kx] so the inner loops read contiguously.
    let mut wt = vec![0f32; cout * cin * 27];
    for co in 0..cout {
        for ci in 0..cin {
            for k9 in 0..9 {
                for kx in 0..3 {
                    wt[((ci * 9 + k9) * cout + co) * 3 + kx] =
                        weight[(co * cin + ci) * 27 + k9 * 3 + kx];
                }
            }
        }
    }
    let mut y = Tensor::zeros(cout, x.n, x.dims);
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // Safety: the required CPU features were detected at runtime.
        unsafe { forward_rows_avx2(&xp, pd, x, &wt, cout, &mut y) };
        return y;
    }
    forward_rows(&xp, pd, x, &wt, cout, &mut y);
    y
}

/// Input gradient: the same kernel run on `dy` with spatially flipped,
/// channel-transposed weights.
pub(crate) fn conv3_input_grad(dy: &Tensor, weight: &[f32], cin: usize) -> Tensor {
    let cout = dy.c;
    let mut flipped = vec![0f32; cin * cout * 27];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..27 {
                flipped[(ci * cout + co) * 27 + (26 - k)] = weight[(co * cin + ci) * 27 + k];
            }
        }
    }
    conv3_forward(dy, &flipped, cin)
}

#[inline(always)]
fn weight_grad_rows(xp: &[f32], pd: [usize; 3], x: &Tensor, dy: &Tensor, grad: &mut [f32]) {
    let (cin, cout) = (x.c, dy.c);
    let [d, h, w] = x.dims;
    let ps = pd[0] * pd[1] * pd[2];
    let s = d * h * w;
    // Per-lane partial sums for one (ci, kz, ky): acc[co][kx][i].
    let mut acc = vec![0f32; cout * 3 * w];
    for ci in 0..cin {
        for kz in 0..3 {
            for ky in 0..3 {
                acc.fill(0.0);
                for j in 0..x.n {
                    let base = (ci * x.n + j) * ps;
                    for z in 0..d {
                        for yy in 0..h {
                            let o = base + ((z + kz) * pd[1] + yy + ky) * pd[2];
                            let src = &xp[o..o + w + 2];
                            let (s0, s1, s2) = (&src[..w], &src[1..w + 1], &src[2..w + 2]);
                            let row = (z * h + yy) * w;
                            for (co, ac) in acc.chunks_exact_mut(3 * w).enumerate() {
                                let g = &dy.data[(co * x.n + j) * s + row..][..w];
                                let (a0, rest) = ac.split_at_mut(w);
                                let (a1, a2) = rest.split_at_mut(w);
                                for i in 0..w {
                                    a0[i] += g[i] * s0[i];
                                    a1[i] += g[i] * s1[i];
                                    a2[i] += g[i] * s2[i];
                                }
                            }
                        }
                    }
                }
                for co in 0..cout {
                    for kx in 0..3 {
                        let lane = &acc[(co * 3 + kx) * w..][..w];
                        grad[(co * cin + ci) * 27 + (kz * 3 + ky) * 3 + kx] +=
                            lane.iter().sum::<f32>();
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_rows_avx2(
    xp: &[f32],
    pd: [usize; 3],
    x: &Tensor,
    dy: &Tensor,
    grad: &mut [f32],
) {
    weight_grad_rows(xp, pd, x, dy, grad)
}

/// Accumulates `dW[co][ci][k] += sum_pos dy[co][pos] * xpad[ci][pos + k]`.
pub(crate) fn conv3_weight_grad(x: &Tensor, dy: &Tensor, grad: &mut [f32]) {
    let (xp, pd) = pad1(x);
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // Safety: the required CPU features were detected at runtime.
        unsafe { weight_grad_rows_avx2(&xp, pd, x, dy, grad) };
        return;
    }
    weight_grad_rows(&xp, pd, x, dy, grad);
}
