//! Separable Gaussian smoothing and the 6-neighbour Laplacian, with replicate borders.

use crate::volume::{Shape3, Volume};

/// Normalized 1D Gaussian taps covering +-4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_axis(data: &[f64], shape: Shape3, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [d, h, w] = shape;
    let strides = [h * w, w, 1];
    let len = shape[axis] as i64;
    let stride = strides[axis];
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0f64; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = z * strides[0] + y * strides[1] + x;
                let pos = [z, y, x][axis] as i64;
                let base = idx - pos as usize * stride;
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let p = (pos + j as i64 - r).clamp(0, len - 1) as usize;
                    acc += kv * data[base + p * stride];
                }
                out[idx] = acc;
            }
        }
    }
    out
}

/// Gaussian smoothing in f64; `sigma` in voxels, replicate boundary.
pub fn gaussian_smooth_f64(data: &[f64], shape: Shape3, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let a = convolve_axis(data, shape, 2, &k);
    let b = convolve_axis(&a, shape, 1, &k);
    convolve_axis(&b, shape, 0, &k)
}

pub fn gaussian_smooth(v: &Volume, sigma: f64) -> Volume {
    let data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let out = gaussian_smooth_f64(&data, v.shape(), sigma);
    v.with_data(out.into_iter().map(|x| x as f32).collect())
        .expect("smoothing preserves shape and finiteness")
}

/// Discrete Laplacian with the 6-neighbour stencil; out-of-range neighbours
/// take the value of the nearest in-range voxel.
pub fn laplacian6(data: &[f64], shape: Shape3) -> Vec<f64> {
    let [d, h, w] = shape;
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x];
    let mut out = vec![0f64; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let c = at(z, y, x);
                let s = at(z.saturating_sub(1), y, x)
                    + at((z + 1).min(d - 1), y, x)
                    + at(z, y.saturating_sub(1), x)
                    + at(z, (y + 1).min(h - 1), x)
                    + at(z, y, x.saturating_sub(1))
                    + at(z, y, (x + 1).min(w - 1));
                out[(z * h + y) * w + x] = s - 6.0 * c;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for s in [0.5, 1.0, 1.5, 3.0] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k.len() {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = Volume::filled([5, 6, 7], 0.25);
        let s = gaussian_smooth(&v, 1.3);
        assert!(s.data().iter().all(|&x| (x - 0.25).abs() < 1e-6));
    }

    #[test]
    fn laplacian_of_linear_ramp_vanishes_inside() {
        let shape = [6, 6, 6];
        let data: Vec<f64> = (0..216).map(|i| (i % 6) as f64).collect();
        let l = laplacian6(&data, shape);
        for z in 0..6 {
            for y in 0..6 {
                for x in 1..5 {
                    assert_eq!(l[(z * 6 + y) * 6 + x], 0.0);
                }
            }
        }
    }
}
