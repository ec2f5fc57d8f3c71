use rand::Rng;

use crate::error::{ensure_arg, Result};
use crate::filter::{gaussian_smooth_f64, laplacian6};
use crate::volume::{Shape3, Volume};

/// Uniform in-bounds origins for `n` cubic patches of size `patch`.
pub fn sample_cube_origins(
    shape: Shape3,
    patch: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<Shape3> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(0..=shape[0] - patch),
                rng.gen_range(0..=shape[1] - patch),
                rng.gen_range(0..=shape[2] - patch),
            ]
        })
        .collect()
}

/// Laplacian response of the Gaussian-smoothed volume.
pub fn laplacian_response(v: &Volume, sigma: f64) -> Vec<f64> {
    let data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let smooth = if sigma > 0.0 {
        gaussian_smooth_f64(&data, v.shape(), sigma)
    } else {
        data
    };
    laplacian6(&smooth, v.shape())
}

/// Mean over the given patches of the population variance of the Laplacian response.
pub fn laplacian_variance_at(
    v: &Volume,
    sigma: f64,
    patch: usize,
    origins: &[Shape3],
) -> Result<f64> {
    let shape = v.shape();
    ensure_arg!(
        patch > 0 && shape.iter().all(|&l| patch <= l),
        "patch {patch} does not fit volume {shape:?}"
    );
    ensure_arg!(!origins.is_empty(), "need at least one patch");
    let lap = laplacian_response(v, sigma);
    let [_, h, w] = shape;
    let count = (patch * patch * patch) as f64;
    let mut total = 0.0;
    for o in origins {
        ensure_arg!(
            (0..3).all(|a| o[a] + patch <= shape[a]),
            "patch origin {o:?} out of bounds"
        );
        let mut sum = 0.0;
        let mut sq = 0.0;
        for z in o[0]..o[0] + patch {
            for y in o[1]..o[1] + patch {
                let row = (z * h + y) * w;
                for &l in &lap[row + o[2]..row + o[2] + patch] {
                    sum += l;
                    sq += l * l;
                }
            }
        }
        let mean = sum / count;
        total += (sq / count - mean * mean).max(0.0);
    }
    Ok(total / origins.len() as f64)
}

/// Patch-based Laplacian-variance sharpness (higher = sharper).
pub fn laplacian_variance_sharpness(
    v: &Volume,
    sigma: f64,
    patch: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    ensure_arg!(n >= 1, "need at least one patch");
    ensure_arg!(
        patch > 0 && v.shape().iter().all(|&l| patch <= l),
        "patch {patch} does not fit volume {:?}",
        v.shape()
    );
    let origins = sample_cube_origins(v.shape(), patch, n, rng);
    laplacian_variance_at(v, sigma, patch, &origins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn constant_volume_is_flat() {
        let v = Volume::filled([10, 10, 10], 0.4);
        let s = laplacian_variance_sharpness(&v, 0.5, 4, 20, &mut rng_for(0, 0)).unwrap();
        assert!(s.abs() < 1e-20);
    }

    #[test]
    fn rejects_oversized_patch() {
        let v = Volume::zeros([8, 8, 8]);
        assert!(laplacian_variance_sharpness(&v, 0.5, 9, 1, &mut rng_for(0, 0)).is_err());
    }
}
