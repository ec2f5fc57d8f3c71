use crate::error::{ensure_arg, Result};
use crate::filter::gaussian_smooth;
use crate::volume::{RegionMask, Volume};

/// Additive smoothing applied to every histogram bin before taking the KL.
pub const KL_BIN_EPSILON: f64 = 1e-8;

/// A noise field estimated from an image.
#[derive(Clone, Debug)]
pub struct NoiseEstimate {
    pub noise: Volume,
    pub method: &'static str,
    pub smooth_sigma: f64,
}

/// High-pass residual `v - G_sigma * v`.
pub fn extract_noise(v: &Volume, smooth_sigma: f64) -> Result<NoiseEstimate> {
    ensure_arg!(
        smooth_sigma > 0.0 && smooth_sigma.is_finite(),
        "smooth_sigma must be positive, got {smooth_sigma}"
    );
    let smooth = gaussian_smooth(v, smooth_sigma);
    let data = v
        .data()
        .iter()
        .zip(smooth.data())
        .map(|(&a, &b)| a - b)
        .collect();
    Ok(NoiseEstimate {
        noise: v.with_data(data)?,
        method: "gaussian-highpass",
        smooth_sigma,
    })
}

/// Discrete KL(p_a || p_b) between histograms of `a` and `b` over their pooled range.
pub fn histogram_kl(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    ensure_arg!(bins >= 2, "need at least 2 bins, got {bins}");
    ensure_arg!(
        !a.is_empty() && !b.is_empty(),
        "histogram inputs must be nonempty"
    );
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return Ok(0.0);
    }
    let width = (hi - lo) / bins as f64;
    let hist = |vals: &[f64]| {
        let mut h = vec![0f64; bins];
        for &v in vals {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            h[i] += 1.0;
        }
        let n = vals.len() as f64;
        let z = 1.0 + bins as f64 * KL_BIN_EPSILON;
        h.iter_mut()
            .for_each(|c| *c = (*c / n + KL_BIN_EPSILON) / z);
        h
    };
    let p = hist(a);
    let q = hist(b);
    Ok(p.iter()
        .zip(&q)
        .map(|(p, q)| p * (p / q).ln())
        .sum::<f64>()
        .max(0.0))
}

/// KL divergence between two noise fields restricted to `region`.
///
/// The first argument is the reference distribution.
pub fn noise_kl(
    noise_a: &Volume,
    noise_b: &Volume,
    region: &RegionMask,
    bins: usize,
) -> Result<f64> {
    region.check_usable(noise_a.shape())?;
    region.check_usable(noise_b.shape())?;
    let a: Vec<f64> = region.select(noise_a).into_iter().map(f64::from).collect();
    let b: Vec<f64> = region.select(noise_b).into_iter().map(f64::from).collect();
    histogram_kl(&a, &b, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_volume_has_no_noise() {
        let v = Volume::filled([8, 9, 10], 0.3);
        let n = extract_noise(&v, 1.0).unwrap();
        assert!(n.noise.data().iter().all(|&x| x.abs() < 1e-6));
        assert!(extract_noise(&v, 0.0).is_err());
    }

    #[test]
    fn ramp_plus_noise_interior_std() {
        let mut rng = rng_for(11, 0);
        let g = Normal::new(0.0, 0.05).unwrap();
        let v = Volume::from_fn([40, 40, 40], |z, y, x| {
            (z as f32 + y as f32 * 0.5 - x as f32 * 0.25) / 80.0 + g.sample(&mut rng) as f32
        });
        let n = extract_noise(&v, 1.0).unwrap().noise;
        let mut vals = Vec::new();
        for z in 5..35 {
            for y in 5..35 {
                for x in 5..35 {
                    vals.push(n.get(z, y, x) as f64);
                }
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((s - 0.05).abs() < 0.25 * 0.05, "std {s}");
        assert!(n.mean().abs() < 0.01);
        assert_eq!(extract_noise(&v, 1.0).unwrap().noise, n);
    }

    #[test]
    fn kl_identity_and_empty_region() {
        let v = Volume::from_fn([6, 6, 6], |z, y, x| ((z * 7 + y * 3 + x) % 5) as f32);
        let all = RegionMask::full([6, 6, 6], "all");
        assert!(noise_kl(&v, &v, &all, 64).unwrap() <= 1e-9);
        let none = RegionMask::new([6, 6, 6], vec![false; 216], "none").unwrap();
        assert!(noise_kl(&v, &v, &none, 64).is_err());
        assert!(noise_kl(&v, &v, &all, 1).is_err());
    }

    #[test]
    fn kl_is_larger_for_narrow_candidate() {
        let mut rng = rng_for(3, 0);
        let wide = Normal::new(0.0, 0.05).unwrap();
        let narrow = Normal::new(0.0, 0.01).unwrap();
        let a: Vec<f64> = (0..20000).map(|_| wide.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..20000).map(|_| wide.sample(&mut rng)).collect();
        let c: Vec<f64> = (0..20000).map(|_| narrow.sample(&mut rng)).collect();
        assert!(histogram_kl(&a, &b, 64).unwrap() < histogram_kl(&a, &c, 64).unwrap());
    }
}
