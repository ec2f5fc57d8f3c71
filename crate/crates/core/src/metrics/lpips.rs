use rand::Rng;

use super::backbone::{FeatureMap, PerceptualBackbone};
use super::hog::Plane;
use crate::error::{ensure_arg, Error, Result};
use crate::volume::Volume;

/// A square 2D patch location: slice index along `axis`, then row/col origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlicePatch {
    pub axis: usize,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

pub(crate) fn plane_dims(shape: [usize; 3], axis: usize) -> (usize, usize) {
    match axis {
        0 => (shape[1], shape[2]),
        1 => (shape[0], shape[2]),
        _ => (shape[0], shape[1]),
    }
}

/// Uniformly sampled patch locations on slices perpendicular to `axis`.
pub fn sample_slice_patches(
    shape: [usize; 3],
    axis: usize,
    patch: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SlicePatch>> {
    ensure_arg!(axis < 3, "axis must be 0, 1 or 2");
    let (rows, cols) = plane_dims(shape, axis);
    ensure_arg!(
        patch > 0 && patch <= rows && patch <= cols,
        "2D patch {patch} does not fit slices of {rows}x{cols}"
    );
    Ok((0..n)
        .map(|_| SlicePatch {
            axis,
            slice: rng.gen_range(0..shape[axis]),
            row: rng.gen_range(0..=rows - patch),
            col: rng.gen_range(0..=cols - patch),
        })
        .collect())
}

/// Extracts the patch at `loc` as a plane.
pub fn read_patch(v: &Volume, loc: SlicePatch, patch: usize) -> Plane {
    Plane::from_fn(patch, patch, |r, c| {
        let (rr, cc) = (loc.row + r, loc.col + c);
        let value = match loc.axis {
            0 => v.get(loc.slice, rr, cc),
            1 => v.get(rr, loc.slice, cc),
            _ => v.get(rr, cc, loc.slice),
        };
        value as f64
    })
}

fn unit_normalize(f: &FeatureMap) -> Vec<f64> {
    let plane = f.rows * f.cols;
    let mut out = f.data.clone();
    for p in 0..plane {
        let norm = (0..f.channels)
            .map(|c| f.data[c * plane + p].powi(2))
            .sum::<f64>()
            .sqrt()
            + 1e-10;
        for c in 0..f.channels {
            out[c * plane + p] /= norm;
        }
    }
    out
}

/// Perceptual distance between two patches: per layer, channel-normalized
/// activations are compared by squared difference summed over channels and
/// averaged over space; layers are averaged.
pub fn perceptual_distance(backbone: &dyn PerceptualBackbone, a: &Plane, b: &Plane) -> f64 {
    let la = backbone.layers(a);
    let lb = backbone.layers(b);
    let mut total = 0.0;
    for (fa, fb) in la.iter().zip(&lb) {
        let na = unit_normalize(fa);
        let nb = unit_normalize(fb);
        let plane = (fa.rows * fa.cols) as f64;
        total += na
            .iter()
            .zip(&nb)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / plane;
    }
    total / la.len().max(1) as f64
}

/// Mean perceptual distance over `n` shared patch locations.
pub fn lpips_patches(
    orig: &Volume,
    other: &Volume,
    n: usize,
    patch: usize,
    axis: usize,
    backbone: Option<&dyn PerceptualBackbone>,
    rng: &mut impl Rng,
) -> Result<f64> {
    let backbone =
        backbone.ok_or_else(|| Error::Config("LPIPS requires a perceptual backbone".into()))?;
    if orig.shape() != other.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            orig.shape(),
            other.shape()
        )));
    }
    ensure_arg!(n >= 1, "need at least one patch");
    let locs = sample_slice_patches(orig.shape(), axis, patch, n, rng)?;
    Ok(locs
        .iter()
        .map(|&l| {
            perceptual_distance(
                backbone,
                &read_patch(orig, l, patch),
                &read_patch(other, l, patch),
            )
        })
        .sum::<f64>()
        / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RandomConvBackbone;
    use crate::util::rng_for;

    #[test]
    fn identity_and_missing_backbone() {
        let v = Volume::from_fn([16, 16, 16], |z, y, x| {
            ((z * 3 + y * 5 + x) % 7) as f32 / 7.0
        });
        let b = RandomConvBackbone::default();
        for axis in 0..3 {
            let d = lpips_patches(&v, &v, 20, 8, axis, Some(&b), &mut rng_for(1, 0)).unwrap();
            assert!(d.abs() <= 1e-6);
        }
        let err = lpips_patches(&v, &v, 20, 8, 0, None, &mut rng_for(1, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn patch_reader_matches_slices() {
        let v = Volume::from_fn([4, 5, 6], |z, y, x| (z * 100 + y * 10 + x) as f32);
        let p = read_patch(
            &v,
            SlicePatch {
                axis: 1,
                slice: 2,
                row: 1,
                col: 3,
            },
            2,
        );
        assert_eq!(p.data, vec![123.0, 124.0, 223.0, 224.0]);
    }
}
