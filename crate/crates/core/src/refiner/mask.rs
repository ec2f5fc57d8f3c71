//! Patch masks: the region the refiner has to synthesize.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};

/// Mask shapes. Half-spaces follow the (z, y, x) index order of volumes:
/// inferior/superior split axis 0, posterior/anterior axis 1, left/right
/// axis 2, with the first name of each pair taking the low-index half.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    Anterior,
    Posterior,
    Inferior,
    Superior,
    Left,
    Right,
    /// Any other region; produced only by inference plans.
    Arbitrary,
}

/// The six half-space kinds used in training, in sampling order.
pub const PARTIAL_KINDS: [MaskKind; 6] = [
    MaskKind::Anterior,
    MaskKind::Posterior,
    MaskKind::Inferior,
    MaskKind::Superior,
    MaskKind::Left,
    MaskKind::Right,
];

impl MaskKind {
    /// `(axis, high_half)` for the half-space kinds.
    fn half_space(self) -> Option<(usize, bool)> {
        match self {
            MaskKind::Inferior => Some((0, false)),
            MaskKind::Superior => Some((0, true)),
            MaskKind::Posterior => Some((1, false)),
            MaskKind::Anterior => Some((1, true)),
            MaskKind::Left => Some((2, false)),
            MaskKind::Right => Some((2, true)),
            MaskKind::Full | MaskKind::Arbitrary => None,
        }
    }
}

/// Boolean `p`-cube; `true` marks voxels to synthesize.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    kind: MaskKind,
    size: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn full(size: usize) -> Self {
        Mask {
            kind: MaskKind::Full,
            size,
            data: vec![true; size.pow(3)],
        }
    }

    /// Mask of a named kind. The low half of an axis is `0..size / 2`.
    pub fn of_kind(kind: MaskKind, size: usize) -> Result<Self> {
        ensure_arg!(size > 0, "mask size must be positive");
        if kind == MaskKind::Full {
            return Ok(Mask::full(size));
        }
        let (axis, high) = kind
            .half_space()
            .ok_or_else(|| Error::InvalidArgument("arbitrary masks need explicit data".into()))?;
        let half = size / 2;
        let mut data = Vec::with_capacity(size.pow(3));
        for z in 0..size {
            for y in 0..size {
                for x in 0..size {
                    let c = [z, y, x][axis];
                    data.push((c >= half) == high);
                }
            }
        }
        Ok(Mask { kind, size, data })
    }

    /// Mask from explicit voxels, labelled `Arbitrary`.
    pub fn arbitrary(size: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != size.pow(3) {
            return Err(Error::ShapeMismatch(format!(
                "mask of size {size} needs {} voxels, got {}",
                size.pow(3),
                data.len()
            )));
        }
        Ok(Mask {
            kind: MaskKind::Arbitrary,
            size,
            data,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Full with probability `full_prob`, otherwise one of the six halves uniformly.
pub fn sample_mask_kind(rng: &mut impl Rng, full_prob: f64) -> Result<MaskKind> {
    ensure_arg!(
        (0.0..=1.0).contains(&full_prob),
        "full-mask probability must lie in [0, 1], got {full_prob}"
    );
    if rng.gen::<f64>() < full_prob {
        Ok(MaskKind::Full)
    } else {
        Ok(PARTIAL_KINDS[rng.gen_range(0..PARTIAL_KINDS.len())])
    }
}

pub fn sample_training_mask(rng: &mut impl Rng, full_prob: f64, size: usize) -> Result<Mask> {
    Mask::of_kind(sample_mask_kind(rng, full_prob)?, size)
}

/// Guidance patch `x * (1 - M) + noise * M`, evaluated per voxel.
pub fn make_y_prev(x_patch: &[f32], mask: &Mask, noise: &[f32]) -> Result<Vec<f32>> {
    if x_patch.len() != mask.data.len() || noise.len() != mask.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "y_prev inputs: patch {}, mask {}, noise {}",
            x_patch.len(),
            mask.data.len(),
            noise.len()
        )));
    }
    Ok(x_patch
        .iter()
        .zip(noise)
        .zip(&mask.data)
        .map(|((&x, &n), &m)| {
            let m = if m { 1.0f32 } else { 0.0 };
            x * (1.0 - m) + n * m
        })
        .collect())
}

/// Mean squared error between true and predicted noise over masked voxels,
/// with its gradient with respect to `pred` (zero outside the mask).
pub fn masked_diffusion_loss(pred: &[f32], truth: &[f32], mask: &Mask) -> Result<(f64, Vec<f32>)> {
    if pred.len() != mask.data.len() || truth.len() != mask.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "masked loss inputs: pred {}, truth {}, mask {}",
            pred.len(),
            truth.len(),
            mask.data.len()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyRegion("masked loss over an empty mask".into()));
    }
    let mut sum = 0.0f64;
    let mut grad = vec![0f32; pred.len()];
    let scale = 2.0 / count as f64;
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            let d = pred[i] as f64 - truth[i] as f64;
            sum += d * d;
            grad[i] = (scale * d) as f32;
        }
    }
    Ok((sum / count as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn halves_split_the_cube() {
        for pair in PARTIAL_KINDS.chunks(2) {
            let a = Mask::of_kind(pair[0], 4).unwrap();
            let b = Mask::of_kind(pair[1], 4).unwrap();
            assert_eq!(a.count(), 32);
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p != q));
        }
        let left = Mask::of_kind(MaskKind::Left, 4).unwrap();
        assert!(left.data()[0] && !left.data()[3]);
        assert!(Mask::of_kind(MaskKind::Arbitrary, 4).is_err());
    }

    #[test]
    fn full_probability_one_is_always_full() {
        let mut rng = rng_for(1, 0);
        for _ in 0..1000 {
            assert_eq!(sample_mask_kind(&mut rng, 1.0).unwrap(), MaskKind::Full);
        }
        assert!(sample_mask_kind(&mut rng, 1.5).is_err());
    }

    #[test]
    fn y_prev_degenerate_masks() {
        let x: Vec<f32> = (0..27).map(|i| i as f32 * 0.1 - 1.0).collect();
        let n: Vec<f32> = (0..27).map(|i| (i as f32).sin()).collect();
        assert_eq!(make_y_prev(&x, &Mask::full(3), &n).unwrap(), n);
        let empty = Mask::arbitrary(3, vec![false; 27]).unwrap();
        assert_eq!(make_y_prev(&x, &empty, &n).unwrap(), x);
        assert!(make_y_prev(&x[..26], &empty, &n).is_err());
    }

    #[test]
    fn loss_of_unit_offset_is_one_and_empty_mask_errors() {
        let t = vec![0.5f32; 64];
        let p: Vec<f32> = t.iter().map(|v| v + 1.0).collect();
        let m = Mask::of_kind(MaskKind::Superior, 4).unwrap();
        assert_eq!(masked_diffusion_loss(&p, &t, &m).unwrap().0, 1.0);
        assert_eq!(masked_diffusion_loss(&t, &t, &m).unwrap().0, 0.0);
        let empty = Mask::arbitrary(4, vec![false; 64]).unwrap();
        assert!(matches!(
            masked_diffusion_loss(&p, &t, &empty),
            Err(Error::EmptyRegion(_))
        ));
    }

    proptest! {
        #[test]
        fn gradient_vanishes_outside_mask(seed in 0u64..1000, k in 0usize..7) {
            let kind = if k == 6 { MaskKind::Full } else { PARTIAL_KINDS[k] };
            let m = Mask::of_kind(kind, 4).unwrap();
            let mut rng = rng_for(seed, 1);
            let p: Vec<f32> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t: Vec<f32> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (_, g) = masked_diffusion_loss(&p, &t, &m).unwrap();
            for (gi, &mi) in g.iter().zip(m.data()) {
                prop_assert!(mi || *gi == 0.0);
            }
        }
    }
}
