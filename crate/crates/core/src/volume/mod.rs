//! Volumes, region masks, and the patch geometry shared by every stage.

mod io;
mod patch;

pub use io::{load_labels, load_volume, save_labels, save_volume, Sidecar};
pub use patch::{extract_patch, insert_patch, PatchGrid};

use crate::error::{ensure_arg, Error, Result};

/// Extent of a volume along (D, H, W).
pub type Shape3 = [usize; 3];

/// Number of voxels in a shape.
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// A 3D scalar image in C order (D, H, W) with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    data: Vec<f32>,
    spacing: [f32; 3],
    intensity_range: Option<(f32, f32)>,
}

impl Volume {
    /// Builds a volume, rejecting wrong lengths, non-finite values, and non-positive spacing.
    pub fn new(shape: Shape3, data: Vec<f32>, spacing: [f32; 3]) -> Result<Self> {
        if data.len() != voxel_count(shape) {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} voxels, got {}",
                shape,
                voxel_count(shape),
                data.len()
            )));
        }
        ensure_arg!(
            spacing.iter().all(|s| *s > 0.0 && s.is_finite()),
            "spacing must be positive, got {:?}",
            spacing
        );
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        ensure_arg!(bad == 0, "{bad} non-finite voxel values");
        Ok(Volume {
            shape,
            data,
            spacing,
            intensity_range: None,
        })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape3, value: f32) -> Self {
        Volume {
            shape,
            data: vec![value; voxel_count(shape)],
            spacing: [1.0; 3],
            intensity_range: None,
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume {
            shape,
            data,
            spacing: [1.0; 3],
            intensity_range: None,
        }
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn with_intensity_range(mut self, range: Option<(f32, f32)>) -> Self {
        self.intensity_range = range;
        self
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn intensity_range(&self) -> Option<(f32, f32)> {
        self.intensity_range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Same geometry, new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        let mut out = Volume::new(self.shape, data, self.spacing)?;
        out.intensity_range = self.intensity_range;
        Ok(out)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Clamps every voxel into `[lo, hi]`.
    pub fn clamp(mut self, lo: f32, hi: f32) -> Self {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
        self
    }

    /// A 2D slice perpendicular to `axis` as (rows, cols, values).
    pub fn slice(&self, axis: usize, index: usize) -> (usize, usize, Vec<f32>) {
        let [d, h, w] = self.shape;
        match axis {
            0 => {
                let start = index * h * w;
                (h, w, self.data[start..start + h * w].to_vec())
            }
            1 => {
                let mut out = Vec::with_capacity(d * w);
                for z in 0..d {
                    let start = self.index(z, index, 0);
                    out.extend_from_slice(&self.data[start..start + w]);
                }
                (d, w, out)
            }
            _ => {
                let mut out = Vec::with_capacity(d * h);
                for z in 0..d {
                    for y in 0..h {
                        out.push(self.get(z, y, index));
                    }
                }
                (d, h, out)
            }
        }
    }
}

/// Affine intensity map `lo -> -1`, `hi -> +1`, clipping everything outside.
pub fn normalize_intensity(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    ensure_arg!(
        lo < hi && lo.is_finite() && hi.is_finite(),
        "normalization requires lo < hi, got lo={lo} hi={hi}"
    );
    let (lo64, hi64) = (lo as f64, hi as f64);
    let scale = 2.0 / (hi64 - lo64);
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - lo64) * scale - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Volume {
        shape: v.shape,
        data,
        spacing: v.spacing,
        intensity_range: Some((-1.0, 1.0)),
    })
}

/// Per-axis start offset of a centred crop; the odd leftover voxel stays on the high side.
pub fn center_crop_offset(len: usize, target: usize) -> usize {
    (len - target) / 2
}

/// Centred sub-volume of the requested shape.
pub fn crop_center(v: &Volume, shape: Shape3) -> Result<Volume> {
    for a in 0..3 {
        ensure_arg!(
            shape[a] <= v.shape[a] && shape[a] > 0,
            "crop shape {:?} exceeds volume shape {:?}",
            shape,
            v.shape
        );
    }
    let off = [
        center_crop_offset(v.shape[0], shape[0]),
        center_crop_offset(v.shape[1], shape[1]),
        center_crop_offset(v.shape[2], shape[2]),
    ];
    let mut out = extract_box(v, off, shape);
    out.intensity_range = v.intensity_range;
    Ok(out)
}

pub(crate) fn extract_box(v: &Volume, origin: Shape3, size: Shape3) -> Volume {
    let mut data = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = v.index(origin[0] + z, origin[1] + y, origin[2]);
            data.extend_from_slice(&v.data[start..start + size[2]]);
        }
    }
    Volume {
        shape: size,
        data,
        spacing: v.spacing,
        intensity_range: None,
    }
}

/// A boolean voxel mask naming an anatomical (or phantom) region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    shape: Shape3,
    data: Vec<bool>,
    label: String,
}

impl RegionMask {
    pub fn new(shape: Shape3, data: Vec<bool>, label: impl Into<String>) -> Result<Self> {
        if data.len() != voxel_count(shape) {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {:?} needs {} voxels, got {}",
                shape,
                voxel_count(shape),
                data.len()
            )));
        }
        Ok(RegionMask {
            shape,
            data,
            label: label.into(),
        })
    }

    pub fn full(shape: Shape3, label: impl Into<String>) -> Self {
        RegionMask {
            shape,
            data: vec![true; voxel_count(shape)],
            label: label.into(),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Errors unless the mask matches `shape` and selects at least one voxel.
    pub fn check_usable(&self, shape: Shape3) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "region `{}` has shape {:?}, volume has {:?}",
                self.label, self.shape, shape
            )));
        }
        if self.count() == 0 {
            return Err(Error::EmptyRegion(self.label.clone()));
        }
        Ok(())
    }

    /// Inclusive-exclusive bounding box `(lo, hi)` of the selected voxels.
    pub fn bounding_box(&self) -> Option<(Shape3, Shape3)> {
        let mut lo = self.shape;
        let mut hi = [0usize; 3];
        let mut any = false;
        for z in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                for x in 0..self.shape[2] {
                    if self.get(z, y, x) {
                        any = true;
                        for (a, c) in [z, y, x].into_iter().enumerate() {
                            lo[a] = lo[a].min(c);
                            hi[a] = hi[a].max(c + 1);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Values of `v` at the selected voxels, in C order.
    pub fn select(&self, v: &Volume) -> Vec<f32> {
        v.data()
            .iter()
            .zip(&self.data)
            .filter_map(|(&x, &m)| m.then_some(x))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_midpoint_and_clip() {
        let v = Volume::new([1, 1, 4], vec![10.0, 30.0, 20.0, 40.0], [1.0; 3]).unwrap();
        let n = normalize_intensity(&v, 10.0, 30.0).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0, 0.0, 1.0]);
        assert_eq!(n.intensity_range(), Some((-1.0, 1.0)));
    }

    #[test]
    fn normalize_rejects_inverted_range() {
        let v = Volume::zeros([2, 2, 2]);
        assert!(normalize_intensity(&v, 1.0, 1.0).is_err());
        assert!(normalize_intensity(&v, 2.0, 1.0).is_err());
    }

    #[test]
    fn crop_identity_and_symmetric() {
        let v = Volume::from_fn([10, 10, 10], |z, y, x| (z * 100 + y * 10 + x) as f32);
        assert_eq!(crop_center(&v, [10, 10, 10]).unwrap(), v);
        let v6 = Volume::from_fn([6, 6, 6], |z, y, x| (z * 100 + y * 10 + x) as f32);
        let c = crop_center(&v6, [4, 4, 4]).unwrap();
        assert_eq!(c.get(0, 0, 0), 111.0);
        assert!(crop_center(&v6, [7, 4, 4]).is_err());
    }

    #[test]
    fn crop_odd_remainder_goes_high() {
        // Brute force: the centred offset is the one minimising the imbalance
        // between the low and high margins, ties resolved towards the low index.
        for len in 1..20usize {
            for target in 1..=len {
                let best = (0..=len - target)
                    .min_by_key(|&o| {
                        let low = o as i64;
                        let high = (len - target - o) as i64;
                        ((high - low).abs(), o)
                    })
                    .unwrap();
                assert_eq!(
                    center_crop_offset(len, target),
                    best,
                    "len {len} target {target}"
                );
            }
        }
        assert_eq!(center_crop_offset(7, 4), 1);
    }

    #[test]
    fn volume_rejects_non_finite_and_bad_len() {
        assert!(Volume::new([1, 1, 2], vec![0.0, f32::NAN], [1.0; 3]).is_err());
        assert!(Volume::new([1, 1, 2], vec![0.0], [1.0; 3]).is_err());
        assert!(Volume::new([1, 1, 1], vec![0.0], [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn slices_along_each_axis() {
        let v = Volume::from_fn([2, 3, 4], |z, y, x| (z * 100 + y * 10 + x) as f32);
        let (r, c, s) = v.slice(0, 1);
        assert_eq!((r, c), (3, 4));
        assert_eq!(s[5], 111.0);
        let (r, c, s) = v.slice(1, 2);
        assert_eq!((r, c), (2, 4));
        assert_eq!(s[4 + 3], 123.0);
        let (r, c, s) = v.slice(2, 3);
        assert_eq!((r, c), (2, 3));
        assert_eq!(s[3 + 1], 113.0);
    }

    #[test]
    fn region_bbox_and_usability() {
        let mut data = vec![false; 27];
        data[13] = true;
        let m = RegionMask::new([3, 3, 3], data, "c").unwrap();
        assert_eq!(m.bounding_box(), Some(([1, 1, 1], [2, 2, 2])));
        assert!(m.check_usable([3, 3, 3]).is_ok());
        let empty = RegionMask::new([3, 3, 3], vec![false; 27], "e").unwrap();
        assert!(matches!(
            empty.check_usable([3, 3, 3]),
            Err(Error::EmptyRegion(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_is_idempotent(vals in proptest::collection::vec(-500.0f32..500.0, 8),
                                       lo in -200.0f32..0.0, width in 1.0f32..300.0) {
                let v = Volume::new([2, 2, 2], vals, [1.0; 3]).unwrap();
                let once = normalize_intensity(&v, lo, lo + width).unwrap();
                let twice = normalize_intensity(&once, -1.0, 1.0).unwrap();
                for (a, b) in once.data().iter().zip(twice.data()) {
                    prop_assert!((a - b).abs() <= 1e-6);
                    prop_assert!((-1.0..=1.0).contains(a));
                }
            }
        }
    }
}
