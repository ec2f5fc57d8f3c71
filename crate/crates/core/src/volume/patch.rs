use super::{extract_box, voxel_count, Shape3, Volume};
use crate::error::{ensure_arg, Error, Result};

/// Overlapping cubic patches laid over a volume.
///
/// Origins sit at multiples of `stride` along each axis; the last origin is
/// clamped to `len - patch_size` so the final patch abuts the boundary.
/// Origins are stored in lexicographic (z, y, x) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    volume_shape: Shape3,
    patch_size: usize,
    stride: usize,
    axis_origins: [Vec<usize>; 3],
    origins: Vec<Shape3>,
}

/// Origins along one axis.
pub(crate) fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + patch >= len {
            out.push(len - patch);
            break;
        }
        out.push(o);
        o += stride;
    }
    out.dedup();
    out
}

impl PatchGrid {
    pub fn new(volume_shape: Shape3, patch_size: usize, stride: usize) -> Result<Self> {
        ensure_arg!(patch_size > 0, "patch size must be positive");
        ensure_arg!(
            stride > 0 && stride <= patch_size,
            "stride must satisfy 0 < stride <= patch size ({stride} vs {patch_size})"
        );
        ensure_arg!(
            volume_shape.iter().all(|&l| patch_size <= l),
            "patch size {patch_size} exceeds volume shape {volume_shape:?}"
        );
        let axis_origins = [
            axis_origins(volume_shape[0], patch_size, stride),
            axis_origins(volume_shape[1], patch_size, stride),
            axis_origins(volume_shape[2], patch_size, stride),
        ];
        let mut origins = Vec::new();
        for &z in &axis_origins[0] {
            for &y in &axis_origins[1] {
                for &x in &axis_origins[2] {
                    origins.push([z, y, x]);
                }
            }
        }
        Ok(PatchGrid {
            volume_shape,
            patch_size,
            stride,
            axis_origins,
            origins,
        })
    }

    pub fn volume_shape(&self) -> Shape3 {
        self.volume_shape
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn origins(&self) -> &[Shape3] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of patch positions along each axis.
    pub fn dims(&self) -> Shape3 {
        [
            self.axis_origins[0].len(),
            self.axis_origins[1].len(),
            self.axis_origins[2].len(),
        ]
    }

    pub fn axis_origins(&self, axis: usize) -> &[usize] {
        &self.axis_origins[axis]
    }

    /// Origin of the patch at grid index (iz, iy, ix).
    pub fn origin_at(&self, index: Shape3) -> Shape3 {
        [
            self.axis_origins[0][index[0]],
            self.axis_origins[1][index[1]],
            self.axis_origins[2][index[2]],
        ]
    }
}

fn check_bounds(shape: Shape3, origin: Shape3, p: usize) -> Result<()> {
    for a in 0..3 {
        ensure_arg!(
            origin[a] + p <= shape[a],
            "patch at {origin:?} of size {p} leaves volume {shape:?}"
        );
    }
    Ok(())
}

/// Copies the `p`-cube at `origin` out of `v`.
pub fn extract_patch(v: &Volume, origin: Shape3, p: usize) -> Result<Volume> {
    check_bounds(v.shape(), origin, p)?;
    Ok(extract_box(v, origin, [p, p, p]))
}

/// Writes `patch` into `canvas` at `origin`, only where `region` is true.
pub fn insert_patch(
    canvas: &mut Volume,
    origin: Shape3,
    patch: &Volume,
    region: &[bool],
) -> Result<()> {
    let [p0, p1, p2] = patch.shape();
    ensure_arg!(
        p0 == p1 && p1 == p2,
        "patches are cubic, got {:?}",
        patch.shape()
    );
    if region.len() != voxel_count(patch.shape()) {
        return Err(Error::ShapeMismatch(format!(
            "region has {} entries, patch has {}",
            region.len(),
            patch.len()
        )));
    }
    check_bounds(canvas.shape(), origin, p0)?;
    let mut i = 0;
    for z in 0..p0 {
        for y in 0..p1 {
            let row = canvas.index(origin[0] + z, origin[1] + y, origin[2]);
            let dst = &mut canvas.data_mut()[row..row + p2];
            for (x, d) in dst.iter_mut().enumerate() {
                if region[i + x] {
                    *d = patch.data()[i + x];
                }
            }
            i += p2;
        }
    }
    Ok(())
}
