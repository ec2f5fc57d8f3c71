//! Centre-outward patch order for whole-volume refinement.

use serde::Serialize;

use super::mask::{Mask, MaskKind};
use crate::error::{ensure_arg, Result};
use crate::util::sha256_hex;
use crate::volume::{voxel_count, PatchGrid, Shape3};

/// One step of a plan: refine the patch at `origin`, writing only `mask`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanEntry {
    /// Position in the patch grid.
    pub index: Shape3,
    pub origin: Shape3,
    /// Chebyshev distance from the centre patch in grid units.
    pub shell: usize,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraversalPlan {
    pub grid: PatchGrid,
    pub entries: Vec<PlanEntry>,
    /// Grid patches left out because earlier patches already covered them.
    pub skipped: Vec<Shape3>,
}

#[derive(Serialize)]
struct PlanDigest<'a> {
    volume_shape: Shape3,
    patch_size: usize,
    stride: usize,
    entries: Vec<(Shape3, String)>,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    skipped: &'a [Shape3],
}

impl TraversalPlan {
    /// Centre patch index: the lower middle along each axis.
    pub fn center(grid: &PatchGrid) -> Shape3 {
        grid.dims().map(|n| (n - 1) / 2)
    }

    /// Stable content hash of the plan (grid, order and masks).
    pub fn hash(&self) -> String {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let bits: Vec<u8> = e.mask.data().iter().map(|&b| b as u8).collect();
                (e.origin, sha256_hex(&bits))
            })
            .collect();
        let digest = PlanDigest {
            volume_shape: self.grid.volume_shape(),
            patch_size: self.grid.patch_size(),
            stride: self.grid.stride(),
            entries,
            skipped: &self.skipped,
        };
        sha256_hex(&serde_json::to_vec(&digest).expect("plan digest serializes"))
    }
}

fn chebyshev(a: Shape3, b: Shape3) -> usize {
    (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap_or(0)
}

/// Patches sorted by Chebyshev shell around the centre, ties broken by
/// origin; each entry writes only voxels no earlier entry has covered.
pub fn plan_traversal(grid: &PatchGrid) -> Result<TraversalPlan> {
    ensure_arg!(!grid.is_empty(), "patch grid is empty");
    let dims = grid.dims();
    let center = TraversalPlan::center(grid);
    let mut order = Vec::with_capacity(grid.len());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let index = [z, y, x];
                order.push((chebyshev(index, center), grid.origin_at(index), index));
            }
        }
    }
    order.sort();

    let shape = grid.volume_shape();
    let p = grid.patch_size();
    let mut covered = vec![false; voxel_count(shape)];
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (shell, origin, index) in order {
        let mut data = Vec::with_capacity(p * p * p);
        for z in 0..p {
            for y in 0..p {
                let row = ((origin[0] + z) * shape[1] + origin[1] + y) * shape[2] + origin[2];
                for c in &mut covered[row..row + p] {
                    data.push(!*c);
                    *c = true;
                }
            }
        }
        let mask = if data.iter().all(|&m| m) {
            Mask::full(p)
        } else {
            Mask::arbitrary(p, data)?
        };
        if mask.is_empty() {
            skipped.push(index);
        } else {
            entries.push(PlanEntry {
                index,
                origin,
                shell,
                mask,
            });
        }
    }
    debug_assert!(entries
        .first()
        .is_some_and(|e| e.mask.kind() == MaskKind::Full));
    Ok(TraversalPlan {
        grid: grid.clone(),
        entries,
        skipped,
    })
}

/// How often each voxel is written when the plan is executed.
pub fn write_counts(plan: &TraversalPlan) -> Vec<u32> {
    let shape = plan.grid.volume_shape();
    let p = plan.grid.patch_size();
    let mut counts = vec![0u32; voxel_count(shape)];
    for e in &plan.entries {
        let mut i = 0;
        for z in 0..p {
            for y in 0..p {
                let row = ((e.origin[0] + z) * shape[1] + e.origin[1] + y) * shape[2] + e.origin[2];
                for (c, &m) in counts[row..row + p]
                    .iter_mut()
                    .zip(&e.mask.data()[i..i + p])
                {
                    *c += m as u32;
                }
                i += p;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_patch_plan() {
        let g = PatchGrid::new([8, 8, 8], 8, 4).unwrap();
        let plan = plan_traversal(&g).unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(plan.entries[0].mask, Mask::full(8));
    }

    #[test]
    fn three_cubed_grid_order() {
        let g = PatchGrid::new([16, 16, 16], 8, 4).unwrap();
        assert_eq!(g.dims(), [3, 3, 3]);
        let plan = plan_traversal(&g).unwrap();
        assert_eq!(plan.entries.len(), 27);
        assert_eq!(plan.entries[0].index, [1, 1, 1]);
        for (k, e) in plan.entries.iter().enumerate().skip(1) {
            assert!(plan.entries[..k]
                .iter()
                .any(|p| chebyshev(p.index, e.index) == 1));
        }
        assert!(write_counts(&plan).iter().all(|&c| c == 1));
    }

    #[test]
    fn shells_are_nondecreasing_and_hash_is_stable() {
        let g = PatchGrid::new([20, 12, 28], 8, 4).unwrap();
        let plan = plan_traversal(&g).unwrap();
        assert!(plan.entries.windows(2).all(|w| w[0].shell <= w[1].shell));
        assert_eq!(plan.hash(), plan_traversal(&g).unwrap().hash());
        let other = plan_traversal(&PatchGrid::new([20, 12, 28], 8, 2).unwrap()).unwrap();
        assert_ne!(plan.hash(), other.hash());
    }

    #[test]
    fn masks_partition_volume_with_unit_stride() {
        let g = PatchGrid::new([4, 4, 6], 4, 1).unwrap();
        let plan = plan_traversal(&g).unwrap();
        let total: usize = plan.entries.iter().map(|e| e.mask.count()).sum();
        assert_eq!(total, 4 * 4 * 6);
        assert_eq!(plan.entries.len() + plan.skipped.len(), g.len());
    }
}
