//! Histogram-of-oriented-gradients descriptors and the slice-wise HOG distance.

use std::f64::consts::PI;

use crate::error::{ensure_arg, Error, Result};
use crate::volume::{RegionMask, Volume};

/// Value given to voxels outside the compared region.
const OUTSIDE_REGION: f64 = -1.0;
const L2HYS_CLIP: f64 = 0.2;
const NORM_EPS: f64 = 1e-6;

/// A 2D image in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Plane { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Plane { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Rotates by 90 degrees counter-clockwise.
    pub fn rotate90(&self) -> Plane {
        Plane::from_fn(self.cols, self.rows, |r, c| self.at(c, self.cols - 1 - r))
    }

    pub fn crop(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Plane {
        Plane::from_fn(rows, cols, |r, c| self.at(r0 + r, c0 + c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HogParams {
    pub cell: usize,
    pub orient_bins: usize,
}

impl Default for HogParams {
    fn default() -> Self {
        HogParams {
            cell: 8,
            orient_bins: 9,
        }
    }
}

/// Magnitude-weighted, unsigned orientation histograms per cell, laid out
/// as `[cell_row][cell_col][bin]`.
pub fn cell_histograms(plane: &Plane, params: HogParams) -> Result<(usize, usize, Vec<f64>)> {
    let HogParams { cell, orient_bins } = params;
    ensure_arg!(
        cell > 0 && orient_bins > 0,
        "cell and orient_bins must be positive"
    );
    ensure_arg!(
        plane.rows >= cell && plane.cols >= cell,
        "plane {}x{} is smaller than one {cell}x{cell} cell",
        plane.rows,
        plane.cols
    );
    let (ncr, ncc) = (plane.rows / cell, plane.cols / cell);
    let mut hist = vec![0f64; ncr * ncc * orient_bins];
    let bin_width = PI / orient_bins as f64;
    for r in 0..ncr * cell {
        for c in 0..ncc * cell {
            let gx = plane.at(r, (c + 1).min(plane.cols - 1)) - plane.at(r, c.saturating_sub(1));
            let gy = plane.at((r + 1).min(plane.rows - 1), c) - plane.at(r.saturating_sub(1), c);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx);
            if angle < 0.0 {
                angle += PI;
            }
            if angle >= PI {
                angle -= PI;
            }
            let bin = ((angle / bin_width) as usize).min(orient_bins - 1);
            hist[((r / cell) * ncc + c / cell) * orient_bins + bin] += mag;
        }
    }
    Ok((ncr, ncc, hist))
}

fn l2hys(block: &mut [f64]) {
    let norm = |b: &[f64]| (b.iter().map(|v| v * v).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
    let n = norm(block);
    block.iter_mut().for_each(|v| *v = (*v / n).min(L2HYS_CLIP));
    let n = norm(block);
    block.iter_mut().for_each(|v| *v /= n);
}

/// HOG descriptor with 2x2-cell blocks (fewer when the plane has fewer cells)
/// at one-cell stride, each L2-Hys normalized.
pub fn hog_descriptor(plane: &Plane, params: HogParams) -> Result<Vec<f64>> {
    let (ncr, ncc, hist) = cell_histograms(plane, params)?;
    let bins = params.orient_bins;
    let (br, bc) = (ncr.min(2), ncc.min(2));
    let mut out = Vec::with_capacity((ncr - br + 1) * (ncc - bc + 1) * br * bc * bins);
    let mut block = Vec::with_capacity(br * bc * bins);
    for r in 0..=ncr - br {
        for c in 0..=ncc - bc {
            block.clear();
            for dr in 0..br {
                for dc in 0..bc {
                    let start = ((r + dr) * ncc + c + dc) * bins;
                    block.extend_from_slice(&hist[start..start + bins]);
                }
            }
            l2hys(&mut block);
            out.extend_from_slice(&block);
        }
    }
    Ok(out)
}

fn in_plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Mean over region-intersecting slices of the L2 distance between the HOG
/// descriptors of `a` and `b`, cropped to the region's bounding box.
pub fn hog_similarity(
    a: &Volume,
    b: &Volume,
    region: &RegionMask,
    axis: usize,
    params: HogParams,
) -> Result<f64> {
    ensure_arg!(axis < 3, "axis must be 0, 1 or 2");
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    region.check_usable(a.shape())?;
    let shape = a.shape();
    let (lo, hi) = region.bounding_box().expect("nonempty region");
    let (ra, ca) = in_plane_axes(axis);
    // grow the crop to at least one cell per in-plane axis
    let grow = |a: usize| -> Result<(usize, usize)> {
        ensure_arg!(
            shape[a] >= params.cell,
            "volume axis {a} ({}) is shorter than the HOG cell",
            shape[a]
        );
        let (mut l, mut h) = (lo[a], hi[a]);
        while h - l < params.cell {
            if h < shape[a] {
                h += 1;
            } else {
                l -= 1;
            }
        }
        Ok((l, h))
    };
    let (r0, r1) = grow(ra)?;
    let (c0, c1) = grow(ca)?;
    let mut total = 0.0;
    let mut slices = 0usize;
    for s in lo[axis]..hi[axis] {
        let mut pa = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut pb = Vec::with_capacity(pa.capacity());
        let mut any = false;
        for r in r0..r1 {
            for c in c0..c1 {
                let mut idx = [0usize; 3];
                idx[axis] = s;
                idx[ra] = r;
                idx[ca] = c;
                if region.get(idx[0], idx[1], idx[2]) {
                    any = true;
                    pa.push(a.get(idx[0], idx[1], idx[2]) as f64);
                    pb.push(b.get(idx[0], idx[1], idx[2]) as f64);
                } else {
                    pa.push(OUTSIDE_REGION);
                    pb.push(OUTSIDE_REGION);
                }
            }
        }
        if !any {
            continue;
        }
        let da = hog_descriptor(&Plane::new(r1 - r0, c1 - c0, pa), params)?;
        let db = hog_descriptor(&Plane::new(r1 - r0, c1 - c0, pb), params)?;
        total += da
            .iter()
            .zip(&db)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        slices += 1;
    }
    if slices == 0 {
        return Err(Error::EmptyRegion(region.label().to_string()));
    }
    Ok(total / slices as f64)
}
