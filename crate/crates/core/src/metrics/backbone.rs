//! Perceptual feature extractors for LPIPS-style distances and for
//! FID / coverage / density features.

use rand_distr::{Distribution, Normal};

use super::hog::Plane;
use crate::util::rng_for;

/// Activations of one layer: `channels x rows x cols`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// A 2D feature network. Implementations must be deterministic.
pub trait PerceptualBackbone: Send + Sync {
    /// Stable identifier recorded in metric reports.
    fn id(&self) -> String;

    /// Layer activations for one single-channel patch.
    fn layers(&self, patch: &Plane) -> Vec<FeatureMap>;

    /// Pooled descriptor: per-layer channel means, concatenated.
    fn pooled(&self, patch: &Plane) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.layers(patch) {
            let n = (l.rows * l.cols) as f64;
            for c in 0..l.channels {
                let s: f64 = l.data[c * l.rows * l.cols..(c + 1) * l.rows * l.cols]
                    .iter()
                    .sum();
                out.push(s / n);
            }
        }
        out
    }
}

struct Conv2d {
    cin: usize,
    cout: usize,
    weight: Vec<f64>,
}

impl Conv2d {
    /// 3x3 convolution with replicate padding, followed by ReLU.
    fn forward_relu(&self, input: &FeatureMap) -> FeatureMap {
        let (rows, cols) = (input.rows, input.cols);
        let mut out = vec![0f64; self.cout * rows * cols];
        let plane = rows * cols;
        for co in 0..self.cout {
            let dst = &mut out[co * plane..(co + 1) * plane];
            for ci in 0..self.cin {
                let src = &input.data[ci * plane..(ci + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = self.weight[((co * self.cin + ci) * 3 + ky) * 3 + kx];
                        for r in 0..rows {
                            let sr = (r + ky).saturating_sub(1).min(rows - 1);
                            for c in 0..cols {
                                let sc = (c + kx).saturating_sub(1).min(cols - 1);
                                dst[r * cols + c] += w * src[sr * cols + sc];
                            }
                        }
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        FeatureMap {
            channels: self.cout,
            rows,
            cols,
            data: out,
        }
    }
}

fn avg_pool2(input: &FeatureMap) -> FeatureMap {
    let (rows, cols) = ((input.rows / 2).max(1), (input.cols / 2).max(1));
    let mut data = vec![0f64; input.channels * rows * cols];
    for ch in 0..input.channels {
        for r in 0..rows {
            for c in 0..cols {
                let mut s = 0.0;
                let mut n = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        let (sr, sc) = (2 * r + dr, 2 * c + dc);
                        if sr < input.rows && sc < input.cols {
                            s += input.data[(ch * input.rows + sr) * input.cols + sc];
                            n += 1.0;
                        }
                    }
                }
                data[(ch * rows + r) * cols + c] = s / n;
            }
        }
    }
    FeatureMap {
        channels: input.channels,
        rows,
        cols,
        data,
    }
}

/// Training-free backbone: a fixed-seed stack of random 3x3 conv + ReLU
/// layers with 2x average pooling between them.
pub struct RandomConvBackbone {
    seed: u64,
    widths: Vec<usize>,
    convs: Vec<Conv2d>,
}

impl RandomConvBackbone {
    pub fn new(seed: u64, widths: &[usize]) -> Self {
        let mut rng = rng_for(seed, 0xbac);
        let mut cin = 1;
        let mut convs = Vec::new();
        for &cout in widths {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let weight = (0..cout * cin * 9)
                .map(|_| normal.sample(&mut rng))
                .collect();
            convs.push(Conv2d { cin, cout, weight });
            cin = cout;
        }
        RandomConvBackbone {
            seed,
            widths: widths.to_vec(),
            convs,
        }
    }
}

impl Default for RandomConvBackbone {
    fn default() -> Self {
        Self::new(0, &[8, 16, 32])
    }
}

impl PerceptualBackbone for RandomConvBackbone {
    fn id(&self) -> String {
        let w: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("randconv-{}-seed{}", w.join("x"), self.seed)
    }

    fn layers(&self, patch: &Plane) -> Vec<FeatureMap> {
        let mut x = FeatureMap {
            channels: 1,
            rows: patch.rows,
            cols: patch.cols,
            data: patch.data.clone(),
        };
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&x);
            }
            x = conv.forward_relu(&x);
            out.push(x.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let b = RandomConvBackbone::default();
        let p = Plane::from_fn(16, 16, |r, c| ((r * 3 + c) % 5) as f64 / 5.0 - 0.5);
        let l1 = b.layers(&p);
        let l2 = RandomConvBackbone::default().layers(&p);
        assert_eq!(l1.len(), 3);
        assert_eq!((l1[2].channels, l1[2].rows, l1[2].cols), (32, 4, 4));
        assert_eq!(l1[1].data, l2[1].data);
        assert_eq!(b.pooled(&p).len(), 56);
        assert_eq!(b.id(), "randconv-8x16x32-seed0");
    }
}
