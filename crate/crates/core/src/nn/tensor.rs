//! Batched activations stored channel-major: `[C][N][D][H][W]`.
//!
//! Keeping the batch inside each channel row lets a convolution over the whole
//! batch run as one matrix product whose output is already in this layout.

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, dims: [usize; 3]) -> Self {
        Tensor {
            c,
            n,
            dims,
            data: vec![0.0; c * n * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(c: usize, n: usize, dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            c * n * dims[0] * dims[1] * dims[2],
            "tensor size"
        );
        Tensor { c, n, dims, data }
    }

    /// Stacks per-sample arrays laid out `[C][D][H][W]` into one batch.
    pub fn stack(c: usize, dims: [usize; 3], samples: &[&[f32]]) -> Self {
        let s = dims[0] * dims[1] * dims[2];
        let n = samples.len();
        let mut t = Tensor::zeros(c, n, dims);
        for (j, sample) in samples.iter().enumerate() {
            assert_eq!(sample.len(), c * s, "sample size");
            for ch in 0..c {
                t.data[(ch * n + j) * s..(ch * n + j + 1) * s]
                    .copy_from_slice(&sample[ch * s..(ch + 1) * s]);
            }
        }
        t
    }

    /// Sample `j` as a `[C][D][H][W]` array.
    pub fn sample(&self, j: usize) -> Vec<f32> {
        let s = self.spatial();
        let mut out = Vec::with_capacity(self.c * s);
        for ch in 0..self.c {
            out.extend_from_slice(self.row(ch, j));
        }
        out
    }

    pub fn spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn row(&self, ch: usize, j: usize) -> &[f32] {
        let s = self.spatial();
        let start = (ch * self.n + j) * s;
        &self.data[start..start + s]
    }

    pub fn row_mut(&mut self, ch: usize, j: usize) -> &mut [f32] {
        let s = self.spatial();
        let start = (ch * self.n + j) * s;
        &mut self.data[start..start + s]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.c == other.c && self.n == other.n && self.dims == other.dims
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "tensor shapes differ");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    /// Channel concatenation; `self` channels come first.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert!(
            self.n == other.n && self.dims == other.dims,
            "concat shapes"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(self.c + other.c, self.n, self.dims, data)
    }

    /// Inverse of `concat`: first `c` channels and the rest.
    pub fn split(&self, c: usize) -> (Tensor, Tensor) {
        let at = c * self.n * self.spatial();
        (
            Tensor::from_vec(c, self.n, self.dims, self.data[..at].to_vec()),
            Tensor::from_vec(self.c - c, self.n, self.dims, self.data[at..].to_vec()),
        )
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [d, h, w] = x.dims;
    let mut out = Tensor::zeros(x.c, x.n, [2 * d, 2 * h, 2 * w]);
    let rows = x.c * x.n;
    for r in 0..rows {
        let src = &x.data[r * d * h * w..(r + 1) * d * h * w];
        let dst = &mut out.data[r * 8 * d * h * w..(r + 1) * 8 * d * h * w];
        for z in 0..2 * d {
            for y in 0..2 * h {
                let s = &src[((z / 2) * h + y / 2) * w..];
                let o = &mut dst[(z * 2 * h + y) * 2 * w..(z * 2 * h + y + 1) * 2 * w];
                for (xx, v) in o.iter_mut().enumerate() {
                    *v = s[xx / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of `upsample2`: sums each 2x2x2 block.
pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let [d2, h2, w2] = dy.dims;
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(dy.c, dy.n, [d, h, w]);
    let rows = dy.c * dy.n;
    for r in 0..rows {
        let src = &dy.data[r * d2 * h2 * w2..(r + 1) * d2 * h2 * w2];
        let dst = &mut out.data[r * d * h * w..(r + 1) * d * h * w];
        for z in 0..d2 {
            for y in 0..h2 {
                let s = &src[(z * h2 + y) * w2..(z * h2 + y + 1) * w2];
                let o = &mut dst[((z / 2) * h + y / 2) * w..];
                for (xx, v) in s.iter().enumerate() {
                    o[xx / 2] += v;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_sample_round_trip() {
        let a: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let b: Vec<f32> = (0..16).map(|v| -(v as f32)).collect();
        let t = Tensor::stack(2, [2, 2, 2], &[&a, &b]);
        assert_eq!(t.sample(0), a);
        assert_eq!(t.sample(1), b);
        assert_eq!(t.row(1, 0), &a[8..]);
    }

    #[test]
    fn upsample_adjoint() {
        let x = Tensor::from_vec(
            1,
            2,
            [1, 2, 2],
            (0..8).map(|v| v as f32 * 0.5 - 1.0).collect(),
        );
        let y = Tensor::from_vec(
            1,
            2,
            [2, 4, 4],
            (0..64).map(|v| ((v * 7) % 11) as f32).collect(),
        );
        let ux = upsample2(&x);
        let dty = upsample2_backward(&y);
        let lhs: f32 = ux.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&dty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
        assert_eq!(ux.data[0..4], [x.data[0], x.data[0], x.data[1], x.data[1]]);
    }

    #[test]
    fn concat_split() {
        let a = Tensor::from_vec(1, 2, [1, 1, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::from_vec(2, 2, [1, 1, 2], (0..8).map(|v| v as f32).collect());
        let c = a.concat(&b);
        let (x, y) = c.split(1);
        assert_eq!((x, y), (a, b));
    }
}
