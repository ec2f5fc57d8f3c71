//! Layers with hand-written backward passes. Each layer caches what its
//! backward pass needs during a training forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::direct;
use super::param::{Module, Param, ParamVisitor};
use super::tensor::Tensor;

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Safety: every caller passes slices whose extents cover the strided
    // m x k, k x n and m x n views; checked by the debug assertions.
    debug_assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa);
    debug_assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `C (m x n) = A (m x k) * B (k x n)` with optional transposes,
/// accumulating into `c` when `accumulate` is set.
pub(crate) fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    let sa = if a_t { (1, m) } else { (k, 1) };
    let sb = if b_t { (1, k) } else { (n, 1) };
    sgemm(
        m,
        k,
        n,
        a,
        sa,
        b,
        sb,
        if accumulate { 1.0 } else { 0.0 },
        c,
        (n, 1),
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    LeakyRelu,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    0.2 * x
                }
            }
        }
    }

    fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.2
                }
            }
        }
    }
}

/// Elementwise activation; caches its input in training mode.
#[derive(Clone, Debug)]
pub struct Act {
    pub kind: Activation,
    cache: Option<Vec<f32>>,
}

impl Act {
    pub fn new(kind: Activation) -> Self {
        Act { kind, cache: None }
    }

    pub fn forward_vec(&mut self, x: Vec<f32>, train: bool) -> Vec<f32> {
        let y = x.iter().map(|&v| self.kind.apply(v)).collect();
        self.cache = train.then_some(x);
        y
    }

    pub fn forward(&mut self, x: Tensor, train: bool) -> Tensor {
        let Tensor { c, n, dims, data } = x;
        Tensor::from_vec(c, n, dims, self.forward_vec(data, train))
    }

    pub fn backward_vec(&mut self, mut dy: Vec<f32>) -> Vec<f32> {
        let x = self
            .cache
            .take()
            .expect("activation backward without forward");
        dy.iter_mut()
            .zip(&x)
            .for_each(|(g, &v)| *g *= self.kind.derivative(v));
        dy
    }

    pub fn backward(&mut self, dy: Tensor) -> Tensor {
        let Tensor { c, n, dims, data } = dy;
        Tensor::from_vec(c, n, dims, self.backward_vec(data))
    }
}

/// Upper bound on the im2col tile, in floats; small enough to stay in L2.
const TILE_FLOATS: usize = 1 << 17;

thread_local! {
    static COL_BUF: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
    static DCOL_BUF: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_buf<R>(
    key: &'static std::thread::LocalKey<std::cell::RefCell<Vec<f32>>>,
    len: usize,
    f: impl FnOnce(&mut [f32]) -> R,
) -> R {
    key.with(|b| {
        let mut b = b.borrow_mut();
        if b.len() < len {
            b.resize(len, 0.0);
        }
        f(&mut b[..len])
    })
}

/// 3D convolution with cubic kernel `k` (odd), padding `k / 2`, stride 1 or 2.
///
/// Non-pointwise convolutions run as a sequence of matrix products over tiles
/// of output rows; the unfolded input of each tile is rebuilt on demand, so
/// training only keeps the layer input.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

struct Tile {
    j: usize,
    r0: usize,
    r1: usize,
}

impl Conv3d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(
            k % 2 == 1 && (stride == 1 || stride == 2),
            "unsupported conv geometry"
        );
        let fan_in = cin * k * k * k;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Conv3d {
            cin,
            cout,
            k,
            stride,
            weight: Param::uniform(&[cout, fan_in], bound, rng),
            bias: Param::uniform(&[cout], bound, rng).without_decay(),
            cache: None,
        }
    }

    /// Same geometry with all parameters zero (used for output layers).
    pub fn zeroed(mut self) -> Self {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
        self
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let p = self.k / 2;
        dims.map(|d| (d + 2 * p - self.k) / self.stride + 1)
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Whether the direct kernels beat the unfolded matrix product. They win
    /// for single-channel outputs and for rows long enough to vectorize.
    fn direct(&self, dims: [usize; 3]) -> bool {
        self.k == 3 && self.stride == 1 && (self.cout <= 2 || dims[2] >= 16)
    }

    fn kk(&self) -> usize {
        self.cin * self.k.pow(3)
    }

    fn tiles(&self, n: usize, od: [usize; 3]) -> Vec<Tile> {
        let rows = od[0] * od[1];
        let per = (TILE_FLOATS / (self.kk() * od[2])).clamp(1, rows);
        let mut out = Vec::new();
        for j in 0..n {
            let mut r0 = 0;
            while r0 < rows {
                let r1 = (r0 + per).min(rows);
                out.push(Tile { j, r0, r1 });
                r0 = r1;
            }
        }
        out
    }

    /// Output positions `o` along one axis whose input `o * stride + kk - pad`
    /// lies inside `0..len`.
    fn valid_range(&self, kk: usize, len: usize, out: usize) -> (usize, usize) {
        let p = self.k / 2;
        let s = self.stride;
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        let hi = if len + p > kk {
            ((len + p - kk - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Unfolds output rows `r0..r1` of sample `j` into `buf` (`kk x cols`).
    fn im2col_tile(&self, x: &Tensor, t: &Tile, od: [usize; 3], buf: &mut [f32]) {
        let (k, s, p) = (self.k, self.stride, self.k / 2);
        let [d, h, w] = x.dims;
        let tc = (t.r1 - t.r0) * od[2];
        buf.fill(0.0);
        for kz in 0..k {
            let (z0, z1) = self.valid_range(kz, d, od[0]);
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, h, od[1]);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, w, od[2]);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 * s + kx - p;
                    for ci in 0..self.cin {
                        let r = ((ci * k + kz) * k + ky) * k + kx;
                        let row = &mut buf[r * tc..(r + 1) * tc];
                        let src = x.row(ci, t.j);
                        for rr in t.r0..t.r1 {
                            let (oz, oy) = (rr / od[1], rr % od[1]);
                            if oz < z0 || oz >= z1 || oy < y0 || oy >= y1 {
                                continue;
                            }
                            let (iz, iy) = (oz * s + kz - p, oy * s + ky - p);
                            let srow = &src[(iz * h + iy) * w..][..w];
                            let drow = &mut row[(rr - t.r0) * od[2]..][x0..x1];
                            if s == 1 {
                                drow.copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for (i, v) in drow.iter_mut().enumerate() {
                                    *v = srow[ix0 + i * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col_tile`, accumulating into `dx`.
    fn col2im_tile(&self, buf: &[f32], t: &Tile, od: [usize; 3], dx: &mut Tensor) {
        let (k, s, p) = (self.k, self.stride, self.k / 2);
        let [d, h, w] = dx.dims;
        let tc = (t.r1 - t.r0) * od[2];
        for kz in 0..k {
            let (z0, z1) = self.valid_range(kz, d, od[0]);
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, h, od[1]);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, w, od[2]);
                    if x0 >= x1 {
                        continue;
                    }
                    let ix0 = x0 * s + kx - p;
                    for ci in 0..self.cin {
                        let r = ((ci * k + kz) * k + ky) * k + kx;
                        let row = &buf[r * tc..(r + 1) * tc];
                        let dst = dx.row_mut(ci, t.j);
                        for rr in t.r0..t.r1 {
                            let (oz, oy) = (rr / od[1], rr % od[1]);
                            if oz < z0 || oz >= z1 || oy < y0 || oy >= y1 {
                                continue;
                            }
                            let (iz, iy) = (oz * s + kz - p, oy * s + ky - p);
                            let drow = &mut dst[(iz * h + iy) * w..][..w];
                            let srow = &row[(rr - t.r0) * od[2]..][x0..x1];
                            if s == 1 {
                                drow[ix0..ix0 + (x1 - x0)]
                                    .iter_mut()
                                    .zip(srow)
                                    .for_each(|(a, b)| *a += b);
                            } else {
                                for (i, v) in srow.iter().enumerate() {
                                    drow[ix0 + i * s] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let od = self.out_dims(x.dims);
        let so = od[0] * od[1] * od[2];
        let n = x.n;
        let kk = self.kk();
        let mut y = Tensor::zeros(self.cout, n, od);
        if self.direct(x.dims) {
            y = direct::conv3_forward(x, &self.weight.value, self.cout);
        } else if self.pointwise() {
            let s = x.spatial();
            for j in 0..n {
                sgemm(
                    self.cout,
                    kk,
                    so,
                    &self.weight.value,
                    (kk, 1),
                    &x.data[j * s..],
                    (n * s, 1),
                    0.0,
                    &mut y.data[j * so..],
                    (n * so, 1),
                );
            }
        } else {
            with_buf(&COL_BUF, TILE_FLOATS.max(kk * od[2]), |buf| {
                for t in self.tiles(n, od) {
                    let tc = (t.r1 - t.r0) * od[2];
                    let col = &mut buf[..kk * tc];
                    self.im2col_tile(x, &t, od, col);
                    let off = t.j * so + t.r0 * od[2];
                    if self.cout <= 2 {
                        for co in 0..self.cout {
                            let out = &mut y.data[co * n * so + off..][..tc];
                            let wrow = &self.weight.value[co * kk..(co + 1) * kk];
                            for (r, &wv) in wrow.iter().enumerate() {
                                out.iter_mut()
                                    .zip(&col[r * tc..(r + 1) * tc])
                                    .for_each(|(o, c)| *o += wv * c);
                            }
                        }
                    } else {
                        sgemm(
                            self.cout,
                            kk,
                            tc,
                            &self.weight.value,
                            (kk, 1),
                            col,
                            (tc, 1),
                            0.0,
                            &mut y.data[off..],
                            (n * so, 1),
                        );
                    }
                }
            });
        }
        for (co, row) in y.data.chunks_mut(n * so).enumerate() {
            let bias = self.bias.value[co];
            row.iter_mut().for_each(|v| *v += bias);
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without forward");
        let od = self.out_dims(x.dims);
        let so = od[0] * od[1] * od[2];
        let n = x.n;
        let kk = self.kk();
        for (co, row) in dy.data.chunks(n * so).enumerate() {
            self.bias.grad[co] += row.iter().sum::<f32>();
        }
        if self.direct(x.dims) {
            direct::conv3_weight_grad(&x, dy, &mut self.weight.grad);
            return direct::conv3_input_grad(dy, &self.weight.value, self.cin);
        }
        let mut dx = Tensor::zeros(self.cin, n, x.dims);
        if self.pointwise() {
            let s = x.spatial();
            for j in 0..n {
                sgemm(
                    self.cout,
                    so,
                    kk,
                    &dy.data[j * so..],
                    (n * so, 1),
                    &x.data[j * s..],
                    (1, n * s),
                    1.0,
                    &mut self.weight.grad,
                    (kk, 1),
                );
                sgemm(
                    kk,
                    self.cout,
                    so,
                    &self.weight.value,
                    (1, kk),
                    &dy.data[j * so..],
                    (n * so, 1),
                    0.0,
                    &mut dx.data[j * s..],
                    (n * s, 1),
                );
            }
            return dx;
        }
        let len = TILE_FLOATS.max(kk * od[2]);
        with_buf(&COL_BUF, len, |buf| {
            with_buf(&DCOL_BUF, len, |dbuf| {
                for t in self.tiles(n, od) {
                    let tc = (t.r1 - t.r0) * od[2];
                    let off = t.j * so + t.r0 * od[2];
                    let col = &mut buf[..kk * tc];
                    self.im2col_tile(&x, &t, od, col);
                    sgemm(
                        self.cout,
                        tc,
                        kk,
                        &dy.data[off..],
                        (n * so, 1),
                        col,
                        (1, tc),
                        1.0,
                        &mut self.weight.grad,
                        (kk, 1),
                    );
                    let dcol = &mut dbuf[..kk * tc];
                    sgemm(
                        kk,
                        self.cout,
                        tc,
                        &self.weight.value,
                        (1, kk),
                        &dy.data[off..],
                        (n * so, 1),
                        0.0,
                        dcol,
                        (tc, 1),
                    );
                    self.col2im_tile(dcol, &t, od, &mut dx);
                }
            })
        });
        dx
    }
}

impl Module for Conv3d {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.param("weight", &mut self.weight);
        v.param("bias", &mut self.bias);
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

const GN_EPS: f32 = 1e-5;

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "groups must divide channels"
        );
        GroupNorm {
            groups,
            channels,
            gamma: Param::filled(&[channels], 1.0).without_decay(),
            beta: Param::zeros(&[channels]).without_decay(),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.c, self.channels, "group norm channels");
        let cpg = self.channels / self.groups;
        let s = x.spatial();
        let count = (cpg * s) as f64;
        let mut xhat = vec![0f32; x.data.len()];
        let mut inv_std = vec![0f32; self.groups * x.n];
        for g in 0..self.groups {
            for j in 0..x.n {
                let mut sum = 0f64;
                let mut sq = 0f64;
                for ch in g * cpg..(g + 1) * cpg {
                    for &v in x.row(ch, j) {
                        sum += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let mean = sum / count;
                let var = (sq / count - mean * mean).max(0.0);
                let istd = 1.0 / (var + GN_EPS as f64).sqrt();
                inv_std[g * x.n + j] = istd as f32;
                for ch in g * cpg..(g + 1) * cpg {
                    let start = (ch * x.n + j) * s;
                    for i in start..start + s {
                        xhat[i] = ((x.data[i] as f64 - mean) * istd) as f32;
                    }
                }
            }
        }
        let mut y = Tensor::from_vec(x.c, x.n, x.dims, xhat.clone());
        for ch in 0..x.c {
            let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
            y.data[ch * x.n * s..(ch + 1) * x.n * s]
                .iter_mut()
                .for_each(|v| *v = *v * ga + be);
        }
        if train {
            self.cache = Some((xhat, inv_std));
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self
            .cache
            .take()
            .expect("group norm backward without forward");
        let cpg = self.channels / self.groups;
        let s = dy.spatial();
        let n = dy.n;
        for ch in 0..dy.c {
            let range = ch * n * s..(ch + 1) * n * s;
            let mut dg = 0f32;
            let mut db = 0f32;
            for i in range {
                dg += dy.data[i] * xhat[i];
                db += dy.data[i];
            }
            self.gamma.grad[ch] += dg;
            self.beta.grad[ch] += db;
        }
        let mut dx = Tensor::zeros(dy.c, n, dy.dims);
        let count = (cpg * s) as f32;
        for g in 0..self.groups {
            for j in 0..n {
                let mut mean_d = 0f32;
                let mut mean_dx = 0f32;
                for ch in g * cpg..(g + 1) * cpg {
                    let ga = self.gamma.value[ch];
                    let start = (ch * n + j) * s;
                    for i in start..start + s {
                        let d = dy.data[i] * ga;
                        mean_d += d;
                        mean_dx += d * xhat[i];
                    }
                }
                mean_d /= count;
                mean_dx /= count;
                let istd = inv_std[g * n + j];
                for ch in g * cpg..(g + 1) * cpg {
                    let ga = self.gamma.value[ch];
                    let start = (ch * n + j) * s;
                    for i in start..start + s {
                        let d = dy.data[i] * ga;
                        dx.data[i] = istd * (d - mean_d - xhat[i] * mean_dx);
                    }
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.param("gamma", &mut self.gamma);
        v.param("beta", &mut self.beta);
    }
}

/// Fully connected layer over a batch of row vectors `[N][in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Vec<f32>>,
}

impl Linear {
    pub fn new(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fin as f32).sqrt();
        Linear {
            fin,
            fout,
            weight: Param::uniform(&[fout, fin], bound, rng),
            bias: Param::uniform(&[fout], bound, rng).without_decay(),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &[f32], train: bool) -> Vec<f32> {
        let n = x.len() / self.fin;
        let mut y = vec![0f32; n * self.fout];
        matmul(
            n,
            self.fin,
            self.fout,
            x,
            false,
            &self.weight.value,
            true,
            &mut y,
            false,
        );
        for row in y.chunks_mut(self.fout) {
            row.iter_mut()
                .zip(&self.bias.value)
                .for_each(|(v, b)| *v += b);
        }
        if train {
            self.cache = Some(x.to_vec());
        }
        y
    }

    pub fn backward(&mut self, dy: &[f32]) -> Vec<f32> {
        let x = self.cache.take().expect("linear backward without forward");
        let n = x.len() / self.fin;
        matmul(
            self.fout,
            n,
            self.fin,
            dy,
            true,
            &x,
            false,
            &mut self.weight.grad,
            true,
        );
        for row in dy.chunks(self.fout) {
            self.bias
                .grad
                .iter_mut()
                .zip(row)
                .for_each(|(g, d)| *g += d);
        }
        let mut dx = vec![0f32; n * self.fin];
        matmul(
            n,
            self.fout,
            self.fin,
            dy,
            false,
            &self.weight.value,
            false,
            &mut dx,
            false,
        );
        dx
    }
}

impl Module for Linear {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.param("weight", &mut self.weight);
        v.param("bias", &mut self.bias);
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub norm: GroupNorm,
    pub qkv: Conv3d,
    pub proj: Conv3d,
    cache: Option<AttnCache>,
}

#[derive(Clone, Debug)]
struct AttnCache {
    qkv: Tensor,
    probs: Vec<Vec<f32>>,
}

impl Attention {
    pub fn new(channels: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Attention {
            norm: GroupNorm::new(groups, channels),
            qkv: Conv3d::new(channels, 3 * channels, 1, 1, rng),
            proj: Conv3d::new(channels, channels, 1, 1, rng),
            cache: None,
        }
    }

    fn gather(t: &Tensor, c0: usize, c: usize, j: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(c * t.spatial());
        for ch in c0..c0 + c {
            out.extend_from_slice(t.row(ch, j));
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let c = x.c;
        let s = x.spatial();
        let scale = 1.0 / (c as f32).sqrt();
        let hn = self.norm.forward(x, train);
        let qkv = self.qkv.forward(&hn, train);
        let mut att = Tensor::zeros(c, x.n, x.dims);
        let mut probs = Vec::with_capacity(x.n);
        for j in 0..x.n {
            let q = Self::gather(&qkv, 0, c, j);
            let k = Self::gather(&qkv, c, c, j);
            let v = Self::gather(&qkv, 2 * c, c, j);
            let mut a = vec![0f32; s * s];
            matmul(s, c, s, &q, true, &k, false, &mut a, false);
            for row in a.chunks_mut(s) {
                let mx = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut sum = 0f32;
                for v in row.iter_mut() {
                    *v = (*v * scale - mx).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            let mut o = vec![0f32; c * s];
            matmul(c, s, s, &v, false, &a, true, &mut o, false);
            for ch in 0..c {
                att.row_mut(ch, j).copy_from_slice(&o[ch * s..(ch + 1) * s]);
            }
            probs.push(a);
        }
        let mut y = self.proj.forward(&att, train);
        y.add_assign(x);
        if train {
            self.cache = Some(AttnCache { qkv, probs });
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let AttnCache { qkv, probs } = self
            .cache
            .take()
            .expect("attention backward without forward");
        let c = dy.c;
        let s = dy.spatial();
        let scale = 1.0 / (c as f32).sqrt();
        let datt = self.proj.backward(dy);
        let mut dqkv = Tensor::zeros(3 * c, dy.n, dy.dims);
        for j in 0..dy.n {
            let q = Self::gather(&qkv, 0, c, j);
            let k = Self::gather(&qkv, c, c, j);
            let v = Self::gather(&qkv, 2 * c, c, j);
            let a = &probs[j];
            let d_o = Self::gather(&datt, 0, c, j);
            let mut dv = vec![0f32; c * s];
            matmul(c, s, s, &d_o, false, a, false, &mut dv, false);
            let mut da = vec![0f32; s * s];
            matmul(s, c, s, &d_o, true, &v, false, &mut da, false);
            for (arow, drow) in a.chunks(s).zip(da.chunks_mut(s)) {
                let dot: f32 = arow.iter().zip(drow.iter()).map(|(p, g)| p * g).sum();
                for (g, p) in drow.iter_mut().zip(arow) {
                    *g = p * (*g - dot) * scale;
                }
            }
            let mut dq = vec![0f32; c * s];
            matmul(c, s, s, &k, false, &da, true, &mut dq, false);
            let mut dk = vec![0f32; c * s];
            matmul(c, s, s, &q, false, &da, false, &mut dk, false);
            for ch in 0..c {
                dqkv.row_mut(ch, j)
                    .copy_from_slice(&dq[ch * s..(ch + 1) * s]);
                dqkv.row_mut(c + ch, j)
                    .copy_from_slice(&dk[ch * s..(ch + 1) * s]);
                dqkv.row_mut(2 * c + ch, j)
                    .copy_from_slice(&dv[ch * s..(ch + 1) * s]);
            }
        }
        let dhn = self.qkv.backward(&dqkv);
        let mut dx = self.norm.backward(&dhn);
        dx.add_assign(dy);
        dx
    }
}

impl Module for Attention {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.scope("norm", |v| self.norm.visit(v));
        v.scope("qkv", |v| self.qkv.visit(v));
        v.scope("proj", |v| self.proj.visit(v));
    }
}
