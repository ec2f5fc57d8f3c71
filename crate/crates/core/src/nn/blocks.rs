//! Residual blocks and the diffusion-step embedding.

use rand::Rng;

use super::layers::{Act, Activation, Conv3d, GroupNorm, Linear};
use super::param::{Module, ParamVisitor};
use super::tensor::Tensor;

/// Sinusoidal features of a (possibly fractional) step index.
pub fn sinusoidal_embedding(t: &[f32], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0f32; t.len() * dim];
    for (row, &tv) in out.chunks_mut(dim).zip(t) {
        for i in 0..half {
            let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
            row[i] = (tv * freq).sin();
            row[half + i] = (tv * freq).cos();
        }
    }
    out
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub fc1: Linear,
    pub act: Act,
    pub fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(dim: usize, act: Activation, rng: &mut impl Rng) -> Self {
        TimeEmbedding {
            dim,
            fc1: Linear::new(dim, dim, rng),
            act: Act::new(act),
            fc2: Linear::new(dim, dim, rng),
        }
    }

    pub fn forward(&mut self, t: &[f32], train: bool) -> Vec<f32> {
        let e = sinusoidal_embedding(t, self.dim);
        let h = self.fc1.forward(&e, train);
        let h = self.act.forward_vec(h, train);
        self.fc2.forward(&h, train)
    }

    pub fn backward(&mut self, de: &[f32]) {
        let dh = self.fc2.backward(de);
        let dh = self.act.backward_vec(dh);
        self.fc1.backward(&dh);
    }
}

impl Module for TimeEmbedding {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.scope("fc1", |v| self.fc1.visit(v));
        v.scope("fc2", |v| self.fc2.visit(v));
    }
}

/// Pre-activation residual block with an optional additive step embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub cin: usize,
    pub cout: usize,
    pub norm1: GroupNorm,
    pub act1: Act,
    pub conv1: Conv3d,
    pub temb: Option<(Act, Linear)>,
    pub norm2: GroupNorm,
    pub act2: Act,
    pub conv2: Conv3d,
    pub skip: Option<Conv3d>,
}

/// Largest group count up to 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

impl ResBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        ResBlock {
            cin,
            cout,
            norm1: GroupNorm::new(group_count(cin), cin),
            act1: Act::new(act),
            conv1: Conv3d::new(cin, cout, 3, 1, rng),
            temb: temb_dim.map(|d| (Act::new(act), Linear::new(d, cout, rng))),
            norm2: GroupNorm::new(group_count(cout), cout),
            act2: Act::new(act),
            conv2: Conv3d::new(cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv3d::new(cin, cout, 1, 1, rng)),
        }
    }

    pub fn forward(&mut self, x: &Tensor, temb: Option<&[f32]>, train: bool) -> Tensor {
        let h = self.norm1.forward(x, train);
        let h = self.act1.forward(h, train);
        let mut h = self.conv1.forward(&h, train);
        if let Some((act, lin)) = self.temb.as_mut() {
            let e = temb.expect("block expects a step embedding");
            let e = act.forward_vec(e.to_vec(), train);
            let e = lin.forward(&e, train);
            for ch in 0..h.c {
                for j in 0..h.n {
                    let add = e[j * self.cout + ch];
                    h.row_mut(ch, j).iter_mut().for_each(|v| *v += add);
                }
            }
        }
        let h = self.norm2.forward(&h, train);
        let h = self.act2.forward(h, train);
        let mut out = self.conv2.forward(&h, train);
        match self.skip.as_mut() {
            Some(skip) => out.add_assign(&skip.forward(x, train)),
            None => out.add_assign(x),
        }
        out
    }

    /// Returns the input gradient and, when the block uses one, the gradient
    /// with respect to the step embedding.
    pub fn backward(&mut self, dout: &Tensor) -> (Tensor, Option<Vec<f32>>) {
        let dh = self.conv2.backward(dout);
        let dh = self.act2.backward(dh);
        let dh = self.norm2.backward(&dh);
        let mut dtemb = None;
        if let Some((act, lin)) = self.temb.as_mut() {
            let mut de = vec![0f32; dh.n * self.cout];
            for ch in 0..dh.c {
                for j in 0..dh.n {
                    de[j * self.cout + ch] = dh.row(ch, j).iter().sum();
                }
            }
            let de = lin.backward(&de);
            dtemb = Some(act.backward_vec(de));
        }
        let dh = self.conv1.backward(&dh);
        let dh = self.act1.backward(dh);
        let mut dx = self.norm1.backward(&dh);
        match self.skip.as_mut() {
            Some(skip) => dx.add_assign(&skip.backward(dout)),
            None => dx.add_assign(dout),
        }
        (dx, dtemb)
    }
}

impl Module for ResBlock {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.scope("norm1", |v| self.norm1.visit(v));
        v.scope("conv1", |v| self.conv1.visit(v));
        if let Some((_, lin)) = self.temb.as_mut() {
            v.scope("temb", |v| lin.visit(v));
        }
        v.scope("norm2", |v| self.norm2.visit(v));
        v.scope("conv2", |v| self.conv2.visit(v));
        if let Some(skip) = self.skip.as_mut() {
            v.scope("skip", |v| skip.visit(v));
        }
    }
}
