//! Finite-difference checks of every backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autoencoder::{Autoencoder, AutoencoderSpec};
use super::blocks::{ResBlock, TimeEmbedding};
use super::layers::{Act, Activation, Attention, Conv3d, GroupNorm, Linear};
use super::param::{Module, ParamVisitor};
use super::tensor::Tensor;
use super::unet::{UNet, UNetSpec};
use crate::util::rng_for;

fn random_tensor(c: usize, n: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
    let len = c * n * dims.iter().product::<usize>();
    Tensor::from_vec(
        c,
        n,
        dims,
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Loss = <w, f(x)> with fixed random weights `w`.
struct Probe<M> {
    model: M,
    forward: fn(&mut M, &Tensor, bool) -> Tensor,
    backward: fn(&mut M, &Tensor) -> Option<Tensor>,
}

impl<M: Module> Probe<M> {
    fn loss(&mut self, x: &Tensor, w: &[f32]) -> f64 {
        let y = (self.forward)(&mut self.model, x, false);
        y.data
            .iter()
            .zip(w)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    fn check(mut self, x: Tensor, tol: f64, seed: u64) {
        let mut rng = rng_for(seed, 99);
        let y = (self.forward)(&mut self.model, &x, true);
        let w: Vec<f32> = (0..y.data.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let dy = Tensor::from_vec(y.c, y.n, y.dims, w.clone());
        self.model.zero_grad();
        let dx = (self.backward)(&mut self.model, &dy);
        let eps = 2e-3f32;

        let compare = |analytic: f64, numeric: f64, what: &str| {
            let scale = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic - numeric).abs() <= tol * scale,
                "{what}: analytic {analytic} numeric {numeric}"
            );
        };

        if let Some(dx) = dx {
            for _ in 0..6 {
                let i = rng.gen_range(0..x.data.len());
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let num = (self.loss(&xp, &w) - self.loss(&xm, &w)) / (2.0 * eps as f64);
                compare(dx.data[i] as f64, num, &format!("input[{i}]"));
            }
        }

        let mut grads = Vec::new();
        self.model.visit(&mut ParamVisitor::new(&mut |name, p| {
            grads.push((name.to_string(), p.grad.clone()))
        }));
        for (pi, (name, g)) in grads.iter().enumerate() {
            for _ in 0..3 {
                let i = rng.gen_range(0..g.len());
                let bump = |delta: f32, model: &mut M| {
                    let mut k = 0;
                    model.visit(&mut ParamVisitor::new(&mut |_, p| {
                        if k == pi {
                            p.value[i] += delta;
                        }
                        k += 1;
                    }));
                };
                bump(eps, &mut self.model);
                let lp = self.loss(&x, &w);
                bump(-2.0 * eps, &mut self.model);
                let lm = self.loss(&x, &w);
                bump(eps, &mut self.model);
                compare(
                    g[i] as f64,
                    (lp - lm) / (2.0 * eps as f64),
                    &format!("{name}[{i}]"),
                );
            }
        }
    }
}

impl Module for Act {
    fn visit(&mut self, _: &mut ParamVisitor) {}
}

#[test]
fn conv_gradients() {
    let mut rng = rng_for(1, 0);
    // The last two cases take the direct-kernel path.
    for (k, s, cout, w) in [
        (3, 1, 4, 6),
        (3, 2, 4, 6),
        (1, 1, 4, 6),
        (3, 1, 1, 6),
        (3, 1, 4, 16),
    ] {
        let conv = Conv3d::new(3, cout, k, s, &mut rng);
        let x = random_tensor(3, 2, [4, 3, w], &mut rng);
        Probe {
            model: conv,
            forward: |m, x, t| m.forward(x, t),
            backward: |m, d| Some(m.backward(d)),
        }
        .check(x, 1e-2, (k * 100 + s * 10 + cout) as u64);
    }
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = rng_for(2, 0);
    let mut conv = Conv3d::new(2, 3, 3, 2, &mut rng);
    let x = random_tensor(2, 1, [5, 4, 6], &mut rng);
    let y = conv.forward(&x, false);
    assert_eq!(y.dims, [3, 2, 3]);
    let [d, h, w] = x.dims;
    for co in 0..3 {
        for oz in 0..3 {
            for oy in 0..2 {
                for ox in 0..3 {
                    let mut acc = conv.bias.value[co] as f64;
                    for ci in 0..2 {
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iz, iy, ix) = (2 * oz + kz, 2 * oy + ky, 2 * ox + kx);
                                    if iz < 1 || iy < 1 || ix < 1 || iz > d || iy > h || ix > w {
                                        continue;
                                    }
                                    let xv = x.row(ci, 0)[((iz - 1) * h + iy - 1) * w + ix - 1];
                                    let wv = conv.weight.value
                                        [co * 54 + ((ci * 3 + kz) * 3 + ky) * 3 + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                    }
                    let got = y.row(co, 0)[(oz * 2 + oy) * 3 + ox] as f64;
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn group_norm_gradients() {
    let mut rng = rng_for(3, 0);
    let mut gn = GroupNorm::new(2, 4);
    gn.gamma
        .value
        .iter_mut()
        .for_each(|g| *g = rng.gen_range(0.5..1.5));
    gn.beta
        .value
        .iter_mut()
        .for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = random_tensor(4, 2, [3, 3, 3], &mut rng);
    Probe {
        model: gn,
        forward: |m, x, t| m.forward(x, t),
        backward: |m, d| Some(m.backward(d)),
    }
    .check(x, 2e-2, 3);
}

#[test]
fn activation_gradients() {
    let mut rng = rng_for(4, 0);
    for kind in [Activation::Silu, Activation::LeakyRelu] {
        let x = random_tensor(2, 1, [2, 3, 3], &mut rng);
        Probe {
            model: Act::new(kind),
            forward: |m, x, t| m.forward(x.clone(), t),
            backward: |m, d| Some(m.backward(d.clone())),
        }
        .check(x, 1e-2, 4);
    }
}

struct LinearProbe(Linear);

impl Module for LinearProbe {
    fn visit(&mut self, v: &mut ParamVisitor) {
        self.0.visit(v)
    }
}

#[test]
fn linear_gradients() {
    let mut rng = rng_for(5, 0);
    let x = random_tensor(1, 1, [3, 1, 5], &mut rng);
    Probe {
        model: LinearProbe(Linear::new(5, 4, &mut rng)),
        forward: |m, x, t| {
            let y = m.0.forward(&x.data, t);
            Tensor::from_vec(1, 1, [1, 1, y.len()], y)
        },
        backward: |m, d| {
            let dx = m.0.backward(&d.data);
            Some(Tensor::from_vec(1, 1, [3, 1, 5], dx))
        },
    }
    .check(x, 1e-2, 5);
}

#[test]
fn attention_gradients() {
    let mut rng = rng_for(6, 0);
    let x = random_tensor(4, 2, [2, 2, 3], &mut rng);
    Probe {
        model: Attention::new(4, 2, &mut rng),
        forward: |m, x, t| m.forward(x, t),
        backward: |m, d| Some(m.backward(d)),
    }
    .check(x, 2e-2, 6);
}

struct BlockProbe {
    block: ResBlock,
    temb: TimeEmbedding,
}

impl Module for BlockProbe {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.scope("block", |v| self.block.visit(v));
        v.scope("temb", |v| self.temb.visit(v));
    }
}

#[test]
fn res_block_gradients() {
    let mut rng = rng_for(7, 0);
    let x = random_tensor(4, 2, [4, 4, 4], &mut rng);
    Probe {
        model: BlockProbe {
            block: ResBlock::new(4, 6, Some(8), Activation::Silu, &mut rng),
            temb: TimeEmbedding::new(8, Activation::Silu, &mut rng),
        },
        forward: |m, x, t| {
            let e = m.temb.forward(&[3.0, 17.0], t);
            m.block.forward(x, Some(&e), t)
        },
        backward: |m, d| {
            let (dx, de) = m.block.backward(d);
            m.temb.backward(&de.unwrap());
            Some(dx)
        },
    }
    .check(x, 2e-2, 7);
}

#[test]
fn unet_gradients() {
    let mut rng = rng_for(8, 0);
    let spec = UNetSpec {
        in_channels: 2,
        out_channels: 1,
        channels: vec![4, 8],
        res_blocks: 1,
        attention: vec![false, true],
        mid_attention: true,
        temb_dim: 8,
        activation: Activation::Silu,
    };
    let mut net = UNet::new(&spec, &mut rng).unwrap();
    // A zero output layer would hide every upstream gradient.
    net.visit(&mut ParamVisitor::new(&mut |name, p| {
        if name.starts_with("conv_out") {
            p.value
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.05 * ((i % 7) as f32 - 3.0));
        }
    }));
    let x = random_tensor(2, 2, [4, 4, 4], &mut rng);
    Probe {
        model: net,
        forward: |m, x, t| m.forward(x, &[5.0, 40.0], t),
        backward: |m, d| {
            m.backward(d);
            None
        },
    }
    .check(x, 3e-2, 8);
}

#[test]
fn autoencoder_gradients() {
    let mut rng = rng_for(9, 0);
    let spec = AutoencoderSpec {
        channels: vec![4, 4, 8],
        res_blocks: vec![0, 1, 1],
        activation: Activation::Silu,
    };
    let ae = Autoencoder::new(&spec, &mut rng).unwrap();
    let x = random_tensor(1, 2, [8, 8, 8], &mut rng);
    Probe {
        model: ae,
        forward: |m, x, t| {
            let z = m.encoder.forward(x, t);
            m.decoder.forward(&z, t)
        },
        backward: |m, d| {
            let dz = m.decoder.backward(d);
            m.encoder.backward(&dz);
            None
        },
    }
    .check(x, 3e-2, 9);
}

#[test]
fn autoencoder_shapes() {
    let mut rng = rng_for(10, 0);
    let spec = AutoencoderSpec {
        channels: vec![4, 4, 8],
        res_blocks: vec![0, 1, 1],
        activation: Activation::Silu,
    };
    let mut ae = Autoencoder::new(&spec, &mut rng).unwrap();
    let x = random_tensor(1, 1, [12, 16, 8], &mut rng);
    let z = ae.encoder.forward(&x, false);
    assert_eq!((z.c, z.dims), (4, [3, 4, 2]));
    let y = ae.decoder.forward(&z, false);
    assert_eq!((y.c, y.dims), (1, [12, 16, 8]));
    assert!(y.data.iter().all(|v| v.abs() < 1.0));
}

#[test]
fn direct_kernels_match_unfolded_product() {
    let mut rng = rng_for(3, 0);
    for (cin, cout) in [(3, 1), (2, 5)] {
        let mut conv = Conv3d::new(cin, cout, 3, 1, &mut rng);
        let x = random_tensor(cin, 2, [3, 4, 5], &mut rng);
        let y = conv.forward(&x, true);
        let dy = random_tensor(cout, 2, [3, 4, 5], &mut rng);
        conv.zero_grad();
        let dx = conv.backward(&dy);
        let mut yd = super::direct::conv3_forward(&x, &conv.weight.value, cout);
        for (co, row) in yd.data.chunks_mut(2 * 60).enumerate() {
            row.iter_mut().for_each(|v| *v += conv.bias.value[co]);
        }
        let dxd = super::direct::conv3_input_grad(&dy, &conv.weight.value, cin);
        let mut gd = vec![0f32; conv.weight.len()];
        super::direct::conv3_weight_grad(&x, &dy, &mut gd);
        let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-4);
        assert!(close(&y.data, &yd.data));
        assert!(close(&dx.data, &dxd.data));
        assert!(close(&conv.weight.grad, &gd));
    }
}
