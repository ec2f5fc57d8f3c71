//! Convolutional autoencoder with exactly two stride-2 stages (4x per axis).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{group_count, ResBlock};
use super::layers::{Act, Activation, Conv3d, GroupNorm};
use super::param::{Module, ParamVisitor};
use super::tensor::{upsample2, upsample2_backward, Tensor};
use crate::error::{ensure_arg, Result};

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    /// Widths of the three resolution levels (full, 1/2, 1/4).
    pub channels: Vec<usize>,
    /// Residual blocks per level; zero is allowed.
    pub res_blocks: Vec<usize>,
    pub activation: Activation,
}

impl AutoencoderSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.channels.len() == 3,
            "autoencoder needs exactly 3 levels (4x downsampling), got {}",
            self.channels.len()
        );
        ensure_arg!(
            self.channels.iter().all(|&c| c > 0),
            "autoencoder widths must be positive"
        );
        ensure_arg!(
            self.res_blocks.len() == self.channels.len(),
            "res_blocks ({}) must match levels ({})",
            self.res_blocks.len(),
            self.channels.len()
        );
        Ok(())
    }
}

fn blocks_forward(blocks: &mut [ResBlock], mut h: Tensor, train: bool) -> Tensor {
    for b in blocks.iter_mut() {
        h = b.forward(&h, None, train);
    }
    h
}

fn blocks_backward(blocks: &mut [ResBlock], mut dh: Tensor) -> Tensor {
    for b in blocks.iter_mut().rev() {
        dh = b.backward(&dh).0;
    }
    dh
}

fn visit_blocks(blocks: &mut [ResBlock], name: &str, v: &mut ParamVisitor) {
    for (i, b) in blocks.iter_mut().enumerate() {
        v.scope(format!("{name}.res{i}"), |v| b.visit(v));
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv3d,
    levels: Vec<Vec<ResBlock>>,
    down: Vec<Conv3d>,
    norm_out: GroupNorm,
    act_out: Act,
    conv_out: Conv3d,
}

impl Encoder {
    fn new(spec: &AutoencoderSpec, rng: &mut impl Rng) -> Self {
        let ch = &spec.channels;
        let act = spec.activation;
        let conv_in = Conv3d::new(1, ch[0], 3, 1, rng);
        let mut levels = Vec::new();
        let mut down = Vec::new();
        for i in 0..ch.len() {
            levels.push(
                (0..spec.res_blocks[i])
                    .map(|_| ResBlock::new(ch[i], ch[i], None, act, rng))
                    .collect(),
            );
            if i + 1 < ch.len() {
                down.push(Conv3d::new(ch[i], ch[i + 1], 3, 2, rng));
            }
        }
        let last = ch[ch.len() - 1];
        Encoder {
            conv_in,
            levels,
            down,
            norm_out: GroupNorm::new(group_count(last), last),
            act_out: Act::new(act),
            conv_out: Conv3d::new(last, LATENT_CHANNELS, 1, 1, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = self.conv_in.forward(x, train);
        for i in 0..self.levels.len() {
            h = blocks_forward(&mut self.levels[i], h, train);
            if i < self.down.len() {
                h = self.down[i].forward(&h, train);
            }
        }
        let h = self.norm_out.forward(&h, train);
        let h = self.act_out.forward(h, train);
        self.conv_out.forward(&h, train)
    }

    pub fn backward(&mut self, dz: &Tensor) {
        let dh = self.conv_out.backward(dz);
        let dh = self.act_out.backward(dh);
        let mut dh = self.norm_out.backward(&dh);
        for i in (0..self.levels.len()).rev() {
            if i < self.down.len() {
                dh = self.down[i].backward(&dh);
            }
            dh = blocks_backward(&mut self.levels[i], dh);
        }
        self.conv_in.backward(&dh);
    }
}

impl Module for Encoder {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.scope("conv_in", |v| self.conv_in.visit(v));
        for (i, blocks) in self.levels.iter_mut().enumerate() {
            visit_blocks(blocks, &format!("level{i}"), v);
        }
        for (i, c) in self.down.iter_mut().enumerate() {
            v.scope(format!("down{i}"), |v| c.visit(v));
        }
        v.scope("norm_out", |v| self.norm_out.visit(v));
        v.scope("conv_out", |v| self.conv_out.visit(v));
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv3d,
    levels: Vec<Vec<ResBlock>>,
    /// `up[i]` maps level `i + 1` width to level `i` width after upsampling.
    up: Vec<Conv3d>,
    norm_out: GroupNorm,
    act_out: Act,
    conv_out: Conv3d,
    out_cache: Option<Vec<f32>>,
}

impl Decoder {
    fn new(spec: &AutoencoderSpec, rng: &mut impl Rng) -> Self {
        let ch = &spec.channels;
        let act = spec.activation;
        let last = ch[ch.len() - 1];
        let conv_in = Conv3d::new(LATENT_CHANNELS, last, 3, 1, rng);
        let mut levels = Vec::new();
        let mut up = Vec::new();
        for i in 0..ch.len() {
            levels.push(
                (0..spec.res_blocks[i])
                    .map(|_| ResBlock::new(ch[i], ch[i], None, act, rng))
                    .collect(),
            );
            if i + 1 < ch.len() {
                up.push(Conv3d::new(ch[i + 1], ch[i], 3, 1, rng));
            }
        }
        Decoder {
            conv_in,
            levels,
            up,
            norm_out: GroupNorm::new(group_count(ch[0]), ch[0]),
            act_out: Act::new(act),
            conv_out: Conv3d::new(ch[0], 1, 3, 1, rng),
            out_cache: None,
        }
    }

    /// Output is squashed into (-1, 1) by `2 * sigmoid(x) - 1`.
    pub fn forward(&mut self, z: &Tensor, train: bool) -> Tensor {
        let mut h = self.conv_in.forward(z, train);
        for i in (0..self.levels.len()).rev() {
            h = blocks_forward(&mut self.levels[i], h, train);
            if i > 0 {
                h = upsample2(&h);
                h = self.up[i - 1].forward(&h, train);
            }
        }
        let h = self.norm_out.forward(&h, train);
        let h = self.act_out.forward(h, train);
        let mut y = self.conv_out.forward(&h, train);
        y.data
            .iter_mut()
            .for_each(|v| *v = 2.0 / (1.0 + (-*v).exp()) - 1.0);
        if train {
            self.out_cache = Some(y.data.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let y = self
            .out_cache
            .take()
            .expect("decoder backward without forward");
        let mut d = dy.clone();
        // y = 2s - 1  =>  dy/dx = 2 s (1 - s) = (1 - y^2) / 2
        d.data
            .iter_mut()
            .zip(&y)
            .for_each(|(g, &yv)| *g *= 0.5 * (1.0 - yv * yv));
        let dh = self.conv_out.backward(&d);
        let dh = self.act_out.backward(dh);
        let mut dh = self.norm_out.backward(&dh);
        for i in 0..self.levels.len() {
            if i > 0 {
                dh = self.up[i - 1].backward(&dh);
                dh = upsample2_backward(&dh);
            }
            dh = blocks_backward(&mut self.levels[i], dh);
        }
        self.conv_in.backward(&dh)
    }
}

impl Module for Decoder {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.scope("conv_in", |v| self.conv_in.visit(v));
        for (i, blocks) in self.levels.iter_mut().enumerate() {
            visit_blocks(blocks, &format!("level{i}"), v);
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            v.scope(format!("up{i}"), |v| c.visit(v));
        }
        v.scope("norm_out", |v| self.norm_out.visit(v));
        v.scope("conv_out", |v| self.conv_out.visit(v));
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub spec: AutoencoderSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new(spec: &AutoencoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        Ok(Autoencoder {
            spec: spec.clone(),
            encoder: Encoder::new(spec, rng),
            decoder: Decoder::new(spec, rng),
        })
    }
}

impl Module for Autoencoder {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.scope("encoder", |v| self.encoder.visit(v));
        v.scope("decoder", |v| self.decoder.visit(v));
    }
}
