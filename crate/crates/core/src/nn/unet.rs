//! Step-conditioned 3D U-Net used by both diffusion stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{group_count, ResBlock, TimeEmbedding};
use super::layers::{Act, Activation, Attention, Conv3d, GroupNorm};
use super::param::{Module, ParamVisitor};
use super::tensor::{upsample2, upsample2_backward, Tensor};
use crate::error::{ensure_arg, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width per resolution level; each level after the first halves the resolution.
    pub channels: Vec<usize>,
    /// Residual blocks per level on the way down (the way up uses the same count).
    pub res_blocks: usize,
    /// Self-attention after each residual block of the flagged levels.
    pub attention: Vec<bool>,
    pub mid_attention: bool,
    pub temb_dim: usize,
    pub activation: Activation,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(!self.channels.is_empty(), "unet needs at least one level");
        ensure_arg!(
            self.channels.iter().all(|&c| c > 0),
            "unet widths must be positive"
        );
        ensure_arg!(
            self.res_blocks >= 1,
            "unet needs at least one residual block per level"
        );
        ensure_arg!(
            self.attention.len() == self.channels.len(),
            "attention flags ({}) must match levels ({})",
            self.attention.len(),
            self.channels.len()
        );
        ensure_arg!(
            self.temb_dim >= 2 && self.temb_dim.is_multiple_of(2),
            "temb_dim must be even and at least 2"
        );
        ensure_arg!(
            self.in_channels > 0 && self.out_channels > 0,
            "channel counts must be positive"
        );
        Ok(())
    }

    /// Spatial sizes must be divisible by this factor.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<(ResBlock, Option<Attention>)>,
}

impl Stage {
    fn forward(&mut self, mut h: Tensor, temb: &[f32], train: bool) -> Tensor {
        for (block, attn) in self.blocks.iter_mut() {
            h = block.forward(&h, Some(temb), train);
            if let Some(a) = attn.as_mut() {
                h = a.forward(&h, train);
            }
        }
        h
    }

    fn backward(&mut self, mut dh: Tensor, dtemb: &mut [f32]) -> Tensor {
        for (block, attn) in self.blocks.iter_mut().rev() {
            if let Some(a) = attn.as_mut() {
                dh = a.backward(&dh);
            }
            let (dx, de) = block.backward(&dh);
            if let Some(de) = de {
                dtemb.iter_mut().zip(&de).for_each(|(a, b)| *a += b);
            }
            dh = dx;
        }
        dh
    }

    fn visit(&mut self, v: &mut ParamVisitor) {
        for (i, (block, attn)) in self.blocks.iter_mut().enumerate() {
            v.scope(format!("res{i}"), |v| block.visit(v));
            if let Some(a) = attn.as_mut() {
                v.scope(format!("attn{i}"), |v| a.visit(v));
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: UNetSpec,
    temb: TimeEmbedding,
    conv_in: Conv3d,
    down: Vec<Stage>,
    downsample: Vec<Conv3d>,
    mid: Stage,
    up: Vec<Stage>,
    norm_out: GroupNorm,
    act_out: Act,
    conv_out: Conv3d,
    trace: Vec<usize>,
}

impl UNet {
    pub fn new(spec: &UNetSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let ch = &spec.channels;
        let levels = ch.len();
        let act = spec.activation;
        let td = spec.temb_dim;
        let stage = |cin: usize, cout: usize, n: usize, attn: bool, rng: &mut _| Stage {
            blocks: (0..n)
                .map(|b| {
                    let ci = if b == 0 { cin } else { cout };
                    let block = ResBlock::new(ci, cout, Some(td), act, rng);
                    let a = attn.then(|| Attention::new(cout, group_count(cout), rng));
                    (block, a)
                })
                .collect(),
        };
        let temb = TimeEmbedding::new(td, act, rng);
        let conv_in = Conv3d::new(spec.in_channels, ch[0], 3, 1, rng);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for i in 0..levels {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            down.push(stage(cin, ch[i], spec.res_blocks, spec.attention[i], rng));
            if i + 1 < levels {
                downsample.push(Conv3d::new(ch[i], ch[i], 3, 2, rng));
            }
        }
        let last = ch[levels - 1];
        let mut mid = stage(last, last, 1, spec.mid_attention, rng);
        mid.blocks
            .push((ResBlock::new(last, last, Some(td), act, rng), None));
        let mut up = Vec::new();
        for i in 0..levels {
            let below = if i + 1 < levels { ch[i + 1] } else { last };
            up.push(stage(
                below + ch[i],
                ch[i],
                spec.res_blocks,
                spec.attention[i],
                rng,
            ));
        }
        Ok(UNet {
            spec: spec.clone(),
            temb,
            conv_in,
            down,
            downsample,
            mid,
            up,
            norm_out: GroupNorm::new(group_count(ch[0]), ch[0]),
            act_out: Act::new(act),
            conv_out: Conv3d::new(ch[0], spec.out_channels, 3, 1, rng).zeroed(),
            trace: Vec::new(),
        })
    }

    pub fn check_input(&self, x: &Tensor, t: &[f32]) -> Result<()> {
        ensure_arg!(
            x.c == self.spec.in_channels,
            "network expects {} input channels, got {}",
            self.spec.in_channels,
            x.c
        );
        let m = self.spec.size_multiple();
        ensure_arg!(
            x.dims.iter().all(|&d| d >= m && d % m == 0),
            "spatial size {:?} must be a positive multiple of {m}",
            x.dims
        );
        ensure_arg!(t.len() == x.n, "one step index per sample required");
        Ok(())
    }

    /// `t` holds one step index per batch sample.
    pub fn forward(&mut self, x: &Tensor, t: &[f32], train: bool) -> Tensor {
        let levels = self.spec.channels.len();
        let temb = self.temb.forward(t, train);
        let mut h = self.conv_in.forward(x, train);
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = self.down[i].forward(h, &temb, train);
            skips.push(h.clone());
            if i + 1 < levels {
                h = self.downsample[i].forward(&h, train);
            }
        }
        h = self.mid.forward(h, &temb, train);
        self.trace.clear();
        for i in (0..levels).rev() {
            if i + 1 < levels {
                h = upsample2(&h);
            }
            self.trace.push(h.c);
            h = h.concat(&skips[i]);
            h = self.up[i].forward(h, &temb, train);
        }
        let h = self.norm_out.forward(&h, train);
        let h = self.act_out.forward(h, train);
        self.conv_out.forward(&h, train)
    }

    /// Accumulates parameter gradients for the loss gradient `dy`.
    pub fn backward(&mut self, dy: &Tensor) {
        let levels = self.spec.channels.len();
        let mut dtemb = vec![0f32; dy.n * self.spec.temb_dim];
        let dh = self.conv_out.backward(dy);
        let dh = self.act_out.backward(dh);
        let mut dh = self.norm_out.backward(&dh);
        let mut dskips: Vec<Option<Tensor>> = vec![None; levels];
        for i in 0..levels {
            let d = self.up[i].backward(dh, &mut dtemb);
            let (dup, dskip) = d.split(self.trace[levels - 1 - i]);
            dskips[i] = Some(dskip);
            dh = if i + 1 < levels {
                upsample2_backward(&dup)
            } else {
                dup
            };
        }
        dh = self.mid.backward(dh, &mut dtemb);
        for i in (0..levels).rev() {
            if i + 1 < levels {
                dh = self.downsample[i].backward(&dh);
            }
            dh.add_assign(dskips[i].as_ref().expect("skip gradient"));
            dh = self.down[i].backward(dh, &mut dtemb);
        }
        self.conv_in.backward(&dh);
        self.temb.backward(&dtemb);
    }
}

impl Module for UNet {
    fn visit(&mut self, v: &mut ParamVisitor) {
        v.scope("temb", |v| self.temb.visit(v));
        v.scope("conv_in", |v| self.conv_in.visit(v));
        for (i, s) in self.down.iter_mut().enumerate() {
            v.scope(format!("down{i}"), |v| s.visit(v));
        }
        for (i, c) in self.downsample.iter_mut().enumerate() {
            v.scope(format!("downsample{i}"), |v| c.visit(v));
        }
        v.scope("mid", |v| self.mid.visit(v));
        for (i, s) in self.up.iter_mut().enumerate() {
            v.scope(format!("up{i}"), |v| s.visit(v));
        }
        v.scope("norm_out", |v| self.norm_out.visit(v));
        v.scope("conv_out", |v| self.conv_out.visit(v));
    }
}
