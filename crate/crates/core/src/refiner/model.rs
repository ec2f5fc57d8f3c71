//! Patch denoiser conditioned on the coarse patch and a guidance patch,
//! its masked training objective and whole-volume refinement.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::mask::{make_y_prev, masked_diffusion_loss, sample_training_mask, Mask};
use super::traversal::{plan_traversal, TraversalPlan};
use crate::diffusion::{
    forward_diffuse, sample_chain, DiffusionSchedule, Prediction, ScheduleSpec,
};
use crate::error::{ensure_arg, Error, Result};
use crate::nn::{Checkpoint, Tensor, UNet, UNetSpec};
use crate::train::{EpochLog, TrainConfig, Trainer};
use crate::util::{rng_for, standard_normal_vec};
use crate::volume::{extract_patch, insert_patch, voxel_count, PatchGrid, Shape3, Volume};

pub const REFINER_KIND: &str = "refiner";

/// Network input channels: noisy patch, coarse patch, guidance patch.
pub const REFINER_IN_CHANNELS: usize = 3;

/// Patch geometry plus the training-time mask and output settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchParams {
    pub patch_size: usize,
    /// Inference grid stride; half the patch by default.
    pub stride: usize,
    /// Probability of a full mask during training.
    pub full_prob: f64,
    /// Typical RMS of `x - x_hat`; sets the output scaling (see `Preconditioner`).
    pub residual_std: f64,
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            patch_size: 16,
            stride: 8,
            full_prob: 0.1,
            residual_std: 0.15,
        }
    }
}

/// Maps the raw network output `f` to a noise estimate. The clean-patch
/// estimate is centred on the coarse patch,
///
/// `x0 = x_hat + c_skip (x_t / sqrt(abar) - x_hat) + c_out f`,
///
/// with `c_skip = r^2 / (r^2 + s^2)`, `c_out = s r / sqrt(r^2 + s^2)`,
/// `s^2 = (1 - abar) / abar` and `r` the residual scale, and the noise
/// estimate is the one implied by `x0` and `x_t`. The ideal `f` has unit
/// scale at every step.
#[derive(Clone, Copy, Debug)]
pub struct Preconditioner {
    pub residual_std: f64,
}

impl Preconditioner {
    fn coefficients(&self, t: usize, s: &DiffusionSchedule) -> (f64, f64, f64) {
        let ab = s.alpha_bar(t);
        let s2 = (1.0 - ab) / ab;
        let r2 = self.residual_std * self.residual_std;
        (ab, r2 / (r2 + s2), (s2 * r2 / (r2 + s2)).sqrt())
    }

    pub fn noise_estimate(
        &self,
        f: &[f32],
        x_t: &[f32],
        x_hat: &[f32],
        t: usize,
        s: &DiffusionSchedule,
    ) -> Vec<f32> {
        let (ab, c_skip, c_out) = self.coefficients(t, s);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        f.iter()
            .zip(x_t)
            .zip(x_hat)
            .map(|((&f, &x), &h)| {
                let (f, x, h) = (f as f64, x as f64, h as f64);
                let x0 = h + c_skip * (x / sa - h) + c_out * f;
                ((x - sa * x0) / sb) as f32
            })
            .collect()
    }

    /// `d eps / d f`, the same for every voxel.
    pub fn output_gain(&self, t: usize, s: &DiffusionSchedule) -> f64 {
        let (ab, _, c_out) = self.coefficients(t, s);
        -c_out * (ab / (1.0 - ab)).sqrt()
    }

    /// Loss weight that makes the weighted noise loss equal the squared error
    /// of `f` against its ideal value.
    pub fn loss_weight(&self, t: usize, s: &DiffusionSchedule) -> f64 {
        1.0 / self.output_gain(t, s).powi(2)
    }
}

/// One training example before noising.
#[derive(Clone, Debug)]
pub struct RefinerSample {
    pub x_patch: Vec<f32>,
    pub x_hat_patch: Vec<f32>,
    pub y_prev: Vec<f32>,
    pub mask: Mask,
    pub t: usize,
    pub noise: Vec<f32>,
}

/// Clean / coarse volume pairs of one shape.
pub fn check_pairs(pairs: &[(Volume, Volume)], p: usize) -> Result<Shape3> {
    ensure_arg!(!pairs.is_empty(), "refiner training set is empty");
    let shape = pairs[0].0.shape();
    for (x, xh) in pairs {
        if x.shape() != shape || xh.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "refiner pair shapes {:?} / {:?}, expected {shape:?}",
                x.shape(),
                xh.shape()
            )));
        }
    }
    ensure_arg!(
        shape.iter().all(|&l| l >= p),
        "patch size {p} exceeds volume shape {shape:?}"
    );
    Ok(shape)
}

/// Draws a random pair, a uniformly random patch origin, a step, a mask and
/// both noise fields. The draw order is fixed so training is reproducible.
pub fn draw_sample(
    pairs: &[(Volume, Volume)],
    params: &PatchParams,
    s: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<RefinerSample> {
    let p = params.patch_size;
    let shape = check_pairs(pairs, p)?;
    let (x, xh) = &pairs[rng.gen_range(0..pairs.len())];
    let origin: Shape3 = std::array::from_fn(|a| rng.gen_range(0..=shape[a] - p));
    let x_patch = extract_patch(x, origin, p)?.into_data();
    let x_hat_patch = extract_patch(xh, origin, p)?.into_data();
    let mask = sample_training_mask(rng, params.full_prob, p)?;
    let guide = standard_normal_vec(rng, x_patch.len());
    let y_prev = make_y_prev(&x_patch, &mask, &guide)?;
    let t = s.sample_step(rng);
    let noise = standard_normal_vec(rng, x_patch.len());
    Ok(RefinerSample {
        x_patch,
        x_hat_patch,
        y_prev,
        mask,
        t,
        noise,
    })
}

fn network_input(x_t: &[f32], x_hat: &[f32], y_prev: &[f32]) -> Vec<f32> {
    let mut v = Vec::with_capacity(3 * x_t.len());
    v.extend_from_slice(x_t);
    v.extend_from_slice(x_hat);
    v.extend_from_slice(y_prev);
    v
}

fn batch_input(
    samples: &[RefinerSample],
    p: usize,
    s: &DiffusionSchedule,
) -> Result<(Tensor, Vec<f32>, Vec<Vec<f32>>)> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut states = Vec::with_capacity(samples.len());
    for smp in samples {
        let x_t = forward_diffuse(&smp.x_patch, smp.t, &smp.noise, s)?;
        inputs.push(network_input(&x_t, &smp.x_hat_patch, &smp.y_prev));
        states.push(x_t);
    }
    let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let steps = samples.iter().map(|smp| smp.t as f32).collect();
    Ok((
        Tensor::stack(REFINER_IN_CHANNELS, [p; 3], &refs),
        steps,
        states,
    ))
}

/// Weighted masked noise-prediction loss of a batch, averaged over samples,
/// with gradients left in the network.
pub fn refiner_batch_loss(
    unet: &mut UNet,
    samples: &[RefinerSample],
    params: &PatchParams,
    s: &DiffusionSchedule,
    train: bool,
) -> Result<f64> {
    let (x, steps, states) = batch_input(samples, params.patch_size, s)?;
    unet.check_input(&x, &steps)?;
    let y = unet.forward(&x, &steps, train);
    let pre = Preconditioner {
        residual_std: params.residual_std,
    };
    let n = samples.len() as f64;
    let mut total = 0.0;
    let mut dy = vec![0f32; y.data.len()];
    for (j, smp) in samples.iter().enumerate() {
        let eps = pre.noise_estimate(y.row(0, j), &states[j], &smp.x_hat_patch, smp.t, s);
        let (loss, g) = masked_diffusion_loss(&eps, &smp.noise, &smp.mask)?;
        let w = pre.loss_weight(smp.t, s);
        total += w * loss;
        let scale = (w * pre.output_gain(smp.t, s) / n) as f32;
        let sz = g.len();
        dy[j * sz..(j + 1) * sz]
            .iter_mut()
            .zip(g)
            .for_each(|(d, v)| *d = v * scale);
    }
    if train {
        unet.backward(&Tensor::from_vec(y.c, y.n, y.dims, dy));
    }
    Ok(total / n)
}

pub fn new_refiner_unet(spec: &UNetSpec, seed: u64) -> Result<UNet> {
    ensure_arg!(
        spec.in_channels == REFINER_IN_CHANNELS && spec.out_channels == 1,
        "refiner network must map {REFINER_IN_CHANNELS} channels to 1"
    );
    UNet::new(spec, &mut rng_for(seed, 0x2ef))
}

pub fn train_refiner(
    trainer: &mut Trainer<UNet>,
    pairs: &[(Volume, Volume)],
    params: &PatchParams,
    s: &DiffusionSchedule,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<()> {
    check_pairs(pairs, params.patch_size)?;
    ensure_arg!(
        params
            .patch_size
            .is_multiple_of(trainer.model.spec.size_multiple()),
        "patch size {} is not divisible by {}",
        params.patch_size,
        trainer.model.spec.size_multiple()
    );
    trainer.run(
        cfg,
        seed,
        |unet, rng| refiner_step(unet, pairs, params, s, cfg.batch_size, rng),
        log,
    )
}

/// One optimization step's loss and gradients on `batch` fresh samples.
pub fn refiner_step(
    unet: &mut UNet,
    pairs: &[(Volume, Volume)],
    params: &PatchParams,
    s: &DiffusionSchedule,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let samples = (0..batch)
        .map(|_| draw_sample(pairs, params, s, rng))
        .collect::<Result<Vec<_>>>()?;
    refiner_batch_loss(unet, &samples, params, s, true)
}

/// Masked loss on `count` fixed samples from stream `seed`; deterministic.
pub fn refiner_validation_loss(
    unet: &mut UNet,
    pairs: &[(Volume, Volume)],
    params: &PatchParams,
    s: &DiffusionSchedule,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_for(seed, 0x7a2);
    let mut total = 0.0;
    for _ in 0..count {
        let smp = draw_sample(pairs, params, s, &mut rng)?;
        total += refiner_batch_loss(unet, &[smp], params, s, false)?;
    }
    Ok(total / count.max(1) as f64)
}

/// Trained patch denoiser with its schedule and patch geometry.
pub struct Refiner {
    pub unet: UNet,
    pub schedule: DiffusionSchedule,
    pub params: PatchParams,
}

pub fn refiner_checkpoint(
    trainer: &mut Trainer<UNet>,
    schedule: &ScheduleSpec,
    params: &PatchParams,
) -> Checkpoint {
    let spec = trainer.model.spec.clone();
    trainer.checkpoint(
        REFINER_KIND,
        json!({ "spec": spec, "schedule": schedule, "patch": params }),
        json!({}),
    )
}

fn refiner_parts(ck: &Checkpoint) -> Result<(UNetSpec, ScheduleSpec, PatchParams)> {
    ck.expect_kind(REFINER_KIND)?;
    let field = |key: &str| ck.config[key].clone();
    let bad = |key: &str, e: serde_json::Error| {
        Error::Checkpoint(format!("refiner checkpoint config `{key}`: {e}"))
    };
    Ok((
        serde_json::from_value(field("spec")).map_err(|e| bad("spec", e))?,
        serde_json::from_value(field("schedule")).map_err(|e| bad("schedule", e))?,
        serde_json::from_value(field("patch")).map_err(|e| bad("patch", e))?,
    ))
}

pub fn load_refiner(ck: &Checkpoint) -> Result<Refiner> {
    let (spec, schedule, params) = refiner_parts(ck)?;
    let mut unet = new_refiner_unet(&spec, 0)?;
    ck.load_module("", &mut unet)?;
    Ok(Refiner {
        unet,
        schedule: schedule.build()?,
        params,
    })
}

pub fn resume_refiner(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Trainer<UNet>> {
    let (spec, _, _) = refiner_parts(ck)?;
    Trainer::resume(REFINER_KIND, new_refiner_unet(&spec, 0)?, cfg, ck)
}

impl Refiner {
    /// Full reverse chain from pure noise, conditioned on the coarse patch and
    /// the guidance patch at every step. Clean-sample estimates are clamped to
    /// [-1, 1] inside each step; the returned patch is not.
    pub fn refine_patch(
        &mut self,
        x_hat_patch: &[f32],
        y_prev: &[f32],
        rng: &mut impl Rng,
    ) -> Result<Vec<f32>> {
        let p = self.params.patch_size;
        let len = p * p * p;
        if x_hat_patch.len() != len || y_prev.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "refiner expects {p}^3 patches ({len} voxels), got {} and {}",
                x_hat_patch.len(),
                y_prev.len()
            )));
        }
        let unet = &mut self.unet;
        let schedule = &self.schedule;
        let pre = Preconditioner {
            residual_std: self.params.residual_std,
        };
        sample_chain(
            len,
            schedule,
            Prediction::Epsilon,
            Some((-1.0, 1.0)),
            rng,
            |x, t| {
                let input = Tensor::from_vec(
                    REFINER_IN_CHANNELS,
                    1,
                    [p; 3],
                    network_input(x, x_hat_patch, y_prev),
                );
                let f = unet.forward(&input, &[t as f32], false).data;
                Ok(pre.noise_estimate(&f, x, x_hat_patch, t, schedule))
            },
        )
    }

    pub fn grid(&self, shape: Shape3) -> Result<PatchGrid> {
        PatchGrid::new(shape, self.params.patch_size, self.params.stride)
    }
}

/// Executes `plan` over `x_hat`. For entry `k` the generator `rng_for(seed, k)`
/// first draws the guidance noise, then the denoiser's own draws. Guidance
/// comes from the output canvas outside the entry's mask, never from `x_hat`.
/// Returns the refined volume clipped to [-1, 1] and per-voxel write counts.
pub fn refine_volume_with(
    x_hat: &Volume,
    plan: &TraversalPlan,
    seed: u64,
    mut denoise: impl FnMut(&[f32], &[f32], &mut ChaCha8Rng) -> Result<Vec<f32>>,
) -> Result<(Volume, Vec<u32>)> {
    if plan.grid.volume_shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "plan covers {:?}, volume is {:?}",
            plan.grid.volume_shape(),
            x_hat.shape()
        )));
    }
    let p = plan.grid.patch_size();
    let mut canvas = Volume::zeros(x_hat.shape()).with_spacing(x_hat.spacing());
    let mut writes = vec![0u32; voxel_count(x_hat.shape())];
    for (k, e) in plan.entries.iter().enumerate() {
        let mut rng = rng_for(seed, k as u64);
        let known = extract_patch(&canvas, e.origin, p)?.into_data();
        let guide = standard_normal_vec(&mut rng, known.len());
        let y_prev = make_y_prev(&known, &e.mask, &guide)?;
        let x_hat_patch = extract_patch(x_hat, e.origin, p)?.into_data();
        let refined = denoise(&x_hat_patch, &y_prev, &mut rng)?;
        let patch = Volume::new([p; 3], refined, [1.0; 3])?;
        insert_patch(&mut canvas, e.origin, &patch, e.mask.data())?;
        let mut i = 0;
        for z in 0..p {
            for y in 0..p {
                let row = canvas.index(e.origin[0] + z, e.origin[1] + y, e.origin[2]);
                for (w, &m) in writes[row..row + p]
                    .iter_mut()
                    .zip(&e.mask.data()[i..i + p])
                {
                    *w += m as u32;
                }
                i += p;
            }
        }
    }
    Ok((canvas.clamp(-1.0, 1.0), writes))
}

/// Refines a whole coarse volume patch by patch, centre outwards.
pub fn refine_volume(
    refiner: &mut Refiner,
    x_hat: &Volume,
    seed: u64,
) -> Result<(Volume, TraversalPlan)> {
    let plan = plan_traversal(&refiner.grid(x_hat.shape())?)?;
    let (v, _) = refine_volume_with(x_hat, &plan, seed, |xh, yp, rng| {
        refiner.refine_patch(xh, yp, rng)
    })?;
    Ok((v, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::nn::Activation;
    use crate::refiner::MaskKind;

    fn spec() -> UNetSpec {
        UNetSpec {
            in_channels: 3,
            out_channels: 1,
            channels: vec![8, 16],
            res_blocks: 1,
            attention: vec![false, false],
            mid_attention: false,
            temb_dim: 16,
            activation: Activation::Silu,
        }
    }

    fn sched() -> (ScheduleSpec, DiffusionSchedule) {
        let spec = ScheduleSpec {
            steps: 10,
            beta_start: 0.01,
            beta_end: 0.3,
            kind: ScheduleKind::ScaledLinear,
        };
        (spec.clone(), spec.build().unwrap())
    }

    fn params() -> PatchParams {
        PatchParams {
            patch_size: 4,
            stride: 2,
            ..PatchParams::default()
        }
    }

    fn pairs() -> Vec<(Volume, Volume)> {
        let x = Volume::from_fn([8, 8, 8], |z, y, x| {
            ((z + 2 * y + 3 * x) as f32 * 0.3).sin() * 0.8
        });
        let xh = Volume::from_fn([8, 8, 8], |z, y, x| {
            ((z + 2 * y + 3 * x) as f32 * 0.3).sin() * 0.5
        });
        vec![(x, xh)]
    }

    #[test]
    fn single_patch_overfit() {
        let (_, s) = sched();
        let mut rng = rng_for(1, 0);
        let smp = draw_sample(
            &pairs(),
            &PatchParams {
                full_prob: 1.0,
                ..params()
            },
            &s,
            &mut rng,
        )
        .unwrap();
        assert_eq!(smp.mask.kind(), MaskKind::Full);
        let cfg = TrainConfig {
            epochs: 40,
            steps_per_epoch: 10,
            batch_size: 1,
            lr: 3e-3,
            final_lr_frac: 0.05,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(REFINER_KIND, new_refiner_unet(&spec(), 1).unwrap(), &cfg);
        let fixed = vec![smp];
        tr.run(
            &cfg,
            1,
            |u, _| refiner_batch_loss(u, &fixed, &params(), &s, true),
            &mut |_| {},
        )
        .unwrap();
        let after = refiner_batch_loss(&mut tr.model, &fixed, &params(), &s, false).unwrap();
        assert!(after < 1e-2, "loss {after}");
    }

    #[test]
    fn training_reduces_held_out_loss_and_reloads_exactly() {
        let (sspec, s) = sched();
        let cfg = TrainConfig {
            epochs: 15,
            steps_per_epoch: 10,
            batch_size: 4,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(REFINER_KIND, new_refiner_unet(&spec(), 2).unwrap(), &cfg);
        let before =
            refiner_validation_loss(&mut tr.model, &pairs(), &params(), &s, 16, 9).unwrap();
        train_refiner(&mut tr, &pairs(), &params(), &s, &cfg, 2, &mut |_| {}).unwrap();
        let after = refiner_validation_loss(&mut tr.model, &pairs(), &params(), &s, 16, 9).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
        let ck = Checkpoint::from_bytes(&refiner_checkpoint(&mut tr, &sspec, &params()).to_bytes())
            .unwrap();
        let mut back = load_refiner(&ck).unwrap();
        let again =
            refiner_validation_loss(&mut back.unet, &pairs(), &params(), &s, 16, 9).unwrap();
        assert_eq!(after.to_bits(), again.to_bits());
    }

    #[test]
    fn refine_volume_writes_each_voxel_once_and_is_deterministic() {
        let (_, s) = sched();
        let mut r = Refiner {
            unet: new_refiner_unet(&spec(), 3).unwrap(),
            schedule: s,
            params: params(),
        };
        let xh = pairs()[0].1.clone();
        let (a, plan) = refine_volume(&mut r, &xh, 5).unwrap();
        let (b, _) = refine_volume(&mut r, &xh, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (_, writes) = refine_volume_with(&xh, &plan, 5, |xh, _, _| Ok(xh.to_vec())).unwrap();
        assert!(writes.iter().all(|&w| w == 1));
    }

    #[test]
    fn guidance_comes_from_the_canvas() {
        let xh = pairs()[0].1.clone();
        let plan = plan_traversal(&PatchGrid::new([8, 8, 8], 4, 2).unwrap()).unwrap();
        let mut seen = Vec::new();
        refine_volume_with(&xh, &plan, 0, |_, yp, _| {
            seen.push(yp.to_vec());
            Ok(vec![0.25; 64])
        })
        .unwrap();
        for (e, yp) in plan.entries.iter().zip(&seen).skip(1) {
            for (&m, &v) in e.mask.data().iter().zip(yp) {
                assert!(m || v == 0.25);
            }
        }
    }

    #[test]
    fn single_patch_volume_is_one_full_refinement() {
        let (_, s) = sched();
        let mut r = Refiner {
            unet: new_refiner_unet(&spec(), 4).unwrap(),
            schedule: s,
            params: PatchParams {
                patch_size: 8,
                ..params()
            },
        };
        let xh = pairs()[0].1.clone();
        let (v, plan) = refine_volume(&mut r, &xh, 11).unwrap();
        assert_eq!(plan.entries.len(), 1);
        let mut rng = rng_for(11, 0);
        let guide = standard_normal_vec(&mut rng, 512);
        let direct = r.refine_patch(xh.data(), &guide, &mut rng).unwrap();
        let clipped: Vec<f32> = direct.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        assert_eq!(v.data(), clipped.as_slice());
        assert!(r.refine_patch(&xh.data()[..100], &guide, &mut rng).is_err());
    }
}
