//! First stage: an autoencoder that compresses volumes 4x per axis into a
//! 4-channel latent, and a velocity-predicting DDPM over that latent space.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffusion::{
    forward_diffuse, sample_chain, velocity_target, DiffusionSchedule, Prediction, ScheduleSpec,
};
use crate::error::{ensure_arg, Error, Result};
use crate::nn::{
    mse_loss, Autoencoder, AutoencoderSpec, Checkpoint, Tensor, UNet, UNetSpec, DOWNSAMPLE_FACTOR,
    LATENT_CHANNELS,
};
use crate::train::{EpochLog, TrainConfig, Trainer};
use crate::util::{rng_for, standard_normal_vec};
use crate::volume::{voxel_count, Shape3, Volume};

pub const AE_KIND: &str = "ae";
pub const LDM_KIND: &str = "ldm";

/// Autoencoder latent: `LATENT_CHANNELS` channels over `dims`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    dims: Shape3,
    data: Vec<f32>,
}

impl LatentCode {
    pub fn new(dims: Shape3, data: Vec<f32>) -> Result<Self> {
        let want = LATENT_CHANNELS * voxel_count(dims);
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "latent {dims:?} needs {want} values, got {}",
                data.len()
            )));
        }
        ensure_arg!(
            data.iter().all(|v| v.is_finite()),
            "latent contains non-finite values"
        );
        Ok(LatentCode { dims, data })
    }

    pub fn dims(&self) -> Shape3 {
        self.dims
    }

    /// `[channels, d, h, w]`.
    pub fn shape(&self) -> [usize; 4] {
        [LATENT_CHANNELS, self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Latent grid for a volume shape; every axis must be divisible by 4.
pub fn latent_dims(shape: Shape3) -> Result<Shape3> {
    ensure_arg!(
        shape.iter().all(|&l| l > 0 && l % DOWNSAMPLE_FACTOR == 0),
        "volume shape {shape:?} is not divisible by {DOWNSAMPLE_FACTOR} on every axis"
    );
    Ok(shape.map(|l| l / DOWNSAMPLE_FACTOR))
}

pub fn encode(ae: &mut Autoencoder, x: &Volume) -> Result<LatentCode> {
    let dims = latent_dims(x.shape())?;
    let z = ae
        .encoder
        .forward(&Tensor::from_vec(1, 1, x.shape(), x.data().to_vec()), false);
    LatentCode::new(dims, z.data)
}

/// Decodes to a volume in [-1, 1] with unit spacing.
pub fn decode(ae: &mut Autoencoder, z: &LatentCode) -> Result<Volume> {
    let shape = z.dims.map(|l| l * DOWNSAMPLE_FACTOR);
    let y = ae.decoder.forward(
        &Tensor::from_vec(LATENT_CHANNELS, 1, z.dims, z.data.clone()),
        false,
    );
    Volume::new(shape, y.data, [1.0; 3])
}

/// `decode(encode(x))`, keeping the input's spacing.
pub fn reconstruct(ae: &mut Autoencoder, x: &Volume) -> Result<Volume> {
    let z = encode(ae, x)?;
    Ok(decode(ae, &z)?.with_spacing(x.spacing()))
}

/// Mean squared reconstruction error over whole volumes.
pub fn reconstruction_mse(ae: &mut Autoencoder, volumes: &[Volume]) -> Result<f64> {
    ensure_arg!(!volumes.is_empty(), "no volumes to evaluate");
    let mut total = 0.0;
    for v in volumes {
        let y = reconstruct(ae, v)?;
        total += mse_loss(y.data(), v.data()).0;
    }
    Ok(total / volumes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Edge of the random training crops (multiple of 4); 0 trains on whole volumes.
    pub crop: usize,
    /// Weight of the mean squared latent magnitude added to the reconstruction MSE.
    pub latent_penalty: f32,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            train: TrainConfig::default(),
            crop: 16,
            latent_penalty: 1e-4,
        }
    }
}

fn check_dataset(volumes: &[Volume]) -> Result<Shape3> {
    ensure_arg!(!volumes.is_empty(), "training set is empty");
    let shape = volumes[0].shape();
    for v in volumes {
        if v.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "training volumes differ in shape: {:?} vs {shape:?}",
                v.shape()
            )));
        }
    }
    Ok(shape)
}

fn random_crop(v: &Volume, edge: [usize; 3], rng: &mut impl Rng) -> Vec<f32> {
    let shape = v.shape();
    let o: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=shape[a] - edge[a]));
    let mut out = Vec::with_capacity(voxel_count(edge));
    for z in 0..edge[0] {
        for y in 0..edge[1] {
            let i = v.index(o[0] + z, o[1] + y, o[2]);
            out.extend_from_slice(&v.data()[i..i + edge[2]]);
        }
    }
    out
}

/// One autoencoder batch: loss = MSE(D(E(x)), x) + penalty * mean(z^2).
pub fn ae_step(
    ae: &mut Autoencoder,
    volumes: &[Volume],
    cfg: &AeTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let shape = check_dataset(volumes)?;
    let edge = if cfg.crop == 0 {
        shape
    } else {
        shape.map(|l| cfg.crop.min(l))
    };
    latent_dims(edge)?;
    let crops: Vec<Vec<f32>> = (0..cfg.train.batch_size)
        .map(|_| {
            let v = &volumes[rng.gen_range(0..volumes.len())];
            random_crop(v, edge, rng)
        })
        .collect();
    let refs: Vec<&[f32]> = crops.iter().map(Vec::as_slice).collect();
    let x = Tensor::stack(1, edge, &refs);
    let z = ae.encoder.forward(&x, true);
    let y = ae.decoder.forward(&z, true);
    let (rec, dy) = mse_loss(&y.data, &x.data);
    let mut dz = ae.decoder.backward(&Tensor::from_vec(y.c, y.n, y.dims, dy));
    let scale = 2.0 * cfg.latent_penalty / z.data.len() as f32;
    let mut reg = 0.0;
    for (g, &v) in dz.data.iter_mut().zip(&z.data) {
        *g += scale * v;
        reg += (v as f64) * (v as f64);
    }
    ae.encoder.backward(&dz);
    Ok(rec + cfg.latent_penalty as f64 * reg / z.data.len() as f64)
}

pub fn new_autoencoder(spec: &AutoencoderSpec, seed: u64) -> Result<Autoencoder> {
    Autoencoder::new(spec, &mut rng_for(seed, 0x0ae))
}

pub fn train_autoencoder(
    trainer: &mut Trainer<Autoencoder>,
    volumes: &[Volume],
    cfg: &AeTrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<()> {
    check_dataset(volumes)?;
    trainer.run(
        &cfg.train,
        seed,
        |ae, rng| ae_step(ae, volumes, cfg, rng),
        log,
    )
}

pub fn ae_checkpoint(trainer: &mut Trainer<Autoencoder>) -> Checkpoint {
    let spec = trainer.model.spec.clone();
    trainer.checkpoint(AE_KIND, json!({ "spec": spec }), json!({}))
}

fn config_field<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_value(ck.config[key].clone())
        .map_err(|e| Error::Checkpoint(format!("{} checkpoint config `{key}`: {e}", ck.kind)))
}

fn meta_field<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_value(ck.meta[key].clone())
        .map_err(|e| Error::Checkpoint(format!("{} checkpoint meta `{key}`: {e}", ck.kind)))
}

pub fn load_autoencoder(ck: &Checkpoint) -> Result<Autoencoder> {
    ck.expect_kind(AE_KIND)?;
    let spec: AutoencoderSpec = config_field(ck, "spec")?;
    let mut ae = new_autoencoder(&spec, 0)?;
    ck.load_module("", &mut ae)?;
    Ok(ae)
}

pub fn resume_autoencoder(ck: &Checkpoint, cfg: &AeTrainConfig) -> Result<Trainer<Autoencoder>> {
    ck.expect_kind(AE_KIND)?;
    let spec: AutoencoderSpec = config_field(ck, "spec")?;
    Trainer::resume(AE_KIND, new_autoencoder(&spec, 0)?, &cfg.train, ck)
}

/// Per-channel affine normalization of latents to zero mean, unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn fit(latents: &[LatentCode]) -> Result<Self> {
        ensure_arg!(!latents.is_empty(), "no latents to fit statistics on");
        let s = voxel_count(latents[0].dims);
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for c in 0..LATENT_CHANNELS {
            let vals = latents.iter().flat_map(|z| &z.data[c * s..(c + 1) * s]);
            let n = (s * latents.len()) as f64;
            let m = vals.clone().map(|&v| v as f64).sum::<f64>() / n;
            let var = vals.map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            mean.push(m as f32);
            std.push(var.sqrt().max(1e-6) as f32);
        }
        Ok(LatentStats { mean, std })
    }

    pub fn normalize(&self, z: &LatentCode) -> Vec<f32> {
        let s = voxel_count(z.dims);
        z.data
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i / s]) / self.std[i / s])
            .collect()
    }

    pub fn denormalize(&self, dims: Shape3, data: &[f32]) -> Result<LatentCode> {
        let s = voxel_count(dims);
        LatentCode::new(
            dims,
            data.iter()
                .enumerate()
                .map(|(i, &v)| v * self.std[i / s] + self.mean[i / s])
                .collect(),
        )
    }
}

/// Noised batch for velocity training: (input, target, steps).
fn velocity_batch(
    data: &[Vec<f32>],
    dims: Shape3,
    s: &DiffusionSchedule,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    let mut steps = Vec::with_capacity(batch);
    for _ in 0..batch {
        let x0 = &data[rng.gen_range(0..data.len())];
        let t = s.sample_step(rng);
        let eps = standard_normal_vec(rng, x0.len());
        inputs.push(forward_diffuse(x0, t, &eps, s)?);
        targets.push(velocity_target(x0, &eps, t, s)?);
        steps.push(t as f32);
    }
    let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let x = Tensor::stack(LATENT_CHANNELS, dims, &refs);
    let refs: Vec<&[f32]> = targets.iter().map(Vec::as_slice).collect();
    let target = Tensor::stack(LATENT_CHANNELS, dims, &refs).data;
    Ok((x, target, steps))
}

fn check_latents(data: &[Vec<f32>], dims: Shape3) -> Result<()> {
    ensure_arg!(!data.is_empty(), "latent training set is empty");
    let want = LATENT_CHANNELS * voxel_count(dims);
    if let Some(bad) = data.iter().find(|d| d.len() != want) {
        return Err(Error::ShapeMismatch(format!(
            "latent has {} values, expected {want} for {dims:?}",
            bad.len()
        )));
    }
    Ok(())
}

/// One velocity-prediction batch over normalized latents.
pub fn ldm_step(
    unet: &mut UNet,
    data: &[Vec<f32>],
    dims: Shape3,
    s: &DiffusionSchedule,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (x, target, steps) = velocity_batch(data, dims, s, batch, rng)?;
    unet.check_input(&x, &steps)?;
    let y = unet.forward(&x, &steps, true);
    let (loss, dy) = mse_loss(&y.data, &target);
    unet.backward(&Tensor::from_vec(y.c, y.n, y.dims, dy));
    Ok(loss)
}

/// Velocity MSE on `count` fixed draws from stream `seed`; deterministic.
pub fn ldm_validation_loss(
    unet: &mut UNet,
    data: &[Vec<f32>],
    dims: Shape3,
    s: &DiffusionSchedule,
    count: usize,
    seed: u64,
) -> Result<f64> {
    check_latents(data, dims)?;
    let mut rng = rng_for(seed, 0x7a1);
    let mut total = 0.0;
    for _ in 0..count {
        let (x, target, steps) = velocity_batch(data, dims, s, 1, &mut rng)?;
        let y = unet.forward(&x, &steps, false);
        total += mse_loss(&y.data, &target).0;
    }
    Ok(total / count.max(1) as f64)
}

pub fn new_latent_unet(spec: &UNetSpec, seed: u64) -> Result<UNet> {
    ensure_arg!(
        spec.in_channels == LATENT_CHANNELS && spec.out_channels == LATENT_CHANNELS,
        "latent denoiser must map {LATENT_CHANNELS} channels to {LATENT_CHANNELS}"
    );
    UNet::new(spec, &mut rng_for(seed, 0x1d3))
}

pub fn train_latent_ddpm(
    trainer: &mut Trainer<UNet>,
    data: &[Vec<f32>],
    dims: Shape3,
    s: &DiffusionSchedule,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<()> {
    check_latents(data, dims)?;
    let batch = cfg.batch_size;
    trainer.run(
        cfg,
        seed,
        |unet, rng| ldm_step(unet, data, dims, s, batch, rng),
        log,
    )
}

/// Trained latent denoiser plus everything needed to sample from it.
pub struct LatentDiffusion {
    pub unet: UNet,
    pub schedule: DiffusionSchedule,
    pub stats: LatentStats,
    pub latent_dims: Shape3,
}

pub fn ldm_checkpoint(
    trainer: &mut Trainer<UNet>,
    schedule: &ScheduleSpec,
    stats: &LatentStats,
    latent_dims: Shape3,
) -> Checkpoint {
    let spec = trainer.model.spec.clone();
    trainer.checkpoint(
        LDM_KIND,
        json!({ "spec": spec, "schedule": schedule, "latent_dims": latent_dims }),
        json!({ "stats": stats }),
    )
}

fn ldm_parts(ck: &Checkpoint) -> Result<(UNetSpec, ScheduleSpec, Shape3)> {
    ck.expect_kind(LDM_KIND)?;
    Ok((
        config_field(ck, "spec")?,
        config_field(ck, "schedule")?,
        config_field(ck, "latent_dims")?,
    ))
}

pub fn load_latent_diffusion(ck: &Checkpoint) -> Result<LatentDiffusion> {
    let (spec, schedule, latent_dims) = ldm_parts(ck)?;
    let mut unet = new_latent_unet(&spec, 0)?;
    ck.load_module("", &mut unet)?;
    Ok(LatentDiffusion {
        unet,
        schedule: schedule.build()?,
        stats: meta_field(ck, "stats")?,
        latent_dims,
    })
}

pub fn resume_latent_ddpm(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Trainer<UNet>> {
    let (spec, _, _) = ldm_parts(ck)?;
    Trainer::resume(LDM_KIND, new_latent_unet(&spec, 0)?, cfg, ck)
}

/// Ancestral sampling from pure noise through all steps, returned in the
/// autoencoder's latent scale.
pub fn sample_latent(ldm: &mut LatentDiffusion, rng: &mut impl Rng) -> Result<LatentCode> {
    let dims = ldm.latent_dims;
    let unet = &mut ldm.unet;
    let x = sample_chain(
        LATENT_CHANNELS * voxel_count(dims),
        &ldm.schedule,
        Prediction::Velocity,
        None,
        rng,
        |x, t| {
            let input = Tensor::from_vec(LATENT_CHANNELS, 1, dims, x.to_vec());
            Ok(unet.forward(&input, &[t as f32], false).data)
        },
    )?;
    ldm.stats.denormalize(dims, &x)
}

/// A fully synthetic coarse volume: `decode(sample_latent(..))`.
pub fn generate(
    ae: &mut Autoencoder,
    ldm: &mut LatentDiffusion,
    rng: &mut impl Rng,
) -> Result<Volume> {
    let z = sample_latent(ldm, rng)?;
    decode(ae, &z)
}

/// Latents of `volumes`, for fitting statistics and training the denoiser.
pub fn encode_all(ae: &mut Autoencoder, volumes: &[Volume]) -> Result<Vec<LatentCode>> {
    volumes.iter().map(|v| encode(ae, v)).collect()
}

pub fn config_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::nn::Activation;
    use crate::phantom::{generate_phantom, PhantomParams};

    fn tiny_ae_spec() -> AutoencoderSpec {
        AutoencoderSpec {
            channels: vec![4, 8, 8],
            res_blocks: vec![0, 0, 1],
            activation: Activation::Silu,
        }
    }

    fn tiny_unet_spec() -> UNetSpec {
        UNetSpec {
            in_channels: 4,
            out_channels: 4,
            channels: vec![8, 16],
            res_blocks: 1,
            attention: vec![false, true],
            mid_attention: false,
            temb_dim: 16,
            activation: Activation::Silu,
        }
    }

    fn phantoms(n: usize, edge: usize) -> Vec<Volume> {
        (0..n as u64)
            .map(|s| {
                generate_phantom(s, [edge; 3], &PhantomParams::default())
                    .unwrap()
                    .volume
            })
            .collect()
    }

    #[test]
    fn shape_contract() {
        let mut ae = new_autoencoder(&tiny_ae_spec(), 1).unwrap();
        let x = Volume::filled([48, 48, 48], 0.2);
        let z = encode(&mut ae, &x).unwrap();
        assert_eq!(z.shape(), [4, 12, 12, 12]);
        let y = decode(&mut ae, &z).unwrap();
        assert_eq!(y.shape(), [48, 48, 48]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let err = encode(&mut ae, &Volume::zeros([50, 48, 48])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn autoencoder_training_beats_untrained_baseline() {
        let vols = phantoms(4, 16);
        let test = phantoms(6, 16).split_off(4);
        let mut ae = new_autoencoder(&tiny_ae_spec(), 2).unwrap();
        let before = reconstruction_mse(&mut ae, &test).unwrap();
        let cfg = AeTrainConfig {
            train: TrainConfig {
                epochs: 20,
                steps_per_epoch: 10,
                batch_size: 2,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            crop: 0,
            latent_penalty: 1e-4,
        };
        let mut tr = Trainer::new(AE_KIND, ae, &cfg.train);
        train_autoencoder(&mut tr, &vols, &cfg, 5, &mut |_| {}).unwrap();
        let after = reconstruction_mse(&mut tr.model, &test).unwrap();
        assert!(after * 10.0 < before, "mse {before} -> {after}");
    }

    #[test]
    fn autoencoder_checkpoint_round_trip() {
        let ae = new_autoencoder(&tiny_ae_spec(), 3).unwrap();
        let mut tr = Trainer::new(AE_KIND, ae, &TrainConfig::default());
        let ck = ae_checkpoint(&mut tr);
        let mut back = load_autoencoder(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        let x = Volume::filled([8, 8, 8], -0.3);
        assert_eq!(
            reconstruct(&mut tr.model, &x).unwrap(),
            reconstruct(&mut back, &x).unwrap()
        );
        assert!(load_latent_diffusion(&ck).is_err());
    }

    #[test]
    fn latent_stats_normalize_round_trip() {
        let mut rng = rng_for(4, 0);
        let lat: Vec<LatentCode> = (0..3)
            .map(|_| {
                let d = (0..4 * 8)
                    .map(|i| (i / 8) as f32 * 3.0 + rng.gen_range(-1.0..1.0))
                    .collect();
                LatentCode::new([2, 2, 2], d).unwrap()
            })
            .collect();
        let st = LatentStats::fit(&lat).unwrap();
        let n = st.normalize(&lat[1]);
        let back = st.denormalize([2, 2, 2], &n).unwrap();
        for (a, b) in back.data().iter().zip(lat[1].data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((st.mean[3] - 9.0).abs() < 0.5);
    }

    fn schedule() -> (ScheduleSpec, DiffusionSchedule) {
        let spec = ScheduleSpec {
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
            kind: ScheduleKind::Linear,
        };
        let s = spec.build().unwrap();
        (spec, s)
    }

    #[test]
    fn ldm_single_sample_overfit() {
        // A larger first beta keeps the noise-to-velocity gain at t = 1 moderate.
        let s = make_schedule(20, 0.02, 0.3, ScheduleKind::Linear).unwrap();
        let mut rng = rng_for(6, 0);
        let data = vec![(0..4 * 8)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect::<Vec<_>>()];
        let spec = UNetSpec {
            channels: vec![16, 32],
            attention: vec![false, false],
            ..tiny_unet_spec()
        };
        let unet = new_latent_unet(&spec, 6).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            steps_per_epoch: 25,
            batch_size: 8,
            lr: 3e-3,
            final_lr_frac: 0.05,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(LDM_KIND, unet, &cfg);
        let before = ldm_validation_loss(&mut tr.model, &data, [2, 2, 2], &s, 64, 1).unwrap();
        train_latent_ddpm(&mut tr, &data, [2, 2, 2], &s, &cfg, 6, &mut |_| {}).unwrap();
        let after = ldm_validation_loss(&mut tr.model, &data, [2, 2, 2], &s, 64, 1).unwrap();
        assert!(after < 1e-2, "loss {before} -> {after}");
    }

    #[test]
    fn sampling_is_deterministic_and_reload_exact() {
        let (sspec, s) = schedule();
        let unet = new_latent_unet(&tiny_unet_spec(), 7).unwrap();
        let mut tr = Trainer::new(LDM_KIND, unet, &TrainConfig::default());
        let stats = LatentStats {
            mean: vec![0.1; 4],
            std: vec![2.0; 4],
        };
        let ck =
            Checkpoint::from_bytes(&ldm_checkpoint(&mut tr, &sspec, &stats, [2, 2, 2]).to_bytes())
                .unwrap();
        let mut ldm = load_latent_diffusion(&ck).unwrap();
        let data = vec![vec![0.5f32; 32]];
        let a = ldm_validation_loss(&mut tr.model, &data, [2, 2, 2], &s, 8, 2).unwrap();
        let b = ldm_validation_loss(&mut ldm.unet, &data, [2, 2, 2], &s, 8, 2).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let mut ae = new_autoencoder(&tiny_ae_spec(), 7).unwrap();
        let v1 = generate(&mut ae, &mut ldm, &mut rng_for(9, 1)).unwrap();
        let v2 = generate(&mut ae, &mut ldm, &mut rng_for(9, 1)).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.shape(), [8, 8, 8]);
        assert!(v1.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_or_inconsistent_data_is_rejected() {
        let (_, s) = schedule();
        let unet = new_latent_unet(&tiny_unet_spec(), 8).unwrap();
        let cfg = TrainConfig::default();
        let mut tr = Trainer::new(LDM_KIND, unet, &cfg);
        assert!(train_latent_ddpm(&mut tr, &[], [2, 2, 2], &s, &cfg, 0, &mut |_| {}).is_err());
        let bad = vec![vec![0.0; 32], vec![0.0; 31]];
        assert!(train_latent_ddpm(&mut tr, &bad, [2, 2, 2], &s, &cfg, 0, &mut |_| {}).is_err());
    }
}
