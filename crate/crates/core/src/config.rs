//! Experiment configuration: one TOML document covering data, the three
//! models, their schedules and training, and the metric protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ScheduleKind, ScheduleSpec};
use crate::error::{Error, Result};
use crate::generator::AeTrainConfig;
use crate::metrics::MetricProtocol;
use crate::nn::{Activation, AutoencoderSpec, UNetSpec, LATENT_CHANNELS};
use crate::phantom::PhantomParams;
use crate::refiner::{PatchParams, REFINER_IN_CHANNELS};
use crate::train::TrainConfig;
use crate::volume::Shape3;

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with `__`, e.g. `PATCHREFINE_REFINER__TRAIN__EPOCHS=5`.
pub const ENV_PREFIX: &str = "PATCHREFINE_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub shape: Shape3,
    pub train_frac: f64,
    pub noise_sigma: f64,
    pub texture_amp: f64,
    pub spacing: [f32; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PhantomParams::default();
        DataConfig {
            n: 100,
            shape: [48; 3],
            train_frac: 0.8,
            noise_sigma: p.noise_sigma,
            texture_amp: p.texture_amp,
            spacing: p.spacing,
        }
    }
}

impl DataConfig {
    pub fn phantom_params(&self) -> PhantomParams {
        PhantomParams {
            noise_sigma: self.noise_sigma,
            texture_amp: self.texture_amp,
            spacing: self.spacing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeSection {
    pub spec: AutoencoderSpec,
    #[serde(default)]
    pub train: AeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdmSection {
    pub spec: UNetSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerSection {
    pub spec: UNetSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub patch: PatchParams,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Synthetic volumes produced by `generate` when no count is given.
    pub n: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { n: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    pub ae: AeSection,
    pub ldm: LdmSection,
    pub refiner: RefinerSection,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub metrics: MetricProtocol,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

fn latent_unet(channels: Vec<usize>, temb_dim: usize) -> UNetSpec {
    let levels = channels.len();
    UNetSpec {
        in_channels: LATENT_CHANNELS,
        out_channels: LATENT_CHANNELS,
        attention: (0..levels).map(|i| i + 1 == levels).collect(),
        channels,
        res_blocks: 1,
        mid_attention: true,
        temb_dim,
        activation: Activation::Silu,
    }
}

fn refiner_unet(channels: Vec<usize>, temb_dim: usize) -> UNetSpec {
    UNetSpec {
        in_channels: REFINER_IN_CHANNELS,
        out_channels: 1,
        attention: vec![false; channels.len()],
        channels,
        res_blocks: 1,
        mid_attention: false,
        temb_dim,
        activation: Activation::Silu,
    }
}

impl ExperimentConfig {
    /// 48^3 phantoms with the larger widths; sized for a GPU-class budget.
    pub fn desk() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            ae: AeSection {
                spec: AutoencoderSpec {
                    channels: vec![32, 64, 96],
                    res_blocks: vec![1, 1, 1],
                    activation: Activation::Silu,
                },
                train: AeTrainConfig {
                    train: TrainConfig {
                        epochs: 100,
                        steps_per_epoch: 50,
                        batch_size: 4,
                        lr: 1e-3,
                        weight_decay: 1e-4,
                        grad_clip: 1.0,
                        final_lr_frac: 0.1,
                    },
                    crop: 24,
                    latent_penalty: 1e-4,
                },
            },
            ldm: LdmSection {
                spec: latent_unet(vec![32, 64, 96], 64),
                schedule: ScheduleSpec {
                    steps: 200,
                    beta_start: 0.0075,
                    beta_end: 0.1025,
                    kind: ScheduleKind::Linear,
                },
                train: TrainConfig {
                    epochs: 150,
                    steps_per_epoch: 50,
                    batch_size: 8,
                    lr: 5e-4,
                    weight_decay: 1e-4,
                    grad_clip: 1.0,
                    final_lr_frac: 0.1,
                },
            },
            refiner: RefinerSection {
                spec: refiner_unet(vec![32, 64, 96], 64),
                schedule: ScheduleSpec {
                    steps: 100,
                    beta_start: 0.0015,
                    beta_end: 0.2,
                    kind: ScheduleKind::ScaledLinear,
                },
                patch: PatchParams {
                    patch_size: 24,
                    stride: 12,
                    ..PatchParams::default()
                },
                train: TrainConfig {
                    epochs: 150,
                    steps_per_epoch: 50,
                    batch_size: 8,
                    lr: 5e-4,
                    weight_decay: 1e-4,
                    grad_clip: 1.0,
                    final_lr_frac: 0.1,
                },
            },
            generate: GenerateConfig { n: 20 },
            metrics: MetricProtocol {
                sharpness_patch: 32,
                lpips_patch: 32,
                feature_patch: 32,
                ..MetricProtocol::default()
            },
        }
    }

    /// Reduced 32^3 profile that runs end to end on a single CPU core.
    pub fn cpu() -> Self {
        let mut c = ExperimentConfig::desk();
        c.data.shape = [32; 3];
        c.ae.spec = AutoencoderSpec {
            channels: vec![8, 16, 32],
            res_blocks: vec![0, 1, 1],
            activation: Activation::Silu,
        };
        c.ae.train.crop = 16;
        c.ae.train.train = TrainConfig {
            epochs: 30,
            steps_per_epoch: 25,
            batch_size: 4,
            lr: 2e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            final_lr_frac: 0.1,
        };
        c.ldm.spec = latent_unet(vec![16, 32, 64], 32);
        c.ldm.train = TrainConfig {
            epochs: 40,
            steps_per_epoch: 25,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            final_lr_frac: 0.1,
        };
        c.refiner.spec = refiner_unet(vec![8, 16, 32], 32);
        c.refiner.schedule = ScheduleSpec {
            steps: 16,
            beta_start: 0.0015,
            beta_end: 0.8,
            kind: ScheduleKind::ScaledLinear,
        };
        c.refiner.patch = PatchParams {
            patch_size: 16,
            stride: 8,
            ..PatchParams::default()
        };
        c.refiner.train = TrainConfig {
            epochs: 60,
            steps_per_epoch: 25,
            batch_size: 4,
            lr: 2e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            final_lr_frac: 0.1,
        };
        c.generate.n = 10;
        c.metrics.sharpness_patch = 16;
        c.metrics.lpips_patch = 16;
        c.metrics.feature_patch = 16;
        c.metrics.sharpness_patches = 400;
        c.metrics.lpips_patches = 400;
        c
    }

    /// Seconds-scale plumbing check on 16^3 volumes; results are meaningless.
    pub fn smoke() -> Self {
        let mut c = ExperimentConfig::cpu();
        c.data.n = 6;
        c.data.shape = [16; 3];
        c.data.train_frac = 0.5;
        c.ae.spec.channels = vec![4, 8, 8];
        c.ae.spec.res_blocks = vec![0, 0, 1];
        c.ae.train.crop = 8;
        c.ldm.spec = latent_unet(vec![8, 16], 16);
        c.ldm.schedule.steps = 10;
        c.refiner.spec = refiner_unet(vec![4, 8], 16);
        c.refiner.schedule.steps = 4;
        c.refiner.patch.patch_size = 8;
        c.refiner.patch.stride = 4;
        for t in [
            &mut c.ae.train.train,
            &mut c.ldm.train,
            &mut c.refiner.train,
        ] {
            t.epochs = 2;
            t.steps_per_epoch = 2;
            t.batch_size = 2;
        }
        c.generate.n = 2;
        c.metrics.sharpness_patch = 8;
        c.metrics.lpips_patch = 8;
        c.metrics.feature_patch = 8;
        c.metrics.sharpness_patches = 20;
        c.metrics.lpips_patches = 20;
        c.metrics.feature_patches_per_volume = 10;
        c.metrics.k_values = vec![2, 5];
        c.metrics.backbone_widths = vec![4, 8];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ExperimentConfig::desk()),
            "cpu" => Ok(ExperimentConfig::cpu()),
            "smoke" => Ok(ExperimentConfig::smoke()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (available: desk, cpu, smoke)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `PATCHREFINE_*` overrides from `vars`. Values are parsed as
    /// TOML (numbers, booleans, arrays) and fall back to plain strings.
    pub fn with_overrides<I, K, V>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<&str> = key.split("__").collect();
            set_path(&mut tree, &path, parse_value(&raw)).map_err(|part| {
                Error::Config(format!(
                    "override {ENV_PREFIX}{}: unknown key `{part}`",
                    key.to_ascii_uppercase()
                ))
            })?;
        }
        let c: ExperimentConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn with_env_overrides(&self) -> Result<Self> {
        self.with_overrides(std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |e: Error| Error::Config(e.to_string());
        self.ae.spec.validate().map_err(bad)?;
        self.ldm.spec.validate().map_err(bad)?;
        self.refiner.spec.validate().map_err(bad)?;
        self.ldm.schedule.build().map_err(bad)?;
        self.refiner.schedule.build().map_err(bad)?;
        for t in [&self.ae.train.train, &self.ldm.train, &self.refiner.train] {
            t.validate().map_err(bad)?;
        }
        if self.ldm.spec.in_channels != LATENT_CHANNELS
            || self.ldm.spec.out_channels != LATENT_CHANNELS
        {
            return Err(Error::Config(format!(
                "ldm.spec must map {LATENT_CHANNELS} channels to {LATENT_CHANNELS}"
            )));
        }
        if self.refiner.spec.in_channels != REFINER_IN_CHANNELS
            || self.refiner.spec.out_channels != 1
        {
            return Err(Error::Config(format!(
                "refiner.spec must map {REFINER_IN_CHANNELS} channels to 1"
            )));
        }
        let latent = self.data.shape.map(|l| l / 4);
        if self.data.shape.iter().any(|l| l % 4 != 0)
            || latent
                .iter()
                .any(|l| l % self.ldm.spec.size_multiple() != 0)
        {
            return Err(Error::Config(format!(
                "data.shape {:?} must be divisible by 4 and give latents divisible by {}",
                self.data.shape,
                self.ldm.spec.size_multiple()
            )));
        }
        let p = &self.refiner.patch;
        if !p
            .patch_size
            .is_multiple_of(self.refiner.spec.size_multiple())
            || p.stride == 0
            || p.stride > p.patch_size
        {
            return Err(Error::Config(format!(
                "refiner.patch: size {} must be divisible by {} and 0 < stride <= size",
                p.patch_size,
                self.refiner.spec.size_multiple()
            )));
        }
        if self.data.shape.iter().any(|&l| l < p.patch_size) {
            return Err(Error::Config("refiner patch exceeds data.shape".into()));
        }
        if !(0.0..=1.0).contains(&p.full_prob) {
            return Err(Error::Config(
                "refiner.patch.full_prob must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Replaces an existing leaf; returns the first missing path component on failure.
fn set_path(
    node: &mut toml::Value,
    path: &[&str],
    value: toml::Value,
) -> std::result::Result<(), String> {
    let (head, rest) = path.split_first().ok_or_else(String::new)?;
    let child = node
        .as_table_mut()
        .and_then(|t| t.get_mut(*head))
        .ok_or_else(|| head.to_string())?;
    if rest.is_empty() {
        *child = value;
        Ok(())
    } else {
        set_path(child, rest, value)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["desk", "cpu", "smoke"] {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        assert!(ExperimentConfig::preset("gpu").is_err());
    }

    #[test]
    fn shipped_config_files_match_presets() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments");
        for name in ["desk", "cpu"] {
            let file = ExperimentConfig::load(&root.join(format!("{name}.toml"))).unwrap();
            assert_eq!(file, ExperimentConfig::preset(name).unwrap(), "{name}.toml");
        }
    }

    #[test]
    fn env_overrides_apply_nested_keys() {
        let c = ExperimentConfig::cpu()
            .with_overrides([
                ("PATCHREFINE_SEED", "7"),
                ("PATCHREFINE_REFINER__TRAIN__EPOCHS", "3"),
                ("PATCHREFINE_DATA__SHAPE", "[16, 16, 16]"),
                ("PATCHREFINE_METRICS__BACKBONE", "randconv"),
                ("OTHER_VAR", "x"),
            ])
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.refiner.train.epochs, 3);
        assert_eq!(c.data.shape, [16, 16, 16]);
        let err = ExperimentConfig::cpu()
            .with_overrides([("PATCHREFINE_REFINER__NOPE", "1")])
            .unwrap_err();
        assert!(err.to_string().contains("NOPE"));
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let mut c = ExperimentConfig::cpu();
        c.data.shape = [30, 32, 32];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::cpu();
        c.refiner.patch.stride = 0;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n[bogus]\n").is_err());
    }
}
