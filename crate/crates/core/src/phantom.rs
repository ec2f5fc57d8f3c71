//! Deterministic synthetic brain phantoms: nested deformed ellipsoids with
//! labelled tissues, band-limited texture, sharp boundaries, and Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::filter::gaussian_smooth_f64;
use crate::util::{rng_for, write_atomic};
use crate::volume::{save_labels, save_volume, voxel_count, RegionMask, Shape3, Volume};

/// Label ids stored in `.labels.u8raw` files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Skull = 1,
    WhiteMatter = 2,
    GrayMatter = 3,
    Ventricle = 4,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::Background,
        Label::Skull,
        Label::WhiteMatter,
        Label::GrayMatter,
        Label::Ventricle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Label::Background => "background",
            Label::Skull => "skull",
            Label::WhiteMatter => "white-matter",
            Label::GrayMatter => "gray-matter",
            Label::Ventricle => "ventricle",
        }
    }

    /// Mean intensity in normalized units before texture and noise.
    fn base_intensity(self) -> f64 {
        match self {
            Label::Background => -0.9,
            Label::Skull => -0.1,
            Label::WhiteMatter => 0.55,
            Label::GrayMatter => 0.15,
            Label::Ventricle => -0.65,
        }
    }
}

/// Smoothing width of the white noise that becomes the tissue texture.
pub const TEXTURE_SMOOTH_SIGMA: f64 = 3.0;

/// Generation parameters shared by every phantom of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub noise_sigma: f64,
    pub texture_amp: f64,
    pub spacing: [f32; 3],
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            noise_sigma: 0.05,
            texture_amp: 0.1,
            spacing: [0.7; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: Vec<u8>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Phantom {
    pub fn region(&self, label: Label) -> RegionMask {
        label_region(&self.labels, self.volume.shape(), &[label], label.name())
    }

    pub fn whole_brain(&self) -> RegionMask {
        whole_brain_region(&self.labels, self.volume.shape())
    }

    pub fn cerebellum(&self) -> RegionMask {
        cerebellum_region(&self.labels, self.volume.shape())
    }
}

/// Voxels carrying any of `labels`.
pub fn label_region(labels: &[u8], shape: Shape3, wanted: &[Label], name: &str) -> RegionMask {
    let data = labels
        .iter()
        .map(|&l| wanted.iter().any(|w| *w as u8 == l))
        .collect();
    RegionMask::new(shape, data, name).expect("label map matches shape")
}

pub fn whole_brain_region(labels: &[u8], shape: Shape3) -> RegionMask {
    label_region(
        labels,
        shape,
        &[Label::WhiteMatter, Label::GrayMatter, Label::Ventricle],
        "whole-brain",
    )
}

/// Brain tissue in the low-index (inferior, posterior) corner along axes 0
/// and 1 stands in for the cerebellum.
pub fn cerebellum_region(labels: &[u8], shape: Shape3) -> RegionMask {
    let [d, h, w] = shape;
    let mut data = vec![false; voxel_count(shape)];
    for z in 0..d {
        let uz = unit_coord(z, d);
        for y in 0..h {
            let uy = unit_coord(y, h);
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let tissue =
                    labels[i] == Label::WhiteMatter as u8 || labels[i] == Label::GrayMatter as u8;
                data[i] = tissue && uz < -0.25 && uy < -0.1;
            }
        }
    }
    RegionMask::new(shape, data, "cerebellum").expect("shape")
}

fn unit_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Smooth radial deformation: ellipsoid "radius" scaling as a function of direction.
#[derive(Clone, Debug)]
struct Surface {
    radii: [f64; 3],
    linear: [f64; 3],
    quad: [f64; 6],
    fold_amp: f64,
    fold_freq: f64,
    fold_phase: [f64; 2],
}

impl Surface {
    fn random(rng: &mut impl Rng, radii: [f64; 3], deform: f64, fold_amp: f64) -> Self {
        let mut u = |s: f64| rng.gen_range(-s..=s);
        Surface {
            radii,
            linear: [u(deform), u(deform), u(deform)],
            quad: [
                u(deform),
                u(deform),
                u(deform),
                u(deform),
                u(deform),
                u(deform),
            ],
            fold_amp,
            fold_freq: 5.0 + u(1.0).round(),
            fold_phase: [u(std::f64::consts::PI), u(std::f64::consts::PI)],
        }
    }

    /// < 1 inside, > 1 outside.
    fn level(&self, p: [f64; 3]) -> f64 {
        let q = [
            p[0] / self.radii[0],
            p[1] / self.radii[1],
            p[2] / self.radii[2],
        ];
        let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if r < 1e-12 {
            return 0.0;
        }
        let n = [q[0] / r, q[1] / r, q[2] / r];
        let mut delta = self.linear[0] * n[0] + self.linear[1] * n[1] + self.linear[2] * n[2];
        delta += self.quad[0] * n[0] * n[0]
            + self.quad[1] * n[1] * n[1]
            + self.quad[2] * n[2] * n[2]
            + self.quad[3] * n[0] * n[1]
            + self.quad[4] * n[0] * n[2]
            + self.quad[5] * n[1] * n[2];
        if self.fold_amp > 0.0 {
            let azimuth = n[1].atan2(n[2]);
            let polar = n[0].clamp(-1.0, 1.0).acos();
            delta += self.fold_amp
                * (self.fold_freq * azimuth + self.fold_phase[0]).sin()
                * (self.fold_freq * polar + self.fold_phase[1]).cos();
        }
        r / (1.0 + delta)
    }
}

/// Builds one phantom. Equal arguments always give bit-identical output.
pub fn generate_phantom(seed: u64, shape: Shape3, params: &PhantomParams) -> Result<Phantom> {
    ensure_arg!(
        shape.iter().all(|&n| n >= 16),
        "phantom shape must be at least 16 per axis, got {shape:?}"
    );
    ensure_arg!(
        params.noise_sigma >= 0.0,
        "noise_sigma must be non-negative"
    );
    ensure_arg!(
        params.texture_amp >= 0.0,
        "texture_amp must be non-negative"
    );
    let [d, h, w] = shape;
    let n = voxel_count(shape);

    let mut geo = rng_for(seed, 1);
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, s: f64| 1.0 + rng.gen_range(-s..=s);
    let base = [
        0.76 * jitter(&mut geo, 0.04),
        0.84 * jitter(&mut geo, 0.04),
        0.70 * jitter(&mut geo, 0.04),
    ];
    let scaled = |k: f64| [base[0] * k, base[1] * k, base[2] * k];
    let skull_outer = Surface::random(&mut geo, scaled(1.10), 0.02, 0.0);
    let skull_inner = Surface::random(&mut geo, scaled(1.03), 0.02, 0.0);
    let brain = Surface::random(&mut geo, base, 0.05, 0.03);
    let wm = Surface::random(&mut geo, scaled(0.76), 0.06, 0.07);
    let vent_center = [geo.gen_range(-0.05..0.05), geo.gen_range(-0.08..0.02), 0.0];
    let vent_radii = [
        0.22 * jitter(&mut geo, 0.1),
        0.32 * jitter(&mut geo, 0.1),
        0.10 * jitter(&mut geo, 0.1),
    ];
    let vent_sep = 0.13 * jitter(&mut geo, 0.1);
    let mut offsets = [0f64; 5];
    for o in offsets.iter_mut() {
        *o = geo.gen_range(-0.03..0.03);
    }

    let mut labels = vec![0u8; n];
    for z in 0..d {
        let uz = unit_coord(z, d);
        for y in 0..h {
            let uy = unit_coord(y, h);
            for x in 0..w {
                let ux = unit_coord(x, w);
                let p = [uz, uy, ux];
                let mut label = Label::Background;
                if skull_outer.level(p) < 1.0 && skull_inner.level(p) >= 1.0 {
                    label = Label::Skull;
                }
                if brain.level(p) < 1.0 {
                    label = Label::GrayMatter;
                    if wm.level(p) < 1.0 {
                        label = Label::WhiteMatter;
                    }
                    for side in [-1.0, 1.0] {
                        let q = [
                            (uz - vent_center[0]) / vent_radii[0],
                            (uy - vent_center[1]) / vent_radii[1],
                            (ux - vent_center[2] - side * vent_sep) / vent_radii[2],
                        ];
                        if q[0] * q[0] + q[1] * q[1] + q[2] * q[2] < 1.0 {
                            label = Label::Ventricle;
                        }
                    }
                }
                labels[(z * h + y) * w + x] = label as u8;
            }
        }
    }

    let mut texture = vec![0f64; n];
    if params.texture_amp > 0.0 {
        let mut trng = rng_for(seed, 2);
        let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut trng)).collect();
        texture = gaussian_smooth_f64(&white, shape, TEXTURE_SMOOTH_SIGMA);
        let mean = texture.iter().sum::<f64>() / n as f64;
        let std = (texture.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        texture
            .iter_mut()
            .for_each(|t| *t = (*t - mean) / std.max(1e-12) * params.texture_amp);
    }

    let mut nrng = rng_for(seed, 3);
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let label = Label::ALL[labels[i] as usize];
        let mut v = label.base_intensity() + offsets[labels[i] as usize];
        if matches!(label, Label::WhiteMatter | Label::GrayMatter) {
            v += texture[i];
        }
        let noise: f64 = StandardNormal.sample(&mut nrng);
        v += params.noise_sigma * noise;
        data.push(v.clamp(-1.0, 1.0) as f32);
    }
    let volume = Volume::new(shape, data, params.spacing)?.with_intensity_range(Some((-1.0, 1.0)));
    Ok(Phantom {
        volume,
        labels,
        noise_sigma: params.noise_sigma,
        seed,
    })
}

/// Train/test assignment of phantom seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub fractions: (f64, f64),
}

impl DatasetSplit {
    /// Seeds in order; the first `floor(n * train_frac)` go to training.
    pub fn by_seed_order(seeds: &[u64], train_frac: f64) -> Result<Self> {
        ensure_arg!(seeds.len() >= 2, "a dataset needs at least 2 phantoms");
        ensure_arg!(
            (0.0..=1.0).contains(&train_frac),
            "train fraction must lie in [0, 1]"
        );
        let n_train = ((seeds.len() as f64 * train_frac) + 1e-9).floor() as usize;
        Ok(DatasetSplit {
            train_ids: seeds[..n_train].to_vec(),
            test_ids: seeds[n_train..].to_vec(),
            fractions: (train_frac, 1.0 - train_frac),
        })
    }
}

/// File stem of a phantom with the given seed.
pub fn phantom_stem(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("phantom_{seed:05}"))
}

/// Writes `n` phantoms (seeds `base_seed..base_seed + n`) into `out/train` and
/// `out/test`, plus `out/split.json`.
pub fn make_dataset(
    n: usize,
    shape: Shape3,
    params: &PhantomParams,
    train_frac: f64,
    base_seed: u64,
    out: &Path,
) -> Result<DatasetSplit> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed + i).collect();
    let split = DatasetSplit::by_seed_order(&seeds, train_frac)?;
    for (sub, ids) in [("train", &split.train_ids), ("test", &split.test_ids)] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for &seed in ids {
            let ph = generate_phantom(seed, shape, params)?;
            let stem = phantom_stem(&dir, seed);
            save_volume(&ph.volume, &stem, Some(seed))?;
            save_labels(&ph.labels, &stem)?;
        }
    }
    let json = serde_json::to_vec_pretty(&split).expect("split serializes");
    write_atomic(&out.join("split.json"), &json)?;
    Ok(split)
}
