//! File-level pipeline commands shared by the CLI and the end-to-end tests.
//!
//! Every artifact lives under one output directory:
//!
//! ```text
//! data/{train,test}/        phantoms, labels, split.json
//! checkpoints/<stage>.ckpt  ae, ldm, refiner
//! logs/<stage>.csv          one row per epoch
//! recon/ synth/             coarse volumes
//! refined_recon/ refined_synth/
//! report.json report.txt
//! ```
//!
//! Commands that write several files mark their directory with `.partial`
//! until they finish.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{ensure_arg, Error, Result};
use crate::generator::{
    ae_checkpoint, ae_step, encode_all, generate, latent_dims, ldm_checkpoint, ldm_step,
    load_autoencoder, load_latent_diffusion, new_autoencoder, new_latent_unet, reconstruct,
    resume_autoencoder, resume_latent_ddpm, LatentStats,
};
use crate::metrics::{evaluate_sets, list_volumes, volume_id, EvalInputs, MetricReport};
use crate::nn::{Autoencoder, Checkpoint, Module, UNet};
use crate::phantom::{make_dataset, DatasetSplit};
use crate::refiner::{
    check_pairs, load_refiner, new_refiner_unet, refine_volume, refiner_checkpoint, refiner_step,
    resume_refiner,
};
use crate::train::{log_line, TrainConfig, Trainer, LOG_HEADER};
use crate::util::{rng_for, stream_tag, write_atomic};
use crate::volume::{load_volume, save_volume, Volume};

pub const PARTIAL_MARKER: &str = ".partial";

/// Training stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ae,
    Ldm,
    Refiner,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ae => "ae",
            Stage::Ldm => "ldm",
            Stage::Refiner => "refiner",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(Stage::Ae),
            "ldm" => Ok(Stage::Ldm),
            "refiner" => Ok(Stage::Refiner),
            other => Err(Error::InvalidArgument(format!(
                "unknown stage `{other}` (expected ae, ldm or refiner)"
            ))),
        }
    }
}

/// Paths of every artifact below an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train(&self) -> PathBuf {
        self.data().join("train")
    }

    pub fn test(&self) -> PathBuf {
        self.data().join("test")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{}.ckpt", stage.name()))
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}.csv", stage.name()))
    }

    pub fn recon(&self) -> PathBuf {
        self.root.join("recon")
    }

    pub fn synth(&self) -> PathBuf {
        self.root.join("synth")
    }

    pub fn refined_recon(&self) -> PathBuf {
        self.root.join("refined_recon")
    }

    pub fn refined_synth(&self) -> PathBuf {
        self.root.join("refined_synth")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn slices(&self) -> PathBuf {
        self.root.join("slices")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs `f` with `dir/.partial` present; the marker is removed only on success.
fn with_partial<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    create_dir(dir)?;
    let marker = dir.join(PARTIAL_MARKER);
    write_atomic(&marker, b"")?;
    let out = f()?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(out)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("json serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// `<stem>.provenance.json`, written beside each generated volume.
pub fn provenance_path(stem: &Path) -> PathBuf {
    let name = stem.file_name().unwrap_or_default().to_string_lossy();
    stem.with_file_name(format!("{name}.provenance.json"))
}

fn load_checkpoint(layout: &Layout, stage: Stage) -> Result<(Checkpoint, String)> {
    let path = layout.checkpoint(stage);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(stage.name().into()));
    }
    Checkpoint::load(&path)
}

fn load_dir(dir: &Path) -> Result<Vec<(String, Volume)>> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    list_volumes(dir)?
        .iter()
        .map(|p| Ok((volume_id(p), load_volume(p)?)))
        .collect()
}

fn load_training_set(layout: &Layout) -> Result<Vec<Volume>> {
    let dir = layout.train();
    if !dir.is_dir() {
        return Err(Error::MissingPrerequisite("make-data".into()));
    }
    let vols: Vec<Volume> = load_dir(&dir)?.into_iter().map(|(_, v)| v).collect();
    ensure_arg!(!vols.is_empty(), "no training volumes in {}", dir.display());
    Ok(vols)
}

fn check_spec<T: serde::Serialize>(what: &str, checkpoint: &T, config: &T) -> Result<()> {
    let (a, b) = (
        serde_json::to_value(checkpoint),
        serde_json::to_value(config),
    );
    if a.ok() != b.ok() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: checkpoint has {}, config has {}",
            serde_json::to_string(checkpoint).unwrap_or_default(),
            serde_json::to_string(config).unwrap_or_default()
        )));
    }
    Ok(())
}

/// Writes the phantom dataset into `layout.data()`.
pub fn cmd_make_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<DatasetSplit> {
    let d = &cfg.data;
    let dir = layout.data();
    with_partial(&dir, || {
        let split = make_dataset(
            d.n,
            d.shape,
            &d.phantom_params(),
            d.train_frac,
            cfg.seed,
            &dir,
        )?;
        write_json(
            &dir.join("provenance.json"),
            &json!({ "seed": cfg.seed, "data": d }),
        )?;
        Ok(split)
    })
}

/// Summary of a finished training command.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub epochs_run: Vec<usize>,
    pub final_loss: Option<f64>,
}

/// Epoch loop that appends a log row and rewrites the checkpoint after each
/// epoch, so an interrupted run can resume from the last finished epoch.
fn fit<M: Module>(
    layout: &Layout,
    stage: Stage,
    trainer: &mut Trainer<M>,
    cfg: &TrainConfig,
    seed: u64,
    mut step: impl FnMut(&mut M, &mut rand_chacha::ChaCha8Rng) -> Result<f64>,
    mut save: impl FnMut(&mut Trainer<M>) -> Checkpoint,
) -> Result<TrainOutcome> {
    let log_path = layout.log(stage);
    create_dir(log_path.parent().expect("log path has a parent"))?;
    let fresh = trainer.epoch == 0 || !log_path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let ck_path = layout.checkpoint(stage);
    create_dir(ck_path.parent().expect("checkpoint path has a parent"))?;
    let mut epochs_run = Vec::new();
    let mut id = None;
    while trainer.epoch < cfg.epochs {
        trainer.run_until(cfg, seed, trainer.epoch + 1, &mut step, &mut |e| {
            log::info!("{} epoch {} loss {:.6}", e.stage, e.epoch, e.loss);
            epochs_run.push(e.clone());
        })?;
        let e = epochs_run.last().expect("one epoch ran");
        writeln!(file, "{}", log_line(e)).map_err(|err| Error::io(&log_path, err))?;
        id = Some(save(trainer).save(&ck_path)?);
    }
    let checkpoint_id = match id {
        Some(id) => id,
        None => save(trainer).save(&ck_path)?,
    };
    Ok(TrainOutcome {
        checkpoint: ck_path,
        checkpoint_id,
        epochs_run: epochs_run.iter().map(|e| e.epoch).collect(),
        final_loss: trainer.losses.last().copied(),
    })
}

/// Trains one stage. With `resume`, training continues from the stage's
/// checkpoint and keeps its epoch numbering.
pub fn cmd_train(
    stage: Stage,
    cfg: &ExperimentConfig,
    layout: &Layout,
    resume: bool,
) -> Result<TrainOutcome> {
    let seed = cfg.seed;
    let existing = || -> Result<Option<Checkpoint>> {
        if resume {
            Ok(Some(load_checkpoint(layout, stage)?.0))
        } else {
            Ok(None)
        }
    };
    match stage {
        Stage::Ae => {
            let resumed = existing()?;
            let vols = load_training_set(layout)?;
            let tc = &cfg.ae.train;
            let mut trainer = match resumed {
                Some(ck) => {
                    let t = resume_autoencoder(&ck, tc)?;
                    check_spec("autoencoder spec", &t.model.spec, &cfg.ae.spec)?;
                    t
                }
                None => Trainer::new(
                    stage.name(),
                    new_autoencoder(&cfg.ae.spec, seed)?,
                    &tc.train,
                ),
            };
            fit(
                layout,
                stage,
                &mut trainer,
                &tc.train,
                seed,
                |ae: &mut Autoencoder, rng| ae_step(ae, &vols, tc, rng),
                ae_checkpoint,
            )
        }
        Stage::Ldm => {
            let (ae_ck, ae_id) = load_checkpoint(layout, Stage::Ae)?;
            let mut ae = load_autoencoder(&ae_ck)?;
            let vols = load_training_set(layout)?;
            let dims = latent_dims(vols[0].shape())?;
            let latents = encode_all(&mut ae, &vols)?;
            let stats = LatentStats::fit(&latents)?;
            let data: Vec<Vec<f32>> = latents.iter().map(|z| stats.normalize(z)).collect();
            let sec = &cfg.ldm;
            let schedule = sec.schedule.build()?;
            let mut trainer = match existing()? {
                Some(ck) => {
                    let t = resume_latent_ddpm(&ck, &sec.train)?;
                    check_spec("latent denoiser spec", &t.model.spec, &sec.spec)?;
                    t
                }
                None => Trainer::new(stage.name(), new_latent_unet(&sec.spec, seed)?, &sec.train),
            };
            let batch = sec.train.batch_size;
            fit(
                layout,
                stage,
                &mut trainer,
                &sec.train,
                seed,
                |unet: &mut UNet, rng| ldm_step(unet, &data, dims, &schedule, batch, rng),
                |t| {
                    let mut ck = ldm_checkpoint(t, &sec.schedule, &stats, dims);
                    ck.meta["ae_id"] = json!(ae_id);
                    ck
                },
            )
        }
        Stage::Refiner => {
            let (ae_ck, ae_id) = load_checkpoint(layout, Stage::Ae)?;
            let mut ae = load_autoencoder(&ae_ck)?;
            let vols = load_training_set(layout)?;
            let pairs = vols
                .into_iter()
                .map(|x| {
                    let x_hat = reconstruct(&mut ae, &x)?;
                    Ok((x, x_hat))
                })
                .collect::<Result<Vec<_>>>()?;
            let sec = &cfg.refiner;
            check_pairs(&pairs, sec.patch.patch_size)?;
            let schedule = sec.schedule.build()?;
            let mut trainer = match existing()? {
                Some(ck) => {
                    let t = resume_refiner(&ck, &sec.train)?;
                    check_spec("refiner spec", &t.model.spec, &sec.spec)?;
                    t
                }
                None => Trainer::new(stage.name(), new_refiner_unet(&sec.spec, seed)?, &sec.train),
            };
            let p = sec.patch.patch_size;
            let multiple = trainer.model.spec.size_multiple();
            ensure_arg!(
                p.is_multiple_of(multiple),
                "patch size {p} is not divisible by {multiple}"
            );
            let batch = sec.train.batch_size;
            fit(
                layout,
                stage,
                &mut trainer,
                &sec.train,
                seed,
                |unet: &mut UNet, rng| {
                    refiner_step(unet, &pairs, &sec.patch, &schedule, batch, rng)
                },
                |t| {
                    let mut ck = refiner_checkpoint(t, &sec.schedule, &sec.patch);
                    ck.meta["ae_id"] = json!(ae_id);
                    ck
                },
            )
        }
    }
}

/// Autoencoder reconstructions of every volume in `input`, saved under the
/// same ids in `output`.
pub fn cmd_reconstruct(layout: &Layout, input: &Path, output: &Path) -> Result<Vec<PathBuf>> {
    let (ck, ae_id) = load_checkpoint(layout, Stage::Ae)?;
    let mut ae = load_autoencoder(&ck)?;
    let items = load_dir(input)?;
    ensure_arg!(!items.is_empty(), "no volumes in {}", input.display());
    with_partial(output, || {
        let mut written = Vec::new();
        for (id, x) in &items {
            let x_hat = reconstruct(&mut ae, x)?;
            let stem = output.join(id);
            written.push(save_volume(&x_hat, &stem, None)?);
            write_json(
                &provenance_path(&stem),
                &json!({ "source": input.join(id), "ae_id": ae_id }),
            )?;
        }
        Ok(written)
    })
}

/// `n` synthetic coarse volumes `synth_0000..`; sample `i` uses its own
/// stream of `seed`, so any prefix of a larger run is reproduced exactly.
pub fn cmd_generate(
    cfg: &ExperimentConfig,
    layout: &Layout,
    n: usize,
    output: &Path,
) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let (ae_ck, ae_id) = load_checkpoint(layout, Stage::Ae)?;
    let (ldm_ck, ldm_id) = load_checkpoint(layout, Stage::Ldm)?;
    let mut ae = load_autoencoder(&ae_ck)?;
    let mut ldm = load_latent_diffusion(&ldm_ck)?;
    let expected = latent_dims(cfg.data.shape)?;
    if expected != ldm.latent_dims {
        return Err(Error::ShapeMismatch(format!(
            "latent grid: checkpoint has {:?}, config data shape {:?} needs {:?}",
            ldm.latent_dims, cfg.data.shape, expected
        )));
    }
    let stream = cfg.seed ^ stream_tag("generate");
    with_partial(output, || {
        let mut written = Vec::new();
        for i in 0..n {
            let mut rng = rng_for(stream, i as u64);
            let v = generate(&mut ae, &mut ldm, &mut rng)?.with_spacing(cfg.data.spacing);
            let stem = output.join(format!("synth_{i:04}"));
            written.push(save_volume(&v, &stem, Some(cfg.seed))?);
            write_json(
                &provenance_path(&stem),
                &json!({ "seed": cfg.seed, "index": i, "ae_id": ae_id, "ldm_id": ldm_id }),
            )?;
        }
        Ok(written)
    })
}

/// Refines every volume in `input`. The volume with id `s` is refined with
/// seed `seed ^ stream_tag(s)`, independent of the other files present.
pub fn cmd_refine(
    cfg: &ExperimentConfig,
    layout: &Layout,
    input: &Path,
    output: &Path,
) -> Result<Vec<PathBuf>> {
    let (ck, refiner_id) = load_checkpoint(layout, Stage::Refiner)?;
    let mut refiner = load_refiner(&ck)?;
    check_spec(
        "refiner patch geometry",
        &refiner.params,
        &cfg.refiner.patch,
    )?;
    let items = load_dir(input)?;
    ensure_arg!(!items.is_empty(), "no volumes in {}", input.display());
    with_partial(output, || {
        let mut written = Vec::new();
        for (id, x_hat) in &items {
            let seed = cfg.seed ^ stream_tag(id);
            let (v, plan) = refine_volume(&mut refiner, x_hat, seed)?;
            let stem = output.join(id);
            written.push(save_volume(&v, &stem, Some(seed))?);
            let g = &plan.grid;
            write_json(
                &provenance_path(&stem),
                &json!({
                    "source": input.join(id),
                    "plan_hash": plan.hash(),
                    "seed": seed,
                    "base_seed": cfg.seed,
                    "checkpoints": { "refiner": refiner_id, "ae": ck.meta["ae_id"] },
                    "grid": {
                        "volume_shape": g.volume_shape(),
                        "patch_size": g.patch_size(),
                        "stride": g.stride(),
                        "dims": g.dims(),
                        "entries": plan.entries.len(),
                    },
                }),
            )?;
            log::info!("refined {id}");
        }
        Ok(written)
    })
}

/// Fills unset sets from the layout when their directories hold volumes.
pub fn default_inputs(layout: &Layout) -> EvalInputs {
    let present = |d: PathBuf| {
        let ok = list_volumes(&d).map(|v| !v.is_empty()).unwrap_or(false);
        ok.then_some(d)
    };
    EvalInputs {
        orig: layout.test(),
        recon: present(layout.recon()),
        refined: present(layout.refined_recon()),
        synth: present(layout.synth()),
        refined_synth: present(layout.refined_synth()),
    }
}

/// Evaluates and writes `report.json` and `report.txt` into `out`.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    inputs: &EvalInputs,
    out: &Path,
) -> Result<MetricReport> {
    let report = evaluate_sets(inputs, &cfg.metrics)?;
    create_dir(out)?;
    let mut json = report.to_json();
    json.push('\n');
    write_atomic(&out.join("report.json"), json.as_bytes())?;
    write_atomic(&out.join("report.txt"), report.summary_table().as_bytes())?;
    Ok(report)
}

/// 8-bit grayscale pixels of one slice, window [-1, 1].
pub fn slice_pixels(v: &Volume, axis: usize, index: usize) -> Result<(u32, u32, Vec<u8>)> {
    ensure_arg!(axis < 3, "axis must be 0, 1 or 2, got {axis}");
    let n = v.shape()[axis];
    ensure_arg!(
        index < n,
        "slice {index} is out of range for axis {axis} of length {n}"
    );
    let (rows, cols, data) = v.slice(axis, index);
    let px = data
        .iter()
        .map(|&x| ((x.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8)
        .collect();
    Ok((cols as u32, rows as u32, px))
}

/// Writes `<out>/<id>_axis<a>_<index>.png`; `index` defaults to the middle slice.
pub fn cmd_export_slices(
    volume: &Path,
    axis: usize,
    index: Option<usize>,
    out: &Path,
) -> Result<PathBuf> {
    let v = load_volume(volume)?;
    ensure_arg!(axis < 3, "axis must be 0, 1 or 2, got {axis}");
    let index = index.unwrap_or(v.shape()[axis] / 2);
    let (w, h, px) = slice_pixels(&v, axis, index)?;
    create_dir(out)?;
    let path = out.join(format!("{}_axis{axis}_{index:03}.png", volume_id(volume)));
    let img = image::GrayImage::from_raw(w, h, px).expect("slice buffer matches its size");
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    write_atomic(&path, &bytes)?;
    Ok(path)
}

/// Every stage in order: data, three trainings, coarse sets, refinement and
/// evaluation. Returns the report also written to `report.json`.
pub fn run_pipeline(cfg: &ExperimentConfig, layout: &Layout) -> Result<MetricReport> {
    cfg.validate()?;
    cmd_make_data(cfg, layout)?;
    for stage in [Stage::Ae, Stage::Ldm, Stage::Refiner] {
        cmd_train(stage, cfg, layout, false)?;
    }
    cmd_reconstruct(layout, &layout.test(), &layout.recon())?;
    cmd_refine(cfg, layout, &layout.recon(), &layout.refined_recon())?;
    if cfg.generate.n > 0 {
        cmd_generate(cfg, layout, cfg.generate.n, &layout.synth())?;
        cmd_refine(cfg, layout, &layout.synth(), &layout.refined_synth())?;
    }
    cmd_evaluate(cfg, &default_inputs(layout), &layout.root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::phantom_stem;

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Ae, Stage::Ldm, Stage::Refiner] {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("vae".parse::<Stage>().is_err());
    }

    #[test]
    fn constant_volume_exports_mid_gray() {
        let v = Volume::filled([4, 5, 6], 0.0);
        let (w, h, px) = slice_pixels(&v, 0, 2).unwrap();
        assert_eq!((w, h), (6, 5));
        assert!(px.iter().all(|&p| p == 128));
        let ramp = Volume::from_fn([2, 2, 3], |_, _, x| x as f32 - 1.0);
        assert_eq!(
            slice_pixels(&ramp, 0, 0).unwrap().2,
            vec![0, 128, 255, 0, 128, 255]
        );
        assert!(slice_pixels(&v, 2, 6).is_err());
        assert!(slice_pixels(&v, 3, 0).is_err());
    }

    #[test]
    fn provenance_sits_beside_the_volume() {
        assert_eq!(
            provenance_path(Path::new("/a/b/phantom_00001")),
            PathBuf::from("/a/b/phantom_00001.provenance.json")
        );
    }

    #[test]
    fn partial_marker_survives_failure_only() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok");
        with_partial(&ok, || Ok(())).unwrap();
        assert!(!ok.join(PARTIAL_MARKER).exists());
        let bad = dir.path().join("bad");
        let r: Result<()> = with_partial(&bad, || Err(Error::InvalidArgument("boom".into())));
        assert!(r.is_err());
        assert!(bad.join(PARTIAL_MARKER).exists());
    }

    #[test]
    fn stages_report_missing_prerequisites() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = ExperimentConfig::cpu();
        for stage in [Stage::Ldm, Stage::Refiner] {
            let err = cmd_train(stage, &cfg, &layout, false).unwrap_err();
            assert!(
                matches!(&err, Error::MissingPrerequisite(s) if s == "ae"),
                "{err}"
            );
        }
        let err = cmd_train(Stage::Ae, &cfg, &layout, false).unwrap_err();
        assert!(err.to_string().contains("make-data"), "{err}");
        let err = cmd_train(Stage::Ae, &cfg, &layout, true).unwrap_err();
        assert!(matches!(&err, Error::MissingPrerequisite(s) if s == "ae"));
    }

    #[test]
    fn make_data_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::cpu();
        cfg.data.n = 10;
        cfg.data.shape = [16; 3];
        let a = Layout::new(dir.path().join("a"));
        let b = Layout::new(dir.path().join("b"));
        let split = cmd_make_data(&cfg, &a).unwrap();
        cmd_make_data(&cfg, &b).unwrap();
        assert_eq!((split.train_ids.len(), split.test_ids.len()), (8, 2));
        let read = |l: &Layout, seed| {
            fs::read(phantom_stem(&l.test(), seed).with_extension("f32raw")).unwrap()
        };
        for &seed in &split.test_ids {
            assert_eq!(read(&a, seed), read(&b, seed));
        }
        assert!(!a.data().join(PARTIAL_MARKER).exists());
    }
}
