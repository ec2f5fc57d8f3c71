//! Runs the metric suite over directories of volumes and assembles a JSON report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backbone::{PerceptualBackbone, RandomConvBackbone};
use super::coverage::coverage_density;
use super::fid::{fid, FeatureSet};
use super::hog::{hog_similarity, HogParams};
use super::lpips::{lpips_patches, read_patch, sample_slice_patches};
use super::noise::{extract_noise, noise_kl};
use super::sharpness::laplacian_variance_sharpness;
use crate::error::{Error, Result};
use crate::phantom::{cerebellum_region, label_region, whole_brain_region, Label};
use crate::util::{rng_for, stream_tag};
use crate::volume::{load_labels, load_volume, RegionMask, Volume};

pub const REPORT_VERSION: u32 = 1;

/// Sampling sizes, filter widths, and seeds for every metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricProtocol {
    pub seed: u64,
    pub axes: Vec<usize>,
    pub kl_bins: usize,
    pub noise_smooth_sigma: f64,
    pub sharpness_sigma: f64,
    pub sharpness_patch: usize,
    pub sharpness_patches: usize,
    pub lpips_patch: usize,
    pub lpips_patches: usize,
    pub hog_cell: usize,
    pub hog_bins: usize,
    pub feature_patch: usize,
    pub feature_patches_per_volume: usize,
    pub k_values: Vec<usize>,
    pub backbone: String,
    pub backbone_seed: u64,
    pub backbone_widths: Vec<usize>,
}

impl Default for MetricProtocol {
    fn default() -> Self {
        MetricProtocol {
            seed: 0,
            axes: vec![0, 1, 2],
            kl_bins: 64,
            noise_smooth_sigma: 1.0,
            sharpness_sigma: 0.5,
            sharpness_patch: 64,
            sharpness_patches: 1000,
            lpips_patch: 64,
            lpips_patches: 1000,
            hog_cell: 8,
            hog_bins: 9,
            feature_patch: 64,
            feature_patches_per_volume: 50,
            k_values: vec![5, 10, 20],
            backbone: "randconv".into(),
            backbone_seed: 0,
            backbone_widths: vec![8, 16, 32],
        }
    }
}

impl MetricProtocol {
    /// Instantiates the configured backbone.
    pub fn make_backbone(&self) -> Result<Box<dyn PerceptualBackbone>> {
        match self.backbone.as_str() {
            "randconv" => Ok(Box::new(RandomConvBackbone::new(
                self.backbone_seed,
                &self.backbone_widths,
            ))),
            other => Err(Error::Config(format!(
                "unknown perceptual backbone `{other}` (available: randconv)"
            ))),
        }
    }
}

/// Directories holding each image set. Only `orig` is required.
#[derive(Clone, Debug, Default)]
pub struct EvalInputs {
    pub orig: PathBuf,
    pub recon: Option<PathBuf>,
    pub refined: Option<PathBuf>,
    pub synth: Option<PathBuf>,
    pub refined_synth: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub set: String,
    pub axis: Option<usize>,
    pub value: Option<f64>,
    pub params: BTreeMap<String, Value>,
    pub seed: u64,
    pub n_samples: usize,
    pub inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub protocol: MetricProtocol,
    pub backbone_id: String,
    pub kl_direction: String,
    pub noise_method: String,
    pub sets: BTreeMap<String, Vec<String>>,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Finds the value of a row.
    pub fn value(&self, metric: &str, set: &str, axis: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.set == set && r.axis == axis)
            .and_then(|r| r.value)
    }

    /// Plain-text tables: one line per (metric, set), per-axis columns.
    pub fn summary_table(&self) -> String {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.metric.clone(), r.set.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:<14} {:>10} {:>10} {:>10} {:>10}",
            "metric", "set", "dim0", "dim1", "dim2", "all"
        );
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for (metric, set) in keys {
            let cell = |axis: Option<usize>| {
                self.rows
                    .iter()
                    .find(|r| r.metric == metric && r.set == set && r.axis == axis)
                    .map(|r| {
                        if r.skipped.is_some() {
                            "skip".to_string()
                        } else {
                            fmt(r.value)
                        }
                    })
                    .unwrap_or_else(|| "".to_string())
            };
            let _ = writeln!(
                out,
                "{:<24} {:<14} {:>10} {:>10} {:>10} {:>10}",
                metric,
                set,
                cell(Some(0)),
                cell(Some(1)),
                cell(Some(2)),
                cell(None)
            );
        }
        out
    }
}

struct Item {
    id: String,
    volume: Volume,
    labels: Option<Vec<u8>>,
}

fn is_volume_file(p: &Path) -> bool {
    let name = p.to_string_lossy();
    name.ends_with(".f32raw") || name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// File name without the volume extension.
pub fn volume_id(p: &Path) -> String {
    let name = p
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .to_string();
    for ext in [".f32raw", ".nii.gz", ".nii"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

/// Volume files of a directory, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_volume_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn load_set(dir: &Path) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for path in list_volumes(dir)? {
        let volume = load_volume(&path)?;
        let id = volume_id(&path);
        let labels = load_labels(&path.with_file_name(&id), volume.shape()).ok();
        items.push(Item { id, volume, labels });
    }
    Ok(items)
}

struct Ctx<'a> {
    protocol: &'a MetricProtocol,
    backbone: Box<dyn PerceptualBackbone>,
    rows: Vec<MetricRow>,
}

fn rng_stream(
    protocol: &MetricProtocol,
    name: &str,
    axis: usize,
    index: usize,
) -> rand_chacha::ChaCha8Rng {
    rng_for(
        protocol.seed ^ stream_tag(name),
        ((axis as u64) << 32) | index as u64,
    )
}

impl Ctx<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        metric: &str,
        set: &str,
        axis: Option<usize>,
        value: Result<f64>,
        params: BTreeMap<String, Value>,
        n_samples: usize,
        inputs: Vec<String>,
    ) {
        let (value, skipped) = match value {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            set: set.to_string(),
            axis,
            value,
            params,
            seed: self.protocol.seed,
            n_samples,
            inputs,
            skipped,
        });
    }

    fn skip(&mut self, metric: &str, set: &str, axis: Option<usize>, reason: String) {
        self.push(
            metric,
            set,
            axis,
            Err(Error::InvalidArgument(reason)),
            BTreeMap::new(),
            0,
            vec![],
        );
    }

    fn features(&self, items: &[&Item], axis: usize) -> Result<FeatureSet> {
        let p = self.protocol;
        let mut rows = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let mut rng = rng_stream(p, "features", axis, i);
            let locs = sample_slice_patches(
                item.volume.shape(),
                axis,
                p.feature_patch,
                p.feature_patches_per_volume,
                &mut rng,
            )?;
            for l in locs {
                rows.push(
                    self.backbone
                        .pooled(&read_patch(&item.volume, l, p.feature_patch)),
                );
            }
        }
        FeatureSet::new(rows, self.backbone.id())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn paired<'a>(orig: &'a [Item], cand: &'a [Item]) -> (Vec<(&'a Item, &'a Item)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for o in orig {
        match cand.iter().find(|c| c.id == o.id) {
            Some(c) => pairs.push((o, c)),
            None => missing.push(o.id.clone()),
        }
    }
    (pairs, missing)
}

fn mean_over<'a>(
    pairs: &[(&'a Item, &'a Item)],
    mut f: impl FnMut(usize, &'a Item, &'a Item) -> Result<f64>,
) -> Result<f64> {
    let vals = pairs
        .iter()
        .enumerate()
        .map(|(i, (o, c))| f(i, o, c))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(&vals))
}

fn region_of(item: &Item, which: &str) -> Result<RegionMask> {
    let labels = item
        .labels
        .as_ref()
        .ok_or_else(|| Error::EmptyRegion(format!("{which}: no label map for `{}`", item.id)))?;
    let shape = item.volume.shape();
    Ok(match which {
        "white-matter" => label_region(labels, shape, &[Label::WhiteMatter], which),
        "ventricle" => label_region(labels, shape, &[Label::Ventricle], which),
        "whole-brain" => whole_brain_region(labels, shape),
        "cerebellum" => cerebellum_region(labels, shape),
        other => return Err(Error::Config(format!("unknown region {other}"))),
    })
}

fn paired_metrics(ctx: &mut Ctx, set: &str, orig: &[Item], cand: &[Item]) -> Result<()> {
    let p = ctx.protocol.clone();
    let (pairs, missing) = paired(orig, cand);
    let metrics = [
        "lpips",
        "hog_whole_brain",
        "hog_cerebellum",
        "noise_kl_white_matter",
        "noise_kl_ventricle",
    ];
    if pairs.is_empty() {
        for m in metrics {
            ctx.skip(
                m,
                set,
                None,
                format!("no volumes paired with the original set (missing {missing:?})"),
            );
        }
        return Ok(());
    }
    let inputs: Vec<String> = pairs.iter().map(|(o, _)| o.id.clone()).collect();
    let mut base = BTreeMap::new();
    if !missing.is_empty() {
        base.insert("missing_pairs".to_string(), json!(missing));
    }

    for &axis in &p.axes {
        let backbone: &dyn PerceptualBackbone = ctx.backbone.as_ref();
        let value = mean_over(&pairs, |i, o, c| {
            let mut rng = rng_stream(&p, "lpips", axis, i);
            lpips_patches(
                &o.volume,
                &c.volume,
                p.lpips_patches,
                p.lpips_patch,
                axis,
                Some(backbone),
                &mut rng,
            )
        });
        let mut params = base.clone();
        params.insert("patch".into(), json!(p.lpips_patch));
        params.insert("patches_per_volume".into(), json!(p.lpips_patches));
        params.insert("backbone".into(), json!(ctx.backbone.id()));
        ctx.push(
            "lpips",
            set,
            Some(axis),
            value,
            params,
            pairs.len() * p.lpips_patches,
            inputs.clone(),
        );
    }

    let hog = HogParams {
        cell: p.hog_cell,
        orient_bins: p.hog_bins,
    };
    for (metric, region) in [
        ("hog_whole_brain", "whole-brain"),
        ("hog_cerebellum", "cerebellum"),
    ] {
        for &axis in &p.axes {
            let value = mean_over(&pairs, |_, o, c| {
                let r = region_of(o, region)?;
                hog_similarity(&o.volume, &c.volume, &r, axis, hog)
            });
            let mut params = base.clone();
            params.insert("cell".into(), json!(p.hog_cell));
            params.insert("orient_bins".into(), json!(p.hog_bins));
            params.insert("region".into(), json!(region));
            ctx.push(
                metric,
                set,
                Some(axis),
                value,
                params,
                pairs.len(),
                inputs.clone(),
            );
        }
    }

    for (metric, region) in [
        ("noise_kl_white_matter", "white-matter"),
        ("noise_kl_ventricle", "ventricle"),
    ] {
        let value = mean_over(&pairs, |_, o, c| {
            let r = region_of(o, region)?;
            let na = extract_noise(&o.volume, p.noise_smooth_sigma)?;
            let nb = extract_noise(&c.volume, p.noise_smooth_sigma)?;
            noise_kl(&na.noise, &nb.noise, &r, p.kl_bins)
        });
        let mut params = base.clone();
        params.insert("bins".into(), json!(p.kl_bins));
        params.insert("smooth_sigma".into(), json!(p.noise_smooth_sigma));
        params.insert("region".into(), json!(region));
        ctx.push(
            metric,
            set,
            None,
            value,
            params,
            pairs.len(),
            inputs.clone(),
        );
    }
    Ok(())
}

fn sharpness(ctx: &mut Ctx, set: &str, items: &[Item]) {
    let p = ctx.protocol.clone();
    let value = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = rng_stream(&p, "sharpness", 0, i);
            laplacian_variance_sharpness(
                &item.volume,
                p.sharpness_sigma,
                p.sharpness_patch,
                p.sharpness_patches,
                &mut rng,
            )
        })
        .collect::<Result<Vec<f64>>>()
        .map(|v| mean(&v));
    let mut params = BTreeMap::new();
    params.insert("sigma".into(), json!(p.sharpness_sigma));
    params.insert("patch".into(), json!(p.sharpness_patch));
    params.insert("patches_per_volume".into(), json!(p.sharpness_patches));
    let inputs = items.iter().map(|i| i.id.clone()).collect();
    ctx.push(
        "sharpness",
        set,
        None,
        value,
        params,
        items.len() * p.sharpness_patches,
        inputs,
    );
}

fn distributional(ctx: &mut Ctx, set: &str, orig: &[Item], cand: &[Item]) -> Result<()> {
    let p = ctx.protocol.clone();
    let orig_refs: Vec<&Item> = orig.iter().collect();
    let cand_refs: Vec<&Item> = cand.iter().collect();
    let inputs: Vec<String> = cand.iter().map(|i| i.id.clone()).collect();
    for &axis in &p.axes {
        let real = ctx.features(&orig_refs, axis)?;
        let gen = ctx.features(&cand_refs, axis)?;
        let mut params = BTreeMap::new();
        params.insert("patch".into(), json!(p.feature_patch));
        params.insert(
            "patches_per_volume".into(),
            json!(p.feature_patches_per_volume),
        );
        params.insert("features".into(), json!(ctx.backbone.id()));
        ctx.push(
            "fid",
            set,
            Some(axis),
            fid(&real, &gen),
            params.clone(),
            gen.len(),
            inputs.clone(),
        );
        for &k in &p.k_values {
            let mut kp = params.clone();
            kp.insert("k".into(), json!(k));
            let cd = coverage_density(&real, &gen, k);
            let (cov, den) = match cd {
                Ok((c, d)) => (Ok(c), Ok(d)),
                Err(e) => {
                    let msg = e.to_string();
                    (
                        Err(Error::InvalidArgument(msg.clone())),
                        Err(Error::InvalidArgument(msg)),
                    )
                }
            };
            ctx.push(
                &format!("coverage_k{k}"),
                set,
                Some(axis),
                cov,
                kp.clone(),
                gen.len(),
                inputs.clone(),
            );
            ctx.push(
                &format!("density_k{k}"),
                set,
                Some(axis),
                den,
                kp,
                gen.len(),
                inputs.clone(),
            );
        }
    }
    Ok(())
}

/// Runs every applicable metric. Paired metrics compare each candidate with
/// the original volume of the same id; distributional metrics pool patch
/// features per set.
pub fn evaluate_sets(inputs: &EvalInputs, protocol: &MetricProtocol) -> Result<MetricReport> {
    let orig = load_set(&inputs.orig)?;
    if orig.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no volumes found in {}",
            inputs.orig.display()
        )));
    }
    let mut ctx = Ctx {
        protocol,
        backbone: protocol.make_backbone()?,
        rows: Vec::new(),
    };
    let mut sets = BTreeMap::new();
    sets.insert(
        "orig".to_string(),
        orig.iter().map(|i| i.id.clone()).collect::<Vec<_>>(),
    );

    let mut loaded: Vec<(&str, Vec<Item>)> = Vec::new();
    for (name, dir) in [
        ("recon", &inputs.recon),
        ("refined", &inputs.refined),
        ("synth", &inputs.synth),
        ("refined_synth", &inputs.refined_synth),
    ] {
        if let Some(dir) = dir {
            let items = load_set(dir)?;
            sets.insert(
                name.to_string(),
                items.iter().map(|i| i.id.clone()).collect(),
            );
            loaded.push((name, items));
        }
    }

    sharpness(&mut ctx, "orig", &orig);
    for (name, items) in &loaded {
        if items.is_empty() {
            ctx.skip("sharpness", name, None, "empty set".into());
            continue;
        }
        if matches!(*name, "recon" | "refined") {
            paired_metrics(&mut ctx, name, &orig, items)?;
        }
        sharpness(&mut ctx, name, items);
        distributional(&mut ctx, name, &orig, items)?;
    }

    Ok(MetricReport {
        version: REPORT_VERSION,
        protocol: protocol.clone(),
        backbone_id: ctx.backbone.id(),
        kl_direction: "KL(original || candidate)".into(),
        noise_method: "gaussian-highpass".into(),
        sets,
        rows: ctx.rows,
    })
}
