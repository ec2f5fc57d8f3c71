//! Volume files: the raw float32 + JSON sidecar pair, NIfTI-1 input, and u8 label maps.

use std::fs;
use std::path::{Path, PathBuf};

use nifti::{NiftiObject, NiftiVolume, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::{voxel_count, Shape3, Volume};
use crate::error::{Error, Result};
use crate::util::write_atomic;

/// JSON sidecar that accompanies every `.f32raw` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Shape3,
    pub spacing: [f32; 3],
    pub intensity_range: Option<[f32; 2]>,
    pub seed: Option<u64>,
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Path of the raw payload for a volume stem (`dir/name` -> `dir/name.f32raw`).
pub fn raw_path(stem: &Path) -> PathBuf {
    stem.with_extension("f32raw")
}

/// Writes `<stem>.f32raw` (little-endian f32, C order) and `<stem>.json`.
pub fn save_volume(v: &Volume, stem: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let raw = raw_path(stem);
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let sidecar = Sidecar {
        shape: v.shape(),
        spacing: v.spacing(),
        intensity_range: v.intensity_range().map(|(a, b)| [a, b]),
        seed,
    };
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&raw, &bytes)?;
    write_atomic(&sidecar_path(&raw), &json)?;
    Ok(raw)
}

/// Loads a volume from a `.f32raw` (with sidecar) or a `.nii` / `.nii.gz` file.
///
/// Data are returned as stored; no normalization is applied.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_nifti(path)
    } else {
        let raw = if path.extension().is_some_and(|e| e == "f32raw") {
            path.to_path_buf()
        } else {
            raw_path(path)
        };
        load_raw(&raw)
    }
}

/// Reads the sidecar that belongs to a raw volume.
pub fn load_sidecar(raw: &Path) -> Result<Sidecar> {
    let sc = sidecar_path(raw);
    let text = fs::read(&sc).map_err(|e| Error::io(&sc, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::load(&sc, "sidecar", e.to_string()))
}

fn load_raw(raw: &Path) -> Result<Volume> {
    let sidecar = load_sidecar(raw)?;
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let expected = voxel_count(sidecar.shape);
    if bytes.len() != expected * 4 {
        return Err(Error::load(
            raw,
            "shape",
            format!(
                "sidecar shape {:?} needs {} floats but file holds {} bytes ({} floats)",
                sidecar.shape,
                expected,
                bytes.len(),
                bytes.len() / 4
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(raw, &data)?;
    let v = Volume::new(sidecar.shape, data, sidecar.spacing)
        .map_err(|e| Error::load(raw, "spacing", e.to_string()))?;
    Ok(v.with_intensity_range(sidecar.intensity_range.map(|r| (r[0], r[1]))))
}

fn check_finite(path: &Path, data: &[f32]) -> Result<()> {
    let bad = data.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::load(
            path,
            "data",
            format!("{bad} non-finite voxel values"),
        ));
    }
    Ok(())
}

/// NIfTI-1 reader; axis 0 of the returned volume is the NIfTI `i` axis.
fn load_nifti(path: &Path) -> Result<Volume> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::load(path, "header", e.to_string()))?;
    let header = obj.header().clone();
    let volume = obj.into_volume();
    let dims = volume.dim().to_vec();
    if dims.len() < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::load(
            path,
            "dim",
            format!("expected a 3D volume, got dims {dims:?}"),
        ));
    }
    let (n0, n1, n2) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let stored: Vec<f32> = match header.datatype {
        16 => volume
            .into_nifti_typed_data::<f32>()
            .map_err(|e| Error::load(path, "data", e.to_string()))?,
        4 => volume
            .into_nifti_typed_data::<i16>()
            .map_err(|e| Error::load(path, "data", e.to_string()))?
            .into_iter()
            .map(f32::from)
            .collect(),
        other => {
            return Err(Error::load(
                path,
                "datatype",
                format!("unsupported NIfTI datatype code {other} (float32=16, int16=4)"),
            ))
        }
    };
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    let rescale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let mut data = vec![0f32; n0 * n1 * n2];
    for c in 0..n2 {
        for b in 0..n1 {
            for a in 0..n0 {
                let mut v = stored[a + n0 * (b + n1 * c)];
                if rescale {
                    v = v * slope + inter;
                }
                data[(a * n1 + b) * n2 + c] = v;
            }
        }
    }
    check_finite(path, &data)?;
    let spacing = [
        header.pixdim[1].abs(),
        header.pixdim[2].abs(),
        header.pixdim[3].abs(),
    ];
    Volume::new([n0, n1, n2], data, spacing).map_err(|e| Error::load(path, "pixdim", e.to_string()))
}

/// Writes a label map as one byte per voxel.
pub fn save_labels(labels: &[u8], stem: &Path) -> Result<PathBuf> {
    let path = stem.with_extension("labels.u8raw");
    write_atomic(&path, labels)?;
    Ok(path)
}

/// Reads the label map stored beside a volume stem, checking it against `shape`.
pub fn load_labels(stem: &Path, shape: Shape3) -> Result<Vec<u8>> {
    let path = stem.with_extension("labels.u8raw");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != voxel_count(shape) {
        return Err(Error::load(
            &path,
            "shape",
            format!("{} labels for volume shape {:?}", bytes.len(), shape),
        ));
    }
    Ok(bytes)
}
