//! On-disk formats: BIQT tensor files, per-sequence metadata and annotation
//! documents, PPM previews.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use biqa_core::burstgen::{BurstSequence, DegradationRecord};
use biqa_core::downstream::QualityAnnotation;
use biqa_core::numerics::{biqt, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAMES_FILE: &str = "frames.biqt";
pub const GT_FILE: &str = "gt.biqt";
pub const META_FILE: &str = "meta.json";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(path, e))
}

/// Pretty JSON with a trailing newline. Field order follows the type, so
/// equal values always produce equal bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::data(path, e))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &biqt::encode(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path)?;
    biqt::decode(&bytes).map_err(|e| Error::in_file(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub id: String,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub ref_index: usize,
    pub planted_index: Option<usize>,
    pub degradations: Vec<DegradationRecord>,
}

/// Writes `frames.biqt`, `meta.json` and, when given, `gt.biqt` into `dir`.
pub fn save_sequence(seq: &BurstSequence, gt: Option<&Tensor<f32>>, dir: &Path) -> Result<()> {
    seq.validate()?;
    let (c, h, w) = seq.dims();
    let meta = SequenceMeta {
        id: seq.id.clone(),
        frames: seq.len(),
        channels: c,
        height: h,
        width: w,
        ref_index: seq.ref_index,
        planted_index: seq.planted_index,
        degradations: seq.meta.clone(),
    };
    save_tensor(&dir.join(FRAMES_FILE), &seq.frames)?;
    if let Some(gt) = gt {
        save_tensor(&dir.join(GT_FILE), gt)?;
    }
    write_json(&dir.join(META_FILE), &meta)
}

pub fn load_sequence(dir: &Path) -> Result<BurstSequence> {
    let meta_path = dir.join(META_FILE);
    let meta: SequenceMeta = read_json(&meta_path)?;
    let frames_path = dir.join(FRAMES_FILE);
    let frames = load_tensor(&frames_path)?;
    let expect = [meta.frames, meta.channels, meta.height, meta.width];
    if frames.shape() != expect {
        return Err(Error::data(
            &meta_path,
            format!("metadata describes {expect:?} but {FRAMES_FILE} holds {:?}", frames.shape()),
        ));
    }
    let seq = BurstSequence {
        id: meta.id,
        frames,
        ref_index: meta.ref_index,
        meta: meta.degradations,
        planted_index: meta.planted_index,
    };
    seq.validate().map_err(|e| Error::data(&meta_path, e))?;
    Ok(seq)
}

pub fn load_gt(dir: &Path) -> Result<Tensor<f32>> {
    load_tensor(&dir.join(GT_FILE))
}

pub fn annotation_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("annot_{name}.json"))
}

pub fn features_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("feat_{name}.biqt"))
}

pub fn save_annotation(dir: &Path, ann: &QualityAnnotation) -> Result<()> {
    write_json(&annotation_path(dir, &ann.teacher_id), ann)
}

pub fn load_annotation(dir: &Path, name: &str, frames: usize) -> Result<QualityAnnotation> {
    let path = annotation_path(dir, name);
    let ann: QualityAnnotation = read_json(&path)?;
    ann.validate(frames).map_err(|e| Error::data(&path, e))?;
    Ok(ann)
}

/// Binary 8-bit PPM of a `3×H×W` image in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &[f32], height: usize, width: usize) -> Result<()> {
    if image.len() != 3 * height * width {
        return Err(Error::data(path, "PPM export expects a 3-channel image"));
    }
    let mut out = Vec::with_capacity(20 + image.len());
    write!(out, "P6\n{width} {height}\n255\n").expect("write to memory");
    let plane = height * width;
    for p in 0..plane {
        for c in 0..3 {
            out.push((image[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_bytes(path, &out)
}

/// One PPM per frame, `frame_<i>.ppm`, for visual inspection.
pub fn export_frames(seq: &BurstSequence, dir: &Path) -> Result<()> {
    let (_, h, w) = seq.dims();
    for i in 0..seq.len() {
        write_ppm(&dir.join(format!("frame_{i:02}.ppm")), seq.frame(i), h, w)?;
    }
    Ok(())
}
