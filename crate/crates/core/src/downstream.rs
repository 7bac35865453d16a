//! Classical stand-in teachers, PSNR and leave-one-out frame annotation.
//!
//! Both teachers register every frame to the reference once (integer SSD
//! search on luminance) and then fuse any subset of the registered frames.
//! Per-pixel accumulations are summed in sorted order so fused outputs do not
//! depend on frame order, which keeps annotation exactly permutation
//! equivariant.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::burstgen::BurstSequence;
use crate::error::{Error, Result};
use crate::metrics;
use crate::numerics::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Raw deltas closer than this (dB) are treated as all equal.
pub const EQUAL_DELTA_TOL: f64 = 1e-9;
pub const DEFAULT_GROUP_EPSILON: f64 = 0.02;

/// PSNR in dB for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dim {
            op: "psnr",
            axis: "all".into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    AlignAverageDenoise,
    ShiftAddSuperres,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionWeights {
    /// `w = 1 / (r + floor)` with `r` the frame's mean squared deviation
    /// from the plain mean of the fused subset.
    InverseResidual,
    Equal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub kind: TeacherKind,
    pub radius: usize,
    pub weights: FusionWeights,
    pub residual_floor: f64,
    pub sr_scale: usize,
}

impl TeacherModel {
    pub fn denoise() -> Self {
        Self {
            kind: TeacherKind::AlignAverageDenoise,
            radius: 4,
            weights: FusionWeights::InverseResidual,
            residual_floor: 0.1,
            sr_scale: 1,
        }
    }

    pub fn superres() -> Self {
        Self {
            kind: TeacherKind::ShiftAddSuperres,
            sr_scale: 2,
            ..Self::denoise()
        }
    }

    pub fn id(&self) -> &'static str {
        match self.kind {
            TeacherKind::AlignAverageDenoise => "denoise",
            TeacherKind::ShiftAddSuperres => "superres",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "denoise" => Ok(Self::denoise()),
            "superres" => Ok(Self::superres()),
            other => Err(Error::Config(format!("unknown teacher {other:?}; expected denoise or superres"))),
        }
    }

    fn scale(&self) -> usize {
        match self.kind {
            TeacherKind::AlignAverageDenoise => 1,
            TeacherKind::ShiftAddSuperres => self.sr_scale.max(1),
        }
    }
}

/// Frames registered to the reference of the sequence they came from.
#[derive(Clone, Debug)]
pub struct Registration<'a> {
    pub seq: &'a BurstSequence,
    /// Estimated `(dx, dy)` with `frame(y, x) ≈ reference(y + dy, x + dx)`.
    pub shifts: Vec<(i32, i32)>,
    /// `T×C×H×W` frames resampled onto the reference grid (clamp to edge).
    pub aligned: Vec<f64>,
}

fn luminance(seq: &BurstSequence, i: usize) -> Vec<f64> {
    let (c, h, w) = seq.dims();
    let f = seq.frame(i);
    (0..h * w)
        .map(|p| (0..c).map(|k| f[k * h * w + p] as f64).sum::<f64>() / c as f64)
        .collect()
}

/// Exhaustive integer SSD search over `[-radius, radius]²`, minimising the
/// mean squared luminance difference over the overlap. Ties prefer the
/// smaller displacement, then scan order.
pub fn estimate_shift(frame: &[f64], reference: &[f64], h: usize, w: usize, radius: usize) -> (i32, i32) {
    let r = radius as i32;
    let mut best = (f64::INFINITY, i32::MAX, (0, 0));
    for dy in -r..=r {
        for dx in -r..=r {
            let y0 = 0.max(-dy) as usize;
            let y1 = (h as i32).min(h as i32 - dy);
            let x0 = 0.max(-dx) as usize;
            let x1 = (w as i32).min(w as i32 - dx);
            if y1 <= y0 as i32 || x1 <= x0 as i32 {
                continue;
            }
            let (mut ssd, mut n) = (0.0, 0usize);
            for y in y0..y1 as usize {
                let ry = (y as i32 + dy) as usize;
                for x in x0..x1 as usize {
                    let d = frame[y * w + x] - reference[ry * w + (x as i32 + dx) as usize];
                    ssd += d * d;
                    n += 1;
                }
            }
            let cost = ssd / n as f64;
            let mag = dx.abs() + dy.abs();
            if cost < best.0 || (cost == best.0 && mag < best.1) {
                best = (cost, mag, (dx, dy));
            }
        }
    }
    best.2
}

pub fn register<'a>(teacher: &TeacherModel, seq: &'a BurstSequence) -> Registration<'a> {
    let (c, h, w) = seq.dims();
    let t = seq.len();
    let reference = luminance(seq, seq.ref_index);
    let mut shifts = Vec::with_capacity(t);
    let mut aligned = vec![0.0; t * c * h * w];
    for i in 0..t {
        let s = if i == seq.ref_index {
            (0, 0)
        } else {
            estimate_shift(&luminance(seq, i), &reference, h, w, teacher.radius)
        };
        shifts.push(s);
        let f = seq.frame(i);
        let out = &mut aligned[i * c * h * w..(i + 1) * c * h * w];
        for k in 0..c {
            for y in 0..h {
                let sy = (y as i32 - s.1).clamp(0, h as i32 - 1) as usize;
                for x in 0..w {
                    let sx = (x as i32 - s.0).clamp(0, w as i32 - 1) as usize;
                    out[(k * h + y) * w + x] = f[(k * h + sy) * w + sx] as f64;
                }
            }
        }
    }
    Registration { seq, shifts, aligned }
}

fn sorted_sum(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

impl Registration<'_> {
    fn plane(&self, i: usize) -> &[f64] {
        let (c, h, w) = self.seq.dims();
        &self.aligned[i * c * h * w..(i + 1) * c * h * w]
    }

    fn weights(&self, teacher: &TeacherModel, subset: &[usize]) -> Vec<f64> {
        if teacher.weights == FusionWeights::Equal || subset.len() == 1 {
            return vec![1.0; subset.len()];
        }
        let n = self.plane(0).len();
        let mut mean = vec![0.0; n];
        let mut buf = Vec::with_capacity(subset.len());
        for (p, m) in mean.iter_mut().enumerate() {
            buf.clear();
            buf.extend(subset.iter().map(|&i| self.plane(i)[p]));
            *m = sorted_sum(&mut buf) / subset.len() as f64;
        }
        subset
            .iter()
            .map(|&i| {
                let r = self.plane(i).iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>() / n as f64;
                1.0 / (r + teacher.residual_floor)
            })
            .collect()
    }

    /// Fuses the frames in `subset` (indices into the registered sequence).
    pub fn fuse(&self, teacher: &TeacherModel, subset: &[usize]) -> Result<Tensor<f32>> {
        if subset.is_empty() {
            return Err(Error::Invalid("cannot fuse an empty frame subset".into()));
        }
        let (c, h, w) = self.seq.dims();
        let weights = self.weights(teacher, subset);
        let mut wsum = weights.clone();
        let wtotal = sorted_sum(&mut wsum);
        let out = match teacher.kind {
            TeacherKind::AlignAverageDenoise => {
                let mut buf = Vec::with_capacity(subset.len());
                (0..c * h * w)
                    .map(|p| {
                        buf.clear();
                        buf.extend(subset.iter().zip(&weights).map(|(&i, &wt)| wt * self.plane(i)[p]));
                        sorted_sum(&mut buf) / wtotal
                    })
                    .collect()
            }
            TeacherKind::ShiftAddSuperres => self.shift_add(teacher.scale(), subset, &weights),
        };
        Tensor::new(vec![c, h, w], out.into_iter().map(|v: f64| v.clamp(0.0, 1.0) as f32).collect())
    }

    /// Each frame contributes its `scale`-decimated lattice, placed at the
    /// scene positions implied by its shift; uncovered pixels take the mean
    /// of covered neighbours in the smallest window that has any.
    fn shift_add(&self, scale: usize, subset: &[usize], weights: &[f64]) -> Vec<f64> {
        let (c, h, w) = self.seq.dims();
        let mut cover: Vec<Vec<f64>> = vec![Vec::new(); h * w];
        let mut cells: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); h * w]; c];
        for (&i, &wt) in subset.iter().zip(weights) {
            let (dx, dy) = self.shifts[i];
            let f = self.seq.frame(i);
            for y in (0..h).step_by(scale) {
                let py = y as i32 + dy;
                if py < 0 || py >= h as i32 {
                    continue;
                }
                for x in (0..w).step_by(scale) {
                    let px = x as i32 + dx;
                    if px < 0 || px >= w as i32 {
                        continue;
                    }
                    let p = py as usize * w + px as usize;
                    cover[p].push(wt);
                    for (k, plane) in cells.iter_mut().enumerate() {
                        plane[p].push(wt * f[(k * h + y) * w + x] as f64);
                    }
                }
            }
        }
        let mut out = vec![0.0; c * h * w];
        let mut covered = vec![false; h * w];
        for p in 0..h * w {
            if cover[p].is_empty() {
                continue;
            }
            covered[p] = true;
            let wt = sorted_sum(&mut cover[p]);
            for k in 0..c {
                out[k * h * w + p] = sorted_sum(&mut cells[k][p]) / wt;
            }
        }
        if covered.iter().all(|&v| !v) {
            return out;
        }
        let filled = out.clone();
        for y in 0..h {
            for x in 0..w {
                if covered[y * w + x] {
                    continue;
                }
                for r in 1..h.max(w) as i32 {
                    let mut acc = vec![0.0; c];
                    let mut n = 0usize;
                    for yy in (y as i32 - r).max(0)..=(y as i32 + r).min(h as i32 - 1) {
                        for xx in (x as i32 - r).max(0)..=(x as i32 + r).min(w as i32 - 1) {
                            let q = yy as usize * w + xx as usize;
                            if covered[q] {
                                n += 1;
                                for (k, a) in acc.iter_mut().enumerate() {
                                    *a += filled[k * h * w + q];
                                }
                            }
                        }
                    }
                    if n > 0 {
                        for (k, a) in acc.iter().enumerate() {
                            out[k * h * w + y * w + x] = a / n as f64;
                        }
                        break;
                    }
                }
            }
        }
        out
    }

    /// Per-frame `|aligned_i − reference|`, `T×C×H'×W'` with `H' = ceil(H / scale)`.
    pub fn residual_features(&self, teacher: &TeacherModel) -> Tensor<f32> {
        let (c, h, w) = self.seq.dims();
        let s = teacher.scale();
        let (hs, ws) = (h.div_ceil(s), w.div_ceil(s));
        let t = self.seq.len();
        let r = self.plane(self.seq.ref_index);
        let mut out = Vec::with_capacity(t * c * hs * ws);
        for i in 0..t {
            let a = self.plane(i);
            for k in 0..c {
                for y in (0..h).step_by(s) {
                    for x in (0..w).step_by(s) {
                        let p = (k * h + y) * w + x;
                        out.push((a[p] - r[p]).abs() as f32);
                    }
                }
            }
        }
        Tensor::new(vec![t, c, hs, ws], out).expect("feature extents")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    pub image: Tensor<f32>,
    /// Distillation targets, one residual map per frame.
    pub features: Tensor<f32>,
    pub shifts: Vec<(i32, i32)>,
}

pub fn run_teacher(teacher: &TeacherModel, seq: &BurstSequence) -> Result<TeacherOutput> {
    seq.validate()?;
    let reg = register(teacher, seq);
    let all: Vec<usize> = (0..seq.len()).collect();
    Ok(TeacherOutput {
        image: reg.fuse(teacher, &all)?,
        features: reg.residual_features(teacher),
        shifts: reg.shifts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityAnnotation {
    pub teacher_id: String,
    /// `PSNR(all) − PSNR(all without i)` in dB; positive means frame `i` helps.
    pub raw_delta: Vec<f64>,
    pub scores: Vec<f64>,
    pub groups: Vec<Vec<usize>>,
    pub group_epsilon: f64,
}

impl QualityAnnotation {
    /// Builds scores and groups from externally supplied per-frame scores.
    pub fn from_scores(teacher_id: &str, scores: Vec<f64>, group_epsilon: f64) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::Invalid("need at least 2 scores".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("scores must be finite".into()));
        }
        let normalized = normalize_deltas(&scores);
        Ok(Self {
            teacher_id: teacher_id.into(),
            groups: build_groups(&normalized, group_epsilon),
            raw_delta: scores,
            scores: normalized,
            group_epsilon,
        })
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.scores.len() != frames || self.raw_delta.len() != frames {
            return Err(Error::Invalid(format!(
                "annotation covers {} frames, sequence has {frames}",
                self.scores.len()
            )));
        }
        if self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Invalid("scores must lie in [0, 1]".into()));
        }
        let mut seen = vec![false; frames];
        for &i in self.groups.iter().flatten() {
            if i >= frames || core::mem::replace(&mut seen[i], true) {
                return Err(Error::Invalid("groups are not a partition of the frames".into()));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("groups do not cover every frame".into()));
        }
        Ok(())
    }
}

/// Min–max normalisation of raw deltas; all-equal deltas score 0.5.
pub fn normalize_deltas(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= EQUAL_DELTA_TOL {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|&d| ((d - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// Single-link grouping over sorted scores. Groups come out in descending
/// score order with members sorted by frame index.
pub fn build_groups(scores: &[f64], epsilon: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if k > 0 && scores[order[k - 1]] - scores[i] <= epsilon {
            groups.last_mut().expect("open group").push(i);
        } else {
            groups.push(vec![i]);
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups
}

/// Teacher PSNR against `gt` for every leave-one-out subset and the full set.
fn loo_psnr(teacher: &TeacherModel, seq: &BurstSequence, gt: &Tensor<f32>) -> Result<(f64, Vec<f64>)> {
    let reg = register(teacher, seq);
    let t = seq.len();
    let all: Vec<usize> = (0..t).collect();
    let full = psnr(&reg.fuse(teacher, &all)?, gt)?;
    let mut without = Vec::with_capacity(t);
    for i in 0..t {
        let keep: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
        without.push(psnr(&reg.fuse(teacher, &keep)?, gt)?);
    }
    Ok((full, without))
}

pub fn annotate_leave_one_out(
    teacher: &TeacherModel,
    seq: &BurstSequence,
    gt: &Tensor<f32>,
    group_epsilon: f64,
) -> Result<QualityAnnotation> {
    seq.validate()?;
    if seq.len() < 3 {
        return Err(Error::Invalid(format!(
            "leave-one-out annotation needs at least 3 frames, sequence {} has {}",
            seq.id,
            seq.len()
        )));
    }
    let (c, h, w) = seq.dims();
    if gt.shape() != [c, h, w] {
        return Err(Error::Dim {
            op: "annotate_leave_one_out",
            axis: "gt".into(),
            detail: format!("ground truth {:?} vs frames {c}×{h}×{w}", gt.shape()),
        });
    }
    let (full, without) = loo_psnr(teacher, seq, gt)?;
    let raw_delta: Vec<f64> = without.iter().map(|p| full - p).collect();
    let scores = normalize_deltas(&raw_delta);
    Ok(QualityAnnotation {
        teacher_id: teacher.id().into(),
        groups: build_groups(&scores, group_epsilon),
        raw_delta,
        scores,
        group_epsilon,
    })
}

/// Mean teacher PSNR of fusing exactly the frames in `keep`.
pub fn subset_psnr(teacher: &TeacherModel, seq: &BurstSequence, gt: &Tensor<f32>, keep: &[usize]) -> Result<f64> {
    let reg = register(teacher, seq);
    psnr(&reg.fuse(teacher, keep)?, gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthPair {
    pub lengths: (usize, usize),
    pub plcc: Option<f64>,
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherPair {
    pub teachers: (String, String),
    pub plcc: Option<f64>,
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingReport {
    pub sequences: usize,
    pub redundancy_threshold_db: f64,
    /// Fraction of frames with `|ΔPSNR| ≤ threshold`, per teacher.
    pub redundancy: Vec<(String, f64)>,
    /// Rank agreement of the shared frames between truncated lengths, first teacher.
    pub rank_stability: Vec<LengthPair>,
    pub cross_teacher: Vec<TeacherPair>,
}

pub const REDUNDANCY_THRESHOLD_DB: f64 = 0.1;
pub const MIN_FINDING_SEQUENCES: usize = 50;

/// Dataset-level analyses: frame redundancy, rank stability under truncation
/// and cross-teacher agreement.
pub fn finding_analyses(
    dataset: &[(BurstSequence, Tensor<f32>)],
    teachers: &[TeacherModel],
    lengths: &[usize],
) -> Result<FindingReport> {
    if teachers.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 teachers, got {}", teachers.len())));
    }
    if dataset.len() < MIN_FINDING_SEQUENCES {
        return Err(Error::Invalid(format!(
            "need at least {MIN_FINDING_SEQUENCES} sequences, got {}",
            dataset.len()
        )));
    }
    if lengths.iter().any(|&l| l < 3) {
        return Err(Error::Invalid("truncated lengths must be >= 3".into()));
    }
    let eps = DEFAULT_GROUP_EPSILON;
    let mut per_teacher: Vec<Vec<QualityAnnotation>> = Vec::with_capacity(teachers.len());
    for teacher in teachers {
        let anns = dataset
            .iter()
            .map(|(seq, gt)| annotate_leave_one_out(teacher, seq, gt, eps))
            .collect::<Result<Vec<_>>>()?;
        per_teacher.push(anns);
    }

    let redundancy = teachers
        .iter()
        .zip(&per_teacher)
        .map(|(t, anns)| {
            let (hit, total) = anns.iter().flat_map(|a| &a.raw_delta).fold((0usize, 0usize), |(h, n), d| {
                (h + usize::from(d.abs() <= REDUNDANCY_THRESHOLD_DB), n + 1)
            });
            (String::from(t.id()), hit as f64 / total as f64)
        })
        .collect();

    let teacher = &teachers[0];
    let mut truncated: Vec<Vec<Option<Vec<f64>>>> = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut row = Vec::with_capacity(dataset.len());
        for (seq, gt) in dataset {
            if len > seq.len() {
                row.push(None);
                continue;
            }
            let keep: Vec<usize> = (0..len).collect();
            let ann = annotate_leave_one_out(teacher, &seq.subset(&keep), gt, eps)?;
            row.push(Some(ann.raw_delta));
        }
        truncated.push(row);
    }
    let mut rank_stability = Vec::new();
    for a in 0..lengths.len() {
        for b in a + 1..lengths.len() {
            let shared = lengths[a].min(lengths[b]);
            let vals: Vec<Option<f64>> = truncated[a]
                .iter()
                .zip(&truncated[b])
                .map(|(x, y)| match (x, y) {
                    (Some(x), Some(y)) => metrics::plcc(
                        &metrics::fractional_ranks(&x[..shared]),
                        &metrics::fractional_ranks(&y[..shared]),
                    ),
                    _ => None,
                })
                .collect();
            let (mean, n) = mean_defined(&vals);
            rank_stability.push(LengthPair {
                lengths: (lengths[a], lengths[b]),
                plcc: mean,
                sequences: n,
            });
        }
    }

    let mut cross_teacher = Vec::new();
    for a in 0..teachers.len() {
        for b in a + 1..teachers.len() {
            let vals: Vec<Option<f64>> = per_teacher[a]
                .iter()
                .zip(&per_teacher[b])
                .map(|(x, y)| metrics::plcc(&x.scores, &y.scores))
                .collect();
            let (mean, n) = mean_defined(&vals);
            cross_teacher.push(TeacherPair {
                teachers: (teachers[a].id().into(), teachers[b].id().into()),
                plcc: mean,
                sequences: n,
            });
        }
    }

    Ok(FindingReport {
        sequences: dataset.len(),
        redundancy_threshold_db: REDUNDANCY_THRESHOLD_DB,
        redundancy,
        rank_stability,
        cross_teacher,
    })
}

fn mean_defined(vals: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = vals.iter().flatten().copied().collect();
    if defined.is_empty() {
        return (None, 0);
    }
    (Some(defined.iter().sum::<f64>() / defined.len() as f64), defined.len())
}
