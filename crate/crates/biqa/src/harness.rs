//! Dataset builds, training, evaluation, frame selection and the downstream
//! gain experiment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use biqa_core::burstgen::{derive_seed, synthesize_indexed, BurstSequence, GeneratorConfig};
use biqa_core::downstream::{
    annotate_leave_one_out, finding_analyses, psnr, register, run_teacher, FindingReport, QualityAnnotation,
    TeacherModel,
};
use biqa_core::metrics::{EvalReport, Provenance, RELAXED_THRESHOLDS};
use biqa_core::model::{predict, Example, Model, Trainer};
use biqa_core::numerics::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{digest, Checkpoint};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::io;

pub const DATASET_FILE: &str = "dataset.json";
pub const SPLIT_FILE: &str = "split.json";

// stream tags keep the split, initialisation, shuffling and baselines
// statistically independent of each other and of data generation
const SPLIT_STREAM: u64 = 0x5311_7000;
const INIT_STREAM: u64 = 0x1417_0000;
const SHUFFLE_STREAM: u64 = 0x54FF_1E00;
const RANDOM_M_STREAM: u64 = 0x0D0A_7000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: GeneratorConfig,
    pub group_epsilon: f64,
    pub sequences: Vec<String>,
    /// Annotation sets present for every sequence.
    pub annotations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: [u32; 2],
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train or test"))),
        }
    }
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub split: SplitManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest = io::read_json(&root.join(DATASET_FILE))?;
        let split: SplitManifest = io::read_json(&root.join(SPLIT_FILE))?;
        let split_path = root.join(SPLIT_FILE);
        for id in split.train.iter().chain(&split.test) {
            if !manifest.sequences.contains(id) {
                return Err(Error::data(&split_path, format!("unknown sequence {id}")));
            }
        }
        if split.train.iter().any(|id| split.test.contains(id)) {
            return Err(Error::data(&split_path, "train and test splits overlap"));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            split,
        })
    }

    pub fn seq_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Digest of the dataset manifest, used as the dataset id in reports.
    pub fn id(&self) -> Result<String> {
        Ok(digest(&io::read_bytes(&self.root.join(DATASET_FILE))?))
    }

    fn save_manifest(&self) -> Result<()> {
        io::write_json(&self.root.join(DATASET_FILE), &self.manifest)
    }
}

/// A sequence with everything needed to train or evaluate on it.
pub struct Item {
    pub seq: BurstSequence,
    pub annotation: QualityAnnotation,
    pub features: Option<Tensor<f32>>,
}

/// Loads `ids` with the `annotation` set; teacher features are loaded (or
/// recomputed when not cached) only when `features` is set.
pub fn load_items(ds: &Dataset, ids: &[String], annotation: &str, features: bool) -> Result<Vec<Item>> {
    let teacher = if features {
        Some(TeacherModel::from_id(annotation)?)
    } else {
        None
    };
    ids.iter()
        .map(|id| {
            let dir = ds.seq_dir(id);
            let seq = io::load_sequence(&dir)?;
            let annotation = io::load_annotation(&dir, annotation, seq.len())?;
            let features = match &teacher {
                None => None,
                Some(t) => {
                    let path = io::features_path(&dir, t.id());
                    Some(if path.exists() {
                        io::load_tensor(&path)?
                    } else {
                        run_teacher(t, &seq)?.features
                    })
                }
            };
            Ok(Item {
                seq,
                annotation,
                features,
            })
        })
        .collect()
}

/// Annotates one sequence with `teacher` and caches its distillation features.
fn annotate_sequence(dir: &Path, seq: &BurstSequence, gt: &Tensor<f32>, teacher: &TeacherModel, eps: f64) -> Result<()> {
    let ann = annotate_leave_one_out(teacher, seq, gt, eps)?;
    io::save_annotation(dir, &ann)?;
    io::save_tensor(&io::features_path(dir, teacher.id()), &run_teacher(teacher, seq)?.features)
}

/// Synthesises `cfg.sequences` bursts, annotates them with every configured
/// teacher and writes the train/test split.
pub fn build_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let teachers = cfg
        .teachers
        .iter()
        .map(|t| TeacherModel::from_id(t))
        .collect::<biqa_core::Result<Vec<_>>>()?;
    let eps = cfg.loss.group_epsilon;
    let mut ids = Vec::with_capacity(cfg.sequences);
    for index in 0..cfg.sequences {
        let (seq, gt) = synthesize_indexed(&cfg.generator, index as u64)?;
        let dir = out.join(&seq.id);
        io::save_sequence(&seq, Some(&gt), &dir)?;
        for teacher in &teachers {
            annotate_sequence(&dir, &seq, &gt, teacher, eps)?;
        }
        ids.push(seq.id);
    }
    let manifest = DatasetManifest {
        generator: cfg.generator.clone(),
        group_epsilon: eps,
        annotations: teachers.iter().map(|t| t.id().to_string()).collect(),
        sequences: ids.clone(),
    };
    let mut shuffled = ids;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SPLIT_STREAM)));
    let n_test = cfg.test_count(shuffled.len());
    let mut test = shuffled.split_off(shuffled.len() - n_test);
    let mut train = shuffled;
    train.sort();
    test.sort();
    let split = SplitManifest {
        seed: cfg.seed,
        ratio: cfg.split,
        train,
        test,
    };
    io::write_json(&out.join(DATASET_FILE), &manifest)?;
    io::write_json(&out.join(SPLIT_FILE), &split)?;
    Ok(Dataset {
        root: out.to_path_buf(),
        manifest,
        split,
    })
}

/// Adds (or refreshes) the annotation set of `teacher` on every sequence.
pub fn annotate_dataset(root: &Path, teacher: &str) -> Result<Dataset> {
    let mut ds = Dataset::open(root)?;
    let model = TeacherModel::from_id(teacher)?;
    for id in &ds.manifest.sequences {
        let dir = ds.seq_dir(id);
        let seq = io::load_sequence(&dir)?;
        let gt = io::load_gt(&dir)?;
        annotate_sequence(&dir, &seq, &gt, &model, ds.manifest.group_epsilon)?;
    }
    if !ds.manifest.annotations.iter().any(|a| a == teacher) {
        ds.manifest.annotations.push(teacher.to_string());
        ds.save_manifest()?;
    }
    Ok(ds)
}

/// Score file for subjective-mode training: per-sequence, per-frame scores
/// on any scale (they are min–max normalised on import).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub scores: std::collections::BTreeMap<String, Vec<f64>>,
}

pub fn import_scores(root: &Path, file: &Path, name: &str) -> Result<Dataset> {
    if TeacherModel::from_id(name).is_ok() {
        return Err(Error::Config(format!("score set name {name:?} collides with a teacher id")));
    }
    let mut ds = Dataset::open(root)?;
    let scores: ScoreFile = io::read_json(file)?;
    for id in &ds.manifest.sequences {
        let s = scores
            .scores
            .get(id)
            .ok_or_else(|| Error::data(file, format!("no scores for sequence {id}")))?;
        let dir = ds.seq_dir(id);
        let seq = io::load_sequence(&dir)?;
        if s.len() != seq.len() {
            return Err(Error::data(
                file,
                format!("{id}: {} scores for {} frames", s.len(), seq.len()),
            ));
        }
        let ann = QualityAnnotation::from_scores(name, s.clone(), ds.manifest.group_epsilon)
            .map_err(|e| Error::in_file(file, e))?;
        io::save_annotation(&dir, &ann)?;
    }
    if !ds.manifest.annotations.iter().any(|a| a == name) {
        ds.manifest.annotations.push(name.to_string());
        ds.save_manifest()?;
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_dist: f64,
    pub l_mrg: f64,
    pub l_fnl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StepLog<'a> {
    epoch: usize,
    step: u64,
    seq: &'a str,
    l_dist: f64,
    l_mrg: f64,
    l_fnl: f64,
    n_pairs: usize,
}

pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".losses.jsonl");
    PathBuf::from(s)
}

/// Trains from scratch. Writes the checkpoint after every epoch and one JSON
/// line per step to [`loss_log_path`]. Returns per-epoch mean losses.
pub fn train(cfg: &RunConfig, root: &Path, ckpt: &Path) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    let ds = Dataset::open(root)?;
    let (gh, gw) = (ds.manifest.generator.height, ds.manifest.generator.width);
    cfg.model.validate(gh, gw)?;
    if !ds.manifest.annotations.contains(&cfg.annotation) {
        return Err(Error::data(
            &root.join(DATASET_FILE),
            format!("dataset has no {:?} annotations", cfg.annotation),
        ));
    }
    let objective = cfg.mode == Mode::Objective;
    let items = load_items(&ds, &ds.split.train, &cfg.annotation, objective)?;
    if items.is_empty() {
        return Err(Error::data(&root.join(SPLIT_FILE), "train split is empty"));
    }

    let model = Model::init(&cfg.model, derive_seed(cfg.seed, INIT_STREAM));
    let mut trainer = Trainer::new(model, cfg.optimizer, cfg.loss.clone());
    let log_path = loss_log_path(ckpt);
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            derive_seed(cfg.seed, SHUFFLE_STREAM),
            epoch as u64,
        )));
        let mut sums = [0.0f64; 3];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&k| {
                    let it = &items[k];
                    Example {
                        frames: &it.seq.frames,
                        ref_index: it.seq.ref_index,
                        teacher: it.features.as_ref(),
                        scores: &it.annotation.scores,
                        groups: &it.annotation.groups,
                    }
                })
                .collect();
            let values = trainer.step_batch(&batch).map_err(|e| match e {
                biqa_core::Error::Diverged(what) => Error::Numeric(format!(
                    "epoch {epoch}, step {}: {what} became non-finite",
                    trainer.adam.step + 1
                )),
                other => Error::Core(other),
            })?;
            for (&k, v) in chunk.iter().zip(&values) {
                sums[0] += v.l_dist;
                sums[1] += v.l_mrg;
                sums[2] += v.l_fnl;
                let line = StepLog {
                    epoch,
                    step: trainer.adam.step,
                    seq: &items[k].seq.id,
                    l_dist: v.l_dist,
                    l_mrg: v.l_mrg,
                    l_fnl: v.l_fnl,
                    n_pairs: v.n_pairs,
                };
                serde_json::to_writer(&mut log, &line).expect("log line serialises");
                log.push(b'\n');
            }
        }
        let n = items.len() as f64;
        epochs.push(EpochLoss {
            epoch,
            l_dist: sums[0] / n,
            l_mrg: sums[1] / n,
            l_fnl: sums[2] / n,
        });
        Checkpoint {
            config: cfg.clone(),
            epoch: epoch + 1,
            trainer: trainer.clone(),
        }
        .save(ckpt)?;
        io::write_bytes(&log_path, &log)?;
    }
    if cfg.epochs == 0 {
        Checkpoint {
            config: cfg.clone(),
            epoch: 0,
            trainer,
        }
        .save(ckpt)?;
        io::write_bytes(&log_path, &log)?;
    }
    Ok(epochs)
}

/// Predicted scores for every item.
pub fn predict_items(model: &Model<Tensor<f32>>, items: &[Item]) -> Result<Vec<Vec<f64>>> {
    items
        .iter()
        .map(|it| {
            predict(model, &it.seq.frames, it.seq.ref_index).map_err(|e| match e {
                biqa_core::Error::Diverged(what) => Error::Numeric(format!("{}: non-finite {what}", it.seq.id)),
                other => Error::Core(other),
            })
        })
        .collect()
}

pub fn evaluate(ckpt: &Path, root: &Path, split: &str) -> Result<EvalReport> {
    let bytes = io::read_bytes(ckpt)?;
    let cp = Checkpoint::decode(&bytes, ckpt)?;
    let ds = Dataset::open(root)?;
    let ids = ds.split.ids(split)?;
    if ids.is_empty() {
        return Err(Error::data(&root.join(SPLIT_FILE), format!("{split} split is empty")));
    }
    let items = load_items(&ds, ids, &cp.config.annotation, false)?;
    let preds = predict_items(&cp.trainer.model, &items)?;
    let provenance = Provenance {
        dataset: ds.id()?,
        checkpoint: digest(&bytes),
        seed: cp.config.seed,
        split: split.to_string(),
        annotation: cp.config.annotation.clone(),
    };
    Ok(EvalReport::new(
        provenance,
        items
            .iter()
            .zip(&preds)
            .map(|(it, p)| (it.seq.id.as_str(), p.as_slice(), it.annotation.scores.as_slice())),
    ))
}

/// Writes `report` as JSON to `path` and as long-format CSV next to it.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    io::write_json(path, report)?;
    let csv_path = path.with_extension("csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sequence", "metric", "value"]).map_err(|e| Error::data(&csv_path, e))?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in &report.per_sequence {
        let mut rows = vec![("srcc".to_string(), m.srcc)];
        for (t, v) in RELAXED_THRESHOLDS.iter().zip(&m.relaxed_srcc) {
            rows.push((format!("relaxed_srcc@{t}"), *v));
        }
        rows.push(("plcc".into(), m.plcc));
        rows.push(("pairwise_accuracy".into(), m.pairwise_accuracy));
        for (name, v) in rows {
            w.write_record([m.id.as_str(), &name, &fmt(v)])
                .map_err(|e| Error::data(&csv_path, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::data(&csv_path, e.to_string()))?;
    io::write_bytes(&csv_path, &bytes)?;
    Ok(csv_path)
}

/// Indices of the `m` highest scores (ties to the lower index), ascending.
pub fn top_m(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > scores.len() {
        return Err(Error::Config(format!("M must lie in 1..={}, got {m}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..m].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

pub fn select_frames(model: &Model<Tensor<f32>>, seq: &BurstSequence, m: usize) -> Result<Vec<usize>> {
    let scores = predict(model, &seq.frames, seq.ref_index)?;
    top_m(&scores, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub m: usize,
    pub model_psnr: f64,
    pub random_psnr: f64,
    pub oracle_psnr: f64,
    pub sequences: usize,
}

/// Mean teacher PSNR on the test split when fusing the top-`M` frames picked
/// by the model, by `random_draws` uniform draws, and by the annotation.
pub fn downstream_gain(ckpt: &Path, root: &Path, teacher: &str, ms: &[usize]) -> Result<Vec<GainRow>> {
    let cp = Checkpoint::load(ckpt)?;
    let ds = Dataset::open(root)?;
    let t = TeacherModel::from_id(teacher)?;
    if !ds.manifest.annotations.iter().any(|a| a == teacher) {
        return Err(Error::data(
            &root.join(DATASET_FILE),
            format!("dataset has no {teacher:?} annotations"),
        ));
    }
    let items = load_items(&ds, &ds.split.test, teacher, false)?;
    if items.is_empty() {
        return Err(Error::data(&root.join(SPLIT_FILE), "test split is empty"));
    }
    let preds = predict_items(&cp.trainer.model, &items)?;
    let draws = cp.config.random_draws;
    let mut sums = vec![[0.0f64; 3]; ms.len()];
    for (k, (it, pred)) in items.iter().zip(&preds).enumerate() {
        let gt = io::load_gt(&ds.seq_dir(&it.seq.id))?;
        let reg = register(&t, &it.seq);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cp.config.seed, RANDOM_M_STREAM), k as u64));
        for (row, &m) in sums.iter_mut().zip(ms) {
            let fused = |keep: &[usize]| -> Result<f64> { Ok(psnr(&reg.fuse(&t, keep)?, &gt)?) };
            row[0] += fused(&top_m(pred, m)?)?;
            row[2] += fused(&top_m(&it.annotation.scores, m)?)?;
            let mut random = 0.0;
            let all: Vec<usize> = (0..it.seq.len()).collect();
            for _ in 0..draws {
                let mut keep: Vec<usize> = all.choose_multiple(&mut rng, m).copied().collect();
                keep.sort_unstable();
                random += fused(&keep)?;
            }
            row[1] += random / draws as f64;
        }
    }
    let n = items.len() as f64;
    Ok(ms
        .iter()
        .zip(sums)
        .map(|(&m, s)| GainRow {
            m,
            model_psnr: s[0] / n,
            random_psnr: s[1] / n,
            oracle_psnr: s[2] / n,
            sequences: items.len(),
        })
        .collect())
}

/// Writes the gain table as CSV plus an SVG line plot with the same stem.
pub fn write_gain(rows: &[GainRow], csv_path: &Path) -> Result<PathBuf> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(csv_path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(csv_path, e.to_string()))?;
    io::write_bytes(csv_path, &bytes)?;
    let svg_path = csv_path.with_extension("svg");
    io::write_bytes(&svg_path, gain_svg(rows).as_bytes())?;
    Ok(svg_path)
}

fn gain_svg(rows: &[GainRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let series: [(&str, &str, Vec<f64>); 3] = [
        ("model", "#1f77b4", rows.iter().map(|r| r.model_psnr).collect()),
        ("random", "#7f7f7f", rows.iter().map(|r| r.random_psnr).collect()),
        ("oracle", "#d62728", rows.iter().map(|r| r.oracle_psnr).collect()),
    ];
    let all = series.iter().flat_map(|s| s.2.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let (m0, m1) = (ms.iter().copied().fold(f64::INFINITY, f64::min), ms.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let sx = |m: f64| if m1 > m0 { pad + (m - m0) / (m1 - m0) * (w - 2.0 * pad) } else { w / 2.0 };
    let sy = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    for &m in &ms {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{m}</text>"#, sx(m), h - pad + 16.0);
    }
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, pad - 4.0, sy(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">frames kept (M)</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">PSNR (dB)</text>"#, h / 2.0, h / 2.0);
    for (k, (name, color, vals)) in series.iter().enumerate() {
        let pts: Vec<String> = ms.iter().zip(vals).map(|(&m, &v)| format!("{:.1},{:.1}", sx(m), sy(v))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, pts.join(" "));
        let ly = pad + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{name}</text>"#, w - pad - 50.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Dataset-level redundancy, truncation stability and cross-teacher analyses.
pub fn findings(root: &Path, teachers: &[String], lengths: &[usize]) -> Result<FindingReport> {
    let ds = Dataset::open(root)?;
    let models = teachers
        .iter()
        .map(|t| TeacherModel::from_id(t))
        .collect::<biqa_core::Result<Vec<_>>>()?;
    let data = ds
        .manifest
        .sequences
        .iter()
        .map(|id| {
            let dir = ds.seq_dir(id);
            Ok((io::load_sequence(&dir)?, io::load_gt(&dir)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finding_analyses(&data, &models, lengths)?)
}
