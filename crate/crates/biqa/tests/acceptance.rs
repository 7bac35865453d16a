//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use biqa::config::RunConfig;
use biqa::harness::{self, EpochLoss};
use biqa_core::burstgen::{generate_gt_image, BurstSequence, DegradationRecord};
use biqa_core::downstream::{build_groups, finding_analyses, TeacherModel};
use biqa_core::metrics::{pairwise_accuracy, plcc, relaxed_srcc, srcc, EvalReport, RELAXED_THRESHOLDS};
use biqa_core::numerics::gradcheck;
use biqa_core::numerics::{Graph, Tensor};
use biqa_core::objectives::{cross_group_pairs, margin_loss_value};
use biqa_core::tpgnet::distillation_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

fn a1() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck::suite(10, 2024).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is not empty");
    let ok = reports.iter().all(|r| r.instances == 10 && r.max_rel_error < 1e-4) && secs < 60.0;
    Ok((
        ok,
        format!(
            "{} ops x 10 instances, worst {} rel err {:.2e}, {secs:.1}s",
            reports.len(),
            worst.op,
            worst.max_rel_error
        ),
    ))
}

fn a2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();

    let geometries = [([2, 3, 8, 8], [4, 3, 3, 3], 1, 1), ([1, 2, 9, 7], [3, 2, 3, 3], 2, 1), ([2, 4, 6, 6], [2, 4, 1, 1], 1, 0)];
    for (xs, ws, stride, pad) in geometries {
        let x = Tensor::from_fn(&xs, |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&ws, |_| rng.random_range(-1.0..1.0));
        let (want, shape) = oracles::conv2d(x.data(), xs, w.data(), ws, stride, pad);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.input(x), g.input(w));
        let y = g.conv2d(xv, wv, stride, pad).map_err(err)?;
        let got = g.value(y);
        let ok = got.shape() == shape && got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-5 * b.abs().max(1.0));
        if !ok {
            failures.push(format!("conv {xs:?}"));
        }
    }

    let mut cases = 0usize;
    for n in 2..=14 {
        for trial in 0..100 {
            let levels: u32 = if trial % 2 == 0 { 1 << 20 } else { 5 };
            let draw = |rng: &mut ChaCha8Rng| rng.random_range(0..levels) as f64 / levels as f64;
            let p: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
            let gt: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
            cases += 1;
            if !close(srcc(&p, &gt), oracles::spearman(&p, &gt), 1e-12) {
                failures.push(format!("srcc n={n}"));
            }
            if !close(plcc(&p, &gt), oracles::pearson(&p, &gt), 1e-12) {
                failures.push(format!("plcc n={n}"));
            }
            for &t in &RELAXED_THRESHOLDS {
                if !close(relaxed_srcc(&p, &gt, t), oracles::relaxed_spearman(&p, &gt, t), 1e-12) {
                    failures.push(format!("relaxed_srcc n={n} t={t}"));
                }
            }
            if !close(pairwise_accuracy(&p, &gt), oracles::pairwise_accuracy(&p, &gt), 1e-12) {
                failures.push(format!("pairwise n={n}"));
            }
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let groups = build_groups(&gt, 0.02);
            let (pairs, want) = oracles::margin(&gt, &pred, &groups);
            let got_pairs = cross_group_pairs(&gt, &groups).map_err(err)?;
            let (got, count) = margin_loss_value(&gt, &pred, &groups).map_err(err)?;
            if got_pairs != pairs || count != pairs.len() || (got - want).abs() > 1e-12 {
                failures.push(format!("margin n={n}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 30.0;
    let detail = if failures.is_empty() {
        format!("3 conv geometries, {cases} metric/margin cases for lengths 2..=14, {secs:.1}s")
    } else {
        format!("{} mismatches, first: {}", failures.len(), failures[0])
    };
    Ok((ok, detail))
}

struct Trained {
    epochs: Vec<EpochLoss>,
    train_secs: f64,
    report: EvalReport,
}

fn train_and_eval(cfg: &RunConfig, data: &Path, ckpt: &Path) -> Result<Trained, String> {
    let start = Instant::now();
    let epochs = harness::train(cfg, data, ckpt).map_err(err)?;
    let train_secs = start.elapsed().as_secs_f64();
    let report = harness::evaluate(ckpt, data, "test").map_err(err)?;
    Ok(Trained {
        epochs,
        train_secs,
        report,
    })
}

fn a3(run: &Trained, gen_secs: f64) -> Outcome {
    let first = run.epochs.first().ok_or("no epochs")?.l_mrg;
    let last = run.epochs.last().ok_or("no epochs")?.l_mrg;
    let total = gen_secs + run.train_secs;
    let ok = run.epochs.len() == 20 && last <= 0.5 * first && total < 15.0 * 60.0;
    Ok((
        ok,
        format!(
            "l_mrg epoch 1 {first:.5} -> epoch {} {last:.5} (ratio {:.3}), data {gen_secs:.0}s + train {:.0}s",
            run.epochs.len(),
            last / first,
            run.train_secs
        ),
    ))
}

fn a4(report: &EvalReport) -> Outcome {
    let srcc = report.aggregate.srcc.ok_or("test SRCC undefined")?;
    let mut monotone = 0usize;
    for s in &report.per_sequence {
        let vals: Vec<f64> = s.relaxed_srcc.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        if vals.windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
    }
    let n = report.per_sequence.len();
    let frac = monotone as f64 / n as f64;
    Ok((
        srcc >= 0.8 && frac >= 0.95,
        format!("test SRCC {srcc:.4} over {n} sequences, relaxed SRCC non-decreasing on {monotone}/{n} ({:.1}%)", 100.0 * frac),
    ))
}

fn a5(data: &Path, ckpt: &Path, frames: usize) -> Outcome {
    let rows = harness::downstream_gain(ckpt, data, "denoise", &[frames - 1]).map_err(err)?;
    let r = &rows[0];
    let ok = r.model_psnr >= r.random_psnr + 0.2 && r.oracle_psnr - r.model_psnr <= 0.2;
    Ok((
        ok,
        format!(
            "M={} over {} sequences: model {:.3} dB, random {:.3} dB (+{:.3}), oracle {:.3} dB (gap {:.3})",
            r.m,
            r.sequences,
            r.model_psnr,
            r.random_psnr,
            r.model_psnr - r.random_psnr,
            r.oracle_psnr,
            r.oracle_psnr - r.model_psnr
        ),
    ))
}

fn a6(cfg: &RunConfig, data: &Path, dir: &Path, full: &EvalReport) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::from_fn(&[3, 8, 4, 4], |_| rng.random_range(-1.0..1.0)));
    let b = g.input(Tensor::from_fn(&[3, 8, 4, 4], |_| rng.random_range(-1.0..1.0)));
    let l = distillation_loss(&mut g, (a, b), (a, b)).map_err(err)?;
    let equal = g.value(l).item();

    let mut min = f64::INFINITY;
    for _ in 0..1000 {
        let shape = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6)];
        let scale = rng.random_range(0.1..20.0);
        let mut g = Graph::<f64>::new();
        let mut draw = |g: &mut Graph<f64>| g.input(Tensor::from_fn(&shape, |_| scale * rng.random_range(-1.0..1.0)));
        let (s1, s2, t1, t2) = (draw(&mut g), draw(&mut g), draw(&mut g), draw(&mut g));
        let l = distillation_loss(&mut g, (s1, s2), (t1, t2)).map_err(err)?;
        min = min.min(g.value(l).item());
    }

    let mut ablated = cfg.clone();
    ablated.loss.alpha = 0.0;
    let run = train_and_eval(&ablated, data, &dir.join("alpha0.biqc"))?;
    let with = full.aggregate.srcc.ok_or("SRCC undefined")?;
    let without = run.report.aggregate.srcc.ok_or("ablation SRCC undefined")?;
    Ok((
        equal == 0.0 && min >= 0.0,
        format!(
            "L_Dist(equal) = {equal}, min over 1000 random = {min:.3e}; ablation SRCC alpha={} {with:.4} vs alpha=0 {without:.4} (delta {:+.4})",
            cfg.loss.alpha,
            with - without
        ),
    ))
}

fn identical_sequence(seed: u64, frames: usize, side: usize) -> (BurstSequence, Tensor<f32>) {
    let gt = generate_gt_image(seed, side, side);
    let record = DegradationRecord {
        shift: (0, 0),
        blur_sigma: 0.0,
        noise_gain: 0.0,
        read_sigma: 0.0,
        corruption_level: 0.0,
    };
    let seq = BurstSequence {
        id: format!("identical{seed}"),
        frames: Tensor::stack(&vec![gt.clone(); frames]).expect("equal shapes"),
        ref_index: 0,
        meta: vec![record; frames],
        planted_index: None,
    };
    (seq, gt)
}

fn a7(data: &Path) -> Outcome {
    let teachers = [TeacherModel::denoise(), TeacherModel::superres()];
    let same: Vec<_> = (0..100).map(|s| identical_sequence(s, 8, 32)).collect();
    let report = finding_analyses(&same, &teachers, &[8, 6, 4]).map_err(err)?;
    let redundancy_ok = report.redundancy.iter().all(|(_, r)| *r == 1.0);

    let names = ["denoise".to_string(), "superres".to_string()];
    let planted = harness::findings(data, &names, &[8, 6, 4]).map_err(err)?;
    let stable_ok = planted.rank_stability.len() == 3 && planted.rank_stability.iter().all(|p| p.plcc.is_some_and(|v| v > 0.7));
    let redundancy: Vec<String> = report.redundancy.iter().map(|(t, r)| format!("{t} {r}")).collect();
    let stability: Vec<String> = planted
        .rank_stability
        .iter()
        .map(|p| format!("{}v{} {}", p.lengths.0, p.lengths.1, p.plcc.map_or("n/a".into(), |v| format!("{v:.3}"))))
        .collect();
    Ok((
        redundancy_ok && stable_ok,
        format!("redundancy on 100 identical sequences: {}; rank-stability PLCC: {}", redundancy.join(", "), stability.join(", ")),
    ))
}

fn a8(dir: &Path) -> Outcome {
    let cfg = RunConfig {
        sequences: 10,
        epochs: 2,
        generator: biqa_core::burstgen::GeneratorConfig {
            frames: 6,
            height: 32,
            width: 32,
            ..RunConfig::default().generator
        },
        ..RunConfig::default()
    };
    let mut outputs = Vec::new();
    for run in ["run1", "run2"] {
        let root = dir.join(run);
        let data = root.join("data");
        harness::build_dataset(&cfg, &data).map_err(err)?;
        let ckpt = root.join("model.biqc");
        harness::train(&cfg, &data, &ckpt).map_err(err)?;
        let report = harness::evaluate(&ckpt, &data, "test").map_err(err)?;
        let json = root.join("report.json");
        let csv = harness::write_report(&report, &json).map_err(err)?;
        let read = |p: &Path| std::fs::read(p).map_err(err);
        outputs.push([read(&harness::loss_log_path(&ckpt))?, read(&json)?, read(&csv)?]);
    }
    let same: Vec<bool> = (0..3).map(|k| outputs[0][k] == outputs[1][k]).collect();
    Ok((
        same.iter().all(|&s| s),
        format!("loss log identical: {}, report json identical: {}, report csv identical: {}", same[0], same[1], same[2]),
    ))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.biqc");
    let cfg = RunConfig::default();

    let mut results: Vec<(&str, Outcome)> = vec![("A1", a1()), ("A2", a2())];

    let start = Instant::now();
    let built = harness::build_dataset(&cfg, &data);
    let gen_secs = start.elapsed().as_secs_f64();
    let trained = built.map_err(err).and_then(|_| train_and_eval(&cfg, &data, &ckpt));
    match &trained {
        Ok(run) => {
            results.push(("A3", a3(run, gen_secs)));
            results.push(("A4", a4(&run.report)));
            results.push(("A5", a5(&data, &ckpt, cfg.generator.frames)));
            results.push(("A6", a6(&cfg, &data, dir.path(), &run.report)));
            results.push(("A7", a7(&data)));
        }
        Err(e) => {
            for name in ["A3", "A4", "A5", "A6", "A7"] {
                results.push((name, Err(format!("full-scale run failed: {e}"))));
            }
        }
    }
    results.push(("A8", a8(dir.path())));

    let mut all = true;
    for (name, outcome) in &results {
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (*ok, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        all &= ok;
        println!("{name} {}  {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
