use biqa_core::burstgen::{generate_gt_image, synthesize_indexed, GeneratorConfig, Range};

fn clean(frames: usize, shift_range: usize) -> GeneratorConfig {
    GeneratorConfig {
        frames,
        height: 32,
        width: 32,
        shift_range,
        blur_sigma: Range::new(0.0, 0.0),
        noise_gain: Range::new(0.0, 0.0),
        read_sigma: Range::new(0.0, 0.0),
        ..GeneratorConfig::default()
    }
}

/// Normalised cross-correlation of `frame(y, x)` with `reference(y + dy, x + dx)`
/// over the overlap.
fn ncc(frame: &[f32], reference: &[f32], c: usize, h: usize, w: usize, dx: i32, dy: i32) -> f64 {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for ch in 0..c {
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let (ry, rx) = (y + dy, x + dx);
                if ry < 0 || rx < 0 || ry >= h as i32 || rx >= w as i32 {
                    continue;
                }
                a.push(frame[(ch * h + y as usize) * w + x as usize] as f64);
                b.push(reference[(ch * h + ry as usize) * w + rx as usize] as f64);
            }
        }
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn correlation_peak_sits_at_the_recorded_shift() {
    let cfg = clean(8, 4);
    let mut found = 0;
    for index in 0..200 {
        let (seq, _) = synthesize_indexed(&cfg, index).unwrap();
        let (c, h, w) = seq.dims();
        for i in 1..seq.len() {
            if seq.meta[i].shift != (2, 0) {
                continue;
            }
            let mut best = ((0, 0), f64::NEG_INFINITY);
            for dy in -4..=4 {
                for dx in -4..=4 {
                    let r = ncc(seq.frame(i), seq.frame(seq.ref_index), c, h, w, dx, dy);
                    if r > best.1 {
                        best = ((dx, dy), r);
                    }
                }
            }
            assert_eq!(best.0, (2, 0), "{} frame {i}", seq.id);
            found += 1;
        }
        if found >= 3 {
            return;
        }
    }
    panic!("no frame with shift (2, 0) generated");
}

#[test]
fn ground_truth_images_have_texture() {
    let mut min_std = f64::INFINITY;
    for seed in 0..100 {
        let img = generate_gt_image(seed, 64, 64);
        let v = img.to_f64_vec();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        min_std = min_std.min(std);
    }
    assert!(min_std > 0.05, "{min_std}");
}

#[test]
fn indexed_sequences_are_reproducible_and_distinct() {
    let cfg = GeneratorConfig {
        frames: 5,
        height: 16,
        width: 16,
        planted_outlier_prob: 0.5,
        ..GeneratorConfig::default()
    };
    let a = synthesize_indexed(&cfg, 3).unwrap();
    assert_eq!(a, synthesize_indexed(&cfg, 3).unwrap());
    assert_ne!(a.0.frames, synthesize_indexed(&cfg, 4).unwrap().0.frames);
    a.0.validate().unwrap();
    assert_eq!(a.0.meta[a.0.ref_index].shift, (0, 0));
}
