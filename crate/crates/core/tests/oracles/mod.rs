//! Brute-force reference implementations, written independently of the
//! library code and shared by the integration and acceptance tests.
#![allow(dead_code)]

/// Direct convolution, `x: N×C×H×W`, `w: O×C×K×K`, zero padding.
pub fn conv2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, c2, kh, kw] = ws;
    assert_eq!(c, c2);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for x0 in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x0 * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + x0] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Rank of each element counted directly: 1 + #smaller + (#equal − 1)/2.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let smaller = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation via the pairwise-difference identity
/// `Σ_{i<j} ΔaΔb / sqrt(Σ Δa² Σ Δb²)`.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let (da, db) = (a[i] - a[j], b[i] - b[j]);
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

pub fn relaxed_spearman(pred: &[f64], gt: &[f64], t: f64) -> Option<f64> {
    let snapped: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if (p - g).abs() <= t { g } else { p })
        .collect();
    spearman(&snapped, gt)
}

pub fn pairwise_accuracy(pred: &[f64], gt: &[f64]) -> Option<f64> {
    let (mut hits, mut pairs) = (0.0, 0usize);
    for i in 0..gt.len() {
        for j in 0..gt.len() {
            if gt[i] > gt[j] {
                pairs += 1;
                if pred[i] > pred[j] {
                    hits += 1.0;
                } else if pred[i] == pred[j] {
                    hits += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| hits / pairs as f64)
}

/// All ordered pairs `(i, j)` with `S_i > S_j` whose frames sit in different
/// groups, `i` outer and `j` inner, plus the mean hinge over them.
pub fn margin(scores: &[f64], pred: &[f64], groups: &[Vec<usize>]) -> (Vec<(usize, usize)>, f64) {
    let same_group = |i: usize, j: usize| groups.iter().any(|g| g.contains(&i) && g.contains(&j));
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if i != j && !same_group(i, j) && scores[i] > scores[j] {
                pairs.push((i, j));
                total += f64::max(0.0, (scores[i] - scores[j]) - (pred[i] - pred[j]));
            }
        }
    }
    let mean = if pairs.is_empty() { 0.0 } else { total / pairs.len() as f64 };
    (pairs, mean)
}

/// Mean squared error in two passes over the data, then PSNR for unit peak.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mut sq = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        sq.push(d * d);
    }
    let mse = sq.iter().sum::<f64>() / sq.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}
