//! Central finite-difference gradient checks.
//!
//! The function under test maps inputs to a tensor `y`; it is reduced to the
//! scalar `mean(y ⊙ R)` with a fixed random `R`, so every output element
//! contributes with a distinct weight. The reported error for one input is
//! `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` over the checked coordinates (0 when both
//! are zero), and the check returns the maximum over inputs.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates checked per input; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_coords: 64,
            seed: 0,
        }
    }
}

impl GradCheck {
    /// Maximum relative error of the analytic gradient of `f` at `inputs`.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<f64>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let y = f(&mut g, &vars)?;
            g.value(y).shape().to_vec()
        };
        let r = Tensor::from_fn(&probe, |_| rng.random_range(-1.0..1.0));

        let reduce = |g: &mut Graph<f64>, y: Var| -> Result<Var> {
            let rv = g.input(r.clone());
            let yr = g.mul(y, rv)?;
            g.mean(yr, &[])
        };
        let loss_at = |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
            let y = f(&mut g, &vars)?;
            let l = reduce(&mut g, y)?;
            Ok(g.value(l).item())
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        let l = reduce(&mut g, y)?;
        g.backward(l)?;
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

        let mut worst = 0.0f64;
        let mut xs = inputs.to_vec();
        for k in 0..inputs.len() {
            let n = inputs[k].numel();
            let coords: Vec<usize> = if n <= self.max_coords {
                (0..n).collect()
            } else {
                sample(&mut rng, n, self.max_coords).into_vec()
            };
            let (mut diff, mut scale) = (0.0f64, 0.0f64);
            for i in coords {
                let x0 = inputs[k].data()[i];
                xs[k].data_mut()[i] = x0 + self.step;
                let up = loss_at(&xs)?;
                xs[k].data_mut()[i] = x0 - self.step;
                let down = loss_at(&xs)?;
                xs[k].data_mut()[i] = x0;
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic[k].data()[i];
                diff = diff.max((a - numeric).abs());
                scale = scale.max(a.abs()).max(numeric.abs());
            }
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            }
        }
        Ok(worst)
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Worst relative error of one operation over several random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for kinks at the origin.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(lo..=hi)).collect()
}

type Case = (Vec<Tensor<f64>>, Build);

fn case_for(op: &str, rng: &mut ChaCha8Rng) -> Case {
    use crate::tpgnet::{binary_kl, distillation_loss};
    let nchw = |rng: &mut ChaCha8Rng| dims(rng, 4, 1, 4);
    match op {
        "conv2d" => {
            let (n, c, o) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2);
            let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
            let x = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            let wt = uniform(rng, &[o, c, k, k], -1.0, 1.0);
            (vec![x, wt], Box::new(move |g, v| g.conv2d(v[0], v[1], stride, pad)))
        }
        "add_bias" => {
            let s = nchw(rng);
            let (x, b) = (uniform(rng, &s, -1.0, 1.0), uniform(rng, &[s[1]], -1.0, 1.0));
            (vec![x, b], Box::new(|g, v| g.add_bias(v[0], v[1])))
        }
        "linear" => {
            let (n, i, o) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
            let xs = vec![
                uniform(rng, &[n, i], -1.0, 1.0),
                uniform(rng, &[o, i], -1.0, 1.0),
                uniform(rng, &[o], -1.0, 1.0),
            ];
            (xs, Box::new(|g, v| g.linear(v[0], v[1], v[2])))
        }
        "relu" => {
            let s = nchw(rng);
            (vec![off_zero(rng, &s)], Box::new(|g, v| Ok(g.relu(v[0]))))
        }
        "add" | "sub" | "mul" => {
            let s = dims(rng, 3, 1, 4);
            let (a, b) = (uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0));
            let f: Build = match op {
                "add" => Box::new(|g, v| g.add(v[0], v[1])),
                "sub" => Box::new(|g, v| g.sub(v[0], v[1])),
                _ => Box::new(|g, v| g.mul(v[0], v[1])),
            };
            (vec![a, b], f)
        }
        "add_broadcast" => {
            let s = dims(rng, 3, 1, 4);
            let (a, b) = (uniform(rng, &s, -1.0, 1.0), uniform(rng, &s[1..], -1.0, 1.0));
            (vec![a, b], Box::new(|g, v| g.add(v[0], v[1])))
        }
        "affine" => {
            let s = dims(rng, 2, 1, 5);
            let (scale, shift) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |g, v| Ok(g.affine(v[0], scale, shift))))
        }
        "scale_by" => {
            let s = dims(rng, 3, 1, 4);
            let (x, w) = (uniform(rng, &s, -1.0, 1.0), uniform(rng, &s[..1], -1.0, 1.0));
            (vec![x, w], Box::new(|g, v| g.scale_by(v[0], v[1])))
        }
        "concat" => {
            let s = dims(rng, 3, 1, 3);
            let axis = rng.random_range(0..3);
            let mut s2 = s.clone();
            s2[axis] = rng.random_range(1..=3);
            let (a, b) = (uniform(rng, &s, -1.0, 1.0), uniform(rng, &s2, -1.0, 1.0));
            (vec![a, b], Box::new(move |g, v| g.concat(&[v[0], v[1]], axis)))
        }
        "mean" => {
            let s = dims(rng, 3, 1, 4);
            let axes: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
            (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |g, v| g.mean(v[0], &axes)))
        }
        "global_avg_pool" => {
            let s = nchw(rng);
            (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.global_avg_pool(v[0])))
        }
        "avg_pool2" => {
            let mut s = nchw(rng);
            s[2] *= 2;
            s[3] *= 2;
            (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.avg_pool2(v[0])))
        }
        "upsample_nearest" => {
            let s = nchw(rng);
            let f = rng.random_range(1..=3);
            (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |g, v| g.upsample_nearest(v[0], f)))
        }
        "softmax" => {
            let s = dims(rng, 3, 1, 5);
            let axis = rng.random_range(0..3);
            (vec![uniform(rng, &s, -3.0, 3.0)], Box::new(move |g, v| g.softmax(v[0], axis)))
        }
        "select" => {
            let s = dims(rng, 3, 1, 4);
            let axis = rng.random_range(0..3);
            let idx: Vec<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..s[axis])).collect();
            (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |g, v| g.select(v[0], axis, &idx)))
        }
        "ln" => {
            let s = dims(rng, 2, 1, 5);
            (vec![uniform(rng, &s, 0.2, 3.0)], Box::new(|g, v| g.ln(v[0])))
        }
        "clamp" => {
            let s = dims(rng, 2, 2, 5);
            // values sit at least 0.05 from either bound
            let x = Tensor::from_fn(&s, |_| {
                let band = rng.random_range(0..3);
                rng.random_range(0.0..0.4) + [-1.0, -0.2, 0.6][band]
            });
            (vec![x], Box::new(|g, v| Ok(g.clamp(v[0], -0.25, 0.55))))
        }
        "reshape" => {
            let s = dims(rng, 3, 1, 4);
            let flat = [s[0] * s[1], s[2]];
            (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |g, v| g.reshape(v[0], &flat)))
        }
        "binary_kl" => {
            let s = dims(rng, 2, 1, 6);
            let (ds, dt) = (uniform(rng, &s, 0.05, 0.95), uniform(rng, &s, 0.05, 0.95));
            (vec![ds, dt], Box::new(|g, v| binary_kl(g, v[0], v[1])))
        }
        "distillation_loss" => {
            let s = nchw(rng);
            let xs = (0..4).map(|_| uniform(rng, &s, -1.0, 1.0)).collect();
            (xs, Box::new(|g, v| distillation_loss(g, (v[0], v[1]), (v[2], v[3]))))
        }
        "margin_loss" => {
            let t = rng.random_range(3..=14);
            let scores: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let groups = crate::downstream::build_groups(&scores, 0.02);
            // keep every hinge away from its kink
            let pred = loop {
                let p: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
                let pairs = crate::objectives::cross_group_pairs(&scores, &groups).expect("valid groups");
                if pairs.iter().all(|&(i, j)| ((scores[i] - scores[j]) - (p[i] - p[j])).abs() > 0.01) {
                    break p;
                }
            };
            let pred = Tensor::from_f64(&[t], &pred).expect("shape");
            (
                vec![pred],
                Box::new(move |g, v| crate::objectives::margin_loss(g, v[0], &scores, &groups).map(|r| r.0)),
            )
        }
        "attention_fusion" => {
            let (t, d, k) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=4));
            let mut xs = vec![uniform(rng, &[t, k], -2.0, 2.0)];
            xs.extend((0..k).map(|_| uniform(rng, &[t, d], -1.0, 1.0)));
            (
                xs,
                Box::new(move |g, v| {
                    let w = g.softmax(v[0], 1)?;
                    let mut acc = None;
                    for (j, &p) in v[1..].iter().enumerate() {
                        let wj = g.select(w, 1, &[j])?;
                        let wj = g.reshape(wj, &[t])?;
                        let term = g.scale_by(p, wj)?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => g.add(a, term)?,
                        });
                    }
                    Ok(acc.expect("k ≥ 2"))
                }),
            )
        }
        other => unreachable!("no gradient case for {other}"),
    }
}

/// Every differentiable operation of the graph plus the composite losses.
pub const OPS: &[&str] = &[
    "conv2d",
    "add_bias",
    "linear",
    "relu",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "affine",
    "scale_by",
    "concat",
    "mean",
    "global_avg_pool",
    "avg_pool2",
    "upsample_nearest",
    "softmax",
    "select",
    "ln",
    "clamp",
    "reshape",
    "binary_kl",
    "distillation_loss",
    "margin_loss",
    "attention_fusion",
];

/// Runs `instances` random checks of every entry of [`OPS`].
pub fn suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (inputs, f) = case_for(op, &mut rng);
                let check = GradCheck {
                    seed: rng.random(),
                    ..GradCheck::default()
                };
                let err = check.run(&inputs, f)?;
                worst = worst.max(err);
            }
            Ok(OpReport {
                op,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}
