use biqa_core::burstgen::{generate_gt_image, synthesize_indexed, GeneratorConfig};
use biqa_core::downstream::{annotate_leave_one_out, build_groups, run_teacher, TeacherModel};
use biqa_core::model::{loss_and_grads, predict, Example, Model, ModelConfig};
use biqa_core::nn::Conv;
use biqa_core::numerics::gradcheck::GradCheck;
use biqa_core::numerics::{Graph, Tensor, Var};
use biqa_core::objectives::LossConfig;
use biqa_core::qanet::{self, SCALES};
use biqa_core::tpgnet::{
    binary_kl, distillation_loss, distillation_maps, forward_prompt, identity_projection, spatial_distribution,
    tsnet_project,
};
use biqa_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 32;

fn model(seed: u64) -> Model<Tensor<f64>> {
    Model::init(&ModelConfig::default(), seed)
}

fn bind(g: &mut Graph<f64>, m: &Model<Tensor<f64>>) -> Model<Var> {
    m.map(&mut |_, t| g.input(t.clone()))
}

/// `t` copies of one ground-truth crop.
fn identical_frames(t: usize, seed: u64) -> Tensor<f64> {
    let img = generate_gt_image(seed, SIDE, SIDE).cast::<f64>();
    Tensor::stack(&vec![img; t]).unwrap()
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize) -> Tensor<f64> {
    Tensor::from_fn(&[t, 3, SIDE, SIDE], |_| rng.random())
}

fn frame_mean_abs(x: &Tensor<f64>, i: usize) -> f64 {
    let per = x.numel() / x.shape()[0];
    x.data()[i * per..(i + 1) * per].iter().map(|v| v.abs()).sum::<f64>() / per as f64
}

#[test]
fn identical_frames_give_zero_prompt() {
    let m = model(1);
    let mut g = Graph::new();
    let p = bind(&mut g, &m);
    let x = g.input(identical_frames(4, 3));
    let act = forward_prompt(&mut g, &p.tpg, x, 0).unwrap();
    assert!(g.value(act.prompt).data().iter().all(|&v| v == 0.0));
}

#[test]
fn reference_prompt_is_zero_for_any_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..3 {
        let m = model(seed);
        let mut g = Graph::new();
        let p = bind(&mut g, &m);
        let x = g.input(random_frames(&mut rng, 4));
        let act = forward_prompt(&mut g, &p.tpg, x, 2).unwrap();
        assert_eq!(frame_mean_abs(g.value(act.prompt), 2), 0.0);
        assert!(frame_mean_abs(g.value(act.prompt), 1) > 0.0);
    }
}

#[test]
fn perturbed_frame_has_the_strongest_prompt() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let mut frames = identical_frames(4, seed);
        let per = frames.numel() / 4;
        for v in &mut frames.data_mut()[2 * per..3 * per] {
            let n: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            *v += 0.1 * n;
        }
        let m = model(100 + seed);
        let mut g = Graph::new();
        let p = bind(&mut g, &m);
        let x = g.input(frames);
        let act = forward_prompt(&mut g, &p.tpg, x, 0).unwrap();
        let pv = g.value(act.prompt);
        let noisy = frame_mean_abs(pv, 2);
        for i in [1, 3] {
            assert!(noisy > frame_mean_abs(pv, i), "init {seed}");
        }
    }
}

#[test]
fn distillation_map_examples() {
    let mut g = Graph::new();
    // T=2, C=2, 1×1: reference [1, 2], frame 1 [3, −1]
    let f = g.input(Tensor::from_f64(&[2, 2, 1, 1], &[1., 2., 3., -1.]).unwrap());
    let (sim, diff) = distillation_maps(&mut g, f, 0).unwrap();
    assert_eq!(g.value(sim).data(), &[1., 4., 3., -2.]);
    assert_eq!(g.value(diff).data(), &[0., 0., -2., 3.]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[3, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
    let xv = g.input(x.clone());
    let (sim, diff) = distillation_maps(&mut g, xv, 1).unwrap();
    let per = 2 * 16;
    for t in 0..3 {
        for k in 0..per {
            let (r, v) = (x.data()[per + k], x.data()[t * per + k]);
            assert_eq!(g.value(sim).data()[t * per + k], r * v);
            assert_eq!(g.value(diff).data()[t * per + k], r - v);
        }
    }
}

#[test]
fn tsnet_identity_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let id = identity_projection::<f64>(3);
    let id = id.map("id", &mut |_, t| g.input(t.clone()));
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random());
    let y = tsnet_project(&mut g, &id, &x, 8, 8).unwrap();
    assert_eq!(g.value(y), &x);

    let m = model(1);
    let p = bind(&mut g, &m);
    let c = Tensor::full(&[2, 3, 5, 7], 0.3);
    let y = tsnet_project(&mut g, &p.tpg.tsnet, &c, 16, 16).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[2, 16, 16, 16]);
    for plane in v.data().chunks(256) {
        assert!(plane.iter().all(|&u| u == plane[0]));
    }
}

#[test]
fn tsnet_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let teacher = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.random());
        let w = Tensor::from_fn(&[4, 3, 1, 1], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0));
        let err = GradCheck::default()
            .run(&[w, b], |g, v| {
                let conv = Conv {
                    weight: v[0],
                    bias: v[1],
                    stride: 1,
                    padding: 0,
                };
                tsnet_project(g, &conv, &teacher, 4, 4)
            })
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

fn kl_of(student: &[f64], teacher: &[f64], shape: &[usize]) -> f64 {
    let mut g = Graph::new();
    let s = g.input(Tensor::from_f64(shape, student).unwrap());
    let t = g.input(Tensor::from_f64(shape, teacher).unwrap());
    let (ds, dt) = (spatial_distribution(&mut g, s).unwrap(), spatial_distribution(&mut g, t).unwrap());
    let kl = binary_kl(&mut g, ds, dt).unwrap();
    g.value(kl).item()
}

#[test]
fn binary_kl_two_element_example() {
    // student logits [0, 0], teacher logits [1, 0]; extended-precision value
    let want = 0.110_944_071_671_727_354_619_395_868_312_157;
    assert!((kl_of(&[0., 0.], &[1., 0.], &[1, 1, 1, 2]) - want).abs() < 1e-9);
}

#[test]
fn distillation_loss_vanishes_on_equal_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let a = g.input(Tensor::from_fn(&[3, 4, 5, 5], |_| rng.random_range(-1.0..1.0)));
    let b = g.input(Tensor::from_fn(&[3, 4, 5, 5], |_| rng.random_range(-1.0..1.0)));
    let l = distillation_loss(&mut g, (a, b), (a, b)).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn distillation_loss_nonnegative_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let shape = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
        let scale = rng.random_range(0.1..20.0);
        let mut g = Graph::<f64>::new();
        let mut draw = |g: &mut Graph<f64>| g.input(Tensor::from_fn(&shape, |_| scale * rng.random_range(-1.0..1.0)));
        let (a, b, c, d) = (draw(&mut g), draw(&mut g), draw(&mut g), draw(&mut g));
        let l = distillation_loss(&mut g, (a, b), (c, d)).unwrap();
        assert!(g.value(l).item() >= 0.0);
    }
}

proptest! {
    #[test]
    fn binary_kl_is_nonnegative(v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)) {
        let (s, t): (Vec<f64>, Vec<f64>) = v.into_iter().map(|(a, b)| (a.clamp(1e-7, 1.0 - 1e-7), b.clamp(1e-7, 1.0 - 1e-7))).unzip();
        let mut g = Graph::<f64>::new();
        let sv = g.input(Tensor::from_f64(&[s.len()], &s).unwrap());
        let tv = g.input(Tensor::from_f64(&[t.len()], &t).unwrap());
        let kl = binary_kl(&mut g, sv, tv).unwrap();
        prop_assert!(g.value(kl).item() >= -1e-15);
    }
}

#[test]
fn zero_adapters_reproduce_the_unprompted_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut m = model(2);
    m.qa.zero_adapters();
    let mut g = Graph::new();
    let p = bind(&mut g, &m);
    let x = g.input(random_frames(&mut rng, 3));
    let act = forward_prompt(&mut g, &p.tpg, x, 0).unwrap();
    let with = qanet::extract_features(&mut g, &p.qa, x, Some(act.prompt)).unwrap();
    let without = qanet::extract_features(&mut g, &p.qa, x, None).unwrap();
    for (a, b) in with.iter().zip(&without) {
        assert_eq!(g.value(*a), g.value(*b));
    }
    let shapes: Vec<Vec<usize>> = with.iter().map(|v| g.shape(*v).to_vec()).collect();
    assert_eq!(shapes, vec![vec![3, 16, 8, 8], vec![3, 32, 4, 4], vec![3, 64, 2, 2], vec![3, 128, 1, 1]]);
}

#[test]
fn identical_frames_give_identical_features_and_scores() {
    let m = model(3);
    let frames = identical_frames(4, 11);
    let mut g = Graph::new();
    let p = bind(&mut g, &m);
    let x = g.input(frames.clone());
    let act = forward_prompt(&mut g, &p.tpg, x, 0).unwrap();
    let qa = qanet::forward_qa(&mut g, &p.qa, x, act.prompt).unwrap();
    for f in qa.features {
        let v = g.value(f);
        let per = v.numel() / 4;
        for t in 1..4 {
            assert_eq!(&v.data()[..per], &v.data()[t * per..(t + 1) * per]);
        }
    }
    let s = predict(&m, &frames.cast(), 0).unwrap();
    assert_eq!(s.len(), 4);
    assert!(s.iter().all(|&v| v == s[0]));
}

#[test]
fn attention_weight_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = model(4);
    m.qa.wg2.weight.data_mut().fill(0.0);
    m.qa.wg2.bias.data_mut().fill(0.0);
    let mut g = Graph::new();
    let p = bind(&mut g, &m);
    let prompt = g.input(Tensor::from_fn(&[3, 16, 16, 16], |_| rng.random_range(-1.0..1.0)));
    let w = qanet::attention_weights(&mut g, &p.qa, prompt).unwrap();
    assert!(g.value(w).data().iter().all(|&v| v == 0.25));

    let m = model(5);
    let p = bind(&mut g, &m);
    let w = qanet::attention_weights(&mut g, &p.qa, prompt).unwrap();
    for row in g.value(w).data().chunks(SCALES) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let logits = g.input(Tensor::from_f64(&[1, 4], &[2., 0., 0., 0.]).unwrap());
    let w = g.softmax(logits, 1).unwrap();
    let want = 0.711_234_594_227_593_859_942_056_149_222_2;
    assert!((g.value(w).data()[0] - want).abs() < 1e-9);
}

#[test]
fn fusion_selects_convex_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = model(6);
    let mut g = Graph::new();
    let p = bind(&mut g, &m);
    let widths = [16, 32, 64, 128];
    let feats: [Var; SCALES] =
        std::array::from_fn(|k| g.input(Tensor::from_fn(&[2, widths[k], 2, 2], |_| rng.random_range(-1.0..1.0))));

    for k in 0..SCALES {
        let onehot: Vec<f64> = (0..2 * SCALES).map(|i| f64::from(u8::from(i % SCALES == k))).collect();
        let w = g.input(Tensor::from_f64(&[2, SCALES], &onehot).unwrap());
        let (proj, fused) = qanet::fuse(&mut g, &p.qa, &feats, w).unwrap();
        assert_eq!(g.value(fused), g.value(proj[k]));
    }

    let wv: Vec<f64> = (0..2 * SCALES).map(|_| rng.random()).collect();
    let w = g.input(Tensor::from_f64(&[2, SCALES], &wv).unwrap());
    let (proj, fused) = qanet::fuse(&mut g, &p.qa, &feats, w).unwrap();
    let d = g.shape(fused)[1];
    for t in 0..2 {
        for j in 0..d {
            let want: f64 = (0..SCALES).map(|k| wv[t * SCALES + k] * g.value(proj[k]).data()[t * d + j]).sum();
            assert!((g.value(fused).data()[t * d + j] - want).abs() < 1e-12);
        }
    }

    // all projections equal: any convex weights reproduce that vector
    let mut same = model(6);
    let bias = Tensor::from_fn(&[64], |_| rng.random_range(-1.0..1.0));
    for proj in &mut same.qa.projections {
        proj.weight.data_mut().fill(0.0);
        proj.bias = bias.clone();
    }
    let p = bind(&mut g, &same);
    let (_, fused) = qanet::fuse(&mut g, &p.qa, &feats, w).unwrap();
    let norm: Vec<f64> = (0..2).map(|t| wv[t * SCALES..(t + 1) * SCALES].iter().sum()).collect();
    for (t, &n) in norm.iter().enumerate() {
        for j in 0..64 {
            let got = g.value(fused).data()[t * 64 + j];
            assert!((got - n * bias.data()[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn score_gradient_with_respect_to_prompt() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let m = model(7);
    let frames = random_frames(&mut rng, 2);
    let prompt = Tensor::from_fn(&[2, 16, 16, 16], |_| rng.random_range(-0.5..0.5));
    let err = GradCheck {
        max_coords: 48,
        ..GradCheck::default()
    }
    .run(&[prompt], |g, v| {
        let p = bind(g, &m);
        let x = g.input(frames.clone());
        Ok(qanet::forward_qa(g, &p.qa, x, v[0])?.scores)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = GeneratorConfig {
        frames: 4,
        height: SIDE,
        width: SIDE,
        planted_outlier_prob: 1.0,
        ..GeneratorConfig::default()
    };
    let teacher = TeacherModel::denoise();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for seed in 0..10 {
        let (seq, gt) = synthesize_indexed(&GeneratorConfig { seed, ..cfg.clone() }, 0).unwrap();
        let m: Model<Tensor<f64>> = model(seed);

        // scores depend on every parameter except the teacher projection
        let mut g = Graph::new();
        let (bound, vars) = m.bind(&mut g);
        let x = g.input(seq.frames.cast());
        let act = forward_prompt(&mut g, &bound.tpg, x, seq.ref_index).unwrap();
        let qa = qanet::forward_qa(&mut g, &bound.qa, x, act.prompt).unwrap();
        let r = g.input(Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0)));
        let weighted = g.mul(qa.scores, r).unwrap();
        let l = g.mean(weighted, &[]).unwrap();
        g.backward(l).unwrap();
        for ((name, _), v) in m.named().iter().zip(&vars) {
            let reaches = g.grad_or_zeros(*v).data().iter().any(|&d| d != 0.0);
            assert_eq!(reaches, !name.starts_with("tpg.tsnet"), "seed {seed}: {name}");
        }

        // the teacher projection is trained through the distillation term
        let ann = annotate_leave_one_out(&teacher, &seq, &gt, 0.02).unwrap();
        let feats = run_teacher(&teacher, &seq).unwrap().features;
        let ex = Example {
            frames: &seq.frames,
            ref_index: seq.ref_index,
            teacher: Some(&feats),
            scores: &ann.scores,
            groups: &ann.groups,
        };
        let (values, grads) = loss_and_grads(&m, &ex, &LossConfig::default()).unwrap();
        assert!(values.l_dist > 0.0);
        for ((name, _), gr) in m.named().iter().zip(&grads) {
            if name.starts_with("tpg.tsnet") {
                assert!(gr.data().iter().any(|&v| v != 0.0), "seed {seed}: {name}");
            }
        }
    }
}

#[test]
fn non_finite_input_is_named() {
    let mut frames = identical_frames(3, 1).cast::<f32>();
    frames.data_mut()[5] = f32::NAN;
    let scores = [1.0, 0.5, 0.0];
    let groups = build_groups(&scores, 0.02);
    let ex = Example {
        frames: &frames,
        ref_index: 0,
        teacher: None,
        scores: &scores,
        groups: &groups,
    };
    let mut m: Model<Tensor<f32>> = Model::init(&ModelConfig::default(), 0);
    let cfg = LossConfig::default();
    assert_eq!(loss_and_grads(&m, &ex, &cfg).unwrap_err(), Error::Diverged("frames".into()));

    let clean = identical_frames(3, 1).cast::<f32>();
    let ex = Example { frames: &clean, ..ex };
    m.tpg.fa2.weight.data_mut()[0] = f32::INFINITY;
    assert_eq!(loss_and_grads(&m, &ex, &cfg).unwrap_err(), Error::Diverged("fea3".into()));
}
