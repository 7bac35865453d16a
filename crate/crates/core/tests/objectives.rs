mod oracles;

use biqa_core::downstream::build_groups;
use biqa_core::numerics::gradcheck::GradCheck;
use biqa_core::numerics::{Graph, Tensor};
use biqa_core::objectives::{
    cross_group_pairs, margin_loss, margin_loss_value, margin_pair_loss, total_loss, total_loss_var, LossConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pair_loss_examples() {
    assert_eq!(margin_pair_loss(0.75, 0.5, 0.5, 0.25), 0.0);
    assert!((margin_pair_loss(0.8, 0.5, 0.2, 0.1) - 0.2).abs() < 1e-12);
    assert_eq!(margin_pair_loss(0.8, 0.5, 0.6, 0.1), 0.0);
}

#[test]
fn margin_loss_examples() {
    assert_eq!(margin_loss_value(&[0.5, 0.51], &[0.0, 1.0], &[vec![0, 1]]).unwrap(), (0.0, 0));
    assert_eq!(margin_loss_value(&[1.0, 0.0], &[0.0, 1.0], &[vec![0], vec![1]]).unwrap(), (2.0, 1));
}

#[test]
fn total_loss_examples() {
    let cfg = LossConfig::default();
    assert!((total_loss(0.5, 0.1, &cfg) - 1.5).abs() < 1e-12);
    let no_dist = LossConfig { alpha: 0.0, ..cfg };
    assert_eq!(total_loss(0.7, 0.1, &no_dist), 10.0 * 0.1);
}

#[test]
fn margin_matches_brute_force_for_all_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for t in 1..=14 {
        for trial in 0..200 {
            let scores: Vec<f64> = (0..t)
                .map(|_| if trial % 3 == 0 { rng.random_range(0..6) as f64 / 5.0 } else { rng.random() })
                .collect();
            let pred: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let groups = build_groups(&scores, 0.02);
            let (want_pairs, want) = oracles::margin(&scores, &pred, &groups);
            assert_eq!(cross_group_pairs(&scores, &groups).unwrap(), want_pairs);
            let (got, n) = margin_loss_value(&scores, &pred, &groups).unwrap();
            assert_eq!(n, want_pairs.len());
            assert!((got - want).abs() < 1e-12);

            let mut g = Graph::<f64>::new();
            let p = g.input(Tensor::from_f64(&[t], &pred).unwrap());
            let (l, n2) = margin_loss(&mut g, p, &scores, &groups).unwrap();
            assert_eq!(n2, n);
            assert!((g.value(l).item() - want).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn margin_loss_is_nonnegative_and_zero_iff_separated(
        v in prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 1..15), eps in 0.0f64..0.1
    ) {
        let (scores, pred): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let groups = build_groups(&scores, eps);
        let (l, _) = margin_loss_value(&scores, &pred, &groups).unwrap();
        prop_assert!(l >= 0.0);
        let pairs = cross_group_pairs(&scores, &groups).unwrap();
        let separated = pairs.iter().all(|&(i, j)| pred[i] - pred[j] >= scores[i] - scores[j]);
        prop_assert_eq!(l == 0.0, separated);
        // perfect prediction: the scores themselves
        prop_assert_eq!(margin_loss_value(&scores, &scores, &groups).unwrap().0, 0.0);
    }

    #[test]
    fn groups_partition_with_chained_gaps(scores in prop::collection::vec(0.0f64..1.0, 1..15), eps in 0.0f64..0.1) {
        let groups = build_groups(&scores, eps);
        let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        let mut prev_min: Option<f64> = None;
        for g in &groups {
            let mut s: Vec<f64> = g.iter().map(|&i| scores[i]).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            for w in s.windows(2) {
                prop_assert!(w[0] - w[1] <= eps);
            }
            if let Some(m) = prev_min {
                prop_assert!(m - s[0] > eps);
            }
            prev_min = Some(*s.last().unwrap());
        }
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = LossConfig::default();
    for _ in 0..10 {
        let t = rng.random_range(3..=14);
        let scores: Vec<f64> = (0..t).map(|_| rng.random()).collect();
        let groups = build_groups(&scores, cfg.group_epsilon);
        let pairs = cross_group_pairs(&scores, &groups).unwrap();
        let pred = loop {
            let p: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            if pairs.iter().all(|&(i, j)| ((scores[i] - scores[j]) - (p[i] - p[j])).abs() > 0.01) {
                break p;
            }
        };
        let dist = rng.random_range(0.0..1.0);
        let inputs = [Tensor::from_f64(&[t], &pred).unwrap(), Tensor::from_f64(&[1], &[dist]).unwrap()];
        let err = GradCheck::default()
            .run(&inputs, |g, v| {
                let (l_mrg, _) = margin_loss(g, v[0], &scores, &groups)?;
                let d = g.mean(v[1], &[])?;
                total_loss_var(g, Some(d), l_mrg, &cfg)
            })
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
