mod common;

use proptest::prelude::*;
use rand::Rng;

use common::*;
use stereo_crf::conv::{Activation, ConvNet};
use stereo_crf::correlation::Sign;
use stereo_crf::crf::{certificate, run_inference, Certificate, DualState};
use stereo_crf::stereo_io::{synth_random_dot, SynthParams};
use stereo_crf::training::{
    cross_entropy, hinge_upper_bound, loss_augment, ssvm_unary_subgradient, train_unary, truncated_loss, ModelParams,
    Target, TrainConfig,
};
use stereo_crf::volume::{CostVolume, Labeling};

fn full_target(labels: Vec<usize>, h: usize, w: usize) -> Target {
    Target {
        labeling: Labeling::new(h, w, labels).unwrap(),
        mask: vec![true; h * w],
    }
}

fn brute_loss_augmented(
    prob: &stereo_crf::crf::CrfProblem,
    t: &Target,
    gamma: f64,
    tau: f64,
) -> (f64, Vec<usize>, bool) {
    brute_force_map(&loss_augment(prob, t, gamma, tau))
}

#[test]
fn hinge_bound_dominates_scaled_loss_on_tiny_instances() {
    let mut r = rng(21);
    for _ in 0..100 {
        let (h, w, l) = (2, 2, 2);
        let prob = random_problem(&mut r, h, w, l, 1.0, 1.0);
        let xs: Vec<usize> = (0..4).map(|_| r.gen_range(0..l)).collect();
        let t = full_target(xs.clone(), h, w);
        let (gamma, tau) = (r.gen_range(0.1..2.0), 3.0);
        let aug = loss_augment(&prob, &t, gamma, tau);
        let inf = run_inference(&aug, 3).unwrap();
        let bound = hinge_upper_bound(&prob, &t, &inf.dual, gamma, tau).unwrap();

        let (aug_min, _, _) = brute_loss_augmented(&prob, &t, gamma, tau);
        let exact_hinge = oracle_energy(&prob, &xs) - aug_min;
        assert!(bound >= exact_hinge - 1e-9);
        assert!(exact_hinge >= -1e-12);
        let (_, map, _) = brute_force_map(&prob);
        let map_loss = truncated_loss(&Labeling::new(h, w, map).unwrap(), &t, tau);
        assert!(bound >= gamma * map_loss - 1e-9);
    }
}

#[test]
fn more_dual_iterations_never_raise_the_bound() {
    let mut r = rng(22);
    for _ in 0..30 {
        let prob = random_problem(&mut r, 4, 4, 4, 2.0, 2.0);
        let t = full_target((0..16).map(|_| r.gen_range(0..4)).collect(), 4, 4);
        let aug = loss_augment(&prob, &t, 1.0, 3.0);
        let mut last = hinge_upper_bound(&prob, &t, &DualState::zeros(&prob), 1.0, 3.0).unwrap();
        for it in 1..8 {
            let inf = run_inference(&aug, it).unwrap();
            let b = hinge_upper_bound(&prob, &t, &inf.dual, 1.0, 3.0).unwrap();
            assert!(b <= last + 1e-9);
            last = b;
        }
    }
}

#[test]
fn certified_bound_at_target_is_near_zero() {
    // strong unaries at x*: inference certifies x* itself
    let (h, w, l) = (2, 3, 3);
    let xs = vec![0, 1, 2, 1, 1, 0];
    let mut values = vec![1.0; h * w * l];
    for (i, k) in xs.iter().enumerate() {
        values[i * l + k] = -5.0;
    }
    let unary = CostVolume::from_values(h, w, l, values).unwrap();
    let prob = stereo_crf::crf::CrfProblem::new(
        unary,
        stereo_crf::pairwise::EdgeWeights::constant(h, w, 0.1),
        stereo_crf::pairwise::PenaltyParams::new(0.1, 0.2),
    )
    .unwrap();
    let t = full_target(xs.clone(), h, w);
    let aug = loss_augment(&prob, &t, 1.0, 3.0);
    let inf = run_inference(&aug, 10).unwrap();
    assert_eq!(certificate(&aug, &inf.dual).unwrap(), Certificate::CertifiedOptimal);
    assert_eq!(inf.labeling.labels, xs);
    let b = hinge_upper_bound(&prob, &t, &inf.dual, 1.0, 3.0).unwrap();
    assert!((-1e-12..=1e-9).contains(&b));
}

#[test]
fn approximate_subgradient_equals_exact_on_certified_instances() {
    let mut r = rng(23);
    let mut compared = 0;
    for _ in 0..300 {
        let (h, w, l) = (3, 3, 3);
        let prob = random_problem(&mut r, h, w, l, 1.0, 1.0);
        let t = full_target((0..9).map(|_| r.gen_range(0..l)).collect(), h, w);
        let aug = loss_augment(&prob, &t, 0.3, 3.0);
        let inf = run_inference(&aug, 30).unwrap();
        if certificate(&aug, &inf.dual).unwrap() != Certificate::CertifiedOptimal {
            continue;
        }
        let (_, exact, unique) = brute_force_map(&aug);
        if !unique {
            continue;
        }
        compared += 1;
        let approx = ssvm_unary_subgradient(&t, &inf.labeling, l);
        let exact = ssvm_unary_subgradient(&t, &Labeling::new(h, w, exact).unwrap(), l);
        assert_eq!(approx, exact);
    }
    assert!(compared >= 30, "only {compared} instances compared");
}

#[test]
fn unary_training_strictly_decreases_cross_entropy() {
    let samples: Vec<_> = (0..6u64)
        .map(|seed| {
            synth_random_dot(&SynthParams {
                seed,
                height: 16,
                width: 32,
                ..Default::default()
            })
            .unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        filters: 8,
        epochs: 10,
        ..Default::default()
    };
    let model = ModelParams::new_unary(1, &cfg, false, Sign::Positive);
    let mut seen = 0;
    let (_, rep) = train_unary(&samples, &cfg, model, |_, _| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 10);
    assert!(
        rep.epoch_losses.windows(2).all(|w| w[1] < w[0]),
        "{:?}",
        rep.epoch_losses
    );
}

#[test]
fn default_config_and_architecture() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_unary, 1e-2);
    assert_eq!(cfg.lr_joint, 1e-6);
    assert_eq!(cfg.crf_iterations, 5);
    assert_eq!(cfg.filters, 100);
    assert_eq!(cfg.pairwise_filters, 64);
    assert_eq!(cfg.unary_layers, 3);

    let m = ModelParams::new_unary(1, &cfg, false, Sign::Positive);
    let shapes: Vec<_> = m
        .unary
        .layers
        .iter()
        .map(|l| (l.out_channels, l.kh, l.kw, l.activation))
        .collect();
    assert_eq!(
        shapes,
        vec![
            (100, 3, 3, Activation::Tanh),
            (100, 2, 2, Activation::Tanh),
            (100, 2, 2, Activation::Tanh)
        ]
    );

    let p = ConvNet::pairwise(1, cfg.pairwise_filters, &mut rng(0));
    let shapes: Vec<_> = p
        .layers
        .iter()
        .map(|l| (l.out_channels, l.kh, l.kw, l.activation))
        .collect();
    assert_eq!(
        shapes,
        vec![
            (64, 3, 3, Activation::Tanh),
            (64, 3, 3, Activation::Tanh),
            (2, 1, 1, Activation::Abs)
        ]
    );
}

proptest! {
    #[test]
    fn unary_subgradient_sums_to_zero(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w, l) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(2..6));
        let t = Target {
            labeling: Labeling::new(h, w, (0..h * w).map(|_| r.gen_range(0..l)).collect()).unwrap(),
            mask: (0..h * w).map(|_| r.gen_bool(0.7)).collect(),
        };
        let xb = Labeling::new(h, w, (0..h * w).map(|_| r.gen_range(0..l)).collect()).unwrap();
        let g = ssvm_unary_subgradient(&t, &xb, l);
        for i in 0..h * w {
            prop_assert_eq!(g.pixel(i).iter().sum::<f64>(), 0.0);
            if !t.mask[i] {
                prop_assert!(g.pixel(i).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (h, w, l) = (2, 3, 4);
        let mut p = CostVolume::zeros(h, w, l);
        for i in 0..h * w {
            let raw: Vec<f64> = (0..l).map(|_| r.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            p.pixel_mut(i).iter_mut().zip(raw).for_each(|(v, x)| *v = x / s);
        }
        let t = Target {
            labeling: Labeling::new(h, w, (0..h * w).map(|_| r.gen_range(0..l)).collect()).unwrap(),
            mask: (0..h * w).map(|_| r.gen_bool(0.8)).collect(),
        };
        let ce = cross_entropy(&p, &t).unwrap();
        let mut vals = p.values.clone();
        for i in 0..vals.len() {
            let fd = central_diff(&mut vals, i, |v| {
                let q = CostVolume::from_values(h, w, l, v.to_vec()).unwrap();
                cross_entropy(&q, &t).unwrap().loss
            });
            prop_assert!(rel_err(ce.grad.values[i], fd) < 1e-4);
        }
    }
}
