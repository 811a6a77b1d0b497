mod common;

use common::{grid_bag, max_rel_diff, random_state};
use mrfibp::gibbs::{flat_prior_posterior, SufficientStats};
use mrfibp::transfer::adapt_appearance;
use mrfibp::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n_img: usize, k: usize, d: usize) -> (Vec<FeatureBag>, Vec<FactorState>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bags: Vec<FeatureBag> = (0..n_img)
        .map(|i| {
            let feats = (0..6)
                .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            grid_bag(&format!("t{i}"), 2, 3, feats)
        })
        .collect();
    let states = (0..n_img).map(|_| random_state(6, k, 0.5, &mut rng)).collect();
    (bags, states)
}

fn spd_prior(seed: u64, k: usize, d: usize, hp: Hyperparams) -> AppearanceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = AppearanceModel::uninformative(k, d, &[], hp);
    m.mean = DMatrix::from_fn(k, d, |_, _| rng.random_range(-2.0..2.0));
    let b = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let c = &b * b.transpose() + DMatrix::identity(k, k) * 0.2;
    m.covariance = (&c + c.transpose()) * 0.5;
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn uninformative_prior_reduces_to_flat_posterior(seed in any::<u64>(), k in 1usize..6, d in 1usize..4, sx in 0.2f64..2.0, sa in 0.3f64..3.0) {
        let hp = Hyperparams { sigma_x: sx, sigma_a: sa, ..Hyperparams::default() };
        let (bags, states) = instance(seed, 3, k, d);
        let prior = AppearanceModel::uninformative(k, d, &[], hp);
        let adapted = adapt_appearance(&states, &bags, &prior, &hp).unwrap();
        let sref: Vec<&FactorState> = states.iter().collect();
        let bref: Vec<&FeatureBag> = bags.iter().collect();
        let stats = SufficientStats::collect(&sref, &bref, k, d, Schedule::Serial);
        let (mean, cov) = flat_prior_posterior(&stats, &hp).unwrap();
        prop_assert!(max_rel_diff(&adapted.mean, &mean) <= 1e-10);
        prop_assert!(max_rel_diff(&adapted.covariance, &cov) <= 1e-10);
    }

    #[test]
    fn empty_target_keeps_any_prior(seed in any::<u64>(), k in 1usize..6, d in 1usize..4) {
        let hp = Hyperparams::default();
        let prior = spd_prior(seed, k, d, hp);
        let out = adapt_appearance(&[], &[], &prior, &hp).unwrap();
        prop_assert_eq!(out.mean, prior.mean);
        prop_assert_eq!(out.covariance, prior.covariance);
    }

    #[test]
    fn near_certain_source_pins_the_mean(seed in any::<u64>(), k in 1usize..5) {
        let hp = Hyperparams::default();
        let mut prior = spd_prior(seed, k, 3, hp);
        prior.covariance *= 1e-8;
        let (bags, states) = instance(seed ^ 7, 4, k, 3);
        let out = adapt_appearance(&states, &bags, &prior, &hp).unwrap();
        prop_assert!((out.mean - prior.mean).norm() < 1e-3);
    }
}

#[test]
fn extension_adds_independent_zero_mean_block() {
    let hp = Hyperparams {
        k_supervised: 60,
        ..Hyperparams::default()
    };
    let source = spd_prior(1, 60, 4, hp);
    let ext = extend_prior(&source, 80, &hp).unwrap();
    assert_eq!(ext.k(), 80);
    assert!(ext.mean.rows(60, 20).iter().all(|&v| v == 0.0));
    assert!(ext.covariance.view((0, 60), (60, 20)).iter().all(|&v| v == 0.0));
    assert!(ext.covariance.view((60, 0), (20, 60)).iter().all(|&v| v == 0.0));
    assert!(ext.covariance.clone().cholesky().is_some());
    assert_eq!(ext.factor_names.len(), 80);
    assert!(matches!(extend_prior(&source, 101, &hp), Err(Error::Config(_))));
    assert!(matches!(extend_prior(&source, 59, &hp), Err(Error::Config(_))));
}

fn small_target(d: usize) -> Vec<FeatureBag> {
    instance(5, 3, 1, d).0
}

#[test]
fn target_model_has_requested_size() {
    let hp = Hyperparams {
        k_supervised: 60,
        ..Hyperparams::default()
    };
    let source = spd_prior(2, 60, 3, hp);
    let cfg = SweepConfig::target().with_iterations(10);
    let fit = adapt_target(&small_target(3), &source, 80, &hp, &cfg).unwrap();
    assert_eq!(fit.model.k(), 80);
    assert!(fit.states.iter().all(|s| s.k_active() == 80));
    assert_eq!(fit.marginals.len(), 3);
}

#[test]
fn no_adapt_keeps_the_extended_source() {
    let hp = Hyperparams {
        k_supervised: 4,
        ..Hyperparams::default()
    };
    let source = spd_prior(3, 4, 3, hp);
    let cfg = SweepConfig {
        update_appearance: false,
        ..SweepConfig::target().with_iterations(10)
    };
    let fit = adapt_target(&small_target(3), &source, 6, &hp, &cfg).unwrap();
    let ext = extend_prior(&source, 6, &hp).unwrap();
    assert_eq!(fit.model.mean, ext.mean);
    assert_eq!(fit.model.covariance, ext.covariance);
}

#[test]
fn freezing_source_rows_updates_only_the_free_block() {
    let hp = Hyperparams {
        k_supervised: 4,
        ..Hyperparams::default()
    };
    let source = spd_prior(4, 4, 3, hp);
    let cfg = SweepConfig::target().with_iterations(10);
    let fit = adapt_target_with(&small_target(3), &source, 6, &hp, &cfg, Adaptation::FreezeSource).unwrap();
    assert_eq!(fit.model.mean.rows(0, 4), source.mean.rows(0, 4));
    assert_eq!(fit.model.covariance.view((0, 0), (4, 4)), source.covariance.view((0, 0), (4, 4)));
}

#[test]
fn bad_targets_are_rejected() {
    let hp = Hyperparams::default();
    let source = spd_prior(5, 2, 3, hp);
    let cfg = SweepConfig::target().with_iterations(5);
    assert!(matches!(adapt_target(&[], &source, 2, &hp, &cfg), Err(Error::Empty(_))));
    assert!(matches!(
        adapt_target(&small_target(2), &source, 2, &hp, &cfg),
        Err(Error::Dimension(_))
    ));
}
