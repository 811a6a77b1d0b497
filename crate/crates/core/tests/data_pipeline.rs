use mrfibp::data::checkpoint::{decode_model, encode_model};
use mrfibp::data::codebook::build_codebook;
use mrfibp::data::synth::{synth_generate, SyntheticSpec};
use mrfibp::data::{load_feature_bags, load_heatmaps, save_feature_bags, save_heatmaps};
use mrfibp::representation::heatmaps_from_marginals;
use mrfibp::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Per-image mean feature vectors (images are independent draws; patches
/// within an image are not).
fn image_means(ds: &Dataset) -> Vec<Vec<f64>> {
    ds.items
        .iter()
        .map(|it| {
            let n = it.bag.n_patches() as f64;
            let d = it.bag.dim();
            (0..d)
                .map(|j| it.bag.patches.iter().map(|p| p.feature[j]).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Smallest Bonferroni-corrected Welch p-value over feature dimensions.
fn min_adjusted_p(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    (0..d)
        .map(|j| {
            let (na, ma, va) = stats(&a.iter().map(|r| r[j]).collect::<Vec<_>>());
            let (nb, mb, vb) = stats(&b.iter().map(|r| r[j]).collect::<Vec<_>>());
            let se2 = va / na + vb / nb;
            let t = (ma - mb) / se2.sqrt();
            let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
            let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()));
            (p * d as f64).min(1.0)
        })
        .fold(1.0, f64::min)
}

#[test]
fn unshifted_domains_are_exchangeable() {
    let spec = SyntheticSpec {
        n_target: Some(60),
        ..SyntheticSpec::new(60, 6, 5, 8, 0.5, 21)
    };
    let data = synth_generate(&spec).unwrap();
    let p = min_adjusted_p(&image_means(&data.source), &image_means(&data.target));
    assert!(p > 0.01, "two-sample test rejected at p={p}");

    let shifted = synth_generate(&SyntheticSpec {
        domain_shift: vec![1.0; 8],
        ..spec
    })
    .unwrap();
    let p = min_adjusted_p(&image_means(&shifted.source), &image_means(&shifted.target));
    assert!(p < 0.01, "shift of 1.0 went undetected (p={p})");
}

#[test]
fn synthetic_sets_survive_feature_files() {
    let data = synth_generate(&SyntheticSpec::new(4, 4, 3, 5, 0.2, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for ds in [&data.source, &data.target] {
        let path = dir.path().join(format!("{}.jsonl", ds.name));
        save_feature_bags(ds, &path).unwrap();
        let back = load_feature_bags(&path).unwrap();
        assert_eq!(back.items, ds.items);
        assert_eq!(back.attributes, ds.attributes);
    }
}

#[test]
fn heat_maps_survive_export() {
    let data = synth_generate(&SyntheticSpec::new(3, 4, 3, 5, 0.2, 3)).unwrap();
    let stacks: Vec<HeatMapStack> = data
        .source
        .items
        .iter()
        .zip(&data.truth.source_states)
        .map(|(it, s)| heatmaps_from_marginals(&it.bag, &PatchMarginals::from_states(std::slice::from_ref(s)).unwrap()).unwrap())
        .collect();
    let names: Vec<String> = ["red", "shirt", "jeans"].map(String::from).to_vec();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maps.jsonl");
    save_heatmaps(&path, &stacks, &names).unwrap();
    let (back_names, back) = load_heatmaps(&path).unwrap();
    assert_eq!(back_names, names);
    assert_eq!(back, stacks);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoints_round_trip_bitwise(k in 1usize..6, d in 1usize..5, vals in prop::collection::vec(-1e6f64..1e6, 30), scale in 1e-9f64..1e3) {
        let hp = Hyperparams { k_supervised: k, sigma_x: scale, ..Hyperparams::default() };
        let mut m = AppearanceModel::uninformative(k, d, &[], hp);
        m.mean = DMatrix::from_fn(k, d, |i, j| vals[(i * d + j) % vals.len()] * scale);
        m.covariance = DMatrix::from_fn(k, k, |i, j| if i == j { scale + vals[i].abs() } else { 0.0 });
        let back = decode_model(&encode_model(&m).unwrap()).unwrap();
        prop_assert!(back.mean.iter().zip(m.mean.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(back.covariance.iter().zip(m.covariance.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.hyperparams, m.hyperparams);
        prop_assert_eq!(back.factor_names, m.factor_names);
    }

    #[test]
    fn kmeans_objective_is_monotone(pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), 12..80), k in 1usize..6, seed in any::<u64>()) {
        let colors: Vec<_> = pts.iter().map(|&(a, b, c)| [a, b, c]).collect();
        let cb = build_codebook(&colors, k, seed).unwrap();
        prop_assert_eq!(cb.k(), k);
        prop_assert!(cb.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0)));
    }
}
