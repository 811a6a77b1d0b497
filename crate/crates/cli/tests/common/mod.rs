#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mrfibp::data::export::write_jsonl;
use mrfibp::data::{save_heatmaps, StateRecord};
use mrfibp::representation::grid_descriptor;
use mrfibp::{FactorState, HeatMapStack, PatchMarginals};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_stack(id: &str, k: usize, width: u32, height: u32, rng: &mut ChaCha8Rng) -> HeatMapStack {
    HeatMapStack {
        image_id: id.into(),
        width,
        height,
        maps: (0..k)
            .map(|_| (0..width * height).map(|_| rng.random::<f64>()).collect())
            .collect(),
    }
}

/// State records whose descriptors come from random 48x128 heat maps.
pub fn random_records(prefix: &str, n: usize, k: usize, seed: u64) -> Vec<StateRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id = format!("{prefix}{i}");
            let mut descriptor = grid_descriptor(&random_stack(&id, k, 48, 128, &mut rng)).unwrap();
            descriptor.image_id = id.clone();
            StateRecord {
                image_id: id,
                state: FactorState::zeros(1, k),
                marginals: PatchMarginals::zeros(1, k),
                descriptor,
            }
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[StateRecord]) {
    write_jsonl(path, records).unwrap();
}

pub fn write_truth(path: &Path, pairs: &[(String, String)]) {
    let mut s = String::from("probe,gallery\n");
    for (p, g) in pairs {
        s.push_str(&format!("{p},{g}\n"));
    }
    std::fs::write(path, s).unwrap();
}

pub fn outfit_names() -> Vec<String> {
    ["Blue", "Jeans", "Black", "Shirt", "Red"].map(String::from).to_vec()
}

/// Heat-map index of `n` random small stacks over [`outfit_names`].
pub fn write_index(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = outfit_names();
    let stacks: Vec<HeatMapStack> = (0..n)
        .map(|i| random_stack(&format!("img{i:03}"), names.len(), 6, 10, &mut rng))
        .collect();
    let path = dir.join("heatmaps.jsonl");
    save_heatmaps(&path, &stacks, &names).unwrap();
    path
}
