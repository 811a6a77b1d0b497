#![allow(dead_code)]

use mrfibp::model::{FactorState, FeatureBag, Patch, PixelMask};
use nalgebra::DMatrix;
use rand::Rng;

/// `rows × cols` grid of 1×1-pixel patches with 4-neighbor adjacency.
pub fn grid_bag(id: &str, rows: usize, cols: usize, features: Vec<Vec<f64>>) -> FeatureBag {
    assert_eq!(features.len(), rows * cols);
    let width = cols as u32;
    let patches = features
        .into_iter()
        .enumerate()
        .map(|(i, feature)| {
            let (x, y) = ((i % cols) as u32, (i / cols) as u32);
            Patch {
                id: i as u32,
                mask: PixelMask::rect(width, x, y, x + 1, y + 1),
                feature,
            }
        })
        .collect();
    let mut adjacency = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = (r * cols + c) as u32;
            if c + 1 < cols {
                adjacency.push([i, i + 1]);
                adjacency.push([i + 1, i]);
            }
            if r + 1 < rows {
                adjacency.push([i, i + cols as u32]);
                adjacency.push([i + cols as u32, i]);
            }
        }
    }
    FeatureBag {
        image_id: id.into(),
        width,
        height: rows as u32,
        patches,
        adjacency,
    }
}

pub fn random_state<R: Rng>(n: usize, k: usize, p: f64, rng: &mut R) -> FactorState {
    let rows: Vec<Vec<bool>> = (0..n)
        .map(|_| (0..k).map(|_| rng.random_bool(p)).collect())
        .collect();
    FactorState::from_rows(&rows).unwrap()
}

pub fn z_matrix(states: &[FactorState], k: usize) -> DMatrix<f64> {
    let n: usize = states.iter().map(|s| s.n_patches()).sum();
    let mut z = DMatrix::zeros(n, k);
    let mut r = 0;
    for s in states {
        for j in 0..s.n_patches() {
            for f in 0..s.k_active().min(k) {
                z[(r, f)] = s.get(j, f) as u8 as f64;
            }
            r += 1;
        }
    }
    z
}

pub fn x_matrix(bags: &[FeatureBag]) -> DMatrix<f64> {
    let rows: Vec<&Vec<f64>> = bags.iter().flat_map(|b| b.patches.iter().map(|p| &p.feature)).collect();
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap();
        a.swap_rows(col, pivot);
        inv.swap_rows(col, pivot);
        let p = a[(col, col)];
        assert!(p.abs() > 1e-300, "singular");
        for j in 0..n {
            a[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = a[(i, col)];
                if f != 0.0 {
                    for j in 0..n {
                        a[(i, j)] -= f * a[(col, j)];
                        inv[(i, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
    }
    inv
}

/// Largest entrywise difference relative to max(1, |a|, |b|).
pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
