//! Planted-factor synthetic data: a strongly labeled source set, an unlabeled
//! target set drawn with shifted appearance and two views per identity, and
//! the ground truth behind both.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::std_normal;
use crate::model::{Dataset, FactorState, FeatureBag, LabeledBag, Patch, PixelMask, SupervisionLabels};
use crate::rng::{self, StreamRng};

fn default_cell_pixels() -> u32 {
    8
}
fn default_activation() -> f64 {
    0.3
}
fn default_scale() -> f64 {
    1.0
}
fn default_view_flip() -> f64 {
    0.05
}
fn default_coherence() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of source images.
    pub n_images: usize,
    /// Patches per side of the square patch grid.
    pub grid: usize,
    pub k_true: usize,
    pub d: usize,
    pub noise_std: f64,
    /// Probability that a patch copies the factor row of its left or upper
    /// neighbor instead of drawing a fresh one.
    #[serde(default = "default_coherence")]
    pub coherence: f64,
    /// Added to every factor row of the target appearance. Empty means zero.
    #[serde(default)]
    pub domain_shift: Vec<f64>,
    pub seed: u64,
    /// Side of one square patch in pixels.
    #[serde(default = "default_cell_pixels")]
    pub cell_pixels: u32,
    /// Probability that a freshly drawn factor cell is on.
    #[serde(default = "default_activation")]
    pub activation: f64,
    /// Standard deviation of the planted appearance entries.
    #[serde(default = "default_scale")]
    pub appearance_scale: f64,
    /// Per-cell flip probability between the two views of a target identity.
    #[serde(default = "default_view_flip")]
    pub view_flip: f64,
    /// Number of target identities; defaults to `n_images`.
    #[serde(default)]
    pub n_target: Option<usize>,
    /// Extra factors that occur only in the target domain (appended after
    /// the `k_true` shared ones in target states and appearance).
    #[serde(default)]
    pub k_novel: usize,
}

impl SyntheticSpec {
    pub fn new(n_images: usize, grid: usize, k_true: usize, d: usize, noise_std: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_images,
            grid,
            k_true,
            d,
            noise_std,
            coherence: default_coherence(),
            domain_shift: Vec::new(),
            seed,
            cell_pixels: default_cell_pixels(),
            activation: default_activation(),
            appearance_scale: default_scale(),
            view_flip: default_view_flip(),
            n_target: None,
            k_novel: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.grid == 0 || self.k_true == 0 || self.d == 0 || self.cell_pixels == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.n_target == Some(0) {
            return Err(Error::Config("n_target must be positive".into()));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.coherence) || !prob(self.activation) || !prob(self.view_flip) {
            return Err(Error::Config("coherence, activation and view_flip must lie in [0, 1]".into()));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 || self.appearance_scale.is_nan() || self.appearance_scale <= 0.0 {
            return Err(Error::Config("noise_std must be >= 0 and appearance_scale > 0".into()));
        }
        if !self.domain_shift.is_empty() && self.domain_shift.len() != self.d {
            return Err(Error::Dimension(format!(
                "domain_shift has {} entries, d is {}",
                self.domain_shift.len(),
                self.d
            )));
        }
        Ok(())
    }

    pub fn n_target(&self) -> usize {
        self.n_target.unwrap_or(self.n_images)
    }
}

/// Ground truth behind a synthetic draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Source appearance, k_true × d.
    pub appearance: Vec<Vec<f64>>,
    /// Target appearance: source rows followed by the novel rows, all shifted.
    pub target_appearance: Vec<Vec<f64>>,
    pub source_states: Vec<FactorState>,
    /// One state per target image, in target order.
    pub target_states: Vec<FactorState>,
    /// `(probe view, gallery view)` image ids of each identity.
    pub pairs: Vec<(String, String)>,
}

impl SyntheticTruth {
    pub fn appearance_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.appearance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub source: Dataset,
    pub target: Dataset,
    pub truth: SyntheticTruth,
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Smallest Euclidean distance between two planted appearance rows.
pub fn min_factor_distance(a: &DMatrix<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..a.nrows() {
        for j in 0..i {
            best = best.min((a.row(i) - a.row(j)).norm());
        }
    }
    best
}

pub fn attribute_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("attr-{i}")).collect()
}

/// Raster-order copy process: each patch copies its left or upper neighbor's
/// row with probability `coherence`, otherwise draws Bernoulli(activation).
fn coherent_state(spec: &SyntheticSpec, k: usize, rng: &mut StreamRng) -> FactorState {
    let g = spec.grid;
    let mut rows: Vec<Vec<bool>> = Vec::with_capacity(g * g);
    for r in 0..g {
        for c in 0..g {
            let mut sources = Vec::with_capacity(2);
            if c > 0 {
                sources.push(r * g + c - 1);
            }
            if r > 0 {
                sources.push((r - 1) * g + c);
            }
            let row = if !sources.is_empty() && rng.random_bool(spec.coherence) {
                rows[sources[rng.random_range(0..sources.len())]].clone()
            } else {
                (0..k).map(|_| rng.random_bool(spec.activation)).collect()
            };
            rows.push(row);
        }
    }
    FactorState::from_rows(&rows).expect("rectangular rows")
}

fn perturbed(state: &FactorState, flip: f64, rng: &mut StreamRng) -> FactorState {
    let mut out = state.clone();
    for j in 0..state.n_patches() {
        for k in 0..state.k_active() {
            if rng.random_bool(flip) {
                out.set(j, k, !state.get(j, k));
            }
        }
    }
    out
}

fn render(
    image_id: String,
    state: &FactorState,
    a: &DMatrix<f64>,
    spec: &SyntheticSpec,
    rng: &mut StreamRng,
) -> FeatureBag {
    let g = spec.grid as u32;
    let s = spec.cell_pixels;
    let width = g * s;
    let mut patches = Vec::with_capacity(state.n_patches());
    let mut adjacency = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let j = (r * g + c) as usize;
            let feature = (0..spec.d)
                .map(|d| {
                    let signal: f64 = (0..state.k_active()).filter(|&k| state.get(j, k)).map(|k| a[(k, d)]).sum();
                    signal + spec.noise_std * std_normal(rng)
                })
                .collect();
            patches.push(Patch {
                id: j as u32,
                mask: PixelMask::rect(width, c * s, r * s, (c + 1) * s, (r + 1) * s),
                feature,
            });
            let id = j as u32;
            if c + 1 < g {
                adjacency.extend([[id, id + 1], [id + 1, id]]);
            }
            if r + 1 < g {
                adjacency.extend([[id, id + g], [id + g, id]]);
            }
        }
    }
    FeatureBag {
        image_id,
        width,
        height: width,
        patches,
        adjacency,
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Deterministic function of `spec` (including its seed).
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut arng = rng::stream(spec.seed, &["synth", "appearance"]);
    let a = DMatrix::from_fn(spec.k_true, spec.d, |_, _| spec.appearance_scale * std_normal(&mut arng));
    let mut a_target = a.clone();
    if spec.k_novel > 0 {
        let mut nrng = rng::stream(spec.seed, &["synth", "novel-appearance"]);
        let novel = DMatrix::from_fn(spec.k_novel, spec.d, |_, _| spec.appearance_scale * std_normal(&mut nrng));
        a_target = a_target.resize_vertically(spec.k_true + spec.k_novel, 0.0);
        a_target.rows_mut(spec.k_true, spec.k_novel).copy_from(&novel);
    }
    if !spec.domain_shift.is_empty() {
        for mut row in a_target.row_iter_mut() {
            for (v, s) in row.iter_mut().zip(&spec.domain_shift) {
                *v += s;
            }
        }
    }
    let attributes = attribute_names(spec.k_true);

    let mut source_states = Vec::with_capacity(spec.n_images);
    let mut source_items = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let id = format!("src{i:04}");
        let mut r = rng::stream(spec.seed, &["synth", "source", &id]);
        let state = coherent_state(spec, spec.k_true, &mut r);
        let bag = render(id, &state, &a, spec, &mut r);
        source_items.push(LabeledBag {
            bag,
            labels: SupervisionLabels::strong(state.rows()),
        });
        source_states.push(state);
    }

    let n_target = spec.n_target();
    let mut target_states = Vec::with_capacity(2 * n_target);
    let mut target_items = Vec::with_capacity(2 * n_target);
    let mut pairs = Vec::with_capacity(n_target);
    for i in 0..n_target {
        let base = format!("id{i:04}");
        let mut r = rng::stream(spec.seed, &["synth", "target", &base]);
        let identity = coherent_state(spec, spec.k_true + spec.k_novel, &mut r);
        let ids = [format!("{base}-a"), format!("{base}-b")];
        for id in &ids {
            let state = perturbed(&identity, spec.view_flip, &mut r);
            let bag = render(id.clone(), &state, &a_target, spec, &mut r);
            target_items.push(LabeledBag {
                bag,
                labels: SupervisionLabels::none(),
            });
            target_states.push(state);
        }
        let [p, g] = ids;
        pairs.push((p, g));
    }

    Ok(SyntheticData {
        source: Dataset {
            name: "source".into(),
            attributes,
            items: source_items,
        },
        target: Dataset {
            name: "target".into(),
            attributes: Vec::new(),
            items: target_items,
        },
        truth: SyntheticTruth {
            appearance: rows_of(&a),
            target_appearance: rows_of(&a_target),
            source_states,
            target_states,
            pairs,
        },
    })
}
