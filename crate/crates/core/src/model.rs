//! Domain types shared by every stage of the pipeline, plus the unnormalized
//! log-joint of the MRF-coupled IBP factor model.
//!
//! An image is a [`FeatureBag`]: a set of super-pixel patches with a feature
//! vector each and an adjacency graph between them. Each image carries a
//! binary [`FactorState`] (patches × active factors) and all images share one
//! [`AppearanceModel`] holding the factor loadings `A` (K × D).

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// IBP concentration; expected number of factors per patch.
    pub alpha: f64,
    /// Potts coupling between neighboring patches.
    pub beta: f64,
    /// Observation noise standard deviation.
    pub sigma_x: f64,
    /// Appearance prior standard deviation.
    pub sigma_a: f64,
    /// Number of annotated (named) factors at the front of the factor list.
    pub k_supervised: usize,
    /// Hard cap on the number of active factors.
    pub k_max: usize,
    pub rng_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 2.0,
            beta: 1.0,
            sigma_x: 0.5,
            sigma_a: 1.0,
            k_supervised: 0,
            k_max: 100,
            rng_seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.alpha) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !positive(self.sigma_x) || !positive(self.sigma_a) {
            return Err(Error::Config("sigma_x and sigma_a must be > 0".into()));
        }
        if self.k_max == 0 || self.k_supervised > self.k_max {
            return Err(Error::Config(format!(
                "need 0 < k_max and k_supervised <= k_max (k_supervised={}, k_max={})",
                self.k_supervised, self.k_max
            )));
        }
        Ok(())
    }

    /// Ratio σ_X² / σ_A² used as ridge term of the appearance posterior.
    pub fn ridge(&self) -> f64 {
        (self.sigma_x * self.sigma_x) / (self.sigma_a * self.sigma_a)
    }
}

/// A run of consecutive pixels in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub start: u32,
    pub len: u32,
}

/// Pixel support of a patch, stored run-length encoded over row-major pixel
/// indices (`y * width + x`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PixelMask {
    runs: Vec<Run>,
}

impl PixelMask {
    pub fn from_runs(mut runs: Vec<Run>) -> Self {
        runs.retain(|r| r.len > 0);
        runs.sort_by_key(|r| r.start);
        PixelMask { runs }
    }

    /// Encodes an arbitrary set of linear pixel indices.
    pub fn from_indices<I: IntoIterator<Item = u32>>(indices: I) -> Self {
        let set: BTreeSet<u32> = indices.into_iter().collect();
        let mut runs: Vec<Run> = Vec::new();
        for p in set {
            match runs.last_mut() {
                Some(r) if r.start + r.len == p => r.len += 1,
                _ => runs.push(Run { start: p, len: 1 }),
            }
        }
        PixelMask { runs }
    }

    /// Axis-aligned rectangle `[x0, x1) × [y0, y1)` in an image of the given width.
    pub fn rect(width: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let runs = (y0..y1)
            .filter(|_| x1 > x0)
            .map(|y| Run {
                start: y * width + x0,
                len: x1 - x0,
            })
            .collect();
        PixelMask { runs }
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn pixel_count(&self) -> usize {
        self.runs.iter().map(|r| r.len as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|r| r.start..r.start + r.len)
    }
}

impl Serialize for PixelMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<[u32; 2]> = self.runs.iter().map(|r| [r.start, r.len]).collect();
        pairs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PixelMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<[u32; 2]>::deserialize(d)?;
        Ok(PixelMask {
            runs: pairs
                .into_iter()
                .map(|[start, len]| Run { start, len })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub id: u32,
    #[serde(rename = "rle_mask")]
    pub mask: PixelMask,
    pub feature: Vec<f64>,
}

/// One image as a bag of super-pixel patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBag {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub patches: Vec<Patch>,
    /// Symmetric list of neighboring patch-id pairs.
    pub adjacency: Vec<[u32; 2]>,
}

/// A single violated [`FeatureBag`] invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyImage,
    FeatureDim {
        patch_id: u32,
        expected: usize,
        found: usize,
    },
    NonFiniteFeature {
        patch_id: u32,
    },
    DuplicatePatchId(u32),
    PixelOutOfBounds {
        patch_id: u32,
        pixel: u32,
    },
    Overlap {
        pixel: u32,
        first: u32,
        second: u32,
    },
    Uncovered {
        count: usize,
        first: u32,
    },
    SelfLoop(u32),
    UnknownEndpoint {
        pair: [u32; 2],
    },
    Asymmetric {
        pair: [u32; 2],
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyImage => write!(f, "image has zero area"),
            Violation::FeatureDim {
                patch_id,
                expected,
                found,
            } => write!(
                f,
                "patch {patch_id}: feature length {found}, expected {expected}"
            ),
            Violation::NonFiniteFeature { patch_id } => {
                write!(f, "patch {patch_id}: non-finite feature value")
            }
            Violation::DuplicatePatchId(id) => write!(f, "duplicate patch id {id}"),
            Violation::PixelOutOfBounds { patch_id, pixel } => {
                write!(f, "patch {patch_id}: pixel {pixel} outside image")
            }
            Violation::Overlap {
                pixel,
                first,
                second,
            } => write!(f, "pixel {pixel} claimed by patches {first} and {second}"),
            Violation::Uncovered { count, first } => {
                write!(f, "{count} pixels not covered by any patch (first {first})")
            }
            Violation::SelfLoop(id) => write!(f, "self-loop on patch {id}"),
            Violation::UnknownEndpoint { pair } => {
                write!(f, "adjacency ({}, {}) references unknown patch", pair[0], pair[1])
            }
            Violation::Asymmetric { pair } => write!(
                f,
                "adjacency ({}, {}) has no reverse pair ({}, {})",
                pair[0], pair[1], pair[1], pair[0]
            ),
        }
    }
}

/// Result of [`validate_bag`]; empty means the bag is well formed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BagReport {
    pub violations: Vec<Violation>,
}

impl BagReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self, image_id: &str) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidBag {
                image_id: image_id.to_string(),
                violations: self.violations.iter().map(ToString::to_string).collect(),
            })
        }
    }
}

/// Checks every [`FeatureBag`] invariant and reports all violations found.
pub fn validate_bag(bag: &FeatureBag) -> BagReport {
    let mut violations = Vec::new();
    let area = bag.width as usize * bag.height as usize;
    if area == 0 {
        violations.push(Violation::EmptyImage);
    }

    let dim = bag.patches.first().map(|p| p.feature.len()).unwrap_or(0);
    let mut ids = HashMap::with_capacity(bag.patches.len());
    for p in &bag.patches {
        if p.feature.len() != dim {
            violations.push(Violation::FeatureDim {
                patch_id: p.id,
                expected: dim,
                found: p.feature.len(),
            });
        }
        if p.feature.iter().any(|v| !v.is_finite()) {
            violations.push(Violation::NonFiniteFeature { patch_id: p.id });
        }
        if ids.insert(p.id, ()).is_some() {
            violations.push(Violation::DuplicatePatchId(p.id));
        }
    }

    // Pixel ownership: disjoint and covering.
    const FREE: u32 = u32::MAX;
    let mut owner = vec![FREE; area];
    for p in &bag.patches {
        for px in p.mask.iter() {
            match owner.get_mut(px as usize) {
                None => {
                    violations.push(Violation::PixelOutOfBounds {
                        patch_id: p.id,
                        pixel: px,
                    });
                    break;
                }
                Some(o) if *o == FREE => *o = p.id,
                Some(o) => {
                    violations.push(Violation::Overlap {
                        pixel: px,
                        first: *o,
                        second: p.id,
                    });
                    break;
                }
            }
        }
    }
    let uncovered: Vec<usize> = owner
        .iter()
        .enumerate()
        .filter(|(_, o)| **o == FREE)
        .map(|(i, _)| i)
        .collect();
    if !uncovered.is_empty() {
        violations.push(Violation::Uncovered {
            count: uncovered.len(),
            first: uncovered[0] as u32,
        });
    }

    let pairs: BTreeSet<(u32, u32)> = bag.adjacency.iter().map(|e| (e[0], e[1])).collect();
    for &[a, b] in &bag.adjacency {
        if a == b {
            violations.push(Violation::SelfLoop(a));
            continue;
        }
        if !ids.contains_key(&a) || !ids.contains_key(&b) {
            violations.push(Violation::UnknownEndpoint { pair: [a, b] });
            continue;
        }
        if !pairs.contains(&(b, a)) {
            violations.push(Violation::Asymmetric { pair: [a, b] });
        }
    }
    BagReport { violations }
}

impl FeatureBag {
    pub fn n_patches(&self) -> usize {
        self.patches.len()
    }

    /// Feature dimension D, or 0 for a bag without patches.
    pub fn dim(&self) -> usize {
        self.patches.first().map(|p| p.feature.len()).unwrap_or(0)
    }

    /// Neighbor lists by patch index (sorted, deduplicated).
    pub fn neighbors(&self) -> Result<Vec<Vec<usize>>> {
        let index: HashMap<u32, usize> = self
            .patches
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id, i))
            .collect();
        let mut sets = vec![BTreeSet::new(); self.patches.len()];
        for &[a, b] in &self.adjacency {
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                return Err(Error::InvalidBag {
                    image_id: self.image_id.clone(),
                    violations: vec![Violation::UnknownEndpoint { pair: [a, b] }.to_string()],
                });
            };
            if ia != ib {
                sets[ia].insert(ib);
                sets[ib].insert(ia);
            }
        }
        Ok(sets.into_iter().map(|s| s.into_iter().collect()).collect())
    }

    /// Patch index owning each pixel, row-major. Fails if a pixel is uncovered.
    pub fn pixel_owner(&self) -> Result<Vec<usize>> {
        let area = self.width as usize * self.height as usize;
        let mut owner = vec![usize::MAX; area];
        for (j, p) in self.patches.iter().enumerate() {
            for px in p.mask.iter() {
                if let Some(o) = owner.get_mut(px as usize) {
                    *o = j;
                }
            }
        }
        if let Some(px) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::InvalidBag {
                image_id: self.image_id.clone(),
                violations: vec![format!("pixel {px} not covered by any patch")],
            });
        }
        Ok(owner)
    }
}

/// Per-image annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Annotation {
    None,
    /// Image-level presence per supervised factor.
    Weak { weak: Vec<bool> },
    /// Patch-level presence, one vector per patch.
    Strong { strong: Vec<Vec<bool>> },
}

/// Supervision attached to one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionLabels {
    pub annotation: Annotation,
    /// Supervised factors this annotation speaks for; `None` means all of them.
    /// Unannotated supervised factors behave as unsupervised for this image.
    pub annotated: Option<Vec<bool>>,
    /// Per-patch foreground flag.
    pub foreground: Option<Vec<bool>>,
}

impl SupervisionLabels {
    pub fn none() -> Self {
        SupervisionLabels {
            annotation: Annotation::None,
            annotated: None,
            foreground: None,
        }
    }

    pub fn weak(labels: Vec<bool>) -> Self {
        SupervisionLabels {
            annotation: Annotation::Weak { weak: labels },
            annotated: None,
            foreground: None,
        }
    }

    pub fn strong(labels: Vec<Vec<bool>>) -> Self {
        SupervisionLabels {
            annotation: Annotation::Strong { strong: labels },
            annotated: None,
            foreground: None,
        }
    }

    pub fn is_annotated(&self, k: usize) -> bool {
        match &self.annotated {
            None => true,
            Some(mask) => mask.get(k).copied().unwrap_or(false),
        }
    }

    /// Strong labels collapsed to image-level presence.
    pub fn to_weak(&self) -> Self {
        let annotation = match &self.annotation {
            Annotation::Strong { strong } => {
                let k = strong.first().map_or(0, Vec::len);
                let weak = (0..k).map(|f| strong.iter().any(|row| row[f])).collect();
                Annotation::Weak { weak }
            }
            other => other.clone(),
        };
        SupervisionLabels {
            annotation,
            ..self.clone()
        }
    }

    /// Checks label lengths against `k_supervised` and the patch count.
    pub fn validate(&self, k_supervised: usize, n_patches: usize) -> Result<()> {
        match &self.annotation {
            Annotation::None => {}
            Annotation::Weak { weak } => {
                if weak.len() != k_supervised {
                    return Err(Error::Labels(format!(
                        "weak label length {} != k_supervised {}",
                        weak.len(),
                        k_supervised
                    )));
                }
            }
            Annotation::Strong { strong } => {
                if strong.len() != n_patches {
                    return Err(Error::Labels(format!(
                        "strong labels for {} patches, bag has {}",
                        strong.len(),
                        n_patches
                    )));
                }
                if let Some(row) = strong.iter().find(|r| r.len() != k_supervised) {
                    return Err(Error::Labels(format!(
                        "strong label length {} != k_supervised {}",
                        row.len(),
                        k_supervised
                    )));
                }
            }
        }
        if let Some(mask) = &self.annotated {
            if mask.len() != k_supervised {
                return Err(Error::Labels("annotated mask length != k_supervised".into()));
            }
        }
        if let Some(fg) = &self.foreground {
            if fg.len() != n_patches {
                return Err(Error::Labels(format!(
                    "foreground mask for {} patches, bag has {}",
                    fg.len(),
                    n_patches
                )));
            }
        }
        Ok(())
    }
}

/// An image paired with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBag {
    pub bag: FeatureBag,
    pub labels: SupervisionLabels,
}

/// A collection of images sharing one attribute vocabulary. Label vectors
/// index into `attributes`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub attributes: Vec<String>,
    pub items: Vec<LabeledBag>,
}

impl Dataset {
    pub fn bags(&self) -> Vec<FeatureBag> {
        self.items.iter().map(|i| i.bag.clone()).collect()
    }
}

/// Binary factor assignment of one image (patches × active factors) with
/// cached column counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorState {
    n_patches: usize,
    k_active: usize,
    cells: Vec<u8>,
    counts: Vec<usize>,
}

impl FactorState {
    pub fn zeros(n_patches: usize, k_active: usize) -> Self {
        FactorState {
            n_patches,
            k_active,
            cells: vec![0; n_patches * k_active],
            counts: vec![0; k_active],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        let mut state = FactorState::zeros(rows.len(), k);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Dimension(format!(
                    "row {j} has {} factors, expected {k}",
                    row.len()
                )));
            }
            for (f, &v) in row.iter().enumerate() {
                state.set(j, f, v);
            }
        }
        Ok(state)
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn k_active(&self) -> usize {
        self.k_active
    }

    /// Column sums m_k.
    pub fn active_count(&self) -> &[usize] {
        &self.counts
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> bool {
        self.cells[j * self.k_active + k] != 0
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, value: bool) {
        let cell = &mut self.cells[j * self.k_active + k];
        let old = *cell != 0;
        if old != value {
            *cell = value as u8;
            if value {
                self.counts[k] += 1;
            } else {
                self.counts[k] -= 1;
            }
        }
    }

    pub fn row(&self, j: usize) -> &[u8] {
        &self.cells[j * self.k_active..(j + 1) * self.k_active]
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        (0..self.n_patches)
            .map(|j| self.row(j).iter().map(|&c| c != 0).collect())
            .collect()
    }

    /// Appends `n` all-zero columns.
    pub fn add_columns(&mut self, n: usize) {
        self.resize_columns(self.k_active + n);
    }

    /// Grows (zero-filling) or truncates the factor dimension.
    pub fn resize_columns(&mut self, k: usize) {
        if k == self.k_active {
            return;
        }
        let mut cells = vec![0u8; self.n_patches * k];
        let keep = k.min(self.k_active);
        for j in 0..self.n_patches {
            cells[j * k..j * k + keep].copy_from_slice(&self.row(j)[..keep]);
        }
        self.cells = cells;
        self.k_active = k;
        self.recount();
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&mut self, keep: &[usize]) {
        let k = keep.len();
        let mut cells = vec![0u8; self.n_patches * k];
        for j in 0..self.n_patches {
            for (dst, &src) in keep.iter().enumerate() {
                cells[j * k + dst] = self.cells[j * self.k_active + src];
            }
        }
        self.cells = cells;
        self.k_active = k;
        self.recount();
    }

    fn recount(&mut self) {
        self.counts = vec![0; self.k_active];
        for j in 0..self.n_patches {
            for k in 0..self.k_active {
                self.counts[k] += self.cells[j * self.k_active + k] as usize;
            }
        }
    }

    /// Returns true when every cached count matches its column sum.
    pub fn counts_consistent(&self) -> bool {
        (0..self.k_active).all(|k| {
            (0..self.n_patches)
                .filter(|&j| self.get(j, k))
                .count()
                == self.counts[k]
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FactorStateRepr {
    k_active: usize,
    rows: Vec<String>,
}

impl Serialize for FactorState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FactorStateRepr {
            k_active: self.k_active,
            rows: (0..self.n_patches)
                .map(|j| {
                    self.row(j)
                        .iter()
                        .map(|&c| if c != 0 { '1' } else { '0' })
                        .collect()
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FactorState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = FactorStateRepr::deserialize(d)?;
        let rows: Vec<Vec<bool>> = repr
            .rows
            .iter()
            .map(|r| r.chars().map(|c| c == '1').collect())
            .collect();
        if rows.iter().any(|r| r.len() != repr.k_active) {
            return Err(D::Error::custom("factor state row length != k_active"));
        }
        let mut state = FactorState::from_rows(&rows).map_err(D::Error::custom)?;
        if rows.is_empty() {
            state.k_active = repr.k_active;
            state.counts = vec![0; repr.k_active];
        }
        Ok(state)
    }
}

/// Name given to factor `index` when it carries no attribute name.
pub fn free_factor_name(index: usize) -> String {
    format!("free-{index}")
}

/// Factor appearance: posterior mean (K × D), row covariance (K × K), names,
/// and optionally the sampled loadings the sampler should use instead of the
/// mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub mean: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub factor_names: Vec<String>,
    pub hyperparams: Hyperparams,
    pub draw: Option<DMatrix<f64>>,
}

impl AppearanceModel {
    /// Zero-mean prior with covariance σ_A²·I; supervised names first, then
    /// generated names for the remaining factors.
    pub fn uninformative(k: usize, dim: usize, names: &[String], hp: Hyperparams) -> Self {
        let factor_names = (0..k)
            .map(|i| names.get(i).cloned().unwrap_or_else(|| free_factor_name(i)))
            .collect();
        AppearanceModel {
            mean: DMatrix::zeros(k, dim),
            covariance: DMatrix::identity(k, k) * (hp.sigma_a * hp.sigma_a),
            factor_names,
            hyperparams: hp,
            draw: None,
        }
    }

    pub fn k(&self) -> usize {
        self.mean.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    /// The loadings `A` used for inference: the last draw if one was taken,
    /// otherwise the posterior mean.
    pub fn loadings(&self) -> &DMatrix<f64> {
        self.draw.as_ref().unwrap_or(&self.mean)
    }

    pub fn check(&self) -> Result<()> {
        let k = self.mean.nrows();
        if self.covariance.nrows() != k || self.covariance.ncols() != k {
            return Err(Error::Dimension(format!(
                "covariance is {}x{}, mean has {k} rows",
                self.covariance.nrows(),
                self.covariance.ncols()
            )));
        }
        if self.factor_names.len() != k {
            return Err(Error::Dimension(format!(
                "{} factor names for {k} factors",
                self.factor_names.len()
            )));
        }
        if let Some(d) = &self.draw {
            if d.shape() != self.mean.shape() {
                return Err(Error::Dimension("draw shape differs from mean".into()));
            }
        }
        for i in 0..k {
            if self.covariance[(i, i)].is_nan() || self.covariance[(i, i)] <= 0.0 {
                return Err(Error::NotPositiveDefinite("covariance diagonal"));
            }
            for j in 0..i {
                if self.covariance[(i, j)] != self.covariance[(j, i)] {
                    return Err(Error::Config("covariance is not symmetric".into()));
                }
            }
        }
        Ok(())
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factor_names.iter().position(|n| n == name)
    }
}

/// ln(n!) for the small integers that occur as patch counts.
pub(crate) fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Log of the per-image urn term `(N−m)!(m−1)!/N!` for one active column.
pub(crate) fn ln_urn(n: usize, m: usize) -> f64 {
    debug_assert!(m >= 1 && m <= n);
    ln_factorial(n - m) + ln_factorial(m - 1) - ln_factorial(n)
}

/// Number of unordered neighbor pairs that agree on factor `k`.
pub(crate) fn agreeing_pairs(state: &FactorState, neighbors: &[Vec<usize>], k: usize) -> usize {
    neighbors
        .iter()
        .enumerate()
        .map(|(j, ns)| {
            ns.iter()
                .filter(|&&o| o > j && state.get(o, k) == state.get(j, k))
                .count()
        })
        .sum()
}

/// Unnormalized log of the joint density of appearance, factor states and
/// features.
///
/// Terms that do not depend on `Z` or `A` at fixed K₊ (the α^{K₊} factor, the
/// factor-history normalizer and the harmonic-sum term) are left out. The
/// Potts term counts every unordered neighbor pair once, which makes its
/// single-cell ratios coincide with [`crate::gibbs::factor_conditional`].
pub fn log_joint(
    bags: &[FeatureBag],
    states: &[FactorState],
    appearance: &AppearanceModel,
    hp: &Hyperparams,
) -> Result<f64> {
    if bags.len() != states.len() {
        return Err(Error::Dimension(format!(
            "{} bags but {} states",
            bags.len(),
            states.len()
        )));
    }
    let a = appearance.loadings();
    let (k, dim) = (a.nrows(), a.ncols());

    let var_a = hp.sigma_a * hp.sigma_a;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = -0.5 * (k * dim) as f64 * (ln_2pi + var_a.ln())
        - a.iter().map(|v| v * v).sum::<f64>() / (2.0 * var_a);

    let var_x = hp.sigma_x * hp.sigma_x;
    for (bag, state) in bags.iter().zip(states) {
        if state.n_patches() != bag.n_patches() {
            return Err(Error::Dimension(format!(
                "{}: state has {} rows, bag has {} patches",
                bag.image_id,
                state.n_patches(),
                bag.n_patches()
            )));
        }
        if state.k_active() != k {
            return Err(Error::Dimension(format!(
                "{}: state has {} factors, appearance has {k}",
                bag.image_id,
                state.k_active()
            )));
        }
        if bag.n_patches() > 0 && bag.dim() != dim {
            return Err(Error::Dimension(format!(
                "{}: feature dim {} != appearance dim {dim}",
                bag.image_id,
                bag.dim()
            )));
        }
        let n = bag.n_patches();
        let neighbors = bag.neighbors()?;
        for (f, &m) in state.active_count().iter().enumerate() {
            if m >= 1 {
                total += ln_urn(n, m);
            }
            total += hp.beta * agreeing_pairs(state, &neighbors, f) as f64;
        }
        for (j, patch) in bag.patches.iter().enumerate() {
            let row = state.row(j);
            let sq: f64 = (0..dim)
                .map(|d| {
                    let pred: f64 = (0..k).filter(|&f| row[f] != 0).map(|f| a[(f, d)]).sum();
                    let r = patch.feature[d] - pred;
                    r * r
                })
                .sum();
            total += -0.5 * dim as f64 * (ln_2pi + var_x.ln()) - sq / (2.0 * var_x);
        }
    }
    Ok(total)
}
