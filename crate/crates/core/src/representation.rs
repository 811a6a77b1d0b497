//! Per-pixel factor heat maps and the fixed-size grid descriptor built from
//! them: 14 windows of 32×32 pixels on a 2 (columns) × 7 (rows) grid, each
//! described by the summed activation of every factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FactorState, FeatureBag};

pub const WINDOW: u32 = 32;
pub const GRID_ROWS: usize = 7;
pub const GRID_COLS: usize = 2;
pub const N_WINDOWS: usize = GRID_ROWS * GRID_COLS;

/// Running mean of factor activation per patch over retained samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMarginals {
    n_patches: usize,
    k: usize,
    sums: Vec<f64>,
    samples: usize,
}

impl PatchMarginals {
    pub fn zeros(n_patches: usize, k: usize) -> Self {
        PatchMarginals {
            n_patches,
            k,
            sums: vec![0.0; n_patches * k],
            samples: 0,
        }
    }

    pub fn from_states(states: &[FactorState]) -> Result<Self> {
        let first = states
            .first()
            .ok_or(Error::Empty("no retained samples"))?;
        let mut m = PatchMarginals::zeros(first.n_patches(), first.k_active());
        for s in states {
            if s.n_patches() != first.n_patches() || s.k_active() != first.k_active() {
                return Err(Error::Dimension(
                    "retained samples differ in shape".into(),
                ));
            }
            m.accumulate(s);
        }
        Ok(m)
    }

    /// Adds one sample; extra factors in `state` grow the table.
    pub fn accumulate(&mut self, state: &FactorState) {
        if state.k_active() > self.k {
            self.resize_factors(state.k_active());
        }
        for j in 0..self.n_patches {
            for (f, &c) in state.row(j).iter().enumerate() {
                self.sums[j * self.k + f] += c as f64;
            }
        }
        self.samples += 1;
    }

    pub fn resize_factors(&mut self, k: usize) {
        if k == self.k {
            return;
        }
        let mut sums = vec![0.0; self.n_patches * k];
        let keep = k.min(self.k);
        for j in 0..self.n_patches {
            sums[j * k..j * k + keep].copy_from_slice(&self.sums[j * self.k..j * self.k + keep]);
        }
        self.sums = sums;
        self.k = k;
    }

    pub fn select_factors(&mut self, keep: &[usize]) {
        let k = keep.len();
        let mut sums = vec![0.0; self.n_patches * k];
        for j in 0..self.n_patches {
            for (dst, &src) in keep.iter().enumerate() {
                sums[j * k + dst] = self.sums[j * self.k + src];
            }
        }
        self.sums = sums;
        self.k = k;
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Fraction of retained samples with factor `k` on at patch `j`.
    pub fn mean(&self, j: usize, k: usize) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.sums[j * self.k + k] / self.samples as f64
        }
    }
}

/// K heat maps of one image, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMapStack {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub maps: Vec<Vec<f64>>,
}

impl HeatMapStack {
    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn value(&self, k: usize, x: u32, y: u32) -> f64 {
        self.maps[k][(y * self.width + x) as usize]
    }

    pub fn check(&self) -> Result<()> {
        let area = self.width as usize * self.height as usize;
        if let Some(m) = self.maps.iter().find(|m| m.len() != area) {
            return Err(Error::Dimension(format!(
                "{}: map has {} pixels, image has {area}",
                self.image_id,
                m.len()
            )));
        }
        if self
            .maps
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Config(format!(
                "{}: heat map values outside [0, 1]",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Heat maps painted from per-patch marginals: every pixel takes the value
/// of the patch that owns it.
pub fn heatmaps_from_marginals(bag: &FeatureBag, marginals: &PatchMarginals) -> Result<HeatMapStack> {
    if marginals.n_patches() != bag.n_patches() {
        return Err(Error::Dimension(format!(
            "{}: marginals for {} patches, bag has {}",
            bag.image_id,
            marginals.n_patches(),
            bag.n_patches()
        )));
    }
    let owner = bag.pixel_owner()?;
    let maps = (0..marginals.k())
        .map(|k| owner.iter().map(|&j| marginals.mean(j, k)).collect())
        .collect();
    Ok(HeatMapStack {
        image_id: bag.image_id.clone(),
        width: bag.width,
        height: bag.height,
        maps,
    })
}

/// Heat maps as the mean of the retained factor states.
pub fn accumulate_heatmaps(bag: &FeatureBag, trailing_states: &[FactorState]) -> Result<HeatMapStack> {
    let marginals = PatchMarginals::from_states(trailing_states)?;
    heatmaps_from_marginals(bag, &marginals)
}

/// Top-left corners of the 14 windows, ordered by row then column.
///
/// Columns sit at `round(c·(width−32))`, rows at `round(r·(height−32)/6)`.
pub fn grid_windows(width: u32, height: u32) -> Result<Vec<[u32; 2]>> {
    if width < WINDOW || height < WINDOW {
        return Err(Error::Dimension(format!(
            "image {width}x{height} is smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let span_x = (width - WINDOW) as f64;
    let span_y = (height - WINDOW) as f64;
    let mut origins = Vec::with_capacity(N_WINDOWS);
    for r in 0..GRID_ROWS {
        let y = (r as f64 * span_y / (GRID_ROWS - 1) as f64).round() as u32;
        for c in 0..GRID_COLS {
            let x = (c as f64 * span_x).round() as u32;
            origins.push([x, y]);
        }
    }
    Ok(origins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWindow {
    pub row: usize,
    pub col: usize,
    pub origin: [u32; 2],
    /// Summed activation per factor over the window's pixels.
    pub raw: Vec<f64>,
    /// `raw` scaled to unit L1 norm (zeros stay zero).
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDescriptor {
    pub image_id: String,
    pub windows: Vec<GridWindow>,
}

impl GridDescriptor {
    pub fn k(&self) -> usize {
        self.windows.first().map_or(0, |w| w.vector.len())
    }

    /// Concatenated normalized window vectors (row-major), for external
    /// metric learners.
    pub fn flatten(&self) -> Vec<f64> {
        self.windows.iter().flat_map(|w| w.vector.iter().copied()).collect()
    }
}

pub(crate) fn l1_normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().map(|x| x.abs()).sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn assemble(image_id: &str, origins: Vec<[u32; 2]>, raws: Vec<Vec<f64>>) -> GridDescriptor {
    let windows = origins
        .into_iter()
        .zip(raws)
        .enumerate()
        .map(|(i, (origin, raw))| GridWindow {
            row: i / GRID_COLS,
            col: i % GRID_COLS,
            origin,
            vector: l1_normalized(&raw),
            raw,
        })
        .collect();
    GridDescriptor {
        image_id: image_id.to_string(),
        windows,
    }
}

/// Window descriptors from a heat-map stack.
pub fn grid_descriptor(stack: &HeatMapStack) -> Result<GridDescriptor> {
    let origins = grid_windows(stack.width, stack.height)?;
    let raws = origins
        .iter()
        .map(|&[x0, y0]| {
            stack
                .maps
                .iter()
                .map(|map| {
                    let mut s = 0.0;
                    for y in y0..y0 + WINDOW {
                        let row = (y * stack.width) as usize;
                        for x in x0..x0 + WINDOW {
                            s += map[row + x as usize];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect();
    Ok(assemble(&stack.image_id, origins, raws))
}

/// Window descriptors straight from patch marginals, weighting each patch by
/// its pixel overlap with the window. Avoids materializing K full maps.
pub fn descriptor_from_marginals(bag: &FeatureBag, marginals: &PatchMarginals) -> Result<GridDescriptor> {
    if marginals.n_patches() != bag.n_patches() {
        return Err(Error::Dimension(format!(
            "{}: marginals for {} patches, bag has {}",
            bag.image_id,
            marginals.n_patches(),
            bag.n_patches()
        )));
    }
    let origins = grid_windows(bag.width, bag.height)?;
    let owner = bag.pixel_owner()?;
    let mut overlap = vec![0usize; bag.n_patches()];
    let raws = origins
        .iter()
        .map(|&[x0, y0]| {
            overlap.iter_mut().for_each(|o| *o = 0);
            for y in y0..y0 + WINDOW {
                let row = (y * bag.width) as usize;
                for x in x0..x0 + WINDOW {
                    overlap[owner[row + x as usize]] += 1;
                }
            }
            (0..marginals.k())
                .map(|k| {
                    overlap
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0)
                        .map(|(j, &c)| c as f64 * marginals.mean(j, k))
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(assemble(&bag.image_id, origins, raws))
}
