//! Color codebooks (k-means over RGB and Lab) and a grid-cell histogram
//! feature extractor standing in for super-pixel features.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::model::{FeatureBag, Patch, PixelMask};
use crate::rng;

pub type Color = [f64; 3];

const MAX_ITERATIONS: usize = 100;

/// Plain RGB raster, row-major, 8 bits per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Raster {
            width,
            height,
            pixels: vec![rgb; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        self.pixels[(y * self.width + x) as usize] = rgb;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<Color>,
    /// Sum of squared distances to the nearest centroid, recorded after
    /// every assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &Color, b: &Color) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn nearest(c: &Color, centroids: &[Color]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, m) in centroids.iter().enumerate() {
        let d = sq_dist(c, m);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn quantize(&self, c: &Color) -> usize {
        nearest(c, &self.centroids).0
    }
}

/// Lloyd's k-means, initialized with `k` distinct sample points chosen by
/// `seed`. A cluster that loses all its points keeps its previous centroid.
pub fn build_codebook(pixels: &[Color], k: usize, seed: u64) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    let mut distinct: Vec<Color> = pixels.to_vec();
    distinct.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Config(format!(
            "{} distinct colors, cannot build {k} code words",
            distinct.len()
        )));
    }
    let mut r = rng::stream(seed, &["codebook"]);
    let mut centroids: Vec<Color> = index::sample(&mut r, distinct.len(), k)
        .into_iter()
        .map(|i| distinct[i])
        .collect();

    let mut assign = vec![usize::MAX; pixels.len()];
    let mut objective = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut total = 0.0;
        for (a, p) in assign.iter_mut().zip(pixels) {
            let (i, d) = nearest(p, &centroids);
            total += d;
            if *a != i {
                *a = i;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(pixels) {
            counts[a] += 1;
            for c in 0..3 {
                sums[a][c] += p[c];
            }
        }
        for i in 0..k {
            if counts[i] > 0 {
                centroids[i] = sums[i].map(|s| s / counts[i] as f64);
            }
        }
    }
    Ok(Codebook {
        centroids,
        objective,
    })
}

pub fn rgb_to_color(rgb: [u8; 3]) -> Color {
    rgb.map(f64::from)
}

/// sRGB (8-bit) to CIE L*a*b* under the D65 white point.
pub fn rgb_to_lab(rgb: [u8; 3]) -> Color {
    let lin = rgb.map(|v| {
        let c = f64::from(v) / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
    let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
    let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
    let f = |t: f64| {
        let d: f64 = 6.0 / 29.0;
        if t > d * d * d {
            t.cbrt()
        } else {
            t / (3.0 * d * d) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// The RGB and Lab codebooks used by [`extract_color_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorCodebooks {
    pub rgb: Codebook,
    pub lab: Codebook,
}

impl ColorCodebooks {
    /// Builds both codebooks from the pixels of `images`.
    pub fn train(images: &[Raster], k: usize, seed: u64) -> Result<Self> {
        let pixels: Vec<[u8; 3]> = images.iter().flat_map(|r| r.pixels.iter().copied()).collect();
        let rgb: Vec<Color> = pixels.iter().map(|&p| rgb_to_color(p)).collect();
        let lab: Vec<Color> = pixels.iter().map(|&p| rgb_to_lab(p)).collect();
        Ok(ColorCodebooks {
            rgb: build_codebook(&rgb, k, seed)?,
            lab: build_codebook(&lab, k, seed.wrapping_add(1))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.rgb.k() + self.lab.k()
    }
}

/// Cell boundaries splitting `len` pixels into `n` near-equal parts.
fn cuts(len: u32, n: u32) -> Vec<u32> {
    (0..=n).map(|i| (i as u64 * len as u64 / n as u64) as u32).collect()
}

/// One patch per grid cell; feature = L1-normalized RGB histogram followed by
/// the L1-normalized Lab histogram; cells are 4-connected.
pub fn extract_color_features(
    image_id: &str,
    raster: &Raster,
    codebooks: &ColorCodebooks,
    rows: u32,
    cols: u32,
) -> Result<FeatureBag> {
    if raster.width == 0 || raster.height == 0 || raster.pixels.is_empty() {
        return Err(Error::Empty("image has no pixels"));
    }
    if raster.pixels.len() != (raster.width * raster.height) as usize {
        return Err(Error::Dimension(format!(
            "{} pixels for a {}x{} raster",
            raster.pixels.len(),
            raster.width,
            raster.height
        )));
    }
    if rows == 0 || cols == 0 || raster.width < cols || raster.height < rows {
        return Err(Error::Config(format!(
            "{}x{} image cannot hold a {rows}x{cols} cell grid",
            raster.width, raster.height
        )));
    }
    let (xs, ys) = (cuts(raster.width, cols), cuts(raster.height, rows));
    let (k_rgb, k_lab) = (codebooks.rgb.k(), codebooks.lab.k());
    let mut patches = Vec::with_capacity((rows * cols) as usize);
    let mut adjacency = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let id = r * cols + c;
            let (x0, x1, y0, y1) = (xs[c as usize], xs[c as usize + 1], ys[r as usize], ys[r as usize + 1]);
            let mut feature = vec![0.0; k_rgb + k_lab];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = raster.get(x, y);
                    feature[codebooks.rgb.quantize(&rgb_to_color(p))] += 1.0;
                    feature[k_rgb + codebooks.lab.quantize(&rgb_to_lab(p))] += 1.0;
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            feature.iter_mut().for_each(|v| *v /= n);
            patches.push(Patch {
                id,
                mask: PixelMask::rect(raster.width, x0, y0, x1, y1),
                feature,
            });
            if c + 1 < cols {
                adjacency.push([id, id + 1]);
                adjacency.push([id + 1, id]);
            }
            if r + 1 < rows {
                adjacency.push([id, id + cols]);
                adjacency.push([id + cols, id]);
            }
        }
    }
    Ok(FeatureBag {
        image_id: image_id.to_string(),
        width: raster.width,
        height: raster.height,
        patches,
        adjacency,
    })
}
