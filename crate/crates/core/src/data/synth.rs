//! Deterministic histology-like synthetic images.
//!
//! Background is a pink value-noise texture with fine speckle. Positive images
//! add 1–4 rotated ellipses in a blue-violet palette with heavier speckle and
//! dark nuclei; the mask is exactly the union of ellipse interiors sampled at
//! pixel centers.

use std::path::Path;

use rand::{Rng as _, RngCore};

use super::{assign_splits, DataError, Dataset, ImageRecord, Result, RgbImage, Split};
use crate::mask::BinaryMask;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub positive_fraction: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Per-class train fraction of the stratified split.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 80,
            positive_fraction: 0.48,
            width: 192,
            height: 144,
            seed: 42,
            train_fraction: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::InvalidArgument(msg));
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(16) || !self.height.is_multiple_of(16) {
            return bad(format!(
                "width and height must be positive multiples of 16, got {}x{}",
                self.width, self.height
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!("positive fraction must be in [0, 1], got {}", self.positive_fraction));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction must be in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }

    pub fn positive_count(&self) -> usize {
        (self.count as f64 * self.positive_fraction).round() as usize
    }
}

/// Rotated ellipse with semi-axes `a` (along `theta`) and `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Closed interior test at point `(x, y)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (dy * c - dx * s) / self.b;
        u * u + v * v <= 1.0
    }

    /// Whether pixel `(x, y)` (sampled at its center) lies inside.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        self.contains(x as f64 + 0.5, y as f64 + 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub ellipses: Vec<Ellipse>,
}

/// Smooth lattice noise in `[0, 1]` with the given cell size.
struct ValueNoise {
    cell: f64,
    cols: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(width: usize, height: usize, cell: f64, rng: &mut Rng) -> Self {
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        let grid = (0..cols * rows).map(|_| rng.random::<f64>()).collect();
        Self { cell, cols, grid }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx.fract()), smooth(gy.fract()));
        let g = |i: usize, j: usize| self.grid[j * self.cols + i];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
}

fn to_u8(px: [f64; 3]) -> [u8; 3] {
    px.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

const EOSIN_LIGHT: [f64; 3] = [240.0, 196.0, 214.0];
const EOSIN_DARK: [f64; 3] = [214.0, 140.0, 178.0];
const BASO_LIGHT: [f64; 3] = [146.0, 98.0, 192.0];
const BASO_DARK: [f64; 3] = [82.0, 52.0, 140.0];
const NUCLEUS: [f64; 3] = [48.0, 28.0, 96.0];

/// Renders one image from its own seed.
pub fn synth_image(width: usize, height: usize, positive: bool, seed: u64) -> SynthImage {
    let mut rng = rng::seeded(seed);
    let coarse = ValueNoise::new(width, height, 36.0, &mut rng);
    let fine = ValueNoise::new(width, height, 9.0, &mut rng);

    let ellipses = if positive {
        let min_dim = width.min(height) as f64;
        let n = rng.random_range(1..=4);
        (0..n)
            .map(|_| Ellipse {
                cx: rng.random_range(0.0..width as f64),
                cy: rng.random_range(0.0..height as f64),
                a: rng.random_range(0.08..=0.25) * min_dim,
                b: rng.random_range(0.08..=0.25) * min_dim,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            })
            .collect()
    } else {
        Vec::new()
    };
    // Centers lie inside the image and semi-axes exceed half a pixel diagonal,
    // so every positive image covers at least one pixel center.
    let mask = BinaryMask::from_fn(width, height, |x, y| ellipses.iter().any(|e| e.covers_pixel(x, y)));

    let mut image = RgbImage::filled(width, height, [0, 0, 0]);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture = 0.7 * coarse.at(fx, fy) + 0.3 * fine.at(fx, fy);
            let speckle: f64 = rng.random_range(-1.0..1.0);
            let px = if mask.get(x, y) {
                let base = lerp(BASO_LIGHT, BASO_DARK, texture);
                let nucleus = rng.random::<f64>() < 0.12;
                let base = if nucleus { lerp(base, NUCLEUS, 0.7) } else { base };
                base.map(|v| v + 28.0 * speckle)
            } else {
                lerp(EOSIN_LIGHT, EOSIN_DARK, texture).map(|v| v + 10.0 * speckle)
            };
            image.put(x, y, to_u8(px));
        }
    }
    SynthImage { image, mask, ellipses }
}

/// Per-image seeds and positive flags for a configuration, in id order.
fn plan(config: &SynthConfig) -> Vec<(u64, bool)> {
    let mut master = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..config.count).collect();
    rng::shuffle(&mut order, &mut master);
    let mut positive = vec![false; config.count];
    for &i in &order[..config.positive_count()] {
        positive[i] = true;
    }
    positive.into_iter().map(|p| (master.next_u64(), p)).collect()
}

/// Builds the dataset in memory without touching the filesystem.
pub fn synth_dataset(config: &SynthConfig) -> Result<(Dataset, Vec<Vec<Ellipse>>)> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.count);
    let mut shapes = Vec::with_capacity(config.count);
    let digits = (config.count - 1).to_string().len().max(4);
    for (i, (seed, positive)) in plan(config).into_iter().enumerate() {
        let s = synth_image(config.width, config.height, positive, seed);
        records.push(ImageRecord::new(format!("synth_{i:0digits$}"), s.image, s.mask, Split::Train));
        shapes.push(s.ellipses);
    }
    let dataset = Dataset {
        root: Default::default(),
        records,
    };
    let classes: Vec<Vec<usize>> = [true, false]
        .iter()
        .map(|&l| (0..dataset.len()).filter(|&i| dataset.records[i].label == l).collect())
        .collect();
    let split_seed = config.seed.wrapping_add(0x5851_f42d_4c95_7f2d);
    Ok((assign_splits(&dataset, &classes, config.train_fraction, split_seed), shapes))
}

/// Generates, writes and returns a synthetic dataset rooted at `out_dir`.
pub fn synth_generate(out_dir: impl AsRef<Path>, config: &SynthConfig) -> Result<Dataset> {
    let (mut dataset, _) = synth_dataset(config)?;
    dataset.root = out_dir.as_ref().to_path_buf();
    dataset.write(out_dir.as_ref())?;
    Ok(dataset)
}
