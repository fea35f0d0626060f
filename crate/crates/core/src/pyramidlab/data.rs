use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traingraph::{Dataset, Tensor};

pub const LEVELS: usize = 3;
pub const CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; CLASSES] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn label(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Side of the square single-channel image.
    pub image: usize,
    /// Probability of each pyramid level.
    pub mixture: [f64; LEVELS],
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Distance between the size bands of neighbouring levels, in units of
    /// the default spacing. 0 gives every level the same size band.
    pub spread: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image: 32,
            mixture: [1.0 / 3.0; LEVELS],
            noise: 0.1,
            spread: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mixture.iter().sum();
        if self.mixture.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights {:?} must be non-negative and sum to 1",
                self.mixture
            )));
        }
        if self.image < 8 || !self.image.is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!(
                "image side {} must be a multiple of 4 and at least 8",
                self.image
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidConfig("noise must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.spread) {
            return Err(Error::InvalidConfig("spread must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Inclusive object side range of `level`.
    pub fn size_band(&self, level: usize) -> (usize, usize) {
        let s = self.image as f64;
        let centre = s * (0.5 + 0.25 * self.spread * (level as f64 - 1.0));
        let half = s / 16.0;
        let lo = (centre - half).round().max(3.0) as usize;
        let hi = ((centre + half).round() as usize).clamp(lo, self.image - 1);
        (lo, hi)
    }

    /// Level whose band contains `size`, the nearest band centre on overlap.
    pub fn level_of_size(&self, size: usize) -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for l in 0..LEVELS {
            let (lo, hi) = self.size_band(l);
            let d = (size as f64 - (lo + hi) as f64 / 2.0).abs();
            if d < dist {
                best = l;
                dist = d;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidSample {
    /// `1 x image x image`, row major.
    pub image: Vec<f64>,
    pub label: usize,
    pub scale_level: usize,
    pub size: usize,
}

/// Whether pixel `(y, x)` of an `s x s` box lies inside `shape`.
fn inside(shape: Shape, s: usize, y: usize, x: usize) -> bool {
    let sf = s as f64;
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let c = (sf - 1.0) / 2.0;
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            dy * dy + dx * dx <= (sf / 2.0) * (sf / 2.0)
        }
        Shape::Triangle => {
            // Apex at the top centre, base on the bottom row.
            let half_width = (y as f64 + 1.0) / 2.0;
            ((x as f64 + 0.5) - sf / 2.0).abs() <= half_width
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, cfg: &DatasetConfig, noise: &Normal<f64>) -> PyramidSample {
    let u: f64 = rng.gen();
    let mut level = LEVELS - 1;
    let mut acc = 0.0;
    for (l, w) in cfg.mixture.iter().enumerate() {
        acc += w;
        if u < acc && *w > 0.0 {
            level = l;
            break;
        }
    }
    while cfg.mixture[level] == 0.0 {
        level -= 1;
    }
    let shape = Shape::ALL[rng.gen_range(0..CLASSES)];
    let (lo, hi) = cfg.size_band(level);
    let size = rng.gen_range(lo..=hi);
    let n = cfg.image;
    let oy = rng.gen_range(0..=n - size);
    let ox = rng.gen_range(0..=n - size);
    let intensity = rng.gen_range(0.6..1.0);
    let mut image = vec![0.0; n * n];
    for y in 0..size {
        for x in 0..size {
            if inside(shape, size, y, x) {
                image[(oy + y) * n + ox + x] = intensity;
            }
        }
    }
    for v in &mut image {
        *v += noise.sample(rng);
    }
    PyramidSample {
        image,
        label: shape.label(),
        scale_level: level,
        size,
    }
}

/// `n` samples, each one object whose size band sets its level.
pub fn gen_dataset(seed: u64, n: usize, cfg: &DatasetConfig) -> Result<Vec<PyramidSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok((0..n).map(|_| draw(&mut rng, cfg, &noise)).collect())
}

/// Packs samples into a training set scored at each sample's level.
pub fn to_dataset(samples: &[PyramidSample], image: usize) -> Result<Dataset> {
    let mut data = Vec::with_capacity(samples.len() * image * image);
    for s in samples {
        if s.image.len() != image * image {
            return Err(Error::Shape(format!("sample of {} pixels, expected {}", s.image.len(), image * image)));
        }
        data.extend_from_slice(&s.image);
    }
    let images = Tensor::from_vec([samples.len(), 1, image, image], data)?;
    Dataset::new(
        images,
        samples.iter().map(|s| s.label).collect(),
        samples.iter().map(|s| s.scale_level).collect(),
    )
}

/// Samples as little-endian `f64` bytes, for determinism checks.
pub fn dataset_bytes(samples: &[PyramidSample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        out.extend_from_slice(&(s.scale_level as u32).to_le_bytes());
        out.extend_from_slice(&(s.size as u32).to_le_bytes());
        for v in &s.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
