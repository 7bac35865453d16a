//! Synthetic burst sequences with recorded degradations.
//!
//! Frame `i` is an integer-shifted crop of a procedural ground-truth image,
//! Gaussian-blurred, then corrupted with signal-dependent Gaussian noise of
//! variance `gain·x + read_sigma²`. Frame 0 is the reference: zero shift and
//! zero corruption.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn lerp(&self, t: f64) -> f64 {
        self.min + t * (self.max - self.min)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min >= 0.0 && self.max >= self.min && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "{name}: range [{}, {}] must be finite, nonnegative and ordered",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Maximum absolute integer shift per axis, in pixels.
    pub shift_range: usize,
    pub blur_sigma: Range,
    pub noise_gain: Range,
    pub read_sigma: Range,
    /// Probability that a sequence carries one planted, maximally corrupted frame.
    pub planted_outlier_prob: f64,
    /// Upper bound on the corruption level of ordinary (non-planted) frames in
    /// a planted sequence.
    pub inlier_max_corruption: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 14,
            height: 64,
            width: 64,
            shift_range: 4,
            blur_sigma: Range::new(0.0, 1.5),
            noise_gain: Range::new(0.001, 0.04),
            read_sigma: Range::new(0.005, 0.03),
            planted_outlier_prob: 0.0,
            inlier_max_corruption: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("frames must be >= 2, got {}", self.frames)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("height and width must be positive".into()));
        }
        self.blur_sigma.validate("blur_sigma")?;
        self.noise_gain.validate("noise_gain")?;
        self.read_sigma.validate("read_sigma")?;
        if !(0.0..=1.0).contains(&self.planted_outlier_prob) {
            return Err(Error::Config("planted_outlier_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.inlier_max_corruption) {
            return Err(Error::Config("inlier_max_corruption must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Side of the ground-truth canvas needed to crop after the largest shift.
    pub fn gt_size(&self) -> (usize, usize) {
        (self.height + 2 * self.shift_range, self.width + 2 * self.shift_range)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    /// Frame content satisfies `frame(y, x) = reference(y + dy, x + dx)`.
    pub shift: (i32, i32),
    pub blur_sigma: f64,
    pub noise_gain: f64,
    pub read_sigma: f64,
    pub corruption_level: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BurstSequence {
    pub id: String,
    /// `T×C×H×W`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub ref_index: usize,
    pub meta: Vec<DegradationRecord>,
    pub planted_index: Option<usize>,
}

impl BurstSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let (c, h, w) = self.dims();
        &self.frames.data()[i * c * h * w..(i + 1) * c * h * w]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.frames.shape();
        if s.len() != 4 {
            return Err(Error::Invalid(format!("frames must be T×C×H×W, got {s:?}")));
        }
        if s[0] < 2 {
            return Err(Error::Invalid(format!("sequence {} has {} frames, need >= 2", self.id, s[0])));
        }
        if self.ref_index >= s[0] {
            return Err(Error::Invalid(format!("ref_index {} out of range for {} frames", self.ref_index, s[0])));
        }
        if self.meta.len() != s[0] {
            return Err(Error::Invalid(format!(
                "sequence {}: {} degradation records for {} frames",
                self.id,
                self.meta.len(),
                s[0]
            )));
        }
        if self.planted_index.is_some_and(|p| p >= s[0]) {
            return Err(Error::Invalid("planted_index out of range".into()));
        }
        if self.frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("sequence {}: pixel outside [0, 1]", self.id)));
        }
        Ok(())
    }

    /// Sub-sequence with the frames at `keep` (in that order). The reference
    /// follows its frame; when dropped, the first kept frame becomes reference.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let ref_index = keep.iter().position(|&i| i == self.ref_index).unwrap_or(0);
        Self {
            id: self.id.clone(),
            frames: self.frames.select_axis0(keep),
            ref_index,
            meta: keep.iter().map(|&i| self.meta[i]).collect(),
            planted_index: self.planted_index.and_then(|p| keep.iter().position(|&i| i == p)),
        }
    }
}

/// Derives an independent stream seed for item `index` of a run seeded `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a golden-ratio stride
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Procedural RGB test scene: smooth gradients, filled shapes and thin
/// stroke clusters, clipped to `[0, 1]`. Shape `3×height×width`.
pub fn generate_gt_image(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let mut img = vec![0.0f64; CHANNELS * height * width];

    let base: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.2..0.8));
    let grad: [(f64, f64); 3] = core::array::from_fn(|_| (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)));
    for c in 0..CHANNELS {
        for y in 0..height {
            for x in 0..width {
                img[(c * height + y) * width + x] =
                    base[c] + grad[c].0 * (x as f64 / w - 0.5) + grad[c].1 * (y as f64 / h - 0.5);
            }
        }
    }

    let put = |img: &mut [f64], y: usize, x: usize, color: &[f64; 3]| {
        for c in 0..CHANNELS {
            img[(c * height + y) * width + x] = color[c];
        }
    };

    let shapes = rng.random_range(6..12);
    for _ in 0..shapes {
        let color: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.0..1.0));
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        let r = rng.random_range(0.05..0.25) * h.min(w);
        let is_circle = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if is_circle {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r * 0.8 && dx.abs() <= r
                };
                if inside {
                    put(&mut img, y, x, &color);
                }
            }
        }
    }

    // "text": short horizontal/vertical strokes laid out on a line grid
    let lines = rng.random_range(2..5);
    for _ in 0..lines {
        let ink: [f64; 3] = if rng.random_bool(0.5) { [0.05; 3] } else { [0.95; 3] };
        let y0 = rng.random_range(0..height.saturating_sub(6).max(1));
        let mut x = rng.random_range(0..(width / 4).max(1));
        while x + 4 < width {
            let glyph_w = rng.random_range(2..5);
            for dx in 0..glyph_w {
                if rng.random_bool(0.6) {
                    put(&mut img, y0, (x + dx).min(width - 1), &ink);
                }
                if rng.random_bool(0.4) {
                    put(&mut img, (y0 + 4).min(height - 1), (x + dx).min(width - 1), &ink);
                }
            }
            for dy in 0..5 {
                if rng.random_bool(0.7) {
                    put(&mut img, (y0 + dy).min(height - 1), x, &ink);
                }
            }
            x += glyph_w + rng.random_range(1..3);
        }
    }

    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::new(vec![CHANNELS, height, width], data).expect("shape matches buffer")
}

/// Degrades one ground-truth canvas into a burst. Returns the sequence and
/// the reference-aligned ground truth crop (`3×H×W`).
pub fn synthesize_burst(
    gt_image: &Tensor<f32>,
    config: &GeneratorConfig,
    seed: u64,
    id: impl Into<String>,
) -> Result<(BurstSequence, Tensor<f32>)> {
    config.validate()?;
    let gs = gt_image.shape();
    let (gh, gw) = config.gt_size();
    if gs.len() != 3 || gs[0] != CHANNELS || gs[1] < gh || gs[2] < gw {
        return Err(Error::Config(format!(
            "ground truth {gs:?} too small: need 3×{gh}×{gw} to crop {}×{} after ±{} px shifts",
            config.height, config.width, config.shift_range
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = config.frames;
    let planted = if config.planted_outlier_prob > 0.0 && rng.random_bool(config.planted_outlier_prob) {
        Some(rng.random_range(1..t))
    } else {
        None
    };
    let r = config.shift_range as i32;
    let cap = if planted.is_some() { config.inlier_max_corruption } else { 1.0 };

    let mut meta = Vec::with_capacity(t);
    for i in 0..t {
        let (level, shift) = if i == 0 {
            (0.0, (0, 0))
        } else if Some(i) == planted {
            let sx = if rng.random_bool(0.5) { r } else { -r };
            let sy = if rng.random_bool(0.5) { r } else { -r };
            (1.0, (sx, sy))
        } else {
            let level = rng.random_range(0.0..=1.0) * cap;
            (level, (rng.random_range(-r..=r), rng.random_range(-r..=r)))
        };
        meta.push(DegradationRecord {
            shift,
            blur_sigma: config.blur_sigma.lerp(level),
            noise_gain: config.noise_gain.lerp(level),
            read_sigma: config.read_sigma.lerp(level),
            corruption_level: level,
        });
    }

    let (h, w) = (config.height, config.width);
    let m = config.shift_range as i32;
    let crop = |dx: i32, dy: i32| -> Vec<f64> {
        let mut out = vec![0.0; CHANNELS * h * w];
        for c in 0..CHANNELS {
            for y in 0..h {
                let sy = (y as i32 + m + dy) as usize;
                for x in 0..w {
                    let sx = (x as i32 + m + dx) as usize;
                    out[(c * h + y) * w + x] = gt_image.data()[(c * gs[1] + sy) * gs[2] + sx] as f64;
                }
            }
        }
        out
    };

    let mut frames = Vec::with_capacity(t * CHANNELS * h * w);
    for rec in &meta {
        let mut img = crop(rec.shift.0, rec.shift.1);
        if rec.blur_sigma > 0.0 {
            gaussian_blur(&mut img, CHANNELS, h, w, rec.blur_sigma);
        }
        for v in img.iter_mut() {
            let var = rec.noise_gain * *v + rec.read_sigma * rec.read_sigma;
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v + libm::sqrt(var.max(0.0)) * n).clamp(0.0, 1.0);
        }
        frames.extend(img.into_iter().map(|v| v as f32));
    }

    let gt_crop = Tensor::new(
        vec![CHANNELS, h, w],
        crop(0, 0).into_iter().map(|v| v as f32).collect(),
    )?;
    let seq = BurstSequence {
        id: id.into(),
        frames: Tensor::new(vec![t, CHANNELS, h, w], frames)?,
        ref_index: 0,
        meta,
        planted_index: planted,
    };
    Ok((seq, gt_crop))
}

/// Sequence `index` of a dataset generated from `config`: its own ground
/// truth canvas and degradation stream, both derived from `(config.seed, index)`.
pub fn synthesize_indexed(config: &GeneratorConfig, index: u64) -> Result<(BurstSequence, Tensor<f32>)> {
    let seed = derive_seed(config.seed, index);
    let (gh, gw) = config.gt_size();
    let gt = generate_gt_image(derive_seed(seed, 0), gh, gw);
    synthesize_burst(&gt, config, derive_seed(seed, 1), format!("seq{index:05}"))
}

/// Separable Gaussian blur with clamp-to-edge borders, in place.
pub fn gaussian_blur(img: &mut [f64], channels: usize, h: usize, w: usize, sigma: f64) {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for c in 0..channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + j as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * plane[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + j as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[yy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}
