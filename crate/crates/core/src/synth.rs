//! Synthetic multi-annotator segmentation data.
//!
//! Each image holds one bright blob (an ellipse warped by low-frequency
//! harmonic boundary noise) on a smooth background. Every annotator sees
//! the same blob but redraws part of the boundary noise and applies a
//! random dilation or erosion, so labels agree on location and disagree on
//! extent and contour. Some annotations are blank.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::BBoxPrompt;

const HARMONICS: [f64; 3] = [2.0, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_samples: usize,
    pub image_size: usize,
    pub k: usize,
    /// Range of the blob's semi-axes, in pixels.
    pub radius_range: [f64; 2],
    /// Amplitude of the shared boundary harmonics.
    pub boundary_noise: f64,
    /// Amplitude of the per-annotator boundary harmonics.
    pub annotator_noise: f64,
    /// Inclusive range of the per-annotator morphology radius; negative
    /// values erode, positive values dilate.
    pub morph_range: [i32; 2],
    pub empty_annotation_prob: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_samples: 1200,
            image_size: 64,
            k: 3,
            radius_range: [8.0, 15.0],
            boundary_noise: 0.12,
            annotator_noise: 0.03,
            morph_range: [-1, 1],
            empty_annotation_prob: 0.1,
            split: [1000.0 / 1200.0, 100.0 / 1200.0, 100.0 / 1200.0],
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("at least two annotators are required"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("image size must be at least 8"));
        }
        if !(0.0..1.0).contains(&self.empty_annotation_prob) {
            return Err(Error::invalid("empty_annotation_prob must lie in [0,1)"));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must be in [0,1] and sum to 1"));
        }
        let [lo, hi] = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi < self.image_size as f64 / 2.0) {
            return Err(Error::invalid("radius range must satisfy 0 < lo <= hi < image_size/2"));
        }
        if self.morph_range[0] > self.morph_range[1] {
            return Err(Error::invalid("morph range is reversed"));
        }
        if self.boundary_noise < 0.0 || self.annotator_noise < 0.0 || self.boundary_noise + self.annotator_noise >= 0.5 {
            return Err(Error::invalid("boundary noise amplitudes must be non-negative and sum below 0.5"));
        }
        Ok(())
    }

    /// Sample counts per split; the test split absorbs rounding.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.num_samples as f64;
        let train = (n * self.split[0]).round() as usize;
        let val = ((n * self.split[1]).round() as usize).min(self.num_samples - train);
        [train, val, self.num_samples - train - val]
    }

    /// Independent generator for sample `index`.
    pub fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// One image with its unordered annotations and box prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    /// Values in [0,1], quantized to multiples of 1/255.
    pub image: Array2<f64>,
    pub labels: Vec<BinaryMask>,
    pub bbox: BBoxPrompt,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let shape = self.image.dim();
        if self.labels.len() < 2 {
            return Err(Error::invalid(format!("{}: fewer than two labels", self.sample_id)));
        }
        if self.labels.iter().any(|l| l.shape() != shape) {
            return Err(Error::invalid(format!("{}: label shape differs from image", self.sample_id)));
        }
        if self.labels.iter().all(BinaryMask::is_empty) {
            return Err(Error::invalid(format!("{}: every label is empty", self.sample_id)));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("{}: image values outside [0,1]", self.sample_id)));
        }
        self.bbox.validate(shape.0, shape.1)
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

type Harmonics = [(f64, f64); 3];

impl Blob {
    fn contains(&self, x: f64, y: f64, harmonics: &Harmonics) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let rho = u.hypot(v);
        let theta = v.atan2(u);
        let r_ellipse = self.a * self.b / ((self.b * theta.cos()).powi(2) + (self.a * theta.sin()).powi(2)).sqrt();
        let warp: f64 = HARMONICS
            .iter()
            .zip(harmonics)
            .map(|(k, (amp, phase))| amp * (k * theta + phase).cos())
            .sum();
        rho <= r_ellipse * (1.0 + warp)
    }

    fn rasterize(&self, n: usize, harmonics: &Harmonics) -> Array2<u8> {
        Array2::from_shape_fn((n, n), |(r, c)| {
            self.contains(c as f64 + 0.5, r as f64 + 0.5, harmonics) as u8
        })
    }
}

fn draw_harmonics<R: Rng + ?Sized>(amp: f64, rng: &mut R) -> Harmonics {
    std::array::from_fn(|_| {
        let a = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
        (a, rng.random_range(0.0..2.0 * PI))
    })
}

/// Dilation (`radius > 0`) or erosion (`radius < 0`) by a disk.
pub fn morph(mask: &Array2<u8>, radius: i32) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius.abs();
    let offsets: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let (h, w) = mask.dim();
    let at = |y: i32, x: i32| -> u8 {
        if y < 0 || x < 0 || y >= h as i32 || x >= w as i32 {
            0
        } else {
            mask[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as i32, x as i32);
        if radius > 0 {
            offsets.iter().any(|(dy, dx)| at(y + dy, x + dx) == 1) as u8
        } else {
            offsets.iter().all(|(dy, dx)| at(y + dy, x + dx) == 1) as u8
        }
    })
}

fn smooth_background<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    const GRID: usize = 4;
    let coarse = Array2::from_shape_fn((GRID, GRID), |_| rng.random_range(0.1..0.35));
    let scale = (GRID - 1) as f64 / (n - 1) as f64;
    Array2::from_shape_fn((n, n), |(r, c)| {
        let fy = r as f64 * scale;
        let fx = c as f64 * scale;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = coarse[[y0, x0]] * (1.0 - tx) + coarse[[y0, x1]] * tx;
        let bottom = coarse[[y1, x0]] * (1.0 - tx) + coarse[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Generates one sample; `rng` fully determines the result.
pub fn generate_sample<R: Rng + ?Sized>(cfg: &DatasetConfig, sample_id: impl Into<String>, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let n = cfg.image_size;
    let nf = n as f64;
    let [lo, hi] = cfg.radius_range;
    let blob = Blob {
        cx: rng.random_range(0.35 * nf..=0.65 * nf),
        cy: rng.random_range(0.35 * nf..=0.65 * nf),
        a: rng.random_range(lo..=hi),
        b: rng.random_range(lo..=hi),
        angle: rng.random_range(0.0..PI),
    };
    let shared = draw_harmonics(cfg.boundary_noise, rng);
    let ground = blob.rasterize(n, &shared);

    let contrast = rng.random_range(0.3..0.45);
    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let background = smooth_background(n, rng);
    let mut image = background;
    for ((r, c), v) in image.indexed_iter_mut() {
        let lifted = *v + contrast * ground[[r, c]] as f64 + noise.sample(&mut *rng);
        *v = (lifted.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    let labels = loop {
        let labels: Vec<BinaryMask> = (0..cfg.k)
            .map(|_| {
                let own = draw_harmonics(cfg.annotator_noise, rng);
                let mut h = shared;
                for (s, o) in h.iter_mut().zip(own) {
                    // perturb amplitude, keep the shared phase
                    s.0 += o.0;
                }
                let radius = rng.random_range(cfg.morph_range[0]..=cfg.morph_range[1]);
                let grid = morph(&blob.rasterize(n, &h), radius);
                let blank = rng.random_bool(cfg.empty_annotation_prob);
                if blank {
                    BinaryMask::zeros(n, n)
                } else {
                    BinaryMask::new(grid)
                }
            })
            .collect::<Result<_>>()?;
        if labels.iter().any(|l| !l.is_empty()) {
            break labels;
        }
    };
    let bbox = bbox_from_labels(&labels, rng)?;
    let sample = Sample {
        sample_id: sample_id.into(),
        image,
        labels,
        bbox,
    };
    sample.validate()?;
    Ok(sample)
}

/// Tight box around the foreground of a uniformly chosen non-empty label.
pub fn bbox_from_labels<R: Rng + ?Sized>(labels: &[BinaryMask], rng: &mut R) -> Result<BBoxPrompt> {
    let candidates: Vec<&BinaryMask> = labels.iter().filter(|l| !l.is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::invalid("cannot derive a box prompt: every label is empty"));
    }
    let chosen = candidates[rng.random_range(0..candidates.len())];
    Ok(tight_bbox(chosen).expect("non-empty mask"))
}

/// Extremity points of a mask's foreground, or `None` when it is empty.
pub fn tight_bbox(mask: &BinaryMask) -> Option<BBoxPrompt> {
    let mut bb: Option<BBoxPrompt> = None;
    for ((r, c), &v) in mask.grid().indexed_iter() {
        if v == 0 {
            continue;
        }
        bb = Some(match bb {
            None => BBoxPrompt::new(c, r, c, r),
            Some(b) => BBoxPrompt::new(b.x_min.min(c), b.y_min.min(r), b.x_max.max(c), b.y_max.max(r)),
        });
    }
    bb
}

/// Train, validation and test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates a whole dataset. Sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let counts = cfg.split_counts();
    let mut splits: [Vec<Sample>; 3] = Default::default();
    let mut index = 0;
    for (s, split) in Split::ALL.iter().enumerate() {
        for i in 0..counts[s] {
            let mut rng = cfg.sample_rng(index);
            splits[s].push(generate_sample(cfg, format!("{}-{i:05}", split.name()), &mut rng)?);
            index += 1;
        }
    }
    let [train, val, test] = splits;
    Ok(Dataset {
        config: cfg.clone(),
        train,
        val,
        test,
    })
}
