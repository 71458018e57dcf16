//! Pixel-level mask arithmetic shared by the set loss and the evaluation metrics.
//!
//! Conventions:
//! * dice and IoU of two empty masks are 1 (agreement on absence).
//! * dice forms carry a smoothing constant [`DICE_EPS`].
//! * majority votes break even-count ties towards background.
//! * binarization is boundary inclusive (`p >= threshold`).

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Smoothing constant of the hard and soft dice forms.
pub const DICE_EPS: f64 = 1e-6;

/// Default probability threshold for turning a prediction into a mask.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A 2-D {0,1} grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    grid: Array2<u8>,
}

impl BinaryMask {
    pub fn new(grid: Array2<u8>) -> Result<Self> {
        check_dims(grid.dim())?;
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::invalid("binary mask values must be 0 or 1"));
        }
        Ok(Self { grid })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        check_dims((height, width))?;
        Ok(Self {
            grid: Array2::zeros((height, width)),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        check_dims((height, width))?;
        Ok(Self {
            grid: Array2::from_shape_fn((height, width), |(r, c)| f(r, c) as u8),
        })
    }

    /// Builds a single-row mask; handy for small hand-written cases.
    pub fn from_row(values: &[u8]) -> Result<Self> {
        let grid = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(grid)
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn into_grid(self) -> Array2<u8> {
        self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[[row, col]] == 1
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.iter().all(|&v| v == 0)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.grid.mapv(f64::from)
    }

    /// Downsamples by an integer `factor`; an output cell is foreground when at
    /// least half of its `factor x factor` block is.
    pub fn downsample_area(&self, factor: usize) -> Result<BinaryMask> {
        let (h, w) = self.shape();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(format!(
                "cannot downsample {h}x{w} mask by factor {factor}"
            )));
        }
        let block = factor * factor;
        let (oh, ow) = (h / factor, w / factor);
        let grid = Array2::from_shape_fn((oh, ow), |(r, c)| {
            let mut on = 0usize;
            for dr in 0..factor {
                for dc in 0..factor {
                    on += self.grid[[r * factor + dr, c * factor + dc]] as usize;
                }
            }
            (2 * on >= block) as u8
        });
        Ok(BinaryMask { grid })
    }
}

/// A 2-D grid of probabilities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    grid: Array2<f64>,
}

impl ProbMask {
    pub fn new(grid: Array2<f64>) -> Result<Self> {
        check_dims(grid.dim())?;
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("probabilities must lie in [0,1]"));
        }
        Ok(Self { grid })
    }

    /// Pixel-wise sigmoid of a logits grid.
    pub fn from_logits(logits: &Array2<f64>) -> Result<Self> {
        check_dims(logits.dim())?;
        Ok(Self {
            grid: logits.mapv(sigmoid),
        })
    }

    pub fn from_row(values: &[f64]) -> Result<Self> {
        let grid = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(grid)
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }
}

impl From<&BinaryMask> for ProbMask {
    fn from(mask: &BinaryMask) -> Self {
        ProbMask { grid: mask.to_f64() }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_dims((h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("mask must be at least 1x1, got {h}x{w}")));
    }
    Ok(())
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!(
            "mask shape mismatch: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// (|a ∩ b|, |a|, |b|)
fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_same(a.shape(), b.shape())?;
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    Zip::from(&a.grid).and(&b.grid).for_each(|&x, &y| {
        inter += (x & y) as usize;
        na += x as usize;
        nb += y as usize;
    });
    Ok((inter, na, nb))
}

/// Smoothed dice similarity `(2|a∩b| + eps) / (|a| + |b| + eps)`.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    Ok((2.0 * inter as f64 + DICE_EPS) / ((na + nb) as f64 + DICE_EPS))
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// `1 - iou(a, b)`.
pub fn dist(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(1.0 - iou(a, b)?)
}

/// Soft dice loss `1 - (2 Σ p·y + eps) / (Σ p + Σ y + eps)`.
pub fn soft_dice_loss(p: &ProbMask, y: &BinaryMask) -> Result<f64> {
    check_same(p.shape(), y.shape())?;
    let (num, den) = soft_dice_terms(&p.grid, &y.grid);
    Ok(1.0 - num / den)
}

/// Soft dice loss and its gradient with respect to the probabilities.
pub fn soft_dice_loss_grad(p: &ProbMask, y: &BinaryMask) -> Result<(f64, Array2<f64>)> {
    check_same(p.shape(), y.shape())?;
    let (num, den) = soft_dice_terms(&p.grid, &y.grid);
    let den2 = den * den;
    let grad = y.grid.mapv(|yv| -(2.0 * yv as f64 * den - num) / den2);
    Ok((1.0 - num / den, grad))
}

fn soft_dice_terms(p: &Array2<f64>, y: &Array2<u8>) -> (f64, f64) {
    let mut py = 0.0;
    let mut sp = 0.0;
    let mut sy = 0.0;
    Zip::from(p).and(y).for_each(|&pv, &yv| {
        let yv = yv as f64;
        py += pv * yv;
        sp += pv;
        sy += yv;
    });
    (2.0 * py + DICE_EPS, sp + sy + DICE_EPS)
}

/// Pixel is foreground iff `p >= threshold`; `threshold` must lie in (0,1).
pub fn binarize(p: &ProbMask, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0,1)")));
    }
    Ok(BinaryMask {
        grid: p.grid.mapv(|v| (v >= threshold) as u8),
    })
}

/// Pixel-wise strict majority; even-count ties go to background.
pub fn majority_vote(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("majority vote over an empty mask list"))?;
    let mut votes = Array2::<usize>::zeros(first.shape());
    for m in masks {
        check_same(first.shape(), m.shape())?;
        Zip::from(&mut votes)
            .and(&m.grid)
            .for_each(|v, &x| *v += x as usize);
    }
    let n = masks.len();
    Ok(BinaryMask {
        grid: votes.mapv(|v| (2 * v > n) as u8),
    })
}

/// Nearest-neighbour upsampling of a real grid by an integer factor.
pub fn upsample_nearest(grid: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(r, c)| {
        grid[[r / factor, c / factor]]
    })
}
