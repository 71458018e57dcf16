use std::path::{Path, PathBuf};

use ndarray::{s, Array2};

use crate::checkpoint::Checkpoint;
use crate::dataset::{encode_png_gray, read_split, write_bytes};
use crate::error::Result;
use crate::model::Model;
use crate::synth::{Sample, Split};

use super::predict_masks;

/// One row of tiles: input image, each label, each predicted mask.
pub fn render_panel(model: &Model, sample: &Sample, m: usize) -> Result<Array2<u8>> {
    let (h, w) = sample.image.dim();
    let preds = predict_masks(model, &sample.image, &sample.bbox, m)?;
    let tiles = 1 + sample.labels.len() + preds.len();
    let mut grid = Array2::<u8>::zeros((h, w * tiles));
    grid.slice_mut(s![.., 0..w])
        .assign(&sample.image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    for (i, mask) in sample.labels.iter().chain(&preds).enumerate() {
        let x0 = (i + 1) * w;
        grid.slice_mut(s![.., x0..x0 + w]).assign(&mask.grid().mapv(|v| v * 255));
    }
    Ok(grid)
}

/// Writes `<sample_id>_panel.png` for the first `limit` samples of a split
/// (all of them when `None`).
pub fn render_panels(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    m: usize,
    out_dir: &Path,
    limit: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let model = Checkpoint::load(checkpoint)?.into_model();
    let samples = read_split(data, split)?;
    let n = limit.unwrap_or(samples.len()).min(samples.len());
    let mut written = Vec::with_capacity(n);
    for sample in &samples[..n] {
        let png = encode_png_gray(&render_panel(&model, sample, m)?)?;
        let path = out_dir.join(format!("{}_panel.png", sample.sample_id));
        write_bytes(&path, &png)?;
        written.push(path);
    }
    Ok(written)
}
