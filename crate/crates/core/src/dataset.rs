//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   dataset.json              generator config and split sizes
//!   <split>/manifest.json     sample ids, box prompts, file checksums
//!   <split>/<id>_img.png      8-bit grayscale image
//!   <split>/<id>_lab<k>.png   annotation k, stored as {0, 255}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::BBoxPrompt;
use crate::synth::{Dataset, DatasetConfig, Sample, Split};

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_INFO: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub bbox: BBoxPrompt,
    pub image: FileEntry,
    pub labels: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub image_size: usize,
    pub k: usize,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub config: DatasetConfig,
    pub counts: [usize; 3],
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// PNG bytes of an 8-bit grayscale grid.
pub fn encode_png_gray(grid: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = grid.dim();
    let data: Vec<u8> = grid.iter().copied().collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&data, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    Ok(out)
}

pub fn decode_png_gray(path: &Path, bytes: &[u8]) -> Result<Array2<u8>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("unreadable png: {e}")))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(path, format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), luma.into_raw())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn image_to_u8(image: &Array2<f64>) -> Array2<u8> {
    image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn write_file_entry(dir: &Path, file: String, grid: &Array2<u8>) -> Result<FileEntry> {
    let bytes = encode_png_gray(grid)?;
    write_bytes(&dir.join(&file), &bytes)?;
    Ok(FileEntry {
        file,
        sha256: sha256_hex(&bytes),
    })
}

/// Writes every split plus `dataset.json` under `root`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for split in Split::ALL {
        write_split(ds.split(split), split, &ds.config, &root.join(split.name()))?;
    }
    let info = DatasetInfo {
        config: ds.config.clone(),
        counts: [ds.train.len(), ds.val.len(), ds.test.len()],
    };
    write_json(&root.join(DATASET_INFO), &info)
}

pub fn write_split(samples: &[Sample], split: Split, cfg: &DatasetConfig, dir: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let image = write_file_entry(dir, format!("{}_img.png", s.sample_id), &image_to_u8(&s.image))?;
        let labels = s
            .labels
            .iter()
            .enumerate()
            .map(|(k, l)| write_file_entry(dir, format!("{}_lab{k}.png", s.sample_id), &l.grid().mapv(|v| v * 255)))
            .collect::<Result<_>>()?;
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            bbox: s.bbox,
            image,
            labels,
        });
    }
    let manifest = Manifest {
        split,
        image_size: cfg.image_size,
        k: cfg.k,
        samples: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

fn read_checked(dir: &Path, entry: &FileEntry) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(&entry.file);
    let bytes = read_bytes(&path)?;
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(Error::format(&path, format!("checksum mismatch: expected {}, found {digest}", entry.sha256)));
    }
    Ok((path, bytes))
}

/// Loads one split, verifying checksums, shapes and mask values.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let dir = root.join(split.name());
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&manifest_path)?;
    let n = manifest.image_size;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        if entry.labels.len() != manifest.k {
            return Err(Error::format(
                &manifest_path,
                format!("{}: {} labels, expected {}", entry.sample_id, entry.labels.len(), manifest.k),
            ));
        }
        let (path, bytes) = read_checked(&dir, &entry.image)?;
        let pixels = decode_png_gray(&path, &bytes)?;
        if pixels.dim() != (n, n) {
            return Err(Error::format(&path, format!("expected {n}x{n}, found {:?}", pixels.dim())));
        }
        let image = pixels.mapv(|v| v as f64 / 255.0);
        let mut labels = Vec::with_capacity(entry.labels.len());
        for file in &entry.labels {
            let (path, bytes) = read_checked(&dir, file)?;
            let grid = decode_png_gray(&path, &bytes)?;
            if grid.dim() != (n, n) {
                return Err(Error::format(&path, format!("expected {n}x{n}, found {:?}", grid.dim())));
            }
            if grid.iter().any(|&v| v != 0 && v != 255) {
                return Err(Error::format(&path, "mask values must be 0 or 255"));
            }
            labels.push(BinaryMask::new(grid.mapv(|v| (v == 255) as u8))?);
        }
        let sample = Sample {
            sample_id: entry.sample_id.clone(),
            image,
            labels,
            bbox: entry.bbox,
        };
        sample
            .validate()
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let info: DatasetInfo = read_json(&root.join(DATASET_INFO))?;
    Ok(Dataset {
        config: info.config,
        train: read_split(root, Split::Train)?,
        val: read_split(root, Split::Val)?,
        test: read_split(root, Split::Test)?,
    })
}

/// Hash over the three manifests, which in turn hash every file.
pub fn dataset_checksum(root: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for split in Split::ALL {
        let bytes = read_bytes(&root.join(split.name()).join(MANIFEST))?;
        hasher.update(split.name().as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn tiny() -> Dataset {
        generate_dataset(&DatasetConfig {
            num_samples: 6,
            split: [0.5, 0.25, 0.25],
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rewrite_gives_identical_checksum() {
        let ds = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&ds, a.path()).unwrap();
        write_dataset(&tiny(), b.path()).unwrap();
        assert_eq!(dataset_checksum(a.path()).unwrap(), dataset_checksum(b.path()).unwrap());
    }

    #[test]
    fn corruption_names_the_file() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("train").join(format!("{}_lab1.png", ds.train[0].sample_id));
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        match read_split(dir.path(), Split::Train) {
            Err(Error::Format { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let split_dir = dir.path().join("val");
        let mut manifest: Manifest = read_json(&split_dir.join(MANIFEST)).unwrap();
        let grid = Array2::from_elem((64, 64), 7u8);
        let entry = write_file_entry(&split_dir, "bad.png".into(), &grid).unwrap();
        manifest.samples[0].labels[0] = entry;
        write_json(&split_dir.join(MANIFEST), &manifest).unwrap();
        match read_split(dir.path(), Split::Val) {
            Err(Error::Format { path, .. }) => assert_eq!(path, split_dir.join("bad.png")),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_split(dir.path(), Split::Test), Err(Error::Io { .. })));
    }
}
