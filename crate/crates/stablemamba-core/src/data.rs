//! Labeled image datasets: in-memory form plus the on-disk layout — a
//! directory of images with a `labels.csv` manifest (`path,label` rows).

use crate::image_io::{load_image, save_png};
use crate::tensor::{Result, Tensor, TensorError};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(TensorError::Invalid {
                op: "Dataset::new",
                msg: format!("{} images vs {} labels", images.len(), labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(TensorError::Invalid {
                op: "Dataset::new",
                msg: format!("label {bad} out of range for {n_classes} classes"),
            });
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Read a dataset directory: `labels.csv` with `path,label` rows (paths
/// relative to the directory). `n_classes` is 1 + the largest label.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("labels.csv");
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| TensorError::io(manifest.display().to_string(), e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == "path,label") {
            continue;
        }
        let (path, label) = line.rsplit_once(',').ok_or_else(|| {
            TensorError::io(
                manifest.display().to_string(),
                format!("line {}: expected `path,label`", i + 1),
            )
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            TensorError::io(
                manifest.display().to_string(),
                format!("line {}: bad label {label:?}", i + 1),
            )
        })?;
        images.push(load_image(&dir.join(path.trim()))?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(TensorError::io(
            manifest.display().to_string(),
            "empty dataset",
        ));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    Dataset::new(images, labels, n_classes)
}

/// Write images as PNGs plus the `labels.csv` manifest.
pub fn save_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TensorError::io(dir.display().to_string(), e))?;
    let mut manifest = String::from("path,label\n");
    let width = ds.len().to_string().len().max(4);
    for (i, (img, label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = format!("img_{i:0width$}.png");
        save_png(&dir.join(&name), img)?;
        manifest.push_str(&format!("{name},{label}\n"));
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, manifest).map_err(|e| TensorError::io(path.display().to_string(), e))
}

/// Mirror `[C,H,W]` left-right.
pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let mut out = vec![0.0f32; d.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w + y * w;
            for x in 0..w {
                out[row + x] = d[row + w - 1 - x];
            }
        }
    }
    Tensor::new(s, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::procedural_test_image;

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(
            vec![
                procedural_test_image(12, 12),
                procedural_test_image(12, 12),
                Tensor::full(&[3, 12, 12], 0.25),
            ],
            vec![0, 1, 1],
            2,
        )
        .unwrap();
        save_dataset_dir(dir.path(), &ds).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.n_classes, 2);
        // PNG is 8-bit: loaded pixels match the originals to half a level.
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let img = Tensor::full(&[3, 4, 4], 0.5);
        assert!(Dataset::new(vec![img], vec![2], 2).is_err());
    }

    #[test]
    fn hflip_is_involution_and_moves_pixels() {
        let img = procedural_test_image(6, 9);
        let f = hflip(&img);
        assert!(img.max_abs_diff(&f) > 0.0);
        assert_eq!(hflip(&f).data(), img.data());
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset_dir(dir.path()),
            Err(TensorError::Io { .. })
        ));
    }
}
