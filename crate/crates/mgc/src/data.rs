//! Image sources: a folder of P6 files or the procedural generator.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mgc_core::image::Image;
use mgc_core::synthetic::{synthetic_image, SyntheticParams};

use crate::ppm;

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Folder { root: PathBuf, files: Vec<PathBuf> },
    Synthetic { params: SyntheticParams, seed: u64, count: usize },
}

impl ImageSource {
    pub fn len(&self) -> usize {
        match self {
            Self::Folder { files, .. } => files.len(),
            Self::Synthetic { count, .. } => *count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> anyhow::Result<Image> {
        if index >= self.len() {
            bail!("image index {index} out of range for a source of {}", self.len());
        }
        match self {
            Self::Folder { files, .. } => ppm::read_image(&files[index]),
            Self::Synthetic { params, seed, count: _ } => Ok(synthetic_image(params, *seed, index)),
        }
    }
}

/// Every `.ppm` file directly inside `path`, in lexicographic order.
pub fn load_folder(path: &Path) -> anyhow::Result<ImageSource> {
    let entries = fs::read_dir(path).with_context(|| format!("cannot read image folder {}", path.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            files.push(p);
        }
    }
    if files.is_empty() {
        bail!("no images in {}", path.display());
    }
    files.sort();
    Ok(ImageSource::Folder { root: path.to_path_buf(), files })
}

pub fn synthetic(count: usize, seed: u64, params: SyntheticParams) -> anyhow::Result<ImageSource> {
    if count == 0 {
        bail!("synthetic source needs at least one image");
    }
    Ok(ImageSource::Synthetic { params, seed, count })
}

/// Per-channel mean and standard deviation over the first `limit` images.
pub fn channel_stats(source: &ImageSource, limit: usize) -> anyhow::Result<([f64; 3], [f64; 3])> {
    let n = source.len().min(limit.max(1));
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0usize;
    for i in 0..n {
        let img = source.get(i)?;
        for p in img.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += p[c];
                sq[c] += p[c] * p[c];
            }
        }
        count += img.width * img.height;
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count as f64;
        std[c] = (sq[c] / count as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
    }
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folder_listing_is_sorted_and_decodes() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.ppm", 10u8), ("a.ppm", 20), ("c.txt", 0)] {
            let mut bytes = b"P6\n1 1\n255\n".to_vec();
            bytes.extend_from_slice(&[v, v, v]);
            fs::write(dir.path().join(name), bytes).unwrap();
        }
        let src = load_folder(dir.path()).unwrap();
        assert_eq!(src.len(), 2);
        assert_eq!(src.get(0).unwrap().to_rgb8(), vec![20, 20, 20]);
        assert_eq!(src.get(1).unwrap().to_rgb8(), vec![10, 10, 10]);
        assert!(src.get(2).is_err());
    }

    #[test]
    fn empty_folder_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_folder(dir.path()).unwrap_err().to_string();
        assert!(err.contains("no images"), "{err}");
        fs::write(dir.path().join("x.ppm"), b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap();
        let src = load_folder(dir.path()).unwrap();
        let err = src.get(0).unwrap_err().to_string();
        assert!(err.contains("x.ppm") && err.contains("unsupported"), "{err}");
    }

    #[test]
    fn synthetic_source() {
        let src = synthetic(1, 4, SyntheticParams::default()).unwrap();
        assert_eq!(src.len(), 1);
        assert_eq!(src.get(0).unwrap(), src.get(0).unwrap());
        assert!(synthetic(0, 4, SyntheticParams::default()).is_err());
        let (mean, std) = channel_stats(&src, 10).unwrap();
        assert!(mean.iter().all(|m| (0.0..=1.0).contains(m)));
        assert!(std.iter().all(|s| *s > 0.0));
    }
}
