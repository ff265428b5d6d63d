//! File IO: atomic writes, portable graymaps, sample CSVs, and manifests.

use anyhow::{bail, Context, Result};
use quilt_core::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Write via a temporary sibling and rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Binary portable graymap (P5), values affinely scaled to 0..=255.
/// Returns the (min, max) used for the scaling.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<(f64, f64)> {
    if image.shape().len() != 2 {
        bail!("graymap output needs a 2D tensor, got {:?}", image.shape());
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let vmin = image.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = image
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|&v| (255.0 * (v - vmin) / span).round().clamp(0.0, 255.0) as u8),
    );
    atomic_write(path, &bytes)?;
    Ok((vmin, vmax))
}

/// One flattened sample per CSV row, full f64 precision.
pub fn write_samples_csv(path: &Path, samples: &[Tensor]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        let row: Vec<String> = s.data().iter().map(|v| format!("{v}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

pub fn read_samples_csv(path: &Path, shape: &[usize]) -> Result<Vec<Tensor>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let expected: usize = shape.iter().product();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(anyhow::Error::from))
            .collect::<Result<_>>()
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        if vals.len() != expected {
            bail!(
                "{}:{}: expected {} values, got {}",
                path.display(),
                lineno + 1,
                expected,
                vals.len()
            );
        }
        out.push(Tensor::new(shape.to_vec(), vals)?);
    }
    Ok(out)
}

/// Everything needed to evaluate or reproduce one sampling run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub method: String,
    pub l: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub guidance_w: Option<f64>,
    pub steps: usize,
    pub churn: f64,
    pub object_shape: Vec<usize>,
    /// Per-sample RNG seeds, derived from `seed` independently of the
    /// method so comparisons share initial noise.
    pub sample_seeds: Vec<u64>,
    /// Per-sample conditioning position sets (empty for unconditional
    /// tasks).
    pub conditionings: Vec<Vec<[f64; 2]>>,
    pub samples_csv: String,
    pub image_files: Vec<String>,
    /// Per-image (min, max) used by the graymap scaling.
    pub image_ranges: Vec<[f64; 2]>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    atomic_write(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0]).unwrap();
        let (lo, hi) = write_pgm(&path, &img).unwrap();
        assert_eq!((lo, hi), (0.0, 1.0));
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 255, 128, 0]);
    }

    #[test]
    fn samples_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let samples = vec![
            Tensor::from_vec(vec![1.0, -0.25, 1e-17]),
            Tensor::from_vec(vec![2.0, 0.1 + 0.2, f64::MIN_POSITIVE]),
        ];
        write_samples_csv(&path, &samples).unwrap();
        let back = read_samples_csv(&path, &[3]).unwrap();
        assert_eq!(samples, back);
    }
}
