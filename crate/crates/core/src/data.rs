//! Datasets and preprocessing: IDX files, global contrast normalization,
//! ZCA whitening, flips, padding and small synthetic image sets.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const GCN_EPSILON: f64 = 1e-8;
pub const ZCA_EPSILON: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N×C×H×W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Source and preprocessing steps, oldest first.
    pub provenance: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, source: impl Into<String>) -> Result<Dataset> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be [N×C×H×W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            provenance: vec![source.into()],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, index: usize) -> Result<Tensor> {
        self.images.slice_outer(index)
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_outer(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize], note: &str) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            provenance: self.with_step(note),
        })
    }

    /// Replaces the images, recording `step` in the provenance.
    pub fn map_images(&self, step: &str, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Dataset> {
        let images = f(&self.images)?;
        if images.shape()[0] != self.len() {
            return Err(Error::shape("map_images", "image count changed"));
        }
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            classes: self.classes,
            provenance: self.with_step(step),
        })
    }

    fn with_step(&self, step: &str) -> Vec<String> {
        let mut p = self.provenance.clone();
        p.push(step.to_string());
        p
    }

    /// Training and validation parts: the last 10,000 examples for
    /// full-size sets of at least 60,000, otherwise the last 10%.
    pub fn validation_split(&self) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        let held = if n >= 60_000 { 10_000 } else { (n / 10).max(1) };
        if held >= n {
            return Err(Error::invalid(format!("cannot split {n} examples into train and validation")));
        }
        let train: Vec<usize> = (0..n - held).collect();
        let val: Vec<usize> = (n - held..n).collect();
        Ok((self.subset(&train, "split: train")?, self.subset(&val, "split: validation")?))
    }

    /// Text record of where the data came from and what was applied.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "examples: {}", self.len());
        let _ = writeln!(out, "classes: {}", self.classes);
        let [c, h, w] = self.image_shape();
        let _ = writeln!(out, "image: {c}x{h}x{w}");
        for (i, step) in self.provenance.iter().enumerate() {
            let _ = writeln!(out, "step {i}: {step}");
        }
        out
    }

    /// Examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn format_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_error(path, "truncated header"))
}

/// Parses an IDX image file into `[N×1×H×W]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_error(path, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let h = read_u32(bytes, 8, path)? as usize;
    let w = read_u32(bytes, 12, path)? as usize;
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_error(path, format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(format_error(path, "trailing bytes after payload"));
    }
    if need == 0 {
        return Err(format_error(path, "empty image file"));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_error(path, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(format_error(path, format!("truncated payload: {} of {n} labels", payload.len())));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair. The class count is one more than
/// the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lb = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&ib, images_path)?;
    let labels = parse_idx_labels(&lb, labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(format_error(
            labels_path,
            format!("{} labels for {} images", labels.len(), images.shape()[0]),
        ));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, classes, format!("idx: {}", images_path.display()))
}

pub fn idx_image_bytes(images: &Tensor) -> Result<Vec<u8>> {
    let [n, 1, h, w] = images.shape() else {
        return Err(Error::shape("idx", format!("expected [N×1×H×W], got {:?}", images.shape())));
    };
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, *n as u32, *h as u32, *w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("pixel {v} outside [0, 1] cannot be stored as a byte")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn idx_label_bytes(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        out.push(u8::try_from(y).map_err(|_| Error::invalid(format!("label {y} does not fit a byte")))?);
    }
    Ok(out)
}

pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    std::fs::write(images_path, idx_image_bytes(&data.images)?).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, idx_label_bytes(&data.labels)?).map_err(|e| Error::io(labels_path, e))
}

fn per_image(images: &Tensor) -> Result<(usize, usize)> {
    if images.rank() != 4 || images.is_empty() {
        return Err(Error::shape("preprocess", format!("expected [N×C×H×W], got {:?}", images.shape())));
    }
    let n = images.shape()[0];
    Ok((n, images.len() / n))
}

/// Per image: subtract the mean and divide by `max(std, ε)`.
pub fn gcn(images: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (_, d) = per_image(images)?;
    let mut out = Vec::with_capacity(images.len());
    for img in images.data().chunks(d) {
        if img.iter().all(|&v| v == img[0]) {
            out.extend(std::iter::repeat_n(0.0, d));
            continue;
        }
        let mean = img.iter().sum::<f64>() / d as f64;
        let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let scale = var.sqrt().max(epsilon);
        out.extend(img.iter().map(|v| (v - mean) / scale));
    }
    Tensor::new(images.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    /// Row-major `d×d` symmetric whitening matrix.
    pub whitening: Vec<f64>,
    pub dim: usize,
    pub epsilon: f64,
    /// Set when the fitted covariance had eigenvalues at rounding level.
    pub rank_deficient: bool,
}

impl ZcaTransform {
    /// `W = E·diag((λ + ε)^{-1/2})·Eᵀ` from the eigendecomposition of the
    /// population covariance of the flattened images.
    pub fn fit(images: &Tensor, epsilon: f64) -> Result<ZcaTransform> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("ZCA epsilon must be >= 0, got {epsilon}")));
        }
        let (n, d) = if images.rank() == 2 {
            (images.shape()[0], images.shape()[1])
        } else {
            per_image(images)?
        };
        let x = DMatrix::from_row_slice(n, d, images.data());
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
        let mut centered = x;
        for (j, m) in mean.iter().enumerate() {
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let rank_deficient = eig.eigenvalues.iter().any(|&v| v <= 1e-10 * top.max(f64::MIN_POSITIVE));
        let mut scales = Vec::with_capacity(d);
        for &lambda in eig.eigenvalues.iter() {
            let s = lambda.max(0.0) + epsilon;
            if s <= 0.0 {
                return Err(Error::invalid("covariance is singular; use epsilon > 0"));
            }
            scales.push(1.0 / s.sqrt());
        }
        let e = &eig.eigenvectors;
        let w = e * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scales)) * e.transpose();
        // symmetrise away rounding asymmetry
        let w = (&w + w.transpose()) * 0.5;
        let mut whitening = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                whitening.push(w[(i, j)]);
            }
        }
        Ok(ZcaTransform {
            mean,
            whitening,
            dim: d,
            epsilon,
            rank_deficient,
        })
    }

    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n == 0 || images.len() != n * self.dim {
            return Err(Error::shape(
                "zca_apply",
                format!("images {:?} do not have {} features each", images.shape(), self.dim),
            ));
        }
        let d = self.dim;
        let mut out = vec![0.0; images.len()];
        for (row, dst) in images.data().chunks(d).zip(out.chunks_mut(d)) {
            let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
            for (i, o) in dst.iter_mut().enumerate() {
                let wrow = &self.whitening[i * d..(i + 1) * d];
                *o = wrow.iter().zip(&centered).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(images.shape().to_vec(), out)
    }
}

/// Mirrors each image left-right with probability 1/2.
pub fn augment_flip(images: &Tensor, seed: u64) -> Result<Tensor> {
    let (_, d) = per_image(images)?;
    let w = images.shape()[3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = images.data().to_vec();
    for img in out.chunks_mut(d) {
        if rng.random::<bool>() {
            for row in img.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// Zero-pads to `height×width`, centred; an odd remainder goes to the
/// bottom/right.
pub fn pad_to(images: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [n, c, h, w] = images.shape() else {
        return Err(Error::shape("pad_to", format!("expected [N×C×H×W], got {:?}", images.shape())));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    if height < h || width < w {
        return Err(Error::invalid(format!("cannot pad {h}×{w} down to {height}×{width}")));
    }
    let (top, left) = ((height - h) / 2, (width - w) / 2);
    let mut out = vec![0.0; n * c * height * width];
    for plane in 0..n * c {
        for r in 0..h {
            let src = (plane * h + r) * w;
            let dst = (plane * height + top + r) * width + left;
            out[dst..dst + w].copy_from_slice(&images.data()[src..src + w]);
        }
    }
    Tensor::new(vec![n, c, height, width], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Each class is a fixed arrangement of Gaussian blobs on an 8×8 canvas,
    /// jittered and corrupted with pixel noise per example.
    BlobDigits,
    /// Two interleaved half-moons in the plane, each point rendered as a
    /// blob on an 8×8 canvas.
    TwoMoonsImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub kind: ToyKind,
    pub classes: usize,
    /// Blob amplitude relative to the background noise level.
    pub margin: f64,
    /// Standard deviation of per-pixel background noise.
    pub pixel_noise: f64,
    /// Standard deviation of blob position jitter, in pixels.
    pub jitter: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            kind: ToyKind::BlobDigits,
            classes: 10,
            margin: 1.0,
            pixel_noise: 0.1,
            jitter: 0.5,
        }
    }
}

const TOY_SIDE: usize = 8;
const BLOB_WIDTH: f64 = 0.9;
const PROTOTYPE_SEED: u64 = 0x70_79_5f_64_61_74_61;

fn render_blobs(centers: &[(f64, f64)], amplitude: f64, out: &mut [f64]) {
    for r in 0..TOY_SIDE {
        for c in 0..TOY_SIDE {
            let mut v = 0.0;
            for &(cy, cx) in centers {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                v += (-d2 / (2.0 * BLOB_WIDTH * BLOB_WIDTH)).exp();
            }
            out[r * TOY_SIDE + c] += amplitude * v;
        }
    }
}

/// Blob centres of each class. Points of a 3×3 lattice are the affine
/// plane over Z/3; its 12 lines are triples meeting pairwise in at most one
/// point, and each of the first 12 classes takes one line. Fixed for every
/// dataset seed so that train and test sets share class definitions.
pub fn blob_prototypes(classes: usize) -> Vec<Vec<(f64, f64)>> {
    let point = |r: usize, c: usize| (1.5 + 2.0 * r as f64, 1.5 + 2.0 * c as f64);
    let mut lines: Vec<Vec<(f64, f64)>> = Vec::with_capacity(12);
    for r in 0..3 {
        lines.push((0..3).map(|c| point(r, c)).collect());
    }
    for slope in 0..3 {
        for offset in 0..3 {
            lines.push((0..3).map(|r| point(r, (slope * r + offset) % 3)).collect());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED);
    lines.shuffle(&mut rng);
    (0..classes)
        .map(|k| {
            let mut line = lines[k % lines.len()].clone();
            // beyond 12 classes, shift repeats so prototypes stay distinct
            let shift = (k / lines.len()) as f64 * 0.5;
            for p in &mut line {
                p.1 += shift;
            }
            line
        })
        .collect()
}

fn two_moons_point(label: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let t = rng.random_range(0.0..std::f64::consts::PI);
    if label == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    }
}

/// Deterministic synthetic image set of `n` examples with balanced classes
/// in shuffled order.
pub fn toy_dataset_with(cfg: &ToyConfig, n: usize, seed: u64) -> Result<Dataset> {
    let classes = match cfg.kind {
        ToyKind::BlobDigits => cfg.classes,
        ToyKind::TwoMoonsImage => 2,
    };
    if classes < 2 {
        return Err(Error::invalid("a toy dataset needs at least two classes"));
    }
    if n < classes {
        return Err(Error::invalid(format!("{n} examples cannot cover {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let pixel = Normal::new(0.0, cfg.pixel_noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let jitter = Normal::new(0.0, cfg.jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let prototypes = blob_prototypes(classes);
    let d = TOY_SIDE * TOY_SIDE;
    let mut data = vec![0.0; n * d];
    for (img, &y) in data.chunks_mut(d).zip(&labels) {
        let centers: Vec<(f64, f64)> = match cfg.kind {
            ToyKind::BlobDigits => prototypes[y]
                .iter()
                .map(|&(r, c)| (r + jitter.sample(&mut rng), c + jitter.sample(&mut rng)))
                .collect(),
            ToyKind::TwoMoonsImage => {
                let (u, v) = two_moons_point(y, &mut rng);
                // plane box [-1, 2]×[-1, 1.5] onto the canvas interior
                let cx = 1.0 + (u + 1.0) / 3.0 * 5.0 + jitter.sample(&mut rng) * 0.2;
                let cy = 1.0 + (1.5 - v) / 2.5 * 5.0 + jitter.sample(&mut rng) * 0.2;
                vec![(cy, cx)]
            }
        };
        render_blobs(&centers, cfg.margin, img);
        for v in img.iter_mut() {
            *v += pixel.sample(&mut rng);
        }
    }
    let images = Tensor::new(vec![n, 1, TOY_SIDE, TOY_SIDE], data)?;
    let kind = match cfg.kind {
        ToyKind::BlobDigits => "blob-digits",
        ToyKind::TwoMoonsImage => "two-moons-image",
    };
    Dataset::new(
        images,
        labels,
        classes,
        format!(
            "toy: {kind} n={n} seed={seed} classes={classes} margin={} pixel_noise={} jitter={}",
            cfg.margin, cfg.pixel_noise, cfg.jitter
        ),
    )
}

pub fn toy_dataset(kind: ToyKind, n: usize, seed: u64) -> Result<Dataset> {
    toy_dataset_with(&ToyConfig { kind, ..ToyConfig::default() }, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 10, 2, 3] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend((0..60u8).map(|i| i.wrapping_mul(37)));
        let mut labels = Vec::new();
        for v in [IDX_LABELS_MAGIC, 10] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend([3u8, 1, 4, 1, 5, 9, 2, 6, 5, 3]);
        (images, labels)
    }

    #[test]
    fn idx_fixture_parses() {
        let (ib, lb) = idx_fixture();
        let p = Path::new("fixture");
        let images = parse_idx_images(&ib, p).unwrap();
        assert_eq!(images.shape(), &[10, 1, 2, 3]);
        assert_eq!(images.data()[0], 0.0);
        assert_eq!(images.data()[1], 37.0 / 255.0);
        assert_eq!(images.data()[7], (7u8.wrapping_mul(37)) as f64 / 255.0);
        assert_eq!(parse_idx_labels(&lb, p).unwrap()[5], 9);
    }

    #[test]
    fn idx_errors() {
        let (ib, lb) = idx_fixture();
        let p = Path::new("fixture");
        assert!(matches!(parse_idx_images(&ib[..ib.len() - 1], p), Err(Error::Format { .. })));
        assert!(parse_idx_images(&ib[..10], p).is_err());
        let mut bad = ib.clone();
        bad[3] = 0x01;
        assert!(parse_idx_images(&bad, p).is_err());
        assert!(parse_idx_labels(&ib, p).is_err());
        assert!(parse_idx_labels(&lb[..lb.len() - 2], p).is_err());
    }

    #[test]
    fn idx_round_trip_through_files() {
        let (ib, lb) = idx_fixture();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        std::fs::write(&ip, &ib).unwrap();
        std::fs::write(&lp, &lb).unwrap();
        let data = load_idx(&ip, &lp).unwrap();
        assert_eq!(data.classes, 10);
        let (ip2, lp2) = (dir.path().join("img2.idx"), dir.path().join("lab2.idx"));
        write_idx(&data, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip2).unwrap(), ib);
        assert_eq!(std::fs::read(&lp2).unwrap(), lb);
        let again = load_idx(&ip2, &lp2).unwrap();
        assert_eq!(again.images, data.images);
        assert_eq!(again.labels, data.labels);

        let mut short = lb.clone();
        short[7] = 9;
        short.pop();
        std::fs::write(&lp, &short).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
    }

    #[test]
    fn gcn_examples() {
        let flat = Tensor::full([1, 1, 2, 2], 0.7);
        assert!(gcn(&flat, GCN_EPSILON).unwrap().data().iter().all(|&v| v == 0.0));
        let pair = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(gcn(&pair, GCN_EPSILON).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn gcn_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20;
        let x = Tensor::new(vec![n, 3, 4, 4], (0..n * 48).map(|_| rng.random_range(-3.0..5.0)).collect()).unwrap();
        let y = gcn(&x, GCN_EPSILON).unwrap();
        for img in y.data().chunks(48) {
            let m = img.iter().sum::<f64>() / 48.0;
            let s = (img.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 48.0).sqrt();
            assert!(m.abs() < 1e-10);
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zca_diagonal_closed_form() {
        let x = Tensor::new(vec![4, 2], vec![2.0, 1.0, -2.0, 1.0, 2.0, -1.0, -2.0, -1.0]).unwrap();
        let t = ZcaTransform::fit(&x, 0.0).unwrap();
        let want = [0.5, 0.0, 0.0, 1.0];
        for (a, b) in t.whitening.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", t.whitening);
        }
        assert!(!t.rank_deficient);
    }

    #[test]
    fn zca_of_white_data_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let (n, d) = (20_000, 4);
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        let t = ZcaTransform::fit(&x, 0.0).unwrap();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((t.whitening[i * d + j] - want).abs() < 0.05);
            }
        }
        for (i, row) in t.whitening.chunks(d).enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, t.whitening[j * d + i]);
            }
        }
    }

    #[test]
    fn zca_flags_rank_deficiency() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        let t = ZcaTransform::fit(&x, 1e-2).unwrap();
        assert!(t.rank_deficient);
        assert!(ZcaTransform::fit(&x, 0.0).is_err());
    }

    #[test]
    fn flip_examples() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.25, 0.75]).unwrap();
        let outcomes: Vec<Vec<f64>> = (0..20).map(|s| augment_flip(&x, s).unwrap().data().to_vec()).collect();
        assert!(outcomes.iter().all(|o| o == &[0.25, 0.75] || o == &[0.75, 0.25]));
        assert!(outcomes.iter().any(|o| o == &[0.75, 0.25]));
        let sym = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 1.0, 4.0, 5.0, 4.0]).unwrap();
        for s in 0..10 {
            assert_eq!(augment_flip(&sym, s).unwrap(), sym);
        }
    }

    #[test]
    fn flip_frequency() {
        let n = 10_000;
        let mut data = vec![0.0; n * 2];
        for i in 0..n {
            data[2 * i + 1] = 1.0;
        }
        let x = Tensor::new(vec![n, 1, 1, 2], data).unwrap();
        let y = augment_flip(&x, 77).unwrap();
        let flipped = y.data().chunks(2).filter(|p| p[0] == 1.0).count();
        assert!((flipped as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn padding_examples() {
        let x = Tensor::ones([2, 1, 16, 16]);
        let p = pad_to(&x, 28, 28).unwrap();
        assert_eq!(p.shape(), &[2, 1, 28, 28]);
        let img = &p.data()[..784];
        for r in 0..28 {
            for c in 0..28 {
                let inside = (6..22).contains(&r) && (6..22).contains(&c);
                assert_eq!(img[r * 28 + c], if inside { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(pad_to(&x, 16, 16).unwrap(), x);
        let dot = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(pad_to(&dot, 3, 3).unwrap().data()[4], 5.0);
        let odd = pad_to(&dot, 2, 2).unwrap();
        assert_eq!(odd.data(), &[5.0, 0.0, 0.0, 0.0]);
        assert!(pad_to(&x, 15, 20).is_err());
    }

    #[test]
    fn toy_sets_are_reproducible_and_balanced() {
        for kind in [ToyKind::BlobDigits, ToyKind::TwoMoonsImage] {
            let a = toy_dataset(kind, 103, 5).unwrap();
            let b = toy_dataset(kind, 103, 5).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.images, toy_dataset(kind, 103, 6).unwrap().images);
            let counts = a.class_counts();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
            assert_eq!(a.image_shape(), [1, 8, 8]);
        }
        assert!(toy_dataset(ToyKind::BlobDigits, 5, 1).is_err());
    }

    #[test]
    fn ten_prototypes_share_at_most_one_blob() {
        let protos = blob_prototypes(10);
        for (i, a) in protos.iter().enumerate() {
            for b in &protos[i + 1..] {
                assert!(a.iter().filter(|p| b.contains(p)).count() <= 1);
            }
        }
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let data = toy_dataset(ToyKind::BlobDigits, 200, 3).unwrap();
        let (train, val) = data.validation_split().unwrap();
        assert_eq!((train.len(), val.len()), (180, 20));
        assert_eq!(val.labels, data.labels[180..]);
        assert_eq!(val.images.slice_outer(0).unwrap(), data.image(180).unwrap());
        assert!(val.manifest().contains("split: validation"));
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let x = Tensor::zeros([2, 1, 2, 2]);
        assert!(Dataset::new(x.clone(), vec![0, 3], 3, "t").is_err());
        assert!(Dataset::new(x, vec![0], 3, "t").is_err());
    }
}
