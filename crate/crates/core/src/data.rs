//! Datasets: the IDX reader/writer used for MNIST and synthetic data with
//! known salient pixels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Shape;
use crate::saliency::FeatureStats;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A train/test split with features scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
    pub classes: usize,
    /// `(channels, height, width)` of one sample.
    pub image_shape: (usize, usize, usize),
    /// Computed on the training split only.
    pub stats: FeatureStats,
    /// Per-class mask of the pixels that carry the label (synthetic data only).
    pub ground_truth: Option<Vec<Vec<bool>>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        (train_x, train_y): (Matrix, Vec<usize>),
        (test_x, test_y): (Matrix, Vec<usize>),
        classes: usize,
        image_shape: (usize, usize, usize),
    ) -> Result<Self> {
        let features = image_shape.0 * image_shape.1 * image_shape.2;
        for (x, y, split) in [(&train_x, &train_y, "train"), (&test_x, &test_y, "test")] {
            if x.cols() != features || x.rows() != y.len() {
                return Err(Error::contract(format!(
                    "{split} split is {:?} with {} labels, expected {features} features",
                    x.shape(),
                    y.len()
                )));
            }
            if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
                return Err(Error::contract(format!("{split} label {bad} outside [0, {classes})")));
            }
            if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(format!("{split} features must lie in [0, 1]")));
            }
        }
        let stats = FeatureStats::from_samples(&train_x);
        Ok(Dataset {
            name: name.into(),
            train_x,
            train_y,
            test_x,
            test_y,
            classes,
            image_shape,
            stats,
            ground_truth: None,
        })
    }

    pub fn features(&self) -> usize {
        self.train_x.cols()
    }

    /// Network input shape: flat for one-row layouts, an image otherwise.
    pub fn input_shape(&self) -> Shape {
        match self.image_shape {
            (1, 1, w) => Shape::flat(w),
            (c, h, w) => Shape::spatial(c, h, w),
        }
    }

    /// Keeps the first `train` / `test` samples of each split; statistics are
    /// recomputed on the reduced training split.
    pub fn truncated(mut self, train: Option<usize>, test: Option<usize>) -> Self {
        if let Some(n) = train.filter(|&n| n < self.train_y.len()) {
            self.train_x = self.train_x.row_block(0, n);
            self.train_y.truncate(n);
        }
        if let Some(n) = test.filter(|&n| n < self.test_y.len()) {
            self.test_x = self.test_x.row_block(0, n);
            self.test_y.truncate(n);
        }
        self.stats = FeatureStats::from_samples(&self.train_x);
        self
    }

    /// Writes both splits as IDX files (`train-*` and `t10k-*`), quantizing
    /// features to bytes.
    pub fn export_idx(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (_, h, w) = self.image_shape;
        for (prefix, x, y) in [("train", &self.train_x, &self.train_y), ("t10k", &self.test_x, &self.test_y)] {
            fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), encode_idx_images(x, h, w)?)?;
            fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), encode_idx_labels(y)?)?;
        }
        Ok(())
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset, "truncated header"))
}

/// Parsed IDX image file: `count × (rows·cols)` values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Matrix, usize, usize)> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let payload = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < payload {
        return Err(Error::format(
            16 + body.len(),
            format!("truncated image payload: header promises {payload} bytes, found {}", body.len()),
        ));
    }
    if body.len() > payload {
        return Err(Error::format(16 + payload, "trailing bytes after image payload"));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Matrix::from_vec(count, rows * cols, data)?, rows, cols))
}

/// Parsed IDX label file; labels above 9 are rejected.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            8 + body.len(),
            format!("truncated label payload: header promises {count} labels, found {}", body.len()),
        ));
    }
    if body.len() > count {
        return Err(Error::format(8 + count, "trailing bytes after label payload"));
    }
    body.iter()
        .enumerate()
        .map(|(i, &b)| {
            if b > 9 {
                Err(Error::format(8 + i, format!("label {b} is not a digit")))
            } else {
                Ok(b as usize)
            }
        })
        .collect()
}

/// Number of images announced by an IDX image header.
pub fn idx_image_count(header: &[u8]) -> Result<usize> {
    let magic = read_u32(header, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    Ok(read_u32(header, 4)? as usize)
}

pub fn encode_idx_images(x: &Matrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if x.cols() != rows * cols {
        return Err(Error::contract(format!(
            "{} features cannot be laid out as {rows}x{cols}",
            x.cols()
        )));
    }
    let mut out = Vec::with_capacity(16 + x.data().len());
    for v in [IDX_IMAGES_MAGIC, x.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 9 {
            return Err(Error::contract(format!("label {l} does not fit the IDX digit range")));
        }
        out.push(l as u8);
    }
    Ok(out)
}

/// Reads one IDX image/label file pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<(Matrix, Vec<usize>, (usize, usize))> {
    let (x, rows, cols) = parse_idx_images(&fs::read(images_path)?)?;
    let y = parse_idx_labels(&fs::read(labels_path)?)?;
    if x.rows() != y.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", x.rows(), y.len()),
        ));
    }
    Ok((x, y, (rows, cols)))
}

/// Loads `train-*-ubyte` and `t10k-*-ubyte` from `dir`, keeping at most the
/// requested number of samples per split.
pub fn load_mnist_dir(dir: &Path, train: Option<usize>, test: Option<usize>) -> Result<Dataset> {
    let (train_x, train_y, shape) = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (test_x, test_y, test_shape) = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    if shape != test_shape {
        return Err(Error::format(8, "train and test images differ in size"));
    }
    let ds = Dataset::new("mnist", (train_x, train_y), (test_x, test_y), 10, (1, shape.0, shape.1))?;
    Ok(ds.truncated(train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two classes told apart only by the brightness of one fixed pixel patch
    /// over uniform noise.
    PlantedPatch,
    /// Two Gaussian classes whose features share a common factor with the
    /// given correlation.
    GaussianBlobs { correlation: f64 },
}

impl SyntheticKind {
    /// `planted_patch`, `gaussian_blobs` or `gaussian_blobs:<correlation>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "planted_patch" => Ok(SyntheticKind::PlantedPatch),
            "gaussian_blobs" => Ok(SyntheticKind::GaussianBlobs { correlation: 0.0 }),
            other => match other.strip_prefix("gaussian_blobs:").map(str::parse::<f64>) {
                Some(Ok(c)) if (0.0..=1.0).contains(&c) => Ok(SyntheticKind::GaussianBlobs { correlation: c }),
                _ => Err(Error::contract(format!("unknown synthetic dataset kind '{s}'"))),
            },
        }
    }
}

/// Side length and offset of the planted patch in a `height × width` image.
fn patch_geometry(height: usize, width: usize) -> (usize, usize, usize, usize) {
    let ph = (height / 2).max(1);
    let pw = (width / 2).max(1);
    ((height - ph) / 2, (width - pw) / 2, ph, pw)
}

fn image_layout(dims: usize) -> (usize, usize) {
    let side = (dims as f64).sqrt().round() as usize;
    if side * side == dims {
        (side, side)
    } else {
        (1, dims)
    }
}

/// The planted patch as a boolean mask over `dims` pixels.
pub fn planted_patch_mask(dims: usize) -> Vec<bool> {
    let (h, w) = image_layout(dims);
    let (y0, x0, ph, pw) = patch_geometry(h, w);
    let mut mask = vec![false; dims];
    for y in y0..y0 + ph {
        for x in x0..x0 + pw {
            mask[y * w + x] = true;
        }
    }
    mask
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates `n` samples of `dims` features (one fifth held out for test).
pub fn make_synthetic(kind: SyntheticKind, n: usize, dims: usize, seed: u64) -> Result<Dataset> {
    if n < 4 || dims < 4 {
        return Err(Error::contract(format!("synthetic data needs n >= 4 and dims >= 4, got n={n}, dims={dims}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let mut x = Matrix::zeros(n, dims);
    let (h, w) = image_layout(dims);
    let patch = planted_patch_mask(dims);
    match kind {
        SyntheticKind::PlantedPatch => {
            for (i, &label) in labels.iter().enumerate() {
                let row = x.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if patch[j] {
                        if label == 0 {
                            rng.gen_range(0.0..0.35)
                        } else {
                            rng.gen_range(0.65..1.0)
                        }
                    } else {
                        rng.gen()
                    };
                }
            }
        }
        SyntheticKind::GaussianBlobs { correlation } => {
            if !(0.0..=1.0).contains(&correlation) {
                return Err(Error::contract(format!("correlation must lie in [0, 1], got {correlation}")));
            }
            let shared = correlation.sqrt();
            let own = (1.0 - correlation).sqrt();
            for (i, &label) in labels.iter().enumerate() {
                let centre = if label == 0 { 0.4 } else { 0.6 };
                let common = gaussian(&mut rng);
                for v in x.row_mut(i) {
                    let noise = shared * common + own * gaussian(&mut rng);
                    *v = (centre + 0.1 * noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    let test = (n / 5).max(1);
    let split = n - test;
    let train_x = x.row_block(0, split);
    let test_x = x.row_block(split, n);
    let test_y = labels.split_off(split);
    let name = match kind {
        SyntheticKind::PlantedPatch => "synthetic:planted_patch".to_string(),
        SyntheticKind::GaussianBlobs { correlation } => format!("synthetic:gaussian_blobs:{correlation}"),
    };
    let mut ds = Dataset::new(name, (train_x, labels), (test_x, test_y), 2, (1, h, w))?;
    if kind == SyntheticKind::PlantedPatch {
        ds.ground_truth = Some(vec![patch.clone(), patch]);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::whitening::covariance;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let mut labels = Vec::new();
        for v in [IDX_LABELS_MAGIC, 2] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend_from_slice(&[7, 3]);
        (images, labels)
    }

    #[test]
    fn parses_hand_built_fixture() {
        let (images, labels) = fixture();
        let (x, r, c) = parse_idx_images(&images).unwrap();
        assert_eq!((r, c), (2, 2));
        assert_eq!(x.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(x.row(1), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);
        assert_eq!(encode_idx_images(&x, 2, 2).unwrap(), images);
        assert_eq!(encode_idx_labels(&[7, 3]).unwrap(), labels);
    }

    #[test]
    fn canonical_train_header_announces_60000_images() {
        let mut header = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 60000, 28, 28] {
            header.extend_from_slice(&v.to_be_bytes());
        }
        assert_eq!(idx_image_count(&header).unwrap(), 60000);
    }

    #[test]
    fn format_errors_name_offsets() {
        let (mut images, mut labels) = fixture();
        labels[9] = 10;
        match parse_idx_labels(&labels) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
        images.truncate(20);
        assert!(matches!(parse_idx_images(&images), Err(Error::Format { offset: 20, .. })));
        images[3] = 0x01;
        assert!(matches!(parse_idx_images(&images), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = fixture();
        let labels = encode_idx_labels(&[1, 2, 3]).unwrap();
        fs::write(dir.path().join("i"), images).unwrap();
        fs::write(dir.path().join("l"), labels).unwrap();
        assert!(matches!(
            load_mnist_idx(&dir.path().join("i"), &dir.path().join("l")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_disjoint() {
        let a = make_synthetic(SyntheticKind::PlantedPatch, 50, 64, 3).unwrap();
        let b = make_synthetic(SyntheticKind::PlantedPatch, 50, 64, 3).unwrap();
        assert_eq!(a.train_x, b.train_x);
        assert_eq!(a.test_y, b.test_y);
        assert_eq!(a.train_y.len() + a.test_y.len(), 50);
        for i in 0..a.test_x.rows() {
            for j in 0..a.train_x.rows() {
                assert_ne!(a.test_x.row(i), a.train_x.row(j));
            }
        }
        assert_eq!(a.image_shape, (1, 8, 8));
        assert_eq!(a.ground_truth.as_ref().unwrap()[0].iter().filter(|&&m| m).count(), 16);
    }

    #[test]
    fn stats_come_from_train_split_only() {
        let mut a = make_synthetic(SyntheticKind::PlantedPatch, 40, 16, 9).unwrap();
        let before = a.stats.clone();
        a.test_x.data_mut().fill(1.0);
        assert_eq!(FeatureStats::from_samples(&a.train_x), before);
        let truncated = a.clone().truncated(Some(10), None);
        assert_eq!(truncated.stats, FeatureStats::from_samples(&a.train_x.row_block(0, 10)));
    }

    #[test]
    fn removing_the_patch_leaves_no_signal() {
        // nearest-class-mean oracle on the non-patch pixels stays at chance
        let ds = make_synthetic(SyntheticKind::PlantedPatch, 4000, 64, 5).unwrap();
        let patch = planted_patch_mask(64);
        let mut means = [vec![0.0; 64], vec![0.0; 64]];
        let mut counts = [0.0; 2];
        for (i, &y) in ds.train_y.iter().enumerate() {
            counts[y] += 1.0;
            for (m, v) in means[y].iter_mut().zip(ds.train_x.row(i)) {
                *m += v;
            }
        }
        for c in 0..2 {
            means[c].iter_mut().for_each(|m| *m /= counts[c]);
        }
        let mut correct = 0;
        for (i, &y) in ds.test_y.iter().enumerate() {
            let dist = |c: usize| -> f64 {
                ds.test_x.row(i).iter().zip(&means[c]).zip(&patch)
                    .filter(|(_, &p)| !p)
                    .map(|((v, m), _)| (v - m).powi(2))
                    .sum()
            };
            let pred = if dist(0) <= dist(1) { 0 } else { 1 };
            correct += (pred == y) as usize;
        }
        let acc = correct as f64 / ds.test_y.len() as f64;
        assert!(acc <= 0.55, "{acc}");
    }

    #[test]
    fn uncorrelated_blobs_have_diagonal_covariance() {
        let ds = make_synthetic(SyntheticKind::GaussianBlobs { correlation: 0.0 }, 1250, 6, 2).unwrap();
        let cov = covariance(&ds.train_x.row_block(0, 1000).transpose());
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert!(cov[(i, j)].abs() < 0.1);
                }
            }
        }
        let corr = make_synthetic(SyntheticKind::GaussianBlobs { correlation: 0.8 }, 1250, 6, 2).unwrap();
        let c = covariance(&corr.train_x.transpose());
        assert!(c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt() > 0.6);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(SyntheticKind::parse("planted_patch").unwrap(), SyntheticKind::PlantedPatch);
        assert_eq!(
            SyntheticKind::parse("gaussian_blobs:0.5").unwrap(),
            SyntheticKind::GaussianBlobs { correlation: 0.5 }
        );
        assert!(matches!(SyntheticKind::parse("spirals"), Err(Error::Contract(_))));
        assert!(make_synthetic(SyntheticKind::PlantedPatch, 3, 64, 0).is_err());
    }

    #[test]
    fn idx_export_round_trips_quantized_values() {
        let ds = make_synthetic(SyntheticKind::PlantedPatch, 20, 16, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.export_idx(dir.path()).unwrap();
        let back = load_mnist_dir(dir.path(), None, None);
        // labels are {0, 1} and images 4x4, so the generic loader reads it back
        let back = back.unwrap();
        assert_eq!(back.train_y, ds.train_y);
        for (a, b) in back.train_x.data().iter().zip(ds.train_x.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
