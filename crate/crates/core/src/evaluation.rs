//! Attribution fidelity: deletion curves and their AUC, gradient
//! distribution statistics, ground-truth overlap, saliency map export and
//! feature rank diagnostics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{BackwardExtras, Model};
use crate::nn::{argmax_rows, softmax_cross_entropy};
use crate::saliency::{
    apply_mask, build_top_mask, importance_scores, mask_count, top_indices, FeatureStats, ImportanceMap,
    ReplacementPolicy,
};
use crate::training::derive_seed;
use crate::whitening::{covariance, effective_rank, group_ranges, whiten_batch, RankReport, WhiteningConfig};

/// Samples per inference chunk.
const CHUNK: usize = 256;

fn chunks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(CHUNK).map(move |s| (s, (s + CHUNK).min(n)))
}

/// Percentage of rows of `x` classified as `y` (inference mode).
pub fn accuracy(model: &Model, x: &Matrix, y: &[usize]) -> Result<f64> {
    if y.is_empty() || x.rows() != y.len() {
        return Err(Error::contract(format!(
            "accuracy needs a nonempty test set with one label per row, got {} rows and {} labels",
            x.rows(),
            y.len()
        )));
    }
    let mut correct = 0usize;
    for (s, e) in chunks(y.len()) {
        let logits = model.logits(&x.row_block(s, e))?;
        correct += argmax_rows(&logits).iter().zip(&y[s..e]).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / y.len() as f64)
}

/// Per-sample gradient of the cross-entropy at the true label with respect
/// to the input (inference mode).
pub fn input_gradients(model: &Model, x: &Matrix, y: &[usize]) -> Result<Matrix> {
    if x.rows() != y.len() {
        return Err(Error::contract("one label per sample required"));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (s, e) in chunks(y.len()) {
        let trace = model.forward_infer(&x.row_block(s, e))?;
        let (_, dlogits) = softmax_cross_entropy(trace.logits(), &y[s..e])?;
        // undo the batch mean so every sample sees its own loss gradient
        let dlogits = dlogits.scale((e - s) as f64);
        let res = model.backward(
            &trace,
            &dlogits,
            BackwardExtras {
                want_input_grad: true,
                ..Default::default()
            },
        )?;
        out.set_row_block(s, &res.input_grad.expect("requested"));
    }
    Ok(out)
}

pub fn importance_maps(model: &Model, x: &Matrix, y: &[usize]) -> Result<Vec<ImportanceMap>> {
    Ok(importance_scores(&input_gradients(model, x, y)?))
}

/// Settings shared by every curve that is meant to be compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Masking fractions in percent.
    pub grid: Vec<f64>,
    pub policy: ReplacementPolicy,
    pub seed: u64,
    pub test_samples: usize,
}

impl EvalConfig {
    pub fn new(test_samples: usize) -> Self {
        EvalConfig {
            grid: default_grid(),
            policy: ReplacementPolicy::FeatureMean,
            seed: 0,
            test_samples,
        }
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain data serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// 0%, 4%, ..., 100%.
pub fn default_grid() -> Vec<f64> {
    (0..=25).map(|k| 4.0 * k as f64).collect()
}

pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::contract(format!("bad grid value '{v}'"))))
        .collect::<Result<Vec<_>>>()?;
    check_grid(&grid)?;
    Ok(grid)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) || grid.last() != Some(&100.0) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("grid must rise strictly from 0 to 100 percent"));
    }
    Ok(())
}

/// Trapezoid rule over the percentage grid.
pub fn trapezoid_auc(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| (g[1] - g[0]) * (v[0] + v[1]) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingCurve {
    /// Percent of features masked.
    pub grid: Vec<f64>,
    /// Percent correct at each grid point.
    pub accuracy: Vec<f64>,
    pub auc: f64,
    pub fingerprint: String,
}

/// Deletion curve: at each fraction the most important features of every
/// sample (by the model's own importance) are replaced and accuracy is
/// recorded. Lower AUC means the attributions point at what the model uses.
pub fn masking_curve(model: &Model, x: &Matrix, y: &[usize], stats: &FeatureStats, cfg: &EvalConfig) -> Result<MaskingCurve> {
    if y.is_empty() {
        return Err(Error::contract("masking curve needs a nonempty test set"));
    }
    check_grid(&cfg.grid)?;
    if cfg.test_samples != y.len() {
        return Err(Error::contract(format!(
            "evaluation config is for {} samples, got {}",
            cfg.test_samples,
            y.len()
        )));
    }
    let maps = importance_maps(model, x, y)?;
    let mut accuracy_at = Vec::with_capacity(cfg.grid.len());
    for &pct in &cfg.grid {
        let mut masked = x.clone();
        for (i, imp) in maps.iter().enumerate() {
            let mask = build_top_mask(imp, pct / 100.0)?;
            if mask.masked_count == 0 {
                continue;
            }
            let row = apply_mask(x.row(i), &mask, cfg.policy, Some(stats), derive_seed(cfg.seed, i as u64))?;
            masked.row_mut(i).copy_from_slice(&row);
        }
        accuracy_at.push(accuracy(model, &masked, y)?);
    }
    Ok(MaskingCurve {
        auc: trapezoid_auc(&cfg.grid, &accuracy_at),
        grid: cfg.grid.clone(),
        accuracy: accuracy_at,
        fingerprint: cfg.fingerprint(),
    })
}

/// Errors unless every curve was measured under the same evaluation config.
pub fn ensure_comparable<'a>(curves: impl IntoIterator<Item = &'a MaskingCurve>) -> Result<()> {
    let mut seen: Option<&str> = None;
    for c in curves {
        match seen {
            None => seen = Some(&c.fingerprint),
            Some(f) if f == c.fingerprint => {}
            Some(f) => {
                return Err(Error::contract(format!(
                    "curves measured under different evaluation configs ({f} vs {})",
                    c.fingerprint
                )))
            }
        }
    }
    Ok(())
}

/// Writes `label,fingerprint,fraction_percent,accuracy_percent` rows.
pub fn write_curves_csv(out: &mut dyn Write, curves: &[(String, MaskingCurve)]) -> Result<()> {
    ensure_comparable(curves.iter().map(|(_, c)| c))?;
    writeln!(out, "label,fingerprint,fraction_percent,accuracy_percent")?;
    for (label, c) in curves {
        for (g, a) in c.grid.iter().zip(&c.accuracy) {
            writeln!(out, "{label},{},{g},{a}", c.fingerprint)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    /// Linear interpolation between order statistics; all zeros when empty.
    pub fn of(values: &mut [f64]) -> Self {
        if values.is_empty() {
            return Quantiles { min: 0.0, q25: 0.0, median: 0.0, q75: 0.0, max: 0.0 };
        }
        values.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (values.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
        };
        Quantiles {
            min: values[0],
            q25: at(0.25),
            median: at(0.5),
            q75: at(0.75),
            max: values[values.len() - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    /// `|gradient|` of each sample's top-10% most important features.
    pub top: Quantiles,
    /// `|gradient|` of the remaining 90%.
    pub bottom: Quantiles,
    /// `top.median / bottom.median`; 0 when both are 0.
    pub separation: f64,
}

/// Splits every sample's `|input gradient|` at its own 90th percentile of
/// importance and summarizes both pooled populations.
pub fn gradient_stats(model: &Model, x: &Matrix, y: &[usize]) -> Result<GradientStats> {
    Ok(gradient_stats_from_maps(&importance_maps(model, x, y)?))
}

pub fn gradient_stats_from_maps(maps: &[ImportanceMap]) -> GradientStats {
    let mut top = Vec::new();
    let mut bottom = Vec::new();
    for imp in maps {
        let k = mask_count(0.1, imp.len()).max(1).min(imp.len());
        let mut is_top = vec![false; imp.len()];
        for j in top_indices(imp, k) {
            is_top[j] = true;
        }
        for (v, t) in imp.scores().iter().zip(is_top) {
            if t {
                top.push(*v);
            } else {
                bottom.push(*v);
            }
        }
    }
    let top = Quantiles::of(&mut top);
    let bottom = Quantiles::of(&mut bottom);
    let separation = match (top.median, bottom.median) {
        (t, b) if t == 0.0 && b == 0.0 => 0.0,
        (_, b) if b == 0.0 => f64::INFINITY,
        (t, b) => t / b,
    };
    GradientStats { top, bottom, separation }
}

pub fn write_gradient_stats_csv(out: &mut dyn Write, rows: &[(String, GradientStats)]) -> Result<()> {
    writeln!(out, "label,population,min,q25,median,q75,max,separation")?;
    for (label, s) in rows {
        for (name, q) in [("top10", &s.top), ("bottom90", &s.bottom)] {
            writeln!(
                out,
                "{label},{name},{},{},{},{},{},{}",
                q.min, q.q25, q.median, q.q75, q.max, s.separation
            )?;
        }
    }
    Ok(())
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of each test sample's top-`rho` importance pixels with the ground
/// truth mask of its class.
pub fn ground_truth_iou(model: &Model, x: &Matrix, y: &[usize], truth: &[Vec<bool>], rho: f64) -> Result<Vec<f64>> {
    let maps = importance_maps(model, x, y)?;
    maps.iter()
        .zip(y)
        .map(|(imp, &label)| {
            let gt = truth
                .get(label)
                .ok_or_else(|| Error::contract(format!("no ground truth for class {label}")))?;
            Ok(iou(&build_top_mask(imp, rho)?.mask, gt))
        })
        .collect()
}

const SIDECAR_MAGIC: &[u8; 8] = b"SDIMPRAW";

/// Writes `<stem>.pgm` (scores min-max scaled to 0..=255) and `<stem>.raw`
/// (magic, u32 rows, u32 cols, then f64 values, all little-endian).
pub fn export_saliency(imp: &ImportanceMap, height: usize, width: usize, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    if imp.len() != height * width {
        return Err(Error::contract(format!(
            "{} scores cannot be laid out as {height}x{width}",
            imp.len()
        )));
    }
    let pgm = dir.join(format!("{stem}.pgm"));
    let raw = dir.join(format!("{stem}.raw"));
    let mut image = format!("P5\n{width} {height}\n255\n").into_bytes();
    image.extend(grayscale(imp.scores()));
    fs::write(&pgm, image)?;
    let mut sidecar = Vec::with_capacity(16 + 8 * imp.len());
    sidecar.extend_from_slice(SIDECAR_MAGIC);
    sidecar.extend_from_slice(&(height as u32).to_le_bytes());
    sidecar.extend_from_slice(&(width as u32).to_le_bytes());
    for v in imp.scores() {
        sidecar.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, sidecar)?;
    Ok((pgm, raw))
}

/// Monotone map of scores onto 0..=255; a constant map becomes all zero.
pub fn grayscale(scores: &[f64]) -> Vec<u8> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .map(|v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Reads a sidecar written by [`export_saliency`].
pub fn read_sidecar(path: &Path) -> Result<(usize, usize, ImportanceMap)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != SIDECAR_MAGIC {
        return Err(Error::format(0, "not a saliency sidecar"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 8 {
        return Err(Error::format(16, format!("expected {} values", rows * cols)));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((rows, cols, ImportanceMap(values)))
}

/// Rank diagnostics of the encoder features before and after whitening.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureDiagnosis {
    pub before: RankReport,
    pub after: RankReport,
    /// Effective rank of each whitened group's covariance with its size.
    pub groups: Vec<(usize, f64)>,
    /// Features whitened with the model's running (inference) statistics,
    /// when it has them.
    pub inference: Option<RankReport>,
}

/// `after` and `groups` whiten `x` with its own statistics, using the
/// model's whitening settings or `fallback` for models without a layer.
pub fn diagnose_features(model: &Model, x: &Matrix, fallback: WhiteningConfig) -> Result<FeatureDiagnosis> {
    let mut features = Matrix::zeros(model.net.feature_dim(), 0);
    let mut blocks = Vec::new();
    for (s, e) in chunks(x.rows()) {
        blocks.push(model.net.encoder.forward(&x.row_block(s, e))?.output().clone());
    }
    if !blocks.is_empty() {
        let rows: Vec<Vec<f64>> = blocks.iter().flat_map(|b| (0..b.rows()).map(|r| b.row(r).to_vec())).collect();
        features = Matrix::from_rows(&rows).transpose();
    }
    let cfg = model.whitening.as_ref().map_or(fallback, |w| w.cfg);
    let white = whiten_batch(&features, &cfg)?.0;
    let inference = match model.whitening.as_ref().filter(|w| w.running().is_some()) {
        Some(state) => Some(effective_rank(&covariance(&state.infer(&features)?))?),
        None => None,
    };
    let cov_before = covariance(&features);
    let cov_after = covariance(&white);
    let groups = group_ranges(cov_after.rows(), cfg.group_size)
        .into_iter()
        .map(|r| {
            let block = cov_after.row_block(r.start, r.end);
            let cols: Vec<usize> = r.clone().collect();
            let sub = block.transpose().select_rows(&cols);
            Ok((r.len(), effective_rank(&sub)?.effective_rank))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureDiagnosis {
        before: effective_rank(&cov_before)?,
        after: effective_rank(&cov_after)?,
        groups,
        inference,
    })
}
