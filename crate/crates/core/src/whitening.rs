//! Group-wise ZCA whitening with an exact backward pass, running statistics
//! for inference, the decorrelation penalty and the effective-rank diagnostic.
//!
//! Feature matrices here are `d × m`: one row per feature, one column per
//! sample. Features are split into consecutive groups of `group_size` rows
//! (the last group takes the remainder) and each group is whitened with its
//! own `Σ^{-1/2}`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt_from_eig, matmul, matmul_nt, matmul_tn, psd_spectrum, sym_eig, sym_eigvals, EigenDecomposition, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteningConfig {
    pub group_size: usize,
    /// Added to every eigenvalue inside the inverse square root.
    pub eps: f64,
    /// Decay of the running mean / transform used at inference.
    pub ema_decay: f64,
}

impl Default for WhiteningConfig {
    fn default() -> Self {
        WhiteningConfig {
            group_size: 64,
            eps: 1e-5,
            ema_decay: 0.99,
        }
    }
}

impl WhiteningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::contract("group size must be at least 1"));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::contract(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::contract(format!(
                "ema decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Consecutive row ranges of at most `group_size` features.
pub fn group_ranges(dim: usize, group_size: usize) -> Vec<Range<usize>> {
    (0..dim.div_ceil(group_size))
        .map(|h| h * group_size..((h + 1) * group_size).min(dim))
        .collect()
}

/// Sample covariance `(1/m)(Z − μ1ᵀ)(Z − μ1ᵀ)ᵀ` of a `d × m` matrix.
pub fn covariance(z: &Matrix) -> Matrix {
    let centered = center_rows(z).0;
    matmul_nt(&centered, &centered)
        .expect("square by construction")
        .scale(1.0 / z.cols() as f64)
}

fn center_rows(z: &Matrix) -> (Matrix, Vec<f64>) {
    let mean = z.row_means();
    let mut c = z.clone();
    for (r, mu) in mean.iter().enumerate() {
        for v in c.row_mut(r) {
            *v -= mu;
        }
    }
    (c, mean)
}

/// Statistics of one whitened group for one batch.
#[derive(Clone, Debug)]
pub struct GroupBatch {
    pub range: Range<usize>,
    pub mean: Vec<f64>,
    pub transform: Matrix,
    pub eig: EigenDecomposition,
    centered: Matrix,
}

/// Everything the backward pass needs from a training-mode forward.
#[derive(Clone, Debug)]
pub struct WhitenedBatch {
    pub groups: Vec<GroupBatch>,
    dim: usize,
    samples: usize,
    eps: f64,
}

/// Gradients with respect to the batch statistics (mean and transform of each
/// group), collected when the statistics are reused on a second input.
#[derive(Clone, Debug)]
pub struct StatGrads {
    pub transform: Vec<Matrix>,
    pub mean: Vec<Vec<f64>>,
}

/// Whitens `z` with its own batch statistics. Pure: no running state.
pub fn whiten_batch(z: &Matrix, cfg: &WhiteningConfig) -> Result<(Matrix, WhitenedBatch)> {
    cfg.validate()?;
    let (dim, m) = z.shape();
    if m < 2 {
        return Err(Error::contract(format!(
            "training-mode whitening needs at least 2 samples, got {m}"
        )));
    }
    let mut out = Matrix::zeros(dim, m);
    let mut groups = Vec::new();
    for range in group_ranges(dim, cfg.group_size) {
        let block = z.row_block(range.start, range.end);
        let (centered, mean) = center_rows(&block);
        let sigma = matmul_nt(&centered, &centered)?.scale(1.0 / m as f64);
        let eig = sym_eig(&sigma)?;
        let transform = inv_sqrt_from_eig(&eig, cfg.eps)?;
        let white = matmul(&transform, &centered)?;
        out.set_row_block(range.start, &white);
        groups.push(GroupBatch {
            range,
            mean,
            transform,
            eig,
            centered,
        });
    }
    if !out.is_finite() {
        return Err(Error::numerical("non-finite whitened features"));
    }
    Ok((
        out,
        WhitenedBatch {
            groups,
            dim,
            samples: m,
            eps: cfg.eps,
        },
    ))
}

impl WhitenedBatch {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Applies this batch's mean and transform to another `d × m'` input.
    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        if z.rows() != self.dim {
            return Err(Error::Shape {
                op: "whitening apply",
                left: z.shape(),
                right: (self.dim, z.cols()),
            });
        }
        let mut out = Matrix::zeros(z.rows(), z.cols());
        for g in &self.groups {
            let mut block = z.row_block(g.range.start, g.range.end);
            for (r, mu) in g.mean.iter().enumerate() {
                for v in block.row_mut(r) {
                    *v -= mu;
                }
            }
            out.set_row_block(g.range.start, &matmul(&g.transform, &block)?);
        }
        Ok(out)
    }

    /// Backward of [`WhitenedBatch::apply`] on input `z` with upstream `dy`.
    /// Returns the input gradient and the gradients reaching the statistics.
    pub fn apply_backward(&self, z: &Matrix, dy: &Matrix) -> Result<(Matrix, StatGrads)> {
        if z.shape() != dy.shape() || z.rows() != self.dim {
            return Err(Error::Shape {
                op: "whitening apply backward",
                left: z.shape(),
                right: dy.shape(),
            });
        }
        let mut dz = Matrix::zeros(z.rows(), z.cols());
        let mut transform = Vec::with_capacity(self.groups.len());
        let mut mean = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let mut centered = z.row_block(g.range.start, g.range.end);
            for (r, mu) in g.mean.iter().enumerate() {
                for v in centered.row_mut(r) {
                    *v -= mu;
                }
            }
            let dyg = dy.row_block(g.range.start, g.range.end);
            // W is symmetric, so Wᵀ·dy = W·dy
            let dcentered = matmul(&g.transform, &dyg)?;
            transform.push(matmul_nt(&dyg, &centered)?);
            mean.push(dcentered.row_means().iter().map(|v| -v * dz.cols() as f64).collect());
            dz.set_row_block(g.range.start, &dcentered);
        }
        Ok((dz, StatGrads { transform, mean }))
    }

    /// Exact gradient of the training-mode whitening map, including the
    /// dependence of μ and Σ on the batch. `extra` adds gradients that reached
    /// the statistics through [`WhitenedBatch::apply`].
    pub fn backward(&self, dz_white: &Matrix, extra: Option<&StatGrads>) -> Result<Matrix> {
        if dz_white.shape() != (self.dim, self.samples) {
            return Err(Error::contract(format!(
                "whitening backward got a {:?} gradient for a {}x{} batch",
                dz_white.shape(),
                self.dim,
                self.samples
            )));
        }
        if let Some(e) = extra {
            if e.transform.len() != self.groups.len() || e.mean.len() != self.groups.len() {
                return Err(Error::contract("statistic gradients do not match the group layout"));
            }
        }
        let m = self.samples as f64;
        let mut dz = Matrix::zeros(self.dim, self.samples);
        for (h, g) in self.groups.iter().enumerate() {
            let dy = dz_white.row_block(g.range.start, g.range.end);
            let mut d_transform = matmul_nt(&dy, &g.centered)?;
            if let Some(e) = extra {
                d_transform.add_scaled(&e.transform[h], 1.0)?;
            }
            let mut d_centered = matmul(&g.transform, &dy)?;
            let d_sigma = inv_sqrt_backward(&g.eig, &d_transform, self.eps)?;
            d_centered.add_scaled(&matmul(&d_sigma, &g.centered)?, 2.0 / m)?;

            let means = d_centered.row_means();
            for (r, mu) in means.iter().enumerate() {
                let shift = extra.map_or(0.0, |e| e.mean[h][r] / m);
                for v in d_centered.row_mut(r) {
                    *v += shift - mu;
                }
            }
            dz.set_row_block(g.range.start, &d_centered);
        }
        Ok(dz)
    }
}

/// Relative gap below which two eigenvalues are treated as equal when forming
/// divided differences.
const DEGENERACY_REL: f64 = 1e-8;

/// Gradient with respect to Σ of `⟨G, Σ^{-1/2}⟩` given the gradient `G` with
/// respect to the transform, via the divided-difference form of the
/// symmetric-eigendecomposition derivative.
fn inv_sqrt_backward(eig: &EigenDecomposition, d_transform: &Matrix, eps: f64) -> Result<Matrix> {
    let lam = psd_spectrum(&eig.eigenvalues, eps)?;
    let n = lam.len();
    let f = |l: f64| 1.0 / (l + eps).sqrt();
    let df = |l: f64| -0.5 * (l + eps).powf(-1.5);
    let lmax = lam.first().copied().unwrap_or(0.0).max(0.0);
    let v = &eig.eigenvectors;

    let sym = d_transform.add(&d_transform.transpose())?.scale(0.5);
    let mut inner = matmul(&matmul(&v.transpose(), &sym)?, v)?;
    for i in 0..n {
        for j in 0..n {
            let k = if i == j {
                df(lam[i])
            } else {
                let gap = lam[i] - lam[j];
                if gap.abs() < DEGENERACY_REL * lmax || gap == 0.0 {
                    df(0.5 * (lam[i] + lam[j]))
                } else {
                    (f(lam[i]) - f(lam[j])) / gap
                }
            };
            inner[(i, j)] *= k;
        }
    }
    let out = matmul_nt(&matmul(v, &inner)?, v)?;
    Ok(out)
}

/// Running statistics of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningGroup {
    pub mean: Vec<f64>,
    pub transform: Matrix,
}

/// Whitening layer state: configuration, running statistics for inference and
/// the statistics of the most recent training batch.
#[derive(Clone, Debug)]
pub struct WhiteningState {
    pub cfg: WhiteningConfig,
    dim: usize,
    running: Option<Vec<RunningGroup>>,
    last_batch: Option<WhitenedBatch>,
}

impl WhiteningState {
    pub fn new(dim: usize, cfg: WhiteningConfig) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::contract("whitening needs at least one feature"));
        }
        Ok(WhiteningState {
            cfg,
            dim,
            running: None,
            last_batch: None,
        })
    }

    pub fn from_running(dim: usize, cfg: WhiteningConfig, running: Vec<RunningGroup>) -> Result<Self> {
        let mut state = WhiteningState::new(dim, cfg)?;
        let ranges = group_ranges(dim, cfg.group_size);
        if ranges.len() != running.len()
            || ranges
                .iter()
                .zip(&running)
                .any(|(r, g)| g.mean.len() != r.len() || g.transform.shape() != (r.len(), r.len()))
        {
            return Err(Error::contract("running statistics do not match the group layout"));
        }
        state.running = Some(running);
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn running(&self) -> Option<&[RunningGroup]> {
        self.running.as_deref()
    }

    pub fn last_batch(&self) -> Option<&WhitenedBatch> {
        self.last_batch.as_ref()
    }

    /// Exponential moving average of the batch mean and transform. The first
    /// full-rank batch initializes the running values; batches with no more
    /// samples than the group size leave them untouched because their
    /// covariance is singular.
    fn update_running(&mut self, batch: &WhitenedBatch) {
        if batch.samples <= self.cfg.group_size.min(self.dim) {
            return;
        }
        let decay = self.cfg.ema_decay;
        match self.running.as_mut() {
            None => {
                self.running = Some(
                    batch
                        .groups
                        .iter()
                        .map(|g| RunningGroup {
                            mean: g.mean.clone(),
                            transform: g.transform.clone(),
                        })
                        .collect(),
                )
            }
            Some(running) => {
                for (r, g) in running.iter_mut().zip(&batch.groups) {
                    for (a, b) in r.mean.iter_mut().zip(&g.mean) {
                        *a = decay * *a + (1.0 - decay) * b;
                    }
                    for (a, b) in r.transform.data_mut().iter_mut().zip(g.transform.data()) {
                        *a = decay * *a + (1.0 - decay) * b;
                    }
                }
            }
        }
    }

    /// Applies the running statistics; never touches state.
    pub fn infer(&self, z: &Matrix) -> Result<Matrix> {
        let running = self
            .running
            .as_ref()
            .ok_or_else(|| Error::Uninitialized("whitening used for inference before any training step".into()))?;
        let mut out = Matrix::zeros(z.rows(), z.cols());
        for (range, g) in group_ranges(self.dim, self.cfg.group_size).into_iter().zip(running) {
            let mut block = z.row_block(range.start, range.end);
            for (r, mu) in g.mean.iter().enumerate() {
                for v in block.row_mut(r) {
                    *v -= mu;
                }
            }
            out.set_row_block(range.start, &matmul(&g.transform, &block)?);
        }
        Ok(out)
    }

    /// Gradient of inference-mode whitening (a fixed affine map) with respect
    /// to its input.
    pub fn infer_backward(&self, dz_white: &Matrix) -> Result<Matrix> {
        let running = self
            .running
            .as_ref()
            .ok_or_else(|| Error::Uninitialized("whitening used for inference before any training step".into()))?;
        if dz_white.rows() != self.dim {
            return Err(Error::Shape {
                op: "whitening infer backward",
                left: dz_white.shape(),
                right: (self.dim, dz_white.cols()),
            });
        }
        let mut out = Matrix::zeros(dz_white.rows(), dz_white.cols());
        for (range, g) in group_ranges(self.dim, self.cfg.group_size).into_iter().zip(running) {
            let block = dz_white.row_block(range.start, range.end);
            // W is symmetric up to EMA rounding; use the transpose to be exact
            out.set_row_block(range.start, &matmul_tn(&g.transform, &block)?);
        }
        Ok(out)
    }
}

/// Whitens a `d × m` feature matrix. Training mode uses the batch statistics,
/// caches them for [`zca_backward`] and updates the running averages;
/// inference mode applies the running averages and changes nothing.
pub fn zca_forward(z: &Matrix, state: &mut WhiteningState, mode: Mode) -> Result<Matrix> {
    if z.rows() != state.dim {
        return Err(Error::Shape {
            op: "zca_forward",
            left: z.shape(),
            right: (state.dim, z.cols()),
        });
    }
    match mode {
        Mode::Train => {
            let (out, batch) = whiten_batch(z, &state.cfg)?;
            state.update_running(&batch);
            state.last_batch = Some(batch);
            Ok(out)
        }
        Mode::Infer => state.infer(z),
    }
}

/// Gradient of the last training-mode [`zca_forward`] with respect to its input.
pub fn zca_backward(state: &WhiteningState, dz_white: &Matrix) -> Result<Matrix> {
    state
        .last_batch
        .as_ref()
        .ok_or_else(|| Error::contract("zca_backward needs a preceding training-mode forward"))?
        .backward(dz_white, None)
}

/// `‖(1/m)·Z̃c·Z̃cᵀ − I‖_F` on the centered `d × m` features, with its gradient.
pub fn decorrelation_loss(z_white: &Matrix) -> Result<(f64, Matrix)> {
    let (d, m) = z_white.shape();
    if m < 2 {
        return Err(Error::contract(format!(
            "decorrelation loss needs at least 2 samples, got {m}"
        )));
    }
    let (centered, _) = center_rows(z_white);
    let mut residual = matmul_nt(&centered, &centered)?.scale(1.0 / m as f64);
    for i in 0..d {
        residual[(i, i)] -= 1.0;
    }
    let loss = residual.frobenius_norm();
    if loss == 0.0 {
        return Ok((0.0, Matrix::zeros(d, m)));
    }
    // residual is symmetric, so d/dZc of ‖E‖_F is (2/(m·L))·E·Zc
    let mut grad = matmul(&residual, &centered)?.scale(2.0 / (m as f64 * loss));
    let means = grad.row_means();
    for (r, mu) in means.iter().enumerate() {
        for v in grad.row_mut(r) {
            *v -= mu;
        }
    }
    Ok((loss, grad))
}

/// Spectrum-based rank diagnostic of a covariance matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    /// Eigenvalues, sorted descending.
    pub eigenvalues: Vec<f64>,
    pub effective_rank: f64,
    pub nominal_dim: usize,
}

/// `exp(−Σ λ̃ᵢ ln λ̃ᵢ)` with `λ̃ᵢ = λᵢ / Σλⱼ`. Eigenvalues below `1e−12·λ_max`
/// contribute nothing.
pub fn effective_rank(sigma: &Matrix) -> Result<RankReport> {
    let eigenvalues = sym_eigvals(sigma)?;
    let nominal_dim = eigenvalues.len();
    let lmax = eigenvalues.first().copied().unwrap_or(0.0);
    if !(lmax > 0.0) {
        return Err(Error::contract("effective rank of a matrix with zero trace"));
    }
    let cutoff = 1e-12 * lmax;
    let kept: Vec<f64> = eigenvalues.iter().copied().filter(|&l| l > cutoff).collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|&l| {
            let p = l / total;
            -p * p.ln()
        })
        .sum();
    let effective_rank = entropy.exp().clamp(1.0, nominal_dim as f64);
    Ok(RankReport {
        eigenvalues,
        effective_rank,
        nominal_dim,
    })
}

/// Rough multiply-add count of one training-mode whitening pass: covariance,
/// eigendecomposition (a fixed number of Jacobi sweeps), transform assembly
/// and application.
pub fn whitening_cost(dim: usize, samples: usize, group_size: usize) -> u64 {
    const SWEEPS: u64 = 8;
    group_ranges(dim, group_size)
        .iter()
        .map(|r| {
            let g = r.len() as u64;
            let m = samples as u64;
            let cov = g * g * m;
            let eig = SWEEPS * g * g / 2 * 6 * g;
            let assemble = g * g * g;
            let apply = g * g * m;
            cov + eig + assemble + apply
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn groups_with_remainder() {
        let r = group_ranges(5, 2);
        assert_eq!(r, vec![0..2, 2..4, 4..5]);
        assert_eq!(group_ranges(4, 8), vec![0..4]);
    }

    #[test]
    fn already_white_input_is_unchanged() {
        // rows ±1 in a Hadamard pattern: zero mean, identity covariance
        let z = Matrix::from_rows(&[
            [1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
        ]);
        assert!(covariance(&z).sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-15);
        let cfg = WhiteningConfig { group_size: 2, eps: 1e-5, ema_decay: 0.9 };
        let (out, _) = whiten_batch(&z, &cfg).unwrap();
        assert!(out.sub(&z).unwrap().max_abs() <= 1e-3);
    }

    #[test]
    fn correlated_pair_becomes_white() {
        // mix two independent white signals so the sample covariance is [[2,1],[1,2]]
        let mut base = normal_matrix(2, 400, 4);
        let (w, _) = whiten_batch(&base, &WhiteningConfig { group_size: 2, eps: 1e-12, ema_decay: 0.9 }).unwrap();
        base = w;
        let mix = crate::linalg::inv_sqrt_psd(&Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]), 0.0).unwrap();
        let mix = crate::linalg::inv_sqrt_psd(&matmul(&mix, &mix).unwrap(), 0.0).unwrap();
        let z = matmul(&mix, &base).unwrap();
        assert!(covariance(&z).sub(&Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]])).unwrap().max_abs() < 1e-8);
        let (out, _) = whiten_batch(&z, &WhiteningConfig { group_size: 2, eps: 1e-8, ema_decay: 0.9 }).unwrap();
        assert!(covariance(&out).sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn singleton_group_is_standardization() {
        let z = normal_matrix(5, 30, 8).map(|v| 3.0 * v + 1.0);
        let cfg = WhiteningConfig { group_size: 2, eps: 1e-9, ema_decay: 0.9 };
        let (out, batch) = whiten_batch(&z, &cfg).unwrap();
        assert_eq!(batch.groups.iter().map(|g| g.range.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
        let row = z.row(4);
        let mean = row.iter().sum::<f64>() / 30.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
        for (o, v) in out.row(4).iter().zip(row) {
            assert!((o - (v - mean) / (var + 1e-9).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn train_needs_two_samples_and_infer_needs_state() {
        let cfg = WhiteningConfig::default();
        let mut state = WhiteningState::new(3, cfg).unwrap();
        assert!(matches!(zca_forward(&Matrix::zeros(3, 1), &mut state, Mode::Train), Err(Error::Contract(_))));
        assert!(matches!(zca_forward(&Matrix::zeros(3, 4), &mut state, Mode::Infer), Err(Error::Uninitialized(_))));
    }

    #[test]
    fn infer_uses_running_stats_without_updating() {
        let cfg = WhiteningConfig { group_size: 2, eps: 1e-5, ema_decay: 0.5 };
        let mut state = WhiteningState::new(4, cfg).unwrap();
        let z1 = normal_matrix(4, 16, 1);
        zca_forward(&z1, &mut state, Mode::Train).unwrap();
        let first = state.running().unwrap().to_vec();
        assert_eq!(first[0].transform, state.last_batch().unwrap().groups[0].transform);
        let z2 = normal_matrix(4, 16, 2).scale(2.0);
        zca_forward(&z2, &mut state, Mode::Train).unwrap();
        let second = state.running().unwrap().to_vec();
        let b2 = &state.last_batch().unwrap().groups[0];
        for k in 0..4 {
            let expect = 0.5 * first[0].transform.data()[k] + 0.5 * b2.transform.data()[k];
            assert_eq!(second[0].transform.data()[k], expect);
        }
        let probe = normal_matrix(4, 3, 3);
        let a = zca_forward(&probe, &mut state, Mode::Infer).unwrap();
        assert_eq!(state.running().unwrap(), &second[..]);
        let b = zca_forward(&probe, &mut state, Mode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_deficient_batch_does_not_touch_running_stats() {
        let cfg = WhiteningConfig { group_size: 4, eps: 1e-5, ema_decay: 0.5 };
        let mut state = WhiteningState::new(4, cfg).unwrap();
        zca_forward(&normal_matrix(4, 3, 1), &mut state, Mode::Train).unwrap();
        assert!(state.running().is_none());
    }

    fn whiten_fn(z: &Matrix, cfg: &WhiteningConfig) -> Matrix {
        whiten_batch(z, cfg).unwrap().0
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = WhiteningConfig { group_size: 3, eps: 1e-3, ema_decay: 0.9 };
        let mut z = normal_matrix(4, 16, 12);
        // add correlation
        for j in 0..16 {
            let v = z[(0, j)];
            z[(1, j)] += 0.7 * v;
        }
        let upstream = normal_matrix(4, 16, 13);
        let (_, batch) = whiten_batch(&z, &cfg).unwrap();
        let grad = batch.backward(&upstream, None).unwrap();
        let h = 1e-6;
        let objective = |zz: &Matrix| -> f64 {
            whiten_fn(zz, &cfg).data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..z.data().len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let fd = (objective(&zp) - objective(&zm)) / (2.0 * h);
            assert!(rel_err(fd, grad.data()[i]) < 1e-4, "entry {i}: fd {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn singleton_backward_matches_standardization_closed_form() {
        // y = (x − μ)/s with s = √(var + eps): dx = (1/s)(dy − mean(dy) − y·mean(dy·y)·var/(var+eps))
        let cfg = WhiteningConfig { group_size: 1, eps: 1e-4, ema_decay: 0.9 };
        let z = normal_matrix(1, 10, 5).map(|v| 2.0 * v + 0.5);
        let dy = normal_matrix(1, 10, 6);
        let (y, batch) = whiten_batch(&z, &cfg).unwrap();
        let got = batch.backward(&dy, None).unwrap();
        let m = 10.0;
        let x = z.row(0);
        let mean = x.iter().sum::<f64>() / m;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let s = (var + cfg.eps).sqrt();
        let dys = dy.row(0);
        let ys = y.row(0);
        let mean_dy = dys.iter().sum::<f64>() / m;
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) / s).collect();
        let mean_dy_xhat = dys.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m;
        for j in 0..10 {
            let expect = (dys[j] - mean_dy - xhat[j] * mean_dy_xhat) / s;
            assert!((got.row(0)[j] - expect).abs() < 1e-10, "{} vs {expect}", got.row(0)[j]);
            assert!((ys[j] - xhat[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_with_reused_statistics_matches_finite_differences() {
        // L = ⟨A, whiten(z)⟩ + ⟨B, apply(stats(z), z2)⟩ differentiated in z and z2
        let cfg = WhiteningConfig { group_size: 2, eps: 1e-3, ema_decay: 0.9 };
        let z = normal_matrix(3, 8, 40);
        let z2 = normal_matrix(3, 8, 41);
        let a = normal_matrix(3, 8, 42);
        let b = normal_matrix(3, 8, 43);
        let objective = |zz: &Matrix, zz2: &Matrix| -> f64 {
            let (w, batch) = whiten_batch(zz, &cfg).unwrap();
            let w2 = batch.apply(zz2).unwrap();
            let dot = |p: &Matrix, q: &Matrix| p.data().iter().zip(q.data()).map(|(x, y)| x * y).sum::<f64>();
            dot(&w, &a) + dot(&w2, &b)
        };
        let (_, batch) = whiten_batch(&z, &cfg).unwrap();
        let (dz2, stats) = batch.apply_backward(&z2, &b).unwrap();
        let dz = batch.backward(&a, Some(&stats)).unwrap();
        let h = 1e-6;
        for i in 0..z.data().len() {
            let (mut p, mut m) = (z.clone(), z.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (objective(&p, &z2) - objective(&m, &z2)) / (2.0 * h);
            assert!(rel_err(fd, dz.data()[i]) < 1e-4, "z[{i}] {fd} vs {}", dz.data()[i]);
            let (mut p, mut m) = (z2.clone(), z2.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (objective(&z, &p) - objective(&z, &m)) / (2.0 * h);
            assert!(rel_err(fd, dz2.data()[i]) < 1e-4);
        }
    }

    #[test]
    fn backward_on_white_batch_is_bounded() {
        let cfg = WhiteningConfig { group_size: 4, eps: 1e-5, ema_decay: 0.9 };
        let (white, _) = whiten_batch(&normal_matrix(4, 32, 9), &cfg).unwrap();
        let (_, batch) = whiten_batch(&white, &cfg).unwrap();
        let upstream = Matrix::from_vec(4, 32, vec![1.0; 128]).unwrap();
        let dz = batch.backward(&upstream, None).unwrap();
        assert!(dz.is_finite());
        assert!(dz.frobenius_norm() <= 10.0 * upstream.frobenius_norm());
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let cfg = WhiteningConfig { group_size: 2, eps: 1e-5, ema_decay: 0.9 };
        let mut state = WhiteningState::new(3, cfg).unwrap();
        assert!(zca_backward(&state, &Matrix::zeros(3, 4)).is_err());
        zca_forward(&normal_matrix(3, 4, 1), &mut state, Mode::Train).unwrap();
        assert!(matches!(zca_backward(&state, &Matrix::zeros(3, 5)), Err(Error::Contract(_))));
    }

    #[test]
    fn decorrelation_loss_of_white_features_is_zero() {
        let cfg = WhiteningConfig { group_size: 6, eps: 1e-12, ema_decay: 0.9 };
        let (white, _) = whiten_batch(&normal_matrix(6, 50, 2), &cfg).unwrap();
        let (loss, _) = decorrelation_loss(&white).unwrap();
        assert!(loss <= 1e-6, "{loss}");
    }

    #[test]
    fn decorrelation_loss_with_duplicated_rows() {
        let base = normal_matrix(2, 40, 3);
        let cfg = WhiteningConfig { group_size: 2, eps: 1e-14, ema_decay: 0.9 };
        let (white, _) = whiten_batch(&base, &cfg).unwrap();
        // rows 2,3 duplicate rows 0,1: covariance has identity blocks everywhere
        let mut dup = Matrix::zeros(4, 40);
        dup.set_row_block(0, &white);
        dup.set_row_block(2, &white);
        let (loss, _) = decorrelation_loss(&dup).unwrap();
        // direct Frobenius computation
        let cov = covariance(&dup);
        let mut direct = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let target = if i == j { 1.0 } else { 0.0 };
                direct += (cov[(i, j)] - target).powi(2);
            }
        }
        assert!((loss - direct.sqrt()).abs() < 1e-12);
        // each duplicated pair places a unit entry at (i, i+2) and (i+2, i)
        assert!((loss - 2.0).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn decorrelation_gradient_matches_finite_differences() {
        let z = normal_matrix(3, 7, 21);
        let (_, grad) = decorrelation_loss(&z).unwrap();
        let h = 1e-6;
        for i in 0..z.data().len() {
            let (mut p, mut m) = (z.clone(), z.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (decorrelation_loss(&p).unwrap().0 - decorrelation_loss(&m).unwrap().0) / (2.0 * h);
            assert!(rel_err(fd, grad.data()[i]) < 1e-5);
        }
    }

    #[test]
    fn effective_rank_reference_values() {
        assert!((effective_rank(&Matrix::identity(4)).unwrap().effective_rank - 4.0).abs() < 1e-12);
        assert!((effective_rank(&Matrix::diag(&[1.0, 0.0, 0.0])).unwrap().effective_rank - 1.0).abs() < 1e-12);
        // exp of the entropy of (0.5, 0.25, 0.25)
        let expect = (-(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln())).exp();
        let got = effective_rank(&Matrix::diag(&[2.0, 1.0, 1.0])).unwrap().effective_rank;
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 2.8284).abs() < 1e-3);
        assert!(matches!(effective_rank(&Matrix::zeros(3, 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn effective_rank_is_rotation_invariant() {
        let sigma = Matrix::diag(&[3.0, 2.0, 0.5, 0.1]);
        let q = sym_eig(&{
            let a = normal_matrix(4, 4, 77);
            a.add(&a.transpose()).unwrap()
        })
        .unwrap()
        .eigenvectors;
        let rotated = matmul(&matmul(&q, &sigma).unwrap(), &q.transpose()).unwrap();
        let rotated = rotated.add(&rotated.transpose()).unwrap().scale(0.5);
        let a = effective_rank(&sigma).unwrap().effective_rank;
        let b = effective_rank(&rotated).unwrap().effective_rank;
        assert!((a - b).abs() <= 1e-8);
    }

    #[test]
    fn cost_model_favours_groups() {
        assert!(whitening_cost(512, 128, 512) >= 4 * whitening_cost(512, 128, 64));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn whitening_twice_changes_little(seed in 0u64..1000, group in 1usize..6) {
            let mix = normal_matrix(6, 6, seed + 1);
            let z = matmul(&mix, &normal_matrix(6, 64, seed)).unwrap();
            let cfg = WhiteningConfig { group_size: group, eps: 1e-8, ema_decay: 0.9 };
            let (once, _) = whiten_batch(&z, &cfg).unwrap();
            let (twice, _) = whiten_batch(&once, &cfg).unwrap();
            proptest::prop_assert!(twice.sub(&once).unwrap().max_abs() <= 1e-3);
        }

        #[test]
        fn near_identity_covariance_keeps_orientation(seed in 0u64..1000) {
            // cov ≈ I + small symmetric perturbation
            let z = normal_matrix(8, 256, seed);
            let mix = Matrix::identity(8).add(&normal_matrix(8, 8, seed + 7).scale(0.05)).unwrap();
            let z = matmul(&mix, &z).unwrap();
            let (centered, _) = center_rows(&z);
            let (white, _) = whiten_batch(&z, &WhiteningConfig { group_size: 8, eps: 1e-8, ema_decay: 0.9 }).unwrap();
            let rel = white.sub(&centered).unwrap().frobenius_norm() / centered.frobenius_norm();
            proptest::prop_assert!(rel <= 0.25, "relative change {}", rel);
        }
    }
}
