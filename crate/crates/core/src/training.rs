//! The training loop: classification, consistency and decorrelation terms,
//! SGD with momentum and a cosine learning-rate schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::accuracy;
use crate::linalg::Matrix;
use crate::model::{Architecture, BackwardExtras, Model, ModelTrace};
use crate::nn::{kl_divergence, softmax_cross_entropy, Gradients, Network, Shape};
use crate::saliency::{apply_mask, build_mask, importance_scores, FeatureStats, ReplacementPolicy};
use crate::whitening::{covariance, decorrelation_loss, effective_rank, group_ranges, WhiteningConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Whitening, consistency and decorrelation terms.
    SaliencyDecor,
    /// Consistency term only, no whitening.
    Sgt,
    /// Plain cross-entropy, no whitening.
    Baseline,
    /// Whitening and decorrelation term, no consistency term.
    DecorrOnly,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "saliency_decor" => Ok(TrainMode::SaliencyDecor),
            "sgt" => Ok(TrainMode::Sgt),
            "baseline" => Ok(TrainMode::Baseline),
            "decorr_only" => Ok(TrainMode::DecorrOnly),
            _ => Err(Error::contract(format!(
                "unknown mode '{s}' (expected saliency_decor, sgt, baseline or decorr_only)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::SaliencyDecor => "saliency_decor",
            TrainMode::Sgt => "sgt",
            TrainMode::Baseline => "baseline",
            TrainMode::DecorrOnly => "decorr_only",
        }
    }

    pub fn whitens(&self) -> bool {
        matches!(self, TrainMode::SaliencyDecor | TrainMode::DecorrOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Weight of the consistency (KL) term.
    pub alpha: f64,
    /// Weight of the decorrelation term.
    pub lambda: f64,
    /// Fraction of least-important input features masked per sample.
    pub rho: f64,
    pub group_size: usize,
    pub eps: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: ReplacementPolicy,
    /// Treat the whitening statistics as constants in the decorrelation
    /// gradient.
    pub decorr_detach: bool,
    pub arch: Architecture,
    /// Width of the encoder output (the whitened representation).
    pub features: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::SaliencyDecor,
            alpha: 0.1,
            lambda: 0.01,
            rho: 0.25,
            group_size: 64,
            eps: 1e-5,
            ema_decay: 0.99,
            lr: 0.01,
            momentum: 0.9,
            epochs: 5,
            batch_size: 128,
            seed: 0,
            policy: ReplacementPolicy::UniformInRange,
            decorr_detach: false,
            arch: Architecture::Cnn,
            features: 128,
        }
    }
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::contract(format!("invalid value for '{key}': {msg}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, format!("{v} is not a finite nonnegative number")))
            }
        };
        nonneg("alpha", self.alpha)?;
        nonneg("lambda", self.lambda)?;
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid("rho", format!("{} is outside [0, 1]", self.rho)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", format!("{} is not positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", format!("{} is outside [0, 1)", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch-size", "batches need at least 2 samples"));
        }
        if self.features == 0 {
            return Err(invalid("features", "must be at least 1"));
        }
        if self.group_size == 0 {
            return Err(invalid("group-size", "must be at least 1"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", format!("{} is not positive", self.eps)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid("ema-decay", format!("{} is outside (0, 1)", self.ema_decay)));
        }
        let widest_group = self.group_size.min(self.features);
        if self.mode.whitens() && self.batch_size <= widest_group {
            return Err(invalid(
                "batch-size",
                format!(
                    "{} samples cannot estimate a full-rank covariance for groups of {widest_group} features",
                    self.batch_size
                ),
            ));
        }
        let mode_ok = match self.mode {
            TrainMode::SaliencyDecor => true,
            TrainMode::Sgt => self.lambda == 0.0,
            TrainMode::Baseline => self.alpha == 0.0 && self.lambda == 0.0,
            TrainMode::DecorrOnly => self.alpha == 0.0,
        };
        if !mode_ok {
            return Err(invalid("mode", format!("{} does not allow these alpha/lambda values", self.mode.name())));
        }
        Ok(())
    }

    /// Applies the mode constraints (zeroing the weights a mode does not use)
    /// and validates the result.
    pub fn effective(&self) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        match cfg.mode {
            TrainMode::SaliencyDecor => {}
            TrainMode::Sgt => cfg.lambda = 0.0,
            TrainMode::Baseline => {
                cfg.alpha = 0.0;
                cfg.lambda = 0.0;
            }
            TrainMode::DecorrOnly => cfg.alpha = 0.0,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn whitening(&self) -> Option<WhiteningConfig> {
        self.mode.whitens().then_some(WhiteningConfig {
            group_size: self.group_size,
            eps: self.eps,
            ema_decay: self.ema_decay,
        })
    }

    pub fn build_model(&self, input: Shape, classes: usize) -> Result<Model> {
        Model::new(input, classes, self.arch, self.features, self.whitening(), self.seed)
    }
}

/// Diagnostics of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_cls: f64,
    pub l_cons: f64,
    pub l_decorr: f64,
    /// `l_cls + alpha·l_cons + lambda·l_decorr`.
    pub total: f64,
    pub lr: f64,
    /// Effective rank of the classifier-input feature covariance.
    pub effective_rank: f64,
    /// Largest deviation of a within-group covariance entry from the
    /// identity, when whitening is on.
    pub whiten_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Percent.
    pub test_accuracy: f64,
    pub mean_effective_rank: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// `lr0·(1 + cos(π·step/total))/2`; a zero-length schedule keeps `lr0`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// SplitMix64 finalizer over `base + index`, used to derive per-step and
/// per-sample seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_cls: f64,
    pub l_cons: f64,
    pub l_decorr: f64,
    pub total: f64,
}

fn finite(value: f64, name: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numerical(format!("non-finite {name}")))
    }
}

fn finite_matrix(m: &Matrix, name: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite {name}")))
    }
}

/// Replaces the `rho` least important features of every sample, ranking by
/// `|input_grad|`. Sample `i` draws from `derive_seed(seed, i)`.
pub fn mask_batch(
    x: &Matrix,
    input_grad: &Matrix,
    rho: f64,
    policy: ReplacementPolicy,
    stats: &FeatureStats,
    seed: u64,
) -> Result<Matrix> {
    let mut masked = x.clone();
    for (i, imp) in importance_scores(input_grad).iter().enumerate() {
        let mask = build_mask(imp, rho)?;
        let row = apply_mask(x.row(i), &mask, policy, Some(stats), derive_seed(seed, i as u64))?;
        masked.row_mut(i).copy_from_slice(&row);
    }
    Ok(masked)
}

/// Losses and parameter gradients of one batch, in the order: clean forward
/// (training-mode whitening), classification and decorrelation losses,
/// input-gradient importance, masking, masked forward with the clean batch
/// statistics, consistency loss, then one combined backward.
pub fn step_gradients(
    model: &mut Model,
    x: &Matrix,
    y: &[usize],
    cfg: &TrainConfig,
    stats: &FeatureStats,
    seed: u64,
) -> Result<(StepLosses, Gradients, ModelTrace)> {
    let trace = model.forward_train(x)?;
    finite_matrix(trace.logits(), "clean logits")?;
    let (l_cls, d_cls) = softmax_cross_entropy(trace.logits(), y)?;
    finite(l_cls, "classification loss")?;
    let (l_decorr, d_decorr) = decorrelation_loss(&trace.white)?;
    finite(l_decorr, "decorrelation loss")?;

    let (l_cons, dlogits, masked) = if cfg.alpha > 0.0 {
        let importance = model.backward(
            &trace,
            &d_cls,
            BackwardExtras {
                want_input_grad: true,
                ..Default::default()
            },
        )?;
        let input_grad = importance.input_grad.expect("requested");
        finite_matrix(&input_grad, "input gradient")?;
        let x_masked = mask_batch(x, &input_grad, cfg.rho, cfg.policy, stats, seed)?;
        let masked_trace = model.forward_frozen(&x_masked, &trace)?;
        finite_matrix(masked_trace.logits(), "masked logits")?;
        let kl = kl_divergence(trace.logits(), masked_trace.logits())?;
        finite(kl.loss, "consistency loss")?;
        let masked_out = model.backward(&masked_trace, &kl.dq_logits.scale(cfg.alpha), BackwardExtras::default())?;
        let mut dlogits = d_cls;
        dlogits.add_scaled(&kl.dp_logits, cfg.alpha)?;
        (kl.loss, dlogits, Some(masked_out))
    } else {
        (0.0, d_cls, None)
    };

    let d_feat = (cfg.lambda > 0.0).then(|| d_decorr.scale(cfg.lambda));
    let extras = BackwardExtras {
        features: d_feat.as_ref().filter(|_| !cfg.decorr_detach),
        features_detached: d_feat.as_ref().filter(|_| cfg.decorr_detach),
        stats: masked.as_ref().and_then(|m| m.stat_grads.as_ref()),
        want_input_grad: false,
    };
    let mut out = model.backward(&trace, &dlogits, extras)?;
    if let Some(m) = &masked {
        out.grads.accumulate(&m.grads)?;
    }
    if !out.grads.is_finite() {
        return Err(Error::numerical("non-finite parameter gradient"));
    }
    let total = l_cls + cfg.alpha * l_cons + cfg.lambda * l_decorr;
    Ok((
        StepLosses {
            l_cls,
            l_cons,
            l_decorr,
            total,
        },
        out.grads,
        trace,
    ))
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64) -> Self {
        let velocity = Gradients::zeros_like(net).matrices().into_iter().cloned().collect();
        Sgd { momentum, velocity }
    }

    pub fn update(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        let grads = grads.matrices();
        let mut params = net.param_matrices_mut();
        if grads.len() != params.len() || grads.len() != self.velocity.len() {
            return Err(Error::contract("optimizer state does not match the network"));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

fn diagnostics(white: &Matrix, whitening: Option<&WhiteningConfig>) -> (f64, Option<f64>) {
    let cov = covariance(white);
    let rank = effective_rank(&cov).map(|r| r.effective_rank).unwrap_or(0.0);
    let residual = whitening.map(|w| {
        group_ranges(cov.rows(), w.group_size)
            .into_iter()
            .flat_map(|r| {
                let cov = &cov;
                r.clone()
                    .flat_map(move |i| r.clone().map(move |j| (cov[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs()))
            })
            .fold(0.0, f64::max)
    });
    (rank, residual)
}

/// Model plus optimizer state and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    sgd: Sgd,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    /// `cfg` is passed through [`TrainConfig::effective`].
    pub fn new(model: Model, cfg: &TrainConfig, total_steps: usize) -> Result<Self> {
        let cfg = cfg.effective()?;
        if model.whitening.is_some() != cfg.mode.whitens() {
            return Err(Error::contract(format!(
                "mode {} {} a whitening layer",
                cfg.mode.name(),
                if cfg.mode.whitens() { "needs" } else { "does not use" }
            )));
        }
        let sgd = Sgd::new(&model.net, cfg.momentum);
        Ok(Trainer {
            model,
            cfg,
            sgd,
            step: 0,
            total_steps,
        })
    }

    /// Like [`Trainer::new`] but keeps the model's whitening setting whatever
    /// the mode says, so mode reductions can be compared directly.
    pub fn with_model(model: Model, cfg: &TrainConfig, total_steps: usize) -> Result<Self> {
        let cfg = cfg.effective()?;
        let sgd = Sgd::new(&model.net, cfg.momentum);
        Ok(Trainer {
            model,
            cfg,
            sgd,
            step: 0,
            total_steps,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, x: &Matrix, y: &[usize], stats: &FeatureStats, epoch: usize) -> Result<StepRecord> {
        let lr = cosine_lr(self.step, self.total_steps, self.cfg.lr);
        let seed = derive_seed(self.cfg.seed, self.step as u64);
        let (losses, grads, trace) = step_gradients(&mut self.model, x, y, &self.cfg, stats, seed)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::numerical(format!("{msg} at epoch {epoch}, step {}", self.step)),
                other => other,
            })?;
        let whitening = self.model.whitening.as_ref().map(|w| w.cfg);
        let (effective_rank, whiten_residual) = diagnostics(&trace.white, whitening.as_ref());
        self.sgd.update(&mut self.model.net, &grads, lr)?;
        let record = StepRecord {
            epoch,
            step: self.step,
            l_cls: losses.l_cls,
            l_cons: losses.l_cons,
            l_decorr: losses.l_decorr,
            total: losses.total,
            lr,
            effective_rank,
            whiten_residual,
        };
        self.step += 1;
        Ok(record)
    }
}

/// Index batches of one epoch: a seeded permutation cut into `batch_size`
/// chunks. A trailing single sample joins the previous batch, since batch
/// whitening needs two samples.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0xE90C_0000, epoch as u64));
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl FitOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }
}

/// Full training run. Every step and epoch record is also written to `log`
/// as one JSON line.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<FitOutcome> {
    let cfg = cfg.effective()?;
    let model = cfg.build_model(dataset.input_shape(), dataset.classes)?;
    let n = dataset.train_y.len();
    if n < 2 {
        return Err(Error::contract("training needs at least 2 samples"));
    }
    let per_epoch = epoch_batches(n, cfg.batch_size, cfg.seed, 0).len();
    let mut trainer = Trainer::new(model, &cfg, per_epoch * cfg.epochs)?;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let emit = |line: &LogLine, log: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(out) = log.as_deref_mut() {
            let text = serde_json::to_string(line).map_err(|e| Error::contract(e.to_string()))?;
            writeln!(out, "{text}")?;
        }
        Ok(())
    };
    for epoch in 0..cfg.epochs {
        let mut rank_sum = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, cfg.seed, epoch);
        for idx in &batches {
            let x = dataset.train_x.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| dataset.train_y[i]).collect();
            let record = trainer.step(&x, &y, &dataset.stats, epoch)?;
            rank_sum += record.effective_rank;
            emit(&LogLine::Step(record.clone()), &mut log)?;
            steps.push(record);
        }
        let record = EpochRecord {
            epoch,
            test_accuracy: accuracy(&trainer.model, &dataset.test_x, &dataset.test_y)?,
            mean_effective_rank: rank_sum / batches.len() as f64,
        };
        emit(&LogLine::Epoch(record.clone()), &mut log)?;
        epochs.push(record);
    }
    Ok(FitOutcome {
        model: trainer.model,
        steps,
        epochs,
    })
}
