//! Encoder, optional group-wise whitening of the encoder features, classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{ForwardTrace, Gradients, LayerSpec, Network, Shape, StackTrace};
use crate::whitening::{zca_forward, Mode, StatGrads, WhitenedBatch, WhiteningConfig, WhiteningState};

/// Desk-scale architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Two strided convolutions and a dense projection; needs images of at
    /// least 11×11.
    Cnn,
    /// One hidden dense layer and a dense projection.
    Mlp { hidden: usize },
}

impl Architecture {
    /// `cnn` or `mlp:<hidden>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Architecture::Cnn),
            "mlp" => Ok(Architecture::Mlp { hidden: 64 }),
            other => match other.strip_prefix("mlp:").map(str::parse::<usize>) {
                Some(Ok(hidden)) if hidden > 0 => Ok(Architecture::Mlp { hidden }),
                _ => Err(Error::contract(format!("unknown architecture '{s}'"))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            Architecture::Cnn => "cnn".into(),
            Architecture::Mlp { hidden } => format!("mlp:{hidden}"),
        }
    }

    /// Encoder and classifier layer lists. The encoder ends in a linear
    /// projection to `features`; the classifier is ReLU then a dense layer.
    pub fn layers(&self, input: Shape, features: usize, classes: usize) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>)> {
        let encoder = match *self {
            Architecture::Cnn => {
                let Shape::Spatial { channels, .. } = input else {
                    return Err(Error::contract("the cnn architecture needs image input"));
                };
                let mut specs = vec![
                    LayerSpec::Conv2d { in_channels: channels, out_channels: 8, kernel: 5, stride: 2 },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d { in_channels: 8, out_channels: 16, kernel: 3, stride: 2 },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                ];
                let mut shape = input;
                for s in &specs {
                    shape = s.output_shape(shape)?;
                }
                specs.push(LayerSpec::Dense { inputs: shape.size(), outputs: features });
                specs
            }
            Architecture::Mlp { hidden } => {
                let mut specs = Vec::new();
                if matches!(input, Shape::Spatial { .. }) {
                    specs.push(LayerSpec::Flatten);
                }
                specs.extend([
                    LayerSpec::Dense { inputs: input.size(), outputs: hidden },
                    LayerSpec::Relu,
                    LayerSpec::Dense { inputs: hidden, outputs: features },
                ]);
                specs
            }
        };
        let classifier = vec![LayerSpec::Relu, LayerSpec::Dense { inputs: features, outputs: classes }];
        Ok((encoder, classifier))
    }
}

/// How the whitening layer treats a forward pass.
#[derive(Clone, Debug)]
enum WhitePass {
    /// No whitening layer.
    Bypass,
    /// Batch statistics of this very batch (training mode).
    Batch(WhitenedBatch),
    /// Statistics borrowed from another batch, held fixed.
    Frozen(WhitenedBatch),
    /// Running statistics.
    Running,
}

/// Everything needed to backpropagate a [`Model`] pass.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    pub net: ForwardTrace,
    /// Encoder output, `d × m`.
    pub features: Matrix,
    /// Classifier input (whitened features when whitening is on), `d × m`.
    pub white: Matrix,
    pass: WhitePass,
}

impl ModelTrace {
    pub fn logits(&self) -> &Matrix {
        self.net.logits()
    }

    /// Batch statistics used by a training-mode pass.
    pub fn batch_stats(&self) -> Option<&WhitenedBatch> {
        match &self.pass {
            WhitePass::Batch(b) => Some(b),
            _ => None,
        }
    }
}

/// Extra inputs to [`Model::backward`] beyond the logit gradient.
#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardExtras<'a> {
    /// Gradient with respect to the classifier input (`d × m`), propagated
    /// through the whitening layer.
    pub features: Option<&'a Matrix>,
    /// Gradient with respect to the classifier input that sees the whitening
    /// statistics as constants.
    pub features_detached: Option<&'a Matrix>,
    /// Gradients that reached this batch's statistics from a frozen pass.
    pub stats: Option<&'a StatGrads>,
    pub want_input_grad: bool,
}

#[derive(Clone, Debug)]
pub struct BackwardResult {
    pub grads: Gradients,
    pub input_grad: Option<Matrix>,
    /// Gradients with respect to the borrowed statistics (frozen passes only).
    pub stat_grads: Option<StatGrads>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub whitening: Option<WhiteningState>,
}

impl Model {
    pub fn new(
        input: Shape,
        classes: usize,
        arch: Architecture,
        features: usize,
        whitening: Option<WhiteningConfig>,
        seed: u64,
    ) -> Result<Self> {
        let (encoder, classifier) = arch.layers(input, features, classes)?;
        let net = Network::new(input, &encoder, &classifier, seed)?;
        Model::from_network(net, whitening)
    }

    pub fn from_network(net: Network, whitening: Option<WhiteningConfig>) -> Result<Self> {
        let whitening = whitening
            .map(|cfg| WhiteningState::new(net.feature_dim(), cfg))
            .transpose()?;
        Ok(Model { net, whitening })
    }

    fn classify(&self, encoder: StackTrace, features: Matrix, white: Matrix, pass: WhitePass) -> Result<ModelTrace> {
        let classifier = self.net.classifier.forward(&white.transpose())?;
        Ok(ModelTrace {
            net: ForwardTrace { encoder, classifier },
            features,
            white,
            pass,
        })
    }

    /// Training-mode pass: whitens with the batch's own statistics and
    /// updates the running averages.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<ModelTrace> {
        let encoder = self.net.encoder.forward(x)?;
        let features = encoder.output().transpose();
        let (white, pass) = match self.whitening.as_mut() {
            None => (features.clone(), WhitePass::Bypass),
            Some(state) => {
                let white = zca_forward(&features, state, Mode::Train)?;
                let batch = state.last_batch().expect("set by training forward").clone();
                (white, WhitePass::Batch(batch))
            }
        };
        self.classify(encoder, features, white, pass)
    }

    /// Pass that reuses the statistics of `reference` (a training-mode trace).
    pub fn forward_frozen(&self, x: &Matrix, reference: &ModelTrace) -> Result<ModelTrace> {
        let encoder = self.net.encoder.forward(x)?;
        let features = encoder.output().transpose();
        let (white, pass) = match (&self.whitening, &reference.pass) {
            (None, _) => (features.clone(), WhitePass::Bypass),
            (Some(_), WhitePass::Batch(batch)) => (batch.apply(&features)?, WhitePass::Frozen(batch.clone())),
            (Some(_), _) => {
                return Err(Error::contract("frozen pass needs a training-mode reference trace"));
            }
        };
        self.classify(encoder, features, white, pass)
    }

    /// Inference pass with running statistics; changes nothing.
    pub fn forward_infer(&self, x: &Matrix) -> Result<ModelTrace> {
        let encoder = self.net.encoder.forward(x)?;
        let features = encoder.output().transpose();
        let (white, pass) = match &self.whitening {
            None => (features.clone(), WhitePass::Bypass),
            Some(state) => (state.infer(&features)?, WhitePass::Running),
        };
        self.classify(encoder, features, white, pass)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_infer(x)?.net.classifier.output().clone())
    }

    pub fn backward(&self, trace: &ModelTrace, dlogits: &Matrix, extras: BackwardExtras<'_>) -> Result<BackwardResult> {
        if trace.net.layer_count() != self.net.layer_count() {
            return Err(Error::contract(format!(
                "stale trace: {} layers recorded, network has {}",
                trace.net.layer_count(),
                self.net.layer_count()
            )));
        }
        let (classifier, dwhite) = self.net.classifier.backward(&trace.net.classifier, dlogits, true)?;
        let mut dy = dwhite.expect("requested").transpose();
        if let Some(g) = extras.features {
            dy.add_scaled(g, 1.0)?;
        }
        let mut stat_grads = None;
        let mut dz = match &trace.pass {
            WhitePass::Bypass => dy,
            WhitePass::Batch(batch) => batch.backward(&dy, extras.stats)?,
            WhitePass::Frozen(batch) => {
                let (dz, sg) = batch.apply_backward(&trace.features, &dy)?;
                stat_grads = Some(sg);
                dz
            }
            WhitePass::Running => self
                .whitening
                .as_ref()
                .ok_or_else(|| Error::contract("running-statistics trace on a model without whitening"))?
                .infer_backward(&dy)?,
        };
        if let Some(g) = extras.features_detached {
            let plain = match &trace.pass {
                WhitePass::Batch(batch) | WhitePass::Frozen(batch) => batch.apply_backward(&trace.features, g)?.0,
                WhitePass::Bypass => g.clone(),
                WhitePass::Running => self.whitening.as_ref().expect("checked above").infer_backward(g)?,
            };
            dz.add_scaled(&plain, 1.0)?;
        }
        if extras.stats.is_some() && !matches!(trace.pass, WhitePass::Batch(_)) {
            return Err(Error::contract("statistic gradients only apply to a training-mode trace"));
        }
        let (encoder, dx) = self
            .net
            .encoder
            .backward(&trace.net.encoder, &dz.transpose(), extras.want_input_grad)?;
        Ok(BackwardResult {
            grads: Gradients { encoder, classifier },
            input_grad: dx,
            stat_grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy(whiten: bool) -> Model {
        let cfg = WhiteningConfig { group_size: 2, eps: 1e-5, ema_decay: 0.9 };
        Model::new(Shape::flat(4), 3, Architecture::Mlp { hidden: 5 }, 3, whiten.then_some(cfg), 11).unwrap()
    }

    fn loss_at(model: &Model, x: &Matrix, y: &[usize]) -> f64 {
        let mut m = model.clone();
        let trace = m.forward_train(x).unwrap();
        softmax_cross_entropy(trace.logits(), y).unwrap().0
    }

    #[test]
    fn cnn_layout_for_mnist() {
        let (enc, cls) = Architecture::Cnn.layers(Shape::spatial(1, 28, 28), 128, 10).unwrap();
        assert_eq!(enc.last(), Some(&LayerSpec::Dense { inputs: 400, outputs: 128 }));
        assert_eq!(cls.len(), 2);
        assert!(Architecture::Cnn.layers(Shape::spatial(1, 8, 8), 16, 2).is_err());
        assert_eq!(Architecture::parse("mlp:32").unwrap(), Architecture::Mlp { hidden: 32 });
        assert!(Architecture::parse("resnet").is_err());
    }

    #[test]
    fn bypass_model_matches_plain_network() {
        let mut model = toy(false);
        let x = random(6, 4, 1);
        let trace = model.forward_train(&x).unwrap();
        assert_eq!(trace.logits(), model.net.forward(&x).unwrap().logits());
    }

    #[test]
    fn whitened_model_gradients_match_finite_differences() {
        let mut model = toy(true);
        let x = random(8, 4, 2);
        let y = vec![0, 1, 2, 0, 1, 2, 1, 0];
        let trace = model.forward_train(&x).unwrap();
        let (_, dlogits) = softmax_cross_entropy(trace.logits(), &y).unwrap();
        let out = model
            .backward(&trace, &dlogits, BackwardExtras { want_input_grad: true, ..Default::default() })
            .unwrap();
        let analytic = out.grads.flatten();
        let base = model.net.params_flat();
        let h = 1e-6;
        for (k, g) in analytic.iter().enumerate() {
            let mut p = model.clone();
            let mut v = base.clone();
            v[k] += h;
            p.net.set_params_flat(&v).unwrap();
            let up = loss_at(&p, &x, &y);
            v[k] -= 2.0 * h;
            p.net.set_params_flat(&v).unwrap();
            let down = loss_at(&p, &x, &y);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-4), "param {k}: {fd} vs {g}");
        }
        let dx = out.input_grad.unwrap();
        for i in 0..8 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp.row_mut(i)[j] += h;
                let up = loss_at(&model, &xp, &y);
                xp.row_mut(i)[j] -= 2.0 * h;
                let down = loss_at(&model, &xp, &y);
                let fd = (up - down) / (2.0 * h);
                let g = dx[(i, j)];
                assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-4), "x[{i},{j}]: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn frozen_pass_reuses_batch_statistics() {
        let mut model = toy(true);
        let x = random(8, 4, 3);
        let clean = model.forward_train(&x).unwrap();
        let again = model.forward_frozen(&x, &clean).unwrap();
        assert!(clean.white.sub(&again.white).unwrap().max_abs() < 1e-12);
        let other = random(5, 4, 4);
        let frozen = model.forward_frozen(&other, &clean).unwrap();
        let expected = clean.batch_stats().unwrap().apply(&frozen.features).unwrap();
        assert_eq!(frozen.white, expected);
    }

    #[test]
    fn infer_needs_a_training_step() {
        let mut model = toy(true);
        let x = random(8, 4, 5);
        assert!(matches!(model.forward_infer(&x), Err(Error::Uninitialized(_))));
        model.forward_train(&x).unwrap();
        let a = model.logits(&x).unwrap();
        let b = model.logits(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infer_input_gradient_matches_finite_differences() {
        let mut model = toy(true);
        let x = random(8, 4, 6);
        let y = vec![2, 1, 0, 0, 1, 2, 1, 0];
        model.forward_train(&x).unwrap();
        let trace = model.forward_infer(&x).unwrap();
        let (_, dlogits) = softmax_cross_entropy(trace.logits(), &y).unwrap();
        let dx = model
            .backward(&trace, &dlogits, BackwardExtras { want_input_grad: true, ..Default::default() })
            .unwrap()
            .input_grad
            .unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            xp.row_mut(3)[j] += h;
            let up = softmax_cross_entropy(&model.logits(&xp).unwrap(), &y).unwrap().0;
            xp.row_mut(3)[j] -= 2.0 * h;
            let down = softmax_cross_entropy(&model.logits(&xp).unwrap(), &y).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[(3, j)]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
    }
}
