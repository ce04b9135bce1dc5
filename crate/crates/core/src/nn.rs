//! Layer-stack classifier with hand-written reverse-mode gradients.
//!
//! A [`Network`] is an encoder stack followed by a classifier stack. The split
//! exists so the whitening layer can sit between the two (see [`crate::model`]);
//! on its own a network just composes the stacks. Every batch is a
//! [`Matrix`] with one sample per row; spatial tensors are stored flattened in
//! channel-major order (`c, y, x`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

/// Activation shape of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Flat { width: usize },
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn flat(width: usize) -> Self {
        Shape::Flat { width }
    }

    pub fn spatial(channels: usize, height: usize, width: usize) -> Self {
        Shape::Spatial {
            channels,
            height,
            width,
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat { width } => width,
            Shape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    /// Output shape for the given input shape, or why the layer cannot accept it.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match (self, input) {
            (LayerSpec::Dense { inputs, outputs }, Shape::Flat { width }) => {
                if *inputs != width {
                    return Err(Error::contract(format!(
                        "dense layer expects {inputs} inputs but receives {width}"
                    )));
                }
                Ok(Shape::flat(*outputs))
            }
            (LayerSpec::Dense { .. }, Shape::Spatial { .. }) => Err(Error::contract(
                "dense layer after a spatial stage needs a flatten in between",
            )),
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                },
                Shape::Spatial {
                    channels,
                    height,
                    width,
                },
            ) => {
                if *in_channels != channels {
                    return Err(Error::contract(format!(
                        "conv2d expects {in_channels} channels but receives {channels}"
                    )));
                }
                if *kernel == 0 || *stride == 0 || *kernel > height || *kernel > width {
                    return Err(Error::contract(format!(
                        "conv2d kernel {kernel} / stride {stride} invalid for {height}x{width} input"
                    )));
                }
                Ok(Shape::spatial(
                    *out_channels,
                    (height - kernel) / stride + 1,
                    (width - kernel) / stride + 1,
                ))
            }
            (LayerSpec::Conv2d { .. }, Shape::Flat { .. }) => {
                Err(Error::contract("conv2d needs a spatial input"))
            }
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Flatten, Shape::Spatial { .. }) => Ok(Shape::flat(input.size())),
            (LayerSpec::Flatten, Shape::Flat { .. }) => Err(Error::contract(
                "flatten applied to an already flat activation",
            )),
        }
    }

    fn param_shapes(&self) -> Option<((usize, usize), (usize, usize))> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some(((inputs, outputs), (1, outputs))),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                (in_channels * kernel * kernel, out_channels),
                (1, out_channels),
            )),
            LayerSpec::Relu | LayerSpec::Flatten => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            LayerSpec::Relu | LayerSpec::Flatten => (0, 0),
        }
    }
}

/// Weight and bias of a parameterized layer. Dense weights are `inputs × outputs`;
/// conv weights are `(in_channels·k·k) × out_channels`. Biases are `1 × outputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    pub params: Option<Params>,
}

/// An ordered list of layers with a fixed input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    input: Shape,
    layers: Vec<Layer>,
}

/// Cached layer inputs from a forward pass through one stack.
#[derive(Clone, Debug)]
pub struct StackTrace {
    inputs: Vec<Matrix>,
    output: Matrix,
}

impl StackTrace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn layer_count(&self) -> usize {
        self.inputs.len()
    }
}

/// Per-layer gradient, `None` for parameter-free layers.
pub type LayerGrads = Vec<Option<Params>>;

impl Stack {
    pub fn new(input: Shape, specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        for spec in specs {
            let output = spec.output_shape(shape)?;
            let params = spec.param_shapes().map(|((wr, wc), (br, bc))| {
                let (fan_in, fan_out) = spec.fans();
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..wr * wc).map(|_| rng.gen_range(-limit..limit)).collect();
                Params {
                    weight: Matrix::from_vec(wr, wc, w).expect("sized above"),
                    bias: Matrix::zeros(br, bc),
                }
            });
            layers.push(Layer {
                spec: spec.clone(),
                input: shape,
                output,
                params,
            });
            shape = output;
        }
        Ok(Stack { input, layers })
    }

    /// Rebuilds a stack from specs and explicit parameters (checkpoint loading).
    pub fn from_parts(input: Shape, specs: &[LayerSpec], mut params: Vec<Option<Params>>) -> Result<Self> {
        if params.len() != specs.len() {
            return Err(Error::contract("parameter list does not match layer list"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        for (spec, p) in specs.iter().zip(params.drain(..)) {
            let output = spec.output_shape(shape)?;
            match (spec.param_shapes(), &p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                _ => {
                    return Err(Error::contract(format!(
                        "parameter shapes do not match layer {spec:?}"
                    )))
                }
            }
            layers.push(Layer {
                spec: spec.clone(),
                input: shape,
                output,
                params: p,
            });
            shape = output;
        }
        Ok(Stack { input, layers })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<StackTrace> {
        if x.cols() != self.input.size() {
            return Err(Error::Shape {
                op: "forward",
                left: x.shape(),
                right: (x.rows(), self.input.size()),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for layer in &self.layers {
            let next = layer_forward(layer, &act)?;
            inputs.push(act);
            act = next;
        }
        if !act.is_finite() {
            return Err(Error::numerical("non-finite activation in forward pass"));
        }
        Ok(StackTrace { inputs, output: act })
    }

    /// Reverse pass. Returns parameter gradients and, when asked for, the
    /// gradient with respect to the stack input.
    pub fn backward(
        &self,
        trace: &StackTrace,
        dout: &Matrix,
        want_input_grad: bool,
    ) -> Result<(LayerGrads, Option<Matrix>)> {
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "stale trace: {} cached layers for a {}-layer stack",
                trace.inputs.len(),
                self.layers.len()
            )));
        }
        if dout.shape() != trace.output.shape() {
            return Err(Error::Shape {
                op: "backward",
                left: dout.shape(),
                right: trace.output.shape(),
            });
        }
        let mut grads: LayerGrads = vec![None; self.layers.len()];
        let mut delta = dout.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = idx > 0 || want_input_grad;
            let (g, dx) = layer_backward(layer, &trace.inputs[idx], &delta, need_dx)?;
            grads[idx] = g;
            match dx {
                Some(dx) => delta = dx,
                None => return Ok((grads, None)),
            }
        }
        Ok((grads, Some(delta)))
    }

    pub fn zero_grads(&self) -> LayerGrads {
        self.layers
            .iter()
            .map(|l| {
                l.params.as_ref().map(|p| Params {
                    weight: Matrix::zeros(p.weight.rows(), p.weight.cols()),
                    bias: Matrix::zeros(p.bias.rows(), p.bias.cols()),
                })
            })
            .collect()
    }
}

fn layer_forward(layer: &Layer, x: &Matrix) -> Result<Matrix> {
    match layer.spec {
        LayerSpec::Dense { .. } => {
            let p = layer.params.as_ref().expect("dense has params");
            let mut y = matmul(x, &p.weight)?;
            let b = p.bias.data();
            for r in 0..y.rows() {
                for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
            Ok(y)
        }
        LayerSpec::Conv2d { kernel, stride, .. } => {
            let p = layer.params.as_ref().expect("conv has params");
            let geo = ConvGeometry::new(layer.input, layer.output, kernel, stride);
            let cols = geo.im2col(x);
            let out_cols = matmul(&cols, &p.weight)?;
            Ok(geo.cols_to_output(&out_cols, p.bias.data(), x.rows()))
        }
        LayerSpec::Relu => Ok(x.map(|v| v.max(0.0))),
        LayerSpec::Flatten => Ok(x.clone()),
    }
}

fn layer_backward(
    layer: &Layer,
    x: &Matrix,
    dy: &Matrix,
    need_dx: bool,
) -> Result<(Option<Params>, Option<Matrix>)> {
    match layer.spec {
        LayerSpec::Dense { .. } => {
            let p = layer.params.as_ref().expect("dense has params");
            let dw = matmul_tn(x, dy)?;
            let db = column_sums(dy);
            let dx = if need_dx { Some(matmul_nt(dy, &p.weight)?) } else { None };
            Ok((Some(Params { weight: dw, bias: db }), dx))
        }
        LayerSpec::Conv2d { kernel, stride, .. } => {
            let p = layer.params.as_ref().expect("conv has params");
            let geo = ConvGeometry::new(layer.input, layer.output, kernel, stride);
            let cols = geo.im2col(x);
            let dcols_out = geo.output_to_cols(dy);
            let dw = matmul_tn(&cols, &dcols_out)?;
            let db = column_sums(&dcols_out);
            let dx = if need_dx {
                let dcols = matmul_nt(&dcols_out, &p.weight)?;
                Some(geo.col2im(&dcols, x.rows()))
            } else {
                None
            };
            Ok((Some(Params { weight: dw, bias: db }), dx))
        }
        LayerSpec::Relu => {
            let dx = need_dx.then(|| {
                let mut dx = dy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            });
            Ok((None, dx))
        }
        LayerSpec::Flatten => Ok((None, need_dx.then(|| dy.clone()))),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
}

impl ConvGeometry {
    fn new(input: Shape, output: Shape, kernel: usize, stride: usize) -> Self {
        let (Shape::Spatial { channels, height, width }, Shape::Spatial { channels: oc, height: oh, width: ow }) =
            (input, output)
        else {
            unreachable!("conv shapes validated at construction")
        };
        ConvGeometry {
            channels,
            height,
            width,
            out_channels: oc,
            out_h: oh,
            out_w: ow,
            kernel,
            stride,
        }
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Rows are (sample, output position); columns are (channel, ky, kx).
    fn im2col(&self, x: &Matrix) -> Matrix {
        let m = x.rows();
        let k = self.kernel;
        let mut cols = Matrix::zeros(m * self.positions(), self.patch_len());
        let plane = self.height * self.width;
        for i in 0..m {
            let xs = x.row(i);
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = cols.row_mut((i * self.out_h + oy) * self.out_w + ox);
                    let mut col = 0;
                    for c in 0..self.channels {
                        for ky in 0..k {
                            let base = c * plane + (oy * self.stride + ky) * self.width + ox * self.stride;
                            row[col..col + k].copy_from_slice(&xs[base..base + k]);
                            col += k;
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Matrix, m: usize) -> Matrix {
        let k = self.kernel;
        let plane = self.height * self.width;
        let mut dx = Matrix::zeros(m, self.channels * plane);
        for i in 0..m {
            let dxs = dx.row_mut(i);
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = dcols.row((i * self.out_h + oy) * self.out_w + ox);
                    let mut col = 0;
                    for c in 0..self.channels {
                        for ky in 0..k {
                            let base = c * plane + (oy * self.stride + ky) * self.width + ox * self.stride;
                            for (d, v) in dxs[base..base + k].iter_mut().zip(&row[col..col + k]) {
                                *d += v;
                            }
                            col += k;
                        }
                    }
                }
            }
        }
        dx
    }

    fn cols_to_output(&self, out_cols: &Matrix, bias: &[f64], m: usize) -> Matrix {
        let pos = self.positions();
        let mut y = Matrix::zeros(m, self.out_channels * pos);
        for i in 0..m {
            let yr = y.row_mut(i);
            for p in 0..pos {
                let src = out_cols.row(i * pos + p);
                for oc in 0..self.out_channels {
                    yr[oc * pos + p] = src[oc] + bias[oc];
                }
            }
        }
        y
    }

    fn output_to_cols(&self, dy: &Matrix) -> Matrix {
        let pos = self.positions();
        let m = dy.rows();
        let mut out = Matrix::zeros(m * pos, self.out_channels);
        for i in 0..m {
            let dr = dy.row(i);
            for p in 0..pos {
                let dst = out.row_mut(i * pos + p);
                for oc in 0..self.out_channels {
                    dst[oc] = dr[oc * pos + p];
                }
            }
        }
        out
    }
}

/// Encoder followed by classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub encoder: Stack,
    pub classifier: Stack,
    pub seed: u64,
}

/// Forward trace of a full network pass (no whitening between the stacks).
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub encoder: StackTrace,
    pub classifier: StackTrace,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.classifier.output()
    }

    pub fn layer_count(&self) -> usize {
        self.encoder.layer_count() + self.classifier.layer_count()
    }
}

/// Gradients for every parameter of a [`Network`], laid out like its layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: LayerGrads,
    pub classifier: LayerGrads,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            encoder: net.encoder.zero_grads(),
            classifier: net.classifier.zero_grads(),
        }
    }

    /// `self += other`, layer by layer.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (mine, theirs) in self
            .encoder
            .iter_mut()
            .chain(self.classifier.iter_mut())
            .zip(other.encoder.iter().chain(other.classifier.iter()))
        {
            match (mine, theirs) {
                (Some(a), Some(b)) => {
                    a.weight.add_scaled(&b.weight, 1.0)?;
                    a.bias.add_scaled(&b.bias, 1.0)?;
                }
                (None, None) => {}
                _ => return Err(Error::contract("gradient layouts differ")),
            }
        }
        Ok(())
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.encoder
            .iter()
            .chain(self.classifier.iter())
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.matrices().into_iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }
}

impl Network {
    /// Builds a network with seeded uniform initialization in
    /// ±√(6/(fan_in+fan_out)) and zero biases.
    pub fn new(input: Shape, encoder: &[LayerSpec], classifier: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Stack::new(input, encoder, &mut rng)?;
        let classifier = Stack::new(encoder.output_shape(), classifier, &mut rng)?;
        if !matches!(classifier.output_shape(), Shape::Flat { .. }) {
            return Err(Error::contract("classifier must end in a flat logit vector"));
        }
        Ok(Network {
            encoder,
            classifier,
            seed,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.encoder.input_shape()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_shape().size()
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_shape().size()
    }

    pub fn layer_count(&self) -> usize {
        self.encoder.layers().len() + self.classifier.layers().len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        let encoder = self.encoder.forward(x)?;
        let classifier = self.classifier.forward(encoder.output())?;
        Ok(ForwardTrace { encoder, classifier })
    }

    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Result<(Gradients, Matrix)> {
        if trace.layer_count() != self.layer_count() {
            return Err(Error::contract(format!(
                "stale trace: {} layers recorded, network has {}",
                trace.layer_count(),
                self.layer_count()
            )));
        }
        let (classifier, dz) = self.classifier.backward(&trace.classifier, dlogits, true)?;
        let dz = dz.expect("requested");
        let (encoder, dx) = self.encoder.backward(&trace.encoder, &dz, true)?;
        Ok((Gradients { encoder, classifier }, dx.expect("requested")))
    }

    fn params(&self) -> impl Iterator<Item = &Params> {
        self.encoder
            .layers
            .iter()
            .chain(self.classifier.layers.iter())
            .filter_map(|l| l.params.as_ref())
    }

    pub fn param_matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.classifier.layers.iter_mut())
            .filter_map(|l| l.params.as_mut())
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.weight.data().len() + p.bias.data().len()).sum()
    }

    /// All parameters in layer order, weight then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        self.params()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for m in self.param_matrices_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

pub fn log_softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        log_softmax_row(logits.row(r), out.row_mut(r));
    }
    out
}

pub fn softmax(logits: &Matrix) -> Matrix {
    log_softmax(logits).map(f64::exp)
}

/// Mean cross-entropy over the batch and its gradient
/// `(softmax(logits) − onehot(labels)) / m`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (m, classes) = logits.shape();
    if labels.len() != m {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
    }
    let logp = log_softmax(logits);
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(m, classes);
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[(i, y)];
        for c in 0..classes {
            let p = logp[(i, c)].exp();
            grad[(i, c)] = (p - if c == y { 1.0 } else { 0.0 }) * inv_m;
        }
    }
    Ok((loss * inv_m, grad))
}

/// Result of [`kl_divergence`]: batch-mean `KL(softmax(p) ‖ softmax(q))` with
/// gradients for both logit sets.
#[derive(Clone, Debug)]
pub struct KlTerm {
    pub loss: f64,
    pub dq_logits: Matrix,
    pub dp_logits: Matrix,
}

/// `KL(softmax(p) ‖ softmax(q))` averaged over rows.
pub fn kl_divergence(p_logits: &Matrix, q_logits: &Matrix) -> Result<KlTerm> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::Shape {
            op: "kl_divergence",
            left: p_logits.shape(),
            right: q_logits.shape(),
        });
    }
    let (m, classes) = p_logits.shape();
    let logp = log_softmax(p_logits);
    let logq = log_softmax(q_logits);
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut dp = Matrix::zeros(m, classes);
    let mut dq = Matrix::zeros(m, classes);
    for i in 0..m {
        let row_kl: f64 = (0..classes)
            .map(|c| logp[(i, c)].exp() * (logp[(i, c)] - logq[(i, c)]))
            .sum();
        loss += row_kl;
        for c in 0..classes {
            let p = logp[(i, c)].exp();
            let q = logq[(i, c)].exp();
            dq[(i, c)] = (q - p) * inv_m;
            dp[(i, c)] = p * ((logp[(i, c)] - logq[(i, c)]) - row_kl) * inv_m;
        }
    }
    Ok(KlTerm {
        loss: (loss * inv_m).max(0.0),
        dq_logits: dq,
        dp_logits: dp,
    })
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, d).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_parameter_net_gives_zero_logits() {
        let mut net = Network::new(
            Shape::flat(3),
            &[LayerSpec::Dense { inputs: 3, outputs: 4 }, LayerSpec::Relu],
            &[LayerSpec::Dense { inputs: 4, outputs: 2 }],
            1,
        )
        .unwrap();
        let n = net.param_count();
        net.set_params_flat(&vec![0.0; n]).unwrap();
        let trace = net.forward(&rand_matrix(5, 3, 2)).unwrap();
        assert!(trace.logits().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut net = Network::new(
            Shape::flat(3),
            &[],
            &[LayerSpec::Dense { inputs: 3, outputs: 3 }],
            1,
        )
        .unwrap();
        let mut params = Matrix::identity(3).into_vec();
        params.extend([0.0; 3]);
        net.set_params_flat(&params).unwrap();
        let x = rand_matrix(4, 3, 9);
        assert_eq!(net.forward(&x).unwrap().logits(), &x);
    }

    #[test]
    fn linear_input_grad_is_w_transpose_dlogits() {
        let net = Network::new(
            Shape::flat(4),
            &[],
            &[LayerSpec::Dense { inputs: 4, outputs: 3 }],
            5,
        )
        .unwrap();
        let x = rand_matrix(2, 4, 6);
        let dlogits = rand_matrix(2, 3, 7);
        let trace = net.forward(&x).unwrap();
        let (_, dx) = net.backward(&trace, &dlogits).unwrap();
        let w = &net.classifier.layers()[0].params.as_ref().unwrap().weight;
        // rows are samples, so Wᵀ·dlogits per sample is dlogits·Wᵀ here
        assert_eq!(dx, matmul_nt(&dlogits, w).unwrap());
    }

    #[test]
    fn shape_errors() {
        let net = Network::new(
            Shape::flat(4),
            &[],
            &[LayerSpec::Dense { inputs: 4, outputs: 3 }],
            5,
        )
        .unwrap();
        assert!(matches!(net.forward(&Matrix::zeros(2, 5)), Err(Error::Shape { .. })));
        assert!(Network::new(
            Shape::spatial(1, 6, 6),
            &[LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1 }],
            &[LayerSpec::Dense { inputs: 32, outputs: 2 }],
            0
        )
        .is_err());
        assert!(Network::new(
            Shape::spatial(1, 6, 6),
            &[LayerSpec::Flatten, LayerSpec::Flatten],
            &[LayerSpec::Dense { inputs: 36, outputs: 2 }],
            0
        )
        .is_err());
    }

    #[test]
    fn stale_trace_is_rejected() {
        let a = Network::new(Shape::flat(2), &[LayerSpec::Relu], &[LayerSpec::Dense { inputs: 2, outputs: 2 }], 0).unwrap();
        let b = Network::new(Shape::flat(2), &[], &[LayerSpec::Dense { inputs: 2, outputs: 2 }], 0).unwrap();
        let trace = b.forward(&Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(a.backward(&trace, &Matrix::zeros(1, 2)), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_limits() {
        let (loss, _) = softmax_cross_entropy(&Matrix::zeros(2, 5), &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
        let logits = Matrix::from_rows(&[[50.0, 0.0, 0.0]]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-20);
        assert!(matches!(softmax_cross_entropy(&logits, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = rand_matrix(4, 3, 21).scale(2.0);
        let labels = [0, 2, 1, 2];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.data().len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&plus, &labels).unwrap().0
                - softmax_cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * h);
            assert!(rel_err(fd, grad.data()[i]) < 1e-6, "{fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = rand_matrix(3, 4, 1);
        assert!(kl_divergence(&p, &p).unwrap().loss.abs() < 1e-15);
    }

    #[test]
    fn kl_matches_direct_formula() {
        let p = Matrix::from_rows(&[[1.0, 0.0]]);
        let q = Matrix::from_rows(&[[0.0, 1.0]]);
        let e = std::f64::consts::E;
        // direct Σ p ln(p/q) on the two-point distributions
        let p1 = e / (1.0 + e);
        let p2 = 1.0 / (1.0 + e);
        let direct = p1 * (p1 / p2).ln() + p2 * (p2 / p1).ln();
        let got = kl_divergence(&p, &q).unwrap().loss;
        assert!((got - direct).abs() < 1e-14);
        assert!((got - (e - 1.0) / (e + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let p = rand_matrix(3, 4, 31).scale(1.5);
        let q = rand_matrix(3, 4, 32).scale(1.5);
        let kl = kl_divergence(&p, &q).unwrap();
        let h = 1e-6;
        for i in 0..p.data().len() {
            let f = |pp: &Matrix, qq: &Matrix| kl_divergence(pp, qq).unwrap().loss;
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.data_mut()[i] += h;
            pm.data_mut()[i] -= h;
            let fd_p = (f(&pp, &q) - f(&pm, &q)) / (2.0 * h);
            let (mut qp, mut qm) = (q.clone(), q.clone());
            qp.data_mut()[i] += h;
            qm.data_mut()[i] -= h;
            let fd_q = (f(&p, &qp) - f(&p, &qm)) / (2.0 * h);
            assert!(rel_err(fd_p, kl.dp_logits.data()[i]) < 1e-5);
            assert!(rel_err(fd_q, kl.dq_logits.data()[i]) < 1e-5);
        }
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(matches!(
            kl_divergence(&Matrix::zeros(2, 3), &Matrix::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv_output_shape() {
        let s = LayerSpec::Conv2d { in_channels: 1, out_channels: 8, kernel: 5, stride: 2 }
            .output_shape(Shape::spatial(1, 28, 28))
            .unwrap();
        assert_eq!(s, Shape::spatial(8, 12, 12));
    }
}
