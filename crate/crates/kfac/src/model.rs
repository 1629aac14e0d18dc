//! A minimal layered network: fully-connected, 2-D convolution (im2col,
//! stride 1, no padding), and batch normalization, with softmax
//! cross-entropy on top.
//!
//! Forward and backward capture, per layer, the input-activation rows and
//! per-sample output-gradient rows that the Kronecker factors are built
//! from. Bias is handled by appending a homogeneous 1 coordinate to the
//! captured input, so the weight matrix of a layer with bias is the
//! combined `(d_out, d_in + 1)` block.

use crate::linalg::DenseMatrix;
use crate::rng;
use crate::tensor::TensorBuffer;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const BN_EPS: f64 = 1e-5;
const BN_STATS_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("layer {layer}: shape mismatch: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("backward called without a preceding forward")]
    NoForward,
    #[error("non-finite values in {what}")]
    NonFinite { what: String },
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
    },
    BatchNorm {
        channels: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub has_bias: bool,
}

impl LayerSpec {
    /// Column count of the captured input rows (includes the bias 1).
    pub fn input_cols(&self) -> Option<usize> {
        let bias = usize::from(self.has_bias);
        match self.kind {
            LayerKind::FullyConnected { in_features, .. } => Some(in_features + bias),
            LayerKind::Conv2d {
                in_channels,
                kernel: (kh, kw),
                ..
            } => Some(in_channels * kh * kw + bias),
            LayerKind::BatchNorm { .. } => None,
        }
    }

    /// Output dimension (or channels) of the layer.
    pub fn d_out(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected { out_features, .. } => out_features,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            LayerKind::BatchNorm { channels } => channels,
        }
    }

    pub fn is_kron(&self) -> bool {
        !matches!(self.kind, LayerKind::BatchNorm { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected { in_features, .. } => in_features,
            LayerKind::Conv2d {
                in_channels,
                kernel: (kh, kw),
                ..
            } => in_channels * kh * kw,
            LayerKind::BatchNorm { channels } => channels,
        }
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Spatial { c: usize, h: usize, w: usize },
}

impl Shape {
    pub fn elements(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Spatial { c, h, w } => c * h * w,
        }
    }
}

/// Per-layer parameters, gradient, momentum buffer, and the statistics
/// captured during the last forward/backward pass.
///
/// `weights` layout: FC/conv store the combined `(d_out, d_in + bias)`
/// block; batch norm stores `(2, C)` with scale in row 0 and shift in
/// row 1. Captured input rows for batch norm hold the normalized
/// activations (what the per-sample parameter gradients are built from).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub weights: TensorBuffer,
    pub weight_grad: TensorBuffer,
    pub velocity: TensorBuffer,
    #[serde(skip)]
    pub captured_input: Option<DenseMatrix>,
    #[serde(skip)]
    pub captured_output_grad: Option<DenseMatrix>,
    pub bn_running_mean: Option<Vec<f64>>,
    pub bn_running_var: Option<Vec<f64>>,
}

impl LayerRecord {
    pub fn weight_matrix(&self) -> DenseMatrix {
        let s = self.weights.shape();
        DenseMatrix::from_values(s[0], s[1], self.weights.data().to_vec())
    }

    pub fn grad_matrix(&self) -> DenseMatrix {
        let s = self.weight_grad.shape();
        DenseMatrix::from_values(s[0], s[1], self.weight_grad.data().to_vec())
    }
}

/// Initialize a layer's parameters: HeNormal weights (std sqrt(2/fan_in)),
/// zero bias, batch-norm scale 1 / shift 0, zero velocity.
pub fn init_weights(spec: &LayerSpec, rng_seed: u64) -> LayerRecord {
    match spec.kind {
        LayerKind::BatchNorm { channels } => {
            let mut weights = TensorBuffer::zeros(&[2, channels]);
            weights.data_mut()[..channels].fill(1.0);
            LayerRecord {
                weights,
                weight_grad: TensorBuffer::zeros(&[2, channels]),
                velocity: TensorBuffer::zeros(&[2, channels]),
                captured_input: None,
                captured_output_grad: None,
                bn_running_mean: Some(vec![0.0; channels]),
                bn_running_var: Some(vec![1.0; channels]),
            }
        }
        _ => {
            let d_out = spec.d_out();
            let d_a = spec.input_cols().expect("kron layer");
            let fan_in = spec.fan_in();
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = rng::stream(&[rng_seed, 0x11d5]);
            let mut weights = TensorBuffer::zeros(&[d_out, d_a]);
            let weight_cols = d_a - usize::from(spec.has_bias);
            for r in 0..d_out {
                let row = &mut weights.data_mut()[r * d_a..r * d_a + weight_cols];
                for v in row.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = std * z;
                }
                // bias column (if any) stays zero
            }
            LayerRecord {
                weights,
                weight_grad: TensorBuffer::zeros(&[d_out, d_a]),
                velocity: TensorBuffer::zeros(&[d_out, d_a]),
                captured_input: None,
                captured_output_grad: None,
                bn_running_mean: None,
                bn_running_var: None,
            }
        }
    }
}

/// Momentum update: `velocity <- -eta * precond + m * velocity`,
/// `weights <- weights + velocity`. Algebraically the update
/// `w - eta G + m (w - w_prev)` with `velocity = w - w_prev`.
pub fn apply_update(
    record: &mut LayerRecord,
    precond: &TensorBuffer,
    eta: f64,
    m: f64,
) -> Result<(), ModelError> {
    if precond.shape() != record.weights.shape() {
        return Err(ModelError::ShapeMismatch {
            layer: usize::MAX,
            detail: format!(
                "update shape {:?} vs weights {:?}",
                precond.shape(),
                record.weights.shape()
            ),
        });
    }
    if !precond.all_finite() || !eta.is_finite() || !m.is_finite() {
        return Err(ModelError::NonFinite {
            what: "parameter update".into(),
        });
    }
    record.velocity.scale(m);
    record.velocity.add_scaled(precond, -eta);
    let v = record.velocity.data().to_vec();
    for (w, dv) in record.weights.data_mut().iter_mut().zip(v) {
        *w += dv;
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum ForwardCache {
    Fc {
        input_rows: DenseMatrix,
    },
    Conv {
        input_rows: DenseMatrix,
        out_h: usize,
        out_w: usize,
    },
    Bn {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: usize,
        spatial: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub record: LayerRecord,
    pub in_shape: Shape,
    pub out_shape: Shape,
    cache: Option<ForwardCache>,
}

/// A mini-batch: inputs `(M, C, H, W)` and one-hot (or mixup-soft) labels
/// `(M, classes)` whose rows sum to one.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: TensorBuffer,
    pub labels: DenseMatrix,
}

impl Batch {
    pub fn new(inputs: TensorBuffer, labels: DenseMatrix) -> Result<Self, ModelError> {
        if inputs.shape()[0] != labels.rows() || labels.rows() == 0 {
            return Err(ModelError::ShapeMismatch {
                layer: 0,
                detail: "batch inputs/labels sample counts differ or empty".into(),
            });
        }
        for i in 0..labels.rows() {
            let s: f64 = labels.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(ModelError::InvalidSpec(format!(
                    "label row {i} sums to {s}, expected 1"
                )));
            }
        }
        Ok(Batch { inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.rows()
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Shape,
    pub class_count: usize,
}

fn im2col_rows(
    sample: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    has_bias: bool,
    out: &mut Vec<f64>,
) {
    let out_h = h - kh + 1;
    let out_w = w - kw + 1;
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let plane = &sample[ch * h * w..(ch + 1) * h * w];
                for ky in 0..kh {
                    let row = &plane[(oy + ky) * w + ox..(oy + ky) * w + ox + kw];
                    out.extend_from_slice(row);
                }
            }
            if has_bias {
                out.push(1.0);
            }
        }
    }
}

fn append_rows(dst: &mut Option<DenseMatrix>, rows: &DenseMatrix) {
    match dst {
        None => *dst = Some(rows.clone()),
        Some(m) => {
            assert_eq!(m.cols(), rows.cols(), "capture column mismatch");
            let mut values = m.values().to_vec();
            values.extend_from_slice(rows.values());
            *dst = Some(DenseMatrix::from_values(
                m.rows() + rows.rows(),
                m.cols(),
                values,
            ));
        }
    }
}

/// Mean softmax cross-entropy of logits against (possibly soft) labels.
pub fn cross_entropy(logits: &DenseMatrix, labels: &DenseMatrix) -> f64 {
    let m = logits.rows();
    let mut total = 0.0;
    for i in 0..m {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (l, y) in row.iter().zip(labels.row(i)) {
            if *y != 0.0 {
                total -= y * (l - lse);
            }
        }
    }
    total / m as f64
}

fn softmax_grad(logits: &DenseMatrix, labels: &DenseMatrix) -> DenseMatrix {
    let m = logits.rows();
    let mut out = DenseMatrix::zeros(m, logits.cols());
    for i in 0..m {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (j, (e, y)) in exps.iter().zip(labels.row(i)).enumerate() {
            out.set(i, j, (e / sum - y) / m as f64);
        }
    }
    out
}

impl Network {
    /// Build a network from layer specs, propagating and validating the
    /// activation shape, with parameters derived deterministically from
    /// the seed.
    pub fn new(input_shape: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self, ModelError> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        for (idx, spec) in specs.iter().enumerate() {
            let (in_shape, out_shape) = propagate(shape, spec, idx)?;
            let record = init_weights(spec, rng::derive_seed(&[seed, idx as u64]));
            layers.push(Layer {
                spec: *spec,
                record,
                in_shape,
                out_shape,
                cache: None,
            });
            shape = out_shape;
        }
        let class_count = match shape {
            Shape::Flat(d) => d,
            Shape::Spatial { .. } => {
                return Err(ModelError::InvalidSpec(
                    "final layer must produce a flat class vector".into(),
                ))
            }
        };
        Ok(Network {
            layers,
            input_shape,
            class_count,
        })
    }

    /// Drop captured statistics and zero accumulated gradients; call at
    /// the start of every iteration.
    pub fn clear_iteration(&mut self) {
        for layer in &mut self.layers {
            layer.record.captured_input = None;
            layer.record.captured_output_grad = None;
            layer.record.weight_grad.fill(0.0);
            layer.cache = None;
        }
    }

    /// Divide accumulated gradients by the number of accumulation chunks.
    pub fn scale_grads(&mut self, c: f64) {
        for layer in &mut self.layers {
            layer.record.weight_grad.scale(c);
        }
    }

    /// Training forward pass: captures input activations per layer,
    /// caches what backward needs, and returns `(logits, loss)`.
    /// Captures append across calls (gradient accumulation); use
    /// [`Network::clear_iteration`] between iterations.
    pub fn forward_train(&mut self, batch: &Batch) -> Result<(DenseMatrix, f64), ModelError> {
        if batch.labels.cols() != self.class_count {
            return Err(ModelError::ShapeMismatch {
                layer: self.layers.len(),
                detail: format!(
                    "labels have {} classes, model produces {}",
                    batch.labels.cols(),
                    self.class_count
                ),
            });
        }
        let mut x = batch.inputs.clone();
        let mut shape = self.input_shape;
        check_input(&x, shape, 0)?;
        for idx in 0..self.layers.len() {
            let layer = &mut self.layers[idx];
            // spatial output flattens implicitly into a fully-connected layer
            if shape.elements() != layer.in_shape.elements() {
                return Err(ModelError::ShapeMismatch {
                    layer: idx,
                    detail: format!("expected {:?}, got {shape:?}", layer.in_shape),
                });
            }
            x = layer_forward_train(layer, &x)?;
            shape = layer.out_shape;
        }
        let m = batch.size();
        let logits = DenseMatrix::from_values(m, self.class_count, x.data().to_vec());
        let loss = cross_entropy(&logits, &batch.labels);
        Ok((logits, loss))
    }

    /// Inference pass: batch norm uses running statistics; nothing is
    /// captured or cached.
    pub fn forward_eval(&self, inputs: &TensorBuffer) -> Result<DenseMatrix, ModelError> {
        let mut x = inputs.clone();
        check_input(&x, self.input_shape, 0)?;
        for (idx, layer) in self.layers.iter().enumerate() {
            x = layer_forward_eval(layer, &x).map_err(|e| match e {
                ModelError::ShapeMismatch { detail, .. } => {
                    ModelError::ShapeMismatch { layer: idx, detail }
                }
                other => other,
            })?;
        }
        let m = inputs.shape()[0];
        Ok(DenseMatrix::from_values(
            m,
            self.class_count,
            x.data().to_vec(),
        ))
    }

    /// Backward pass for the batch last seen by `forward_train`:
    /// accumulates `weight_grad` (mean-loss gradients) and captures
    /// per-sample output-gradient rows, scaled to per-sample-loss units.
    pub fn backward(&mut self, logits: &DenseMatrix, labels: &DenseMatrix) -> Result<(), ModelError> {
        if self.layers.iter().any(|l| l.cache.is_none()) {
            return Err(ModelError::NoForward);
        }
        let m = logits.rows();
        let dlogits = softmax_grad(logits, labels);
        let mut grad = TensorBuffer::from_vec(&[m, self.class_count], dlogits.values().to_vec());
        for idx in (0..self.layers.len()).rev() {
            let layer = &mut self.layers[idx];
            grad = layer_backward(layer, grad, m)?;
        }
        Ok(())
    }

    /// Concatenation of all parameters, layer order then row-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.record.weights.data());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.record.weights.len()).sum()
    }
}

fn check_input(x: &TensorBuffer, shape: Shape, layer: usize) -> Result<(), ModelError> {
    let per_sample: usize = x.shape()[1..].iter().product();
    if per_sample != shape.elements() {
        return Err(ModelError::ShapeMismatch {
            layer,
            detail: format!(
                "input has {per_sample} features per sample, expected {}",
                shape.elements()
            ),
        });
    }
    Ok(())
}

fn propagate(shape: Shape, spec: &LayerSpec, idx: usize) -> Result<(Shape, Shape), ModelError> {
    match spec.kind {
        LayerKind::FullyConnected {
            in_features,
            out_features,
        } => {
            if shape.elements() != in_features {
                return Err(ModelError::ShapeMismatch {
                    layer: idx,
                    detail: format!(
                        "fc expects {in_features} inputs, previous layer provides {}",
                        shape.elements()
                    ),
                });
            }
            Ok((Shape::Flat(in_features), Shape::Flat(out_features)))
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel: (kh, kw),
        } => {
            if kh == 0 || kw == 0 {
                return Err(ModelError::InvalidSpec("conv kernel must be > 0".into()));
            }
            match shape {
                Shape::Spatial { c, h, w } if c == in_channels && h >= kh && w >= kw => Ok((
                    shape,
                    Shape::Spatial {
                        c: out_channels,
                        h: h - kh + 1,
                        w: w - kw + 1,
                    },
                )),
                other => Err(ModelError::ShapeMismatch {
                    layer: idx,
                    detail: format!(
                        "conv expects spatial input with {in_channels} channels and size >= kernel, got {other:?}"
                    ),
                }),
            }
        }
        LayerKind::BatchNorm { channels } => {
            let ok = match shape {
                Shape::Spatial { c, .. } => c == channels,
                Shape::Flat(d) => d == channels,
            };
            if !ok {
                return Err(ModelError::ShapeMismatch {
                    layer: idx,
                    detail: format!("batch_norm over {channels} channels given {shape:?}"),
                });
            }
            Ok((shape, shape))
        }
    }
}

fn layer_forward_train(layer: &mut Layer, x: &TensorBuffer) -> Result<TensorBuffer, ModelError> {
    let m = x.shape()[0];
    match layer.spec.kind {
        LayerKind::FullyConnected { in_features, out_features } => {
            let d_a = layer.spec.input_cols().unwrap();
            let mut rows = Vec::with_capacity(m * d_a);
            for i in 0..m {
                rows.extend_from_slice(x.sample(i));
                if layer.spec.has_bias {
                    rows.push(1.0);
                }
            }
            let input_rows = DenseMatrix::from_values(m, d_a, rows);
            let w = layer.record.weight_matrix();
            let y = input_rows.matmul(&w.transpose()).expect("fc shapes");
            debug_assert_eq!(in_features + usize::from(layer.spec.has_bias), d_a);
            append_rows(&mut layer.record.captured_input, &input_rows);
            layer.cache = Some(ForwardCache::Fc { input_rows });
            Ok(TensorBuffer::from_vec(&[m, out_features], y.values().to_vec()))
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel: (kh, kw) } => {
            let (h, w) = match layer.in_shape {
                Shape::Spatial { h, w, .. } => (h, w),
                _ => unreachable!("validated at construction"),
            };
            let out_h = h - kh + 1;
            let out_w = w - kw + 1;
            let d_a = layer.spec.input_cols().unwrap();
            let positions = out_h * out_w;
            let mut rows = Vec::with_capacity(m * positions * d_a);
            for i in 0..m {
                im2col_rows(x.sample(i), in_channels, h, w, kh, kw, layer.spec.has_bias, &mut rows);
            }
            let input_rows = DenseMatrix::from_values(m * positions, d_a, rows);
            let wmat = layer.record.weight_matrix();
            // y rows: (m * positions, out_channels), row index m*positions + oy*out_w + ox
            let y_rows = input_rows.matmul(&wmat.transpose()).expect("conv shapes");
            let mut y = TensorBuffer::zeros(&[m, out_channels, out_h, out_w]);
            for i in 0..m {
                let dst = y.sample_mut(i);
                for pos in 0..positions {
                    let src = y_rows.row(i * positions + pos);
                    for (co, v) in src.iter().enumerate() {
                        dst[co * positions + pos] = *v;
                    }
                }
            }
            append_rows(&mut layer.record.captured_input, &input_rows);
            layer.cache = Some(ForwardCache::Conv { input_rows, out_h, out_w });
            Ok(y)
        }
        LayerKind::BatchNorm { channels } => {
            let spatial = layer.in_shape.elements() / channels;
            let count = (m * spatial) as f64;
            let data = x.data();
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for i in 0..m {
                for c in 0..channels {
                    for s in 0..spatial {
                        mean[c] += data[(i * channels + c) * spatial + s];
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= count);
            for i in 0..m {
                for c in 0..channels {
                    for s in 0..spatial {
                        let d = data[(i * channels + c) * spatial + s] - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

            let rm = layer.record.bn_running_mean.as_mut().expect("bn stats");
            let rv = layer.record.bn_running_var.as_mut().expect("bn stats");
            for c in 0..channels {
                rm[c] = BN_STATS_MOMENTUM * rm[c] + (1.0 - BN_STATS_MOMENTUM) * mean[c];
                rv[c] = BN_STATS_MOMENTUM * rv[c] + (1.0 - BN_STATS_MOMENTUM) * var[c];
            }

            let scale = &layer.record.weights.data()[..channels];
            let shift = &layer.record.weights.data()[channels..];
            let mut xhat = vec![0.0; m * channels * spatial];
            let mut y = TensorBuffer::zeros(x.shape());
            {
                let ydata = y.data_mut();
                for i in 0..m {
                    for c in 0..channels {
                        for s in 0..spatial {
                            let k = (i * channels + c) * spatial + s;
                            let xh = (data[k] - mean[c]) * inv_std[c];
                            xhat[k] = xh;
                            ydata[k] = scale[c] * xh + shift[c];
                        }
                    }
                }
            }
            // capture normalized activations per sample for the BN Fisher
            let xhat_rows = DenseMatrix::from_values(m, channels * spatial, xhat.clone());
            append_rows(&mut layer.record.captured_input, &xhat_rows);
            layer.cache = Some(ForwardCache::Bn { xhat, inv_std, batch: m, spatial });
            Ok(y)
        }
    }
}

fn layer_forward_eval(layer: &Layer, x: &TensorBuffer) -> Result<TensorBuffer, ModelError> {
    let m = x.shape()[0];
    match layer.spec.kind {
        LayerKind::FullyConnected { out_features, .. } => {
            let d_a = layer.spec.input_cols().unwrap();
            let mut rows = Vec::with_capacity(m * d_a);
            for i in 0..m {
                rows.extend_from_slice(x.sample(i));
                if layer.spec.has_bias {
                    rows.push(1.0);
                }
            }
            let input_rows = DenseMatrix::from_values(m, d_a, rows);
            let y = input_rows
                .matmul(&layer.record.weight_matrix().transpose())
                .expect("fc shapes");
            Ok(TensorBuffer::from_vec(&[m, out_features], y.values().to_vec()))
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel: (kh, kw) } => {
            let (h, w) = match layer.in_shape {
                Shape::Spatial { h, w, .. } => (h, w),
                _ => unreachable!(),
            };
            let out_h = h - kh + 1;
            let out_w = w - kw + 1;
            let d_a = layer.spec.input_cols().unwrap();
            let positions = out_h * out_w;
            let mut rows = Vec::with_capacity(m * positions * d_a);
            for i in 0..m {
                im2col_rows(x.sample(i), in_channels, h, w, kh, kw, layer.spec.has_bias, &mut rows);
            }
            let input_rows = DenseMatrix::from_values(m * positions, d_a, rows);
            let y_rows = input_rows
                .matmul(&layer.record.weight_matrix().transpose())
                .expect("conv shapes");
            let mut y = TensorBuffer::zeros(&[m, out_channels, out_h, out_w]);
            for i in 0..m {
                let dst = y.sample_mut(i);
                for pos in 0..positions {
                    let src = y_rows.row(i * positions + pos);
                    for (co, v) in src.iter().enumerate() {
                        dst[co * positions + pos] = *v;
                    }
                }
            }
            Ok(y)
        }
        LayerKind::BatchNorm { channels } => {
            let spatial = layer.in_shape.elements() / channels;
            let rm = layer.record.bn_running_mean.as_ref().expect("bn stats");
            let rv = layer.record.bn_running_var.as_ref().expect("bn stats");
            let scale = &layer.record.weights.data()[..channels];
            let shift = &layer.record.weights.data()[channels..];
            let mut y = TensorBuffer::zeros(x.shape());
            let data = x.data();
            let ydata = y.data_mut();
            for i in 0..m {
                for c in 0..channels {
                    let istd = 1.0 / (rv[c] + BN_EPS).sqrt();
                    for s in 0..spatial {
                        let k = (i * channels + c) * spatial + s;
                        ydata[k] = scale[c] * (data[k] - rm[c]) * istd + shift[c];
                    }
                }
            }
            Ok(y)
        }
    }
}

/// Backward through one layer. `grad` holds mean-loss gradients w.r.t.
/// the layer output; returns gradients w.r.t. the layer input. Captured
/// output-gradient rows are scaled by the batch size so they are
/// per-sample-loss gradients.
fn layer_backward(
    layer: &mut Layer,
    grad: TensorBuffer,
    batch: usize,
) -> Result<TensorBuffer, ModelError> {
    let cache = layer.cache.take().ok_or(ModelError::NoForward)?;
    let m = grad.shape()[0];
    match (&layer.spec.kind, cache) {
        (LayerKind::FullyConnected { in_features, out_features }, ForwardCache::Fc { input_rows }) => {
            let dy = DenseMatrix::from_values(m, *out_features, grad.data().to_vec());
            let dw = dy.transpose().matmul(&input_rows).expect("fc backward");
            layer.record.weight_grad.add_scaled(
                &TensorBuffer::from_vec(layer.record.weight_grad.shape(), dw.values().to_vec()),
                1.0,
            );
            append_rows(
                &mut layer.record.captured_output_grad,
                &dy.scaled(batch as f64),
            );
            let w = layer.record.weight_matrix();
            // drop the bias column when propagating
            let mut dx = DenseMatrix::zeros(m, *in_features);
            for i in 0..m {
                for o in 0..*out_features {
                    let g = dy.get(i, o);
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = w.row(o);
                    let dst = dx.row_mut(i);
                    for (d, wv) in dst.iter_mut().zip(&wrow[..*in_features]) {
                        *d += g * wv;
                    }
                }
            }
            Ok(TensorBuffer::from_vec(&[m, *in_features], dx.values().to_vec()))
        }
        (
            LayerKind::Conv2d { in_channels, out_channels, kernel: (kh, kw) },
            ForwardCache::Conv { input_rows, out_h, out_w },
        ) => {
            let (h, w) = match layer.in_shape {
                Shape::Spatial { h, w, .. } => (h, w),
                _ => unreachable!(),
            };
            let positions = out_h * out_w;
            // reshape grad (m, c_out, out_h, out_w) to rows (m*positions, c_out)
            let mut dy_rows = DenseMatrix::zeros(m * positions, *out_channels);
            for i in 0..m {
                let src = grad.sample(i);
                for pos in 0..positions {
                    let dst = dy_rows.row_mut(i * positions + pos);
                    for (co, d) in dst.iter_mut().enumerate() {
                        *d = src[co * positions + pos];
                    }
                }
            }
            let dw = dy_rows.transpose().matmul(&input_rows).expect("conv backward");
            layer.record.weight_grad.add_scaled(
                &TensorBuffer::from_vec(layer.record.weight_grad.shape(), dw.values().to_vec()),
                1.0,
            );
            append_rows(
                &mut layer.record.captured_output_grad,
                &dy_rows.scaled(batch as f64),
            );
            // dPatches = dy_rows * W (without bias column), scattered back
            let wmat = layer.record.weight_matrix();
            let patch_cols = in_channels * kh * kw;
            let mut dx = TensorBuffer::zeros(&[m, *in_channels, h, w]);
            for i in 0..m {
                let dst = dx.sample_mut(i);
                for pos in 0..positions {
                    let oy = pos / out_w;
                    let ox = pos % out_w;
                    let dyr = dy_rows.row(i * positions + pos);
                    for (co, g) in dyr.iter().enumerate() {
                        if *g == 0.0 {
                            continue;
                        }
                        let wrow = &wmat.row(co)[..patch_cols];
                        let mut k = 0;
                        for ch in 0..*in_channels {
                            for ky in 0..*kh {
                                let base = ch * h * w + (oy + ky) * w + ox;
                                for kx in 0..*kw {
                                    dst[base + kx] += g * wrow[k];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
            Ok(dx)
        }
        (LayerKind::BatchNorm { channels }, ForwardCache::Bn { xhat, inv_std, batch: bn_m, spatial }) => {
            debug_assert_eq!(bn_m, m);
            let count = (m * spatial) as f64;
            let dy = grad.data();
            let scale = layer.record.weights.data()[..*channels].to_vec();
            // parameter gradients (mean loss units)
            let mut dgamma = vec![0.0; *channels];
            let mut dbeta = vec![0.0; *channels];
            for i in 0..m {
                for c in 0..*channels {
                    for s in 0..spatial {
                        let k = (i * *channels + c) * spatial + s;
                        dgamma[c] += dy[k] * xhat[k];
                        dbeta[c] += dy[k];
                    }
                }
            }
            {
                let g = layer.record.weight_grad.data_mut();
                for c in 0..*channels {
                    g[c] += dgamma[c];
                    g[*channels + c] += dbeta[c];
                }
            }
            // per-channel means needed for the input gradient
            let mut mean_dxh = vec![0.0; *channels];
            let mut mean_dxh_xh = vec![0.0; *channels];
            for i in 0..m {
                for c in 0..*channels {
                    for s in 0..spatial {
                        let k = (i * *channels + c) * spatial + s;
                        let dxh = dy[k] * scale[c];
                        mean_dxh[c] += dxh;
                        mean_dxh_xh[c] += dxh * xhat[k];
                    }
                }
            }
            for c in 0..*channels {
                mean_dxh[c] /= count;
                mean_dxh_xh[c] /= count;
            }
            let mut dx = TensorBuffer::zeros(grad.shape());
            {
                let dst = dx.data_mut();
                for i in 0..m {
                    for c in 0..*channels {
                        for s in 0..spatial {
                            let k = (i * *channels + c) * spatial + s;
                            let dxh = dy[k] * scale[c];
                            dst[k] = inv_std[c] * (dxh - mean_dxh[c] - xhat[k] * mean_dxh_xh[c]);
                        }
                    }
                }
            }
            // per-sample output grads feed the BN Fisher block
            let dy_rows = DenseMatrix::from_values(m, *channels * spatial, dy.to_vec());
            append_rows(
                &mut layer.record.captured_output_grad,
                &dy_rows.scaled(batch as f64),
            );
            Ok(dx)
        }
        _ => Err(ModelError::NoForward),
    }
}
