//! Differentiable image classifiers with hand-written backpropagation.
//!
//! Three fixed architectures share one layer interpreter:
//!
//! * `small_cnn`: conv3x3(1→c1)-ReLU-maxpool2, conv3x3(c1→c2)-ReLU-maxpool2,
//!   dense(hidden)-ReLU, dense(num_classes). Convolutions use zero "same"
//!   padding and pooling floors odd sizes.
//! * `mlp`: dense(hidden)-ReLU, dense(num_classes).
//! * `linear`: dense(num_classes).
//!
//! Parameter counts, with `H4 = ⌊⌊H/2⌋/2⌋`, `W4 = ⌊⌊W/2⌋/2⌋` and `K` classes:
//!
//! ```text
//! small_cnn: c1·(9+1) + c2·(9·c1+1) + hidden·(c2·H4·W4+1) + K·(hidden+1)
//! mlp:       hidden·(H·W+1) + K·(hidden+1)
//! linear:    K·(H·W+1)
//! ```
//!
//! The loss is mean softmax cross-entropy. Gradients are available with
//! respect to both the parameters and the input pixels.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SmallCnn,
    Mlp,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
    #[serde(default = "default_conv1")]
    pub conv1_channels: usize,
    #[serde(default = "default_conv2")]
    pub conv2_channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_conv1() -> usize {
    4
}
fn default_conv2() -> usize {
    8
}
fn default_hidden() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::SmallCnn,
            input_height: 32,
            input_width: 32,
            num_classes: 3,
            conv1_channels: default_conv1(),
            conv2_channels: default_conv2(),
            hidden_units: default_hidden(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn small_cnn(height: usize, width: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            input_height: height,
            input_width: width,
            num_classes,
            seed,
            ..Self::default()
        }
    }

    pub fn mlp(height: usize, width: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            architecture: Architecture::Mlp,
            input_height: height,
            input_width: width,
            num_classes,
            hidden_units: hidden,
            seed,
            ..Self::default()
        }
    }

    pub fn linear(height: usize, width: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            architecture: Architecture::Linear,
            input_height: height,
            input_width: width,
            num_classes,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        match self.architecture {
            Architecture::SmallCnn => {
                if self.input_height < 8 || self.input_width < 8 {
                    return Err(Error::Config(format!(
                        "small_cnn needs inputs of at least 8x8, got {}x{}",
                        self.input_height, self.input_width
                    )));
                }
                if self.conv1_channels == 0 || self.conv2_channels == 0 || self.hidden_units == 0 {
                    return Err(Error::Config(
                        "channel and hidden widths must be positive".into(),
                    ));
                }
            }
            Architecture::Mlp => {
                if self.hidden_units == 0 {
                    return Err(Error::Config("hidden_units must be positive".into()));
                }
            }
            Architecture::Linear => {}
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width
    }

    /// Name, shape and fan-in of every parameter array, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (h, w, k) = (self.input_height, self.input_width, self.num_classes);
        let hidden = self.hidden_units;
        let mut specs = Vec::new();
        let dense = |specs: &mut Vec<_>, name: &str, inputs: usize, outputs: usize| {
            specs.push((format!("{name}.weight"), vec![outputs, inputs], inputs));
            specs.push((format!("{name}.bias"), vec![outputs], inputs));
        };
        match self.architecture {
            Architecture::SmallCnn => {
                let (c1, c2) = (self.conv1_channels, self.conv2_channels);
                specs.push(("conv1.weight".into(), vec![c1, 1, 3, 3], 9));
                specs.push(("conv1.bias".into(), vec![c1], 9));
                specs.push(("conv2.weight".into(), vec![c2, c1, 3, 3], 9 * c1));
                specs.push(("conv2.bias".into(), vec![c2], 9 * c1));
                let flat = c2 * (h / 2 / 2) * (w / 2 / 2);
                dense(&mut specs, "fc1", flat, hidden);
                dense(&mut specs, "head", hidden, k);
            }
            Architecture::Mlp => {
                dense(&mut specs, "fc1", h * w, hidden);
                dense(&mut specs, "head", hidden, k);
            }
            Architecture::Linear => dense(&mut specs, "head", h * w, k),
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let (h, w, k) = (self.input_height, self.input_width, self.num_classes);
        let hidden = self.hidden_units;
        match self.architecture {
            Architecture::SmallCnn => {
                let (c1, c2) = (self.conv1_channels, self.conv2_channels);
                let (h2, w2) = (h / 2, w / 2);
                vec![
                    Layer::Conv {
                        param: 0,
                        in_ch: 1,
                        out_ch: c1,
                        h,
                        w,
                    },
                    Layer::Relu,
                    Layer::MaxPool { ch: c1, h, w },
                    Layer::Conv {
                        param: 2,
                        in_ch: c1,
                        out_ch: c2,
                        h: h2,
                        w: w2,
                    },
                    Layer::Relu,
                    Layer::MaxPool {
                        ch: c2,
                        h: h2,
                        w: w2,
                    },
                    Layer::Dense {
                        param: 4,
                        inputs: c2 * (h2 / 2) * (w2 / 2),
                        outputs: hidden,
                    },
                    Layer::Relu,
                    Layer::Dense {
                        param: 6,
                        inputs: hidden,
                        outputs: k,
                    },
                ]
            }
            Architecture::Mlp => vec![
                Layer::Dense {
                    param: 0,
                    inputs: h * w,
                    outputs: hidden,
                },
                Layer::Relu,
                Layer::Dense {
                    param: 2,
                    inputs: hidden,
                    outputs: k,
                },
            ],
            Architecture::Linear => vec![Layer::Dense {
                param: 0,
                inputs: h * w,
                outputs: k,
            }],
        }
    }
}

/// A named, row-major array of weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All weights of a classifier, tied to the config that determines their shapes.
///
/// Gradients with respect to the parameters use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Validates names and shapes against the config.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if name != &t.name || shape != &t.shape {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {} with shape {:?}",
                    t.name, t.shape, name, shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Format(format!(
                    "parameter {} has wrong length",
                    t.name
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(name, shape, _)| Tensor::zeros(name, shape))
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over every entry.
    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Returns a copy with one parameter array replaced; used by tests and tooling.
    pub fn with_tensor(&self, name: &str, data: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        let t = out
            .tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Input(format!("no parameter named {name}")))?;
        if t.data.len() != data.len() {
            return Err(Error::Input(format!(
                "parameter {name} has {} entries, got {}",
                t.data.len(),
                data.len()
            )));
        }
        t.data = data;
        Ok(out)
    }
}

/// Logits, softmax probabilities and the arg-max class of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        let predicted_class = argmax(&logits);
        Self {
            logits,
            probabilities,
            predicted_class,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of one logit vector against a label.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let specs = config.param_specs();
    let last_weight = specs.len() - 2;
    let tensors = specs
        .into_iter()
        .enumerate()
        .map(|(idx, (name, shape, fan_in))| {
            let mut t = Tensor::zeros(name, shape);
            if t.name.ends_with(".weight") {
                // He scaling ahead of ReLU, LeCun scaling on the head.
                let gain = if idx == last_weight { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = derived_rng(config.seed, &format!("init/{}", t.name));
                for v in &mut t.data {
                    *v = normal.sample(&mut rng);
                }
            }
            t
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv {
        param: usize,
        in_ch: usize,
        out_ch: usize,
        h: usize,
        w: usize,
    },
    Relu,
    MaxPool {
        ch: usize,
        h: usize,
        w: usize,
    },
    Dense {
        param: usize,
        inputs: usize,
        outputs: usize,
    },
}

/// Activations kept for the backward pass.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pool_routes: Vec<Vec<usize>>,
}

/// A parameter set bound to its layer plan.
pub(crate) struct Network<'a> {
    params: &'a ModelParams,
    layers: Vec<Layer>,
}

impl<'a> Network<'a> {
    pub(crate) fn new(params: &'a ModelParams) -> Self {
        Self {
            layers: params.config.layers(),
            params,
        }
    }

    fn weights(&self, param: usize) -> (&[f64], &[f64]) {
        let t = &self.params.tensors;
        (&t[param].data, &t[param + 1].data)
    }

    fn check_image(&self, image: &Array2<f64>) -> Result<Vec<f64>> {
        let cfg = &self.params.config;
        if image.dim() != (cfg.input_height, cfg.input_width) {
            return Err(Error::Input(format!(
                "image is {:?}, model expects ({}, {})",
                image.dim(),
                cfg.input_height,
                cfg.input_width
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image contains non-finite pixels".into()));
        }
        Ok(image.iter().copied().collect())
    }

    fn run(&self, x: Vec<f64>, keep_trace: bool) -> (Vec<f64>, Option<Trace>) {
        let mut trace = Trace {
            inputs: Vec::new(),
            pool_routes: Vec::new(),
        };
        let mut current = x;
        for layer in &self.layers {
            let mut routes = Vec::new();
            let next = match *layer {
                Layer::Conv {
                    param,
                    in_ch,
                    out_ch,
                    h,
                    w,
                } => {
                    let (weight, bias) = self.weights(param);
                    conv3x3_forward(&current, weight, bias, in_ch, out_ch, h, w)
                }
                Layer::Relu => current.iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool { ch, h, w } => {
                    let (out, r) = maxpool2_forward(&current, ch, h, w);
                    routes = r;
                    out
                }
                Layer::Dense {
                    param,
                    inputs,
                    outputs,
                } => {
                    let (weight, bias) = self.weights(param);
                    dense_forward(&current, weight, bias, inputs, outputs)
                }
            };
            if keep_trace {
                trace.inputs.push(std::mem::replace(&mut current, next));
                trace.pool_routes.push(routes);
            } else {
                current = next;
            }
        }
        (current, keep_trace.then_some(trace))
    }

    /// Propagates `dlogits` back through the network, accumulating parameter
    /// gradients into `grads` when given and returning the input gradient when
    /// `want_input` is set.
    fn backward(
        &self,
        trace: &Trace,
        dlogits: Vec<f64>,
        mut grads: Option<&mut ModelParams>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut upstream = dlogits;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[idx];
            let need_dx = want_input || idx > 0;
            upstream = match *layer {
                Layer::Conv {
                    param,
                    in_ch,
                    out_ch,
                    h,
                    w,
                } => {
                    let (weight, _) = self.weights(param);
                    if let Some(g) = grads.as_deref_mut() {
                        let (gw, gb) = split_pair(&mut g.tensors, param);
                        conv3x3_param_grad(input, &upstream, gw, gb, in_ch, out_ch, h, w);
                    }
                    if !need_dx {
                        return None;
                    }
                    conv3x3_input_grad(&upstream, weight, in_ch, out_ch, h, w)
                }
                Layer::Relu => input
                    .iter()
                    .zip(&upstream)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
                Layer::MaxPool { ch, h, w } => {
                    let mut dx = vec![0.0; ch * h * w];
                    for (&src, &d) in trace.pool_routes[idx].iter().zip(&upstream) {
                        dx[src] += d;
                    }
                    dx
                }
                Layer::Dense {
                    param,
                    inputs,
                    outputs,
                } => {
                    let (weight, _) = self.weights(param);
                    if let Some(g) = grads.as_deref_mut() {
                        let (gw, gb) = split_pair(&mut g.tensors, param);
                        for o in 0..outputs {
                            let d = upstream[o];
                            gb[o] += d;
                            let row = &mut gw[o * inputs..(o + 1) * inputs];
                            for (gv, &xv) in row.iter_mut().zip(input) {
                                *gv += d * xv;
                            }
                        }
                    }
                    if !need_dx {
                        return None;
                    }
                    let mut dx = vec![0.0; inputs];
                    for o in 0..outputs {
                        let d = upstream[o];
                        let row = &weight[o * inputs..(o + 1) * inputs];
                        for (dv, &wv) in dx.iter_mut().zip(row) {
                            *dv += d * wv;
                        }
                    }
                    dx
                }
            };
        }
        Some(upstream)
    }

    pub(crate) fn logits(&self, image: &Array2<f64>) -> Result<Vec<f64>> {
        let x = self.check_image(image)?;
        Ok(self.run(x, false).0)
    }

    /// Loss and input gradient of a single sample.
    pub(crate) fn loss_and_input_grad(
        &self,
        image: &Array2<f64>,
        label: usize,
    ) -> Result<(f64, Prediction, Array2<f64>)> {
        self.check_label(label)?;
        let x = self.check_image(image)?;
        let (logits, trace) = self.run(x, true);
        let trace = trace.expect("trace requested");
        let loss = cross_entropy(&logits, label);
        let prediction = Prediction::from_logits(logits);
        let mut dlogits = prediction.probabilities.clone();
        dlogits[label] -= 1.0;
        let dx = self
            .backward(&trace, dlogits, None, true)
            .expect("input gradient requested");
        let grad = Array2::from_shape_vec(image.dim(), dx).expect("shape preserved");
        Ok((loss, prediction, grad))
    }

    /// Adds `scale · ∇θ loss(image, label)` into `grads` and returns the loss.
    pub(crate) fn accumulate_param_grad(
        &self,
        image: &Array2<f64>,
        label: usize,
        scale: f64,
        grads: &mut ModelParams,
    ) -> Result<f64> {
        self.check_label(label)?;
        let x = self.check_image(image)?;
        let (logits, trace) = self.run(x, true);
        let trace = trace.expect("trace requested");
        let loss = cross_entropy(&logits, label);
        let mut dlogits = softmax(&logits);
        dlogits[label] -= 1.0;
        for d in &mut dlogits {
            *d *= scale;
        }
        self.backward(&trace, dlogits, Some(grads), false);
        Ok(loss)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.params.config.num_classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                self.params.config.num_classes
            )));
        }
        Ok(())
    }
}

fn split_pair(tensors: &mut [Tensor], param: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = tensors[param..].split_at_mut(1);
    (&mut a[0].data, &mut b[0].data)
}

fn dense_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    inputs: usize,
    outputs: usize,
) -> Vec<f64> {
    (0..outputs)
        .map(|o| {
            let row = &weight[o * inputs..(o + 1) * inputs];
            bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

/// Output rows `r` for which `r + kr - 1` is a valid source row.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let start = if k == 0 { 1 } else { 0 };
    let end = if k == 2 { n - 1 } else { n };
    (start, end.max(start))
}

fn conv3x3_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut y = vec![0.0; out_ch * plane];
    for o in 0..out_ch {
        let yo = &mut y[o * plane..(o + 1) * plane];
        yo.fill(bias[o]);
        for i in 0..in_ch {
            let xi = &x[i * plane..(i + 1) * plane];
            let kernel = &weight[(o * in_ch + i) * 9..(o * in_ch + i + 1) * 9];
            for kr in 0..3 {
                let (r0, r1) = valid_range(kr, h);
                for kc in 0..3 {
                    let kv = kernel[kr * 3 + kc];
                    let (c0, c1) = valid_range(kc, w);
                    for r in r0..r1 {
                        let src = (r + kr - 1) * w;
                        let dst = &mut yo[r * w + c0..r * w + c1];
                        let s = &xi[src + c0 + kc - 1..src + c1 + kc - 1];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += kv * v;
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_param_grad(
    x: &[f64],
    dy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for o in 0..out_ch {
        let dyo = &dy[o * plane..(o + 1) * plane];
        gb[o] += dyo.iter().sum::<f64>();
        for i in 0..in_ch {
            let xi = &x[i * plane..(i + 1) * plane];
            let base = (o * in_ch + i) * 9;
            for kr in 0..3 {
                let (r0, r1) = valid_range(kr, h);
                for kc in 0..3 {
                    let (c0, c1) = valid_range(kc, w);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let src = (r + kr - 1) * w;
                        let d = &dyo[r * w + c0..r * w + c1];
                        let s = &xi[src + c0 + kc - 1..src + c1 + kc - 1];
                        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[base + kr * 3 + kc] += acc;
                }
            }
        }
    }
}

fn conv3x3_input_grad(
    dy: &[f64],
    weight: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut dx = vec![0.0; in_ch * plane];
    for o in 0..out_ch {
        let dyo = &dy[o * plane..(o + 1) * plane];
        for i in 0..in_ch {
            let dxi = &mut dx[i * plane..(i + 1) * plane];
            let kernel = &weight[(o * in_ch + i) * 9..(o * in_ch + i + 1) * 9];
            for kr in 0..3 {
                let (r0, r1) = valid_range(kr, h);
                for kc in 0..3 {
                    let kv = kernel[kr * 3 + kc];
                    let (c0, c1) = valid_range(kc, w);
                    for r in r0..r1 {
                        let src = (r + kr - 1) * w;
                        let d = &dyo[r * w + c0..r * w + c1];
                        let t = &mut dxi[src + c0 + kc - 1..src + c1 + kc - 1];
                        for (tv, &dv) in t.iter_mut().zip(d) {
                            *tv += kv * dv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 max pooling with stride 2; `routes[j]` is the flat source index of output `j`.
fn maxpool2_forward(x: &[f64], ch: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut routes = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        let base = c * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let mut best = base + 2 * r * w + 2 * col;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * r + dr) * w + 2 * col + dc;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                routes.push(best);
            }
        }
    }
    (out, routes)
}

pub fn forward(params: &ModelParams, images: &[Array2<f64>]) -> Result<Vec<Prediction>> {
    let net = Network::new(params);
    images
        .iter()
        .map(|img| net.logits(img).map(Prediction::from_logits))
        .collect()
}

fn check_batch(images: &[Array2<f64>], labels: &[usize]) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch.
pub fn loss(params: &ModelParams, images: &[Array2<f64>], labels: &[usize]) -> Result<f64> {
    check_batch(images, labels)?;
    let net = Network::new(params);
    let mut total = 0.0;
    for (img, &label) in images.iter().zip(labels) {
        net.check_label(label)?;
        total += cross_entropy(&net.logits(img)?, label);
    }
    Ok(total / images.len() as f64)
}

pub fn grad_input(params: &ModelParams, image: &Array2<f64>, label: usize) -> Result<Array2<f64>> {
    Network::new(params)
        .loss_and_input_grad(image, label)
        .map(|(_, _, g)| g)
}

/// Loss, prediction and input gradient in one forward/backward pass.
pub fn loss_and_grad_input(
    params: &ModelParams,
    image: &Array2<f64>,
    label: usize,
) -> Result<(f64, Prediction, Array2<f64>)> {
    Network::new(params).loss_and_input_grad(image, label)
}

/// Gradient of the mean batch loss with respect to every parameter.
pub fn grad_params(
    params: &ModelParams,
    images: &[Array2<f64>],
    labels: &[usize],
) -> Result<ModelParams> {
    loss_and_grad_params(params, images, labels).map(|(_, g)| g)
}

pub fn loss_and_grad_params(
    params: &ModelParams,
    images: &[Array2<f64>],
    labels: &[usize],
) -> Result<(f64, ModelParams)> {
    check_batch(images, labels)?;
    let net = Network::new(params);
    let mut grads = ModelParams::zeros_like(params.config());
    let scale = 1.0 / images.len() as f64;
    let mut total = 0.0;
    for (img, &label) in images.iter().zip(labels) {
        total += net.accumulate_param_grad(img, label, scale, &mut grads)?;
    }
    Ok((total * scale, grads))
}
