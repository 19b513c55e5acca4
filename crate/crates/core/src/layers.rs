//! Layers with paired forward/backward passes, plus the softmax and
//! `1/|C|`-normalised cross-entropy head.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{self, gemm, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Declarative description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    ReLU,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::ReLU => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("{} layer: {what}", self.kind())));
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if out_channels == 0 {
                    return bad("out channels must be ≥ 1");
                }
                if kernel == 0 {
                    return bad("kernel size must be ≥ 1");
                }
                if stride == 0 {
                    return bad("stride must be ≥ 1");
                }
            }
            LayerSpec::Dense { out_features } if out_features == 0 => {
                return bad("out features must be ≥ 1");
            }
            LayerSpec::MaxPool { window, stride } if window == 0 || stride == 0 => {
                return bad("window and stride must be ≥ 1");
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample output dimensions for per-sample input `input` (no batch axis).
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let g = conv_geometry(1, input, out_channels, kernel, stride, padding)?;
                Ok(vec![out_channels, g.out_h, g.out_w])
            }
            LayerSpec::Dense { out_features } => {
                if input.len() != 1 {
                    return Err(Error::Dimension(format!(
                        "dense layer needs a flat input, got {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::MaxPool { window, stride } => {
                let mut dims = vec![1];
                dims.extend_from_slice(input);
                let out = tensor::pool_output_dims(&dims, window, stride)?;
                Ok(out[1..].to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

impl fmt::Display for LayerSpec {
    /// The config-file form, e.g. `conv out=20 kernel=5 stride=1 pad=0`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "conv out={out_channels} kernel={kernel} stride={stride} pad={padding}"
            ),
            LayerSpec::Dense { out_features } => write!(f, "dense out={out_features}"),
            LayerSpec::ReLU => write!(f, "relu"),
            LayerSpec::MaxPool { window, stride } => {
                write!(f, "maxpool window={window} stride={stride}")
            }
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

fn conv_geometry(
    batch: usize,
    input: &[usize],
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if input.len() != 3 {
        return Err(Error::Dimension(format!(
            "conv layer needs a [C,H,W] input, got {input:?}"
        )));
    }
    ConvGeometry::new(
        &[batch, input[0], input[1], input[2]],
        &[out_channels, input[0], kernel, kernel],
        stride,
        padding,
    )
}

/// Shape and initialisation rule for one parameter tensor a layer owns.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub dims: Vec<usize>,
    /// `Some(fan_in)` for weights (uniform ±√(6/fan_in)), `None` for zero-initialised biases.
    pub fan_in: Option<usize>,
}

impl ParamDecl {
    pub fn init(&self, rng: &mut impl Rng) -> Result<Tensor> {
        match self.fan_in {
            None => Tensor::zeros(self.dims.clone()),
            Some(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let n = self.dims.iter().product();
                let data = (0..n)
                    .map(|_| rng.gen_range(-bound..bound) as f64)
                    .collect();
                Tensor::new(self.dims.clone(), data)
            }
        }
    }
}

/// A layer bound to its input shape and its slots in a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    name: String,
    spec: LayerSpec,
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    params: Vec<ParamId>,
}

/// Forward values a layer saves for its backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(Tensor),
    Pool { input_dims: Vec<usize>, argmax: Vec<usize> },
    Shape(Vec<usize>),
}

impl Layer {
    /// Binds `spec` to a per-sample input shape. Parameter slots are
    /// numbered from `*next_param`, which is advanced past them; the
    /// matching declarations are returned so the caller can build a store
    /// in the same order.
    pub fn new(
        name: impl Into<String>,
        spec: LayerSpec,
        input_dims: &[usize],
        next_param: &mut usize,
    ) -> Result<(Layer, Vec<ParamDecl>)> {
        let name = name.into();
        let output_dims = spec
            .output_dims(input_dims)
            .map_err(|e| Error::Dimension(format!("layer {name} ({spec}): {e}")))?;
        let decls = match spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = input_dims[0] * kernel * kernel;
                vec![
                    ParamDecl {
                        name: format!("{name}.weight"),
                        dims: vec![out_channels, input_dims[0], kernel, kernel],
                        fan_in: Some(fan_in),
                    },
                    ParamDecl {
                        name: format!("{name}.bias"),
                        dims: vec![out_channels],
                        fan_in: None,
                    },
                ]
            }
            LayerSpec::Dense { out_features } => vec![
                ParamDecl {
                    name: format!("{name}.weight"),
                    dims: vec![input_dims[0], out_features],
                    fan_in: Some(input_dims[0]),
                },
                ParamDecl {
                    name: format!("{name}.bias"),
                    dims: vec![out_features],
                    fan_in: None,
                },
            ],
            _ => Vec::new(),
        };
        let params = (0..decls.len())
            .map(|i| ParamId(*next_param + i))
            .collect();
        *next_param += decls.len();
        Ok((
            Layer {
                name,
                spec,
                input_dims: input_dims.to_vec(),
                output_dims,
                params,
            },
            decls,
        ))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Multiply-accumulates for one sample.
    pub fn macs(&self) -> u64 {
        match self.spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => conv_geometry(1, &self.input_dims, out_channels, kernel, stride, padding)
                .map(|g| g.macs())
                .unwrap_or(0),
            LayerSpec::Dense { out_features } => (self.input_dims[0] * out_features) as u64,
            _ => 0,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let dims = input.dims();
        if dims.len() != self.input_dims.len() + 1 || dims[1..] != self.input_dims[..] {
            return Err(Error::Dimension(format!(
                "layer {} ({}) expects per-sample input {:?}, got {}",
                self.name,
                self.spec,
                self.input_dims,
                input.shape()
            )));
        }
        Ok(())
    }

    fn weight_bias<'a>(&self, params: &'a ParameterStore) -> (&'a Tensor, &'a Tensor) {
        (params.value(self.params[0]), params.value(self.params[1]))
    }

    /// Runs the layer on a batch. In `Mode::Train` the returned cache holds
    /// what [`Layer::backward`] needs; in `Mode::Infer` it is `None`.
    pub fn forward(
        &self,
        params: &ParameterStore,
        input: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Option<LayerCache>)> {
        self.check_input(input)?;
        let batch = input.dims()[0];
        let train = mode == Mode::Train;
        match self.spec {
            LayerSpec::Conv {
                stride, padding, ..
            } => {
                let (w, b) = self.weight_bias(params);
                let out = tensor::conv2d(input, w, b, stride, padding)?;
                Ok((out, train.then(|| LayerCache::Input(input.clone()))))
            }
            LayerSpec::Dense { out_features } => {
                let (w, b) = self.weight_bias(params);
                let in_features = self.input_dims[0];
                if w.dims() != [in_features, out_features] || b.dims() != [out_features] {
                    return Err(Error::Dimension(format!(
                        "layer {}: parameters {} / {} do not fit {in_features}→{out_features}",
                        self.name,
                        w.shape(),
                        b.shape()
                    )));
                }
                let mut out = Vec::with_capacity(batch * out_features);
                for _ in 0..batch {
                    out.extend_from_slice(b.data());
                }
                gemm(
                    batch,
                    in_features,
                    out_features,
                    input.data(),
                    false,
                    w.data(),
                    false,
                    &mut out,
                    true,
                );
                let out = Tensor::new([batch, out_features], out)?;
                Ok((out, train.then(|| LayerCache::Input(input.clone()))))
            }
            LayerSpec::ReLU => {
                let data = input.data().iter().map(|&v| v.max(0.0)).collect();
                let out = Tensor::new(input.dims().to_vec(), data)?;
                Ok((out, train.then(|| LayerCache::Input(input.clone()))))
            }
            LayerSpec::MaxPool { window, stride } => {
                let (out, argmax) = tensor::maxpool2d(input, window, stride)?;
                let cache = train.then(|| LayerCache::Pool {
                    input_dims: input.dims().to_vec(),
                    argmax,
                });
                Ok((out, cache))
            }
            LayerSpec::Flatten => {
                let cache = train.then(|| LayerCache::Shape(input.dims().to_vec()));
                let out = input.clone().reshape([batch, self.output_dims[0]])?;
                Ok((out, cache))
            }
        }
    }

    /// Back-propagates `grad_out`, ACCUMULATING parameter gradients into
    /// `params`, and returns the gradient with respect to the layer input.
    pub fn backward(
        &self,
        params: &mut ParameterStore,
        cache: Option<&LayerCache>,
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        let cache = cache.ok_or_else(|| {
            Error::State(format!(
                "layer {}: backward called without a train-mode forward cache",
                self.name
            ))
        })?;
        let mismatch = || {
            Error::State(format!(
                "layer {}: cache does not belong to a {} layer",
                self.name,
                self.spec.kind()
            ))
        };
        match (self.spec, cache) {
            (LayerSpec::Conv { stride, padding, .. }, LayerCache::Input(input)) => {
                let grads = tensor::conv2d_backward(
                    input,
                    params.value(self.params[0]),
                    grad_out,
                    stride,
                    padding,
                )?;
                params.accumulate_grad(self.params[0], &grads.kernel)?;
                params.accumulate_grad(self.params[1], &grads.bias)?;
                Ok(grads.input)
            }
            (LayerSpec::Dense { out_features }, LayerCache::Input(input)) => {
                let batch = input.dims()[0];
                let in_features = self.input_dims[0];
                if grad_out.dims() != [batch, out_features] {
                    return Err(Error::Dimension(format!(
                        "layer {}: grad {} does not match output [{batch}×{out_features}]",
                        self.name,
                        grad_out.shape()
                    )));
                }
                let mut d_w = vec![0.0; in_features * out_features];
                gemm(
                    in_features,
                    batch,
                    out_features,
                    input.data(),
                    true,
                    grad_out.data(),
                    false,
                    &mut d_w,
                    false,
                );
                let mut d_b = vec![0.0; out_features];
                for row in grad_out.rows() {
                    for (acc, g) in d_b.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                let mut d_x = vec![0.0; batch * in_features];
                gemm(
                    batch,
                    out_features,
                    in_features,
                    grad_out.data(),
                    false,
                    params.value(self.params[0]).data(),
                    true,
                    &mut d_x,
                    false,
                );
                params.accumulate_grad(self.params[0], &Tensor::new([in_features, out_features], d_w)?)?;
                params.accumulate_grad(self.params[1], &Tensor::new([out_features], d_b)?)?;
                Tensor::new(input.dims().to_vec(), d_x)
            }
            (LayerSpec::ReLU, LayerCache::Input(input)) => {
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(input.dims().to_vec(), data)
            }
            (LayerSpec::MaxPool { .. }, LayerCache::Pool { input_dims, argmax }) => {
                tensor::maxpool2d_backward(input_dims, argmax, grad_out)
            }
            (LayerSpec::Flatten, LayerCache::Shape(dims)) => grad_out.clone().reshape(dims.clone()),
            _ => Err(mismatch()),
        }
    }
}

/// Saved forward values for a stack of layers, one slot per layer.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    slots: Vec<Option<LayerCache>>,
}

impl ActivationCache {
    pub fn push(&mut self, cache: Option<LayerCache>) {
        self.slots.push(cache);
    }

    pub fn get(&self, layer: usize) -> Option<&LayerCache> {
        self.slots.get(layer).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Row-wise softmax of `[N, C]` logits, max-shifted for stability.
pub fn softmax(logits: &Tensor) -> Tensor {
    let width = *logits.dims().last().expect("tensor has at least one dim");
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &z in row {
            let e = (z - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    Tensor::new(logits.dims().to_vec(), out).expect("same shape as logits")
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over the batch of `-(1/|C|)·Σ_c y_c ln ŷ_c`, together with the
/// gradient of that loss with respect to the logits that produced `probs`:
/// `(ŷ − y)/(|C|·N)`.
pub fn cross_entropy(probs: &Tensor, one_hot: &Tensor) -> Result<(f64, Tensor)> {
    if probs.shape() != one_hot.shape() || probs.dims().len() != 2 {
        return Err(Error::Dimension(format!(
            "cross_entropy: predictions {} vs labels {}",
            probs.shape(),
            one_hot.shape()
        )));
    }
    let (n, c) = (probs.dims()[0], probs.dims()[1]);
    let mut loss = 0.0;
    for (i, (p_row, y_row)) in probs.rows().zip(one_hot.rows()).enumerate() {
        let ones = y_row.iter().filter(|&&v| v == 1.0).count();
        let zeros = y_row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Validation(format!("label row {i} is not one-hot")));
        }
        let truth = y_row.iter().position(|&v| v == 1.0).expect("checked one-hot");
        loss -= p_row[truth].clamp(PROB_FLOOR, 1.0).ln() / c as f64;
    }
    let scale = 1.0 / (c as f64 * n as f64);
    let grad = probs
        .data()
        .iter()
        .zip(one_hot.data())
        .map(|(p, y)| (p - y) * scale)
        .collect();
    Ok((loss / n as f64, Tensor::new([n, c], grad)?))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros([labels.len().max(1), classes])?;
    if labels.is_empty() {
        return Err(Error::Validation("no labels".into()));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!("label {l} outside 0..{classes}")));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
