//! A small sequential network engine: dense, 2-D convolution, max pooling,
//! ReLU and flatten layers, trained with softmax cross-entropy.
//!
//! Backpropagation runs layer by layer in reverse over the cached forward
//! intermediates. The input of every ReLU is kept in the [`ForwardTrace`], so
//! exposing preactivations for monitored layers costs nothing extra.

pub(crate) mod kernels;

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Index of a layer in the network's layer list.
///
/// Weight decay and OUI values are keyed by the id of the parameterized
/// layer (dense or conv) whose output a monitored ReLU consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub usize);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool2d {
        kernel: usize,
        /// Defaults to `kernel`.
        #[serde(default)]
        stride: Option<usize>,
        #[serde(default)]
        padding: usize,
    },
    Relu {
        #[serde(default)]
        monitored: bool,
    },
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn max_pool(kernel: usize) -> Self {
        LayerSpec::MaxPool2d {
            kernel,
            stride: None,
            padding: 0,
        }
    }

    pub fn relu(monitored: bool) -> Self {
        LayerSpec::Relu { monitored }
    }
}

/// Weight and bias of one parameterized layer. Also used for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    out_shapes: Vec<Vec<usize>>,
    params: BTreeMap<LayerId, LayerParams>,
    /// Monitored ReLU index -> parameterized layer producing its input.
    monitors: BTreeMap<usize, LayerId>,
}

fn layer_err(index: usize, spec: &LayerSpec, msg: impl fmt::Display) -> crate::Error {
    config_err(format!("layer {index} ({}): {msg}", spec.name()))
}

fn conv_geom(
    index: usize,
    spec: &LayerSpec,
    input: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let [channels, height, width] = *input else {
        return Err(layer_err(index, spec, format!("expected [C, H, W] input, got {input:?}")));
    };
    if kernel == 0 || stride == 0 {
        return Err(layer_err(index, spec, "kernel and stride must be positive"));
    }
    if padding >= kernel {
        return Err(layer_err(index, spec, "padding must be smaller than the kernel"));
    }
    if height + 2 * padding < kernel || width + 2 * padding < kernel {
        return Err(layer_err(index, spec, format!("kernel {kernel} larger than padded input {input:?}")));
    }
    Ok(ConvGeom {
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
    })
}

impl Network {
    /// Builds a network for per-sample inputs of `input_shape`, with
    /// Kaiming-uniform weights and zero biases drawn from `seed`.
    pub fn new(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(config_err("network has no layers"));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(config_err(format!("invalid input shape {input_shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut out_shapes = Vec::with_capacity(layers.len());
        let mut params = BTreeMap::new();
        let mut monitors = BTreeMap::new();
        let mut last_param: Option<LayerId> = None;

        for (i, spec) in layers.iter().enumerate() {
            shape = match *spec {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    if in_features == 0 || out_features == 0 {
                        return Err(layer_err(i, spec, "feature counts must be positive"));
                    }
                    if shape != [in_features] {
                        return Err(layer_err(
                            i,
                            spec,
                            format!("expected input [{in_features}], got {shape:?}"),
                        ));
                    }
                    params.insert(
                        LayerId(i),
                        kaiming(&mut rng, vec![out_features, in_features], in_features),
                    );
                    last_param = Some(LayerId(i));
                    vec![out_features]
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let g = conv_geom(i, spec, &shape, kernel, stride, padding)?;
                    if in_channels == 0 || out_channels == 0 {
                        return Err(layer_err(i, spec, "channel counts must be positive"));
                    }
                    if g.channels != in_channels {
                        return Err(layer_err(
                            i,
                            spec,
                            format!("expected {in_channels} input channels, got {shape:?}"),
                        ));
                    }
                    let fan_in = in_channels * kernel * kernel;
                    params.insert(
                        LayerId(i),
                        kaiming(&mut rng, vec![out_channels, in_channels, kernel, kernel], fan_in),
                    );
                    last_param = Some(LayerId(i));
                    vec![out_channels, g.out_height(), g.out_width()]
                }
                LayerSpec::MaxPool2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    let g = conv_geom(i, spec, &shape, kernel, stride.unwrap_or(kernel), padding)?;
                    vec![g.channels, g.out_height(), g.out_width()]
                }
                LayerSpec::Relu { monitored } => {
                    if monitored {
                        let Some(owner) = last_param else {
                            return Err(layer_err(i, spec, "monitored ReLU has no preceding dense/conv layer"));
                        };
                        if monitors.values().any(|&o| o == owner) {
                            return Err(layer_err(
                                i,
                                spec,
                                format!("layer {owner} already feeds a monitored ReLU"),
                            ));
                        }
                        monitors.insert(i, owner);
                    }
                    shape
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            out_shapes.push(shape.clone());
        }
        if shape.len() != 1 {
            return Err(config_err(format!(
                "network output must be a vector of class logits, got per-sample shape {shape:?}"
            )));
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            out_shapes,
            params,
            monitors,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.out_shapes.last().map_or(0, |s| s[0])
    }

    pub fn params(&self) -> &BTreeMap<LayerId, LayerParams> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<LayerId, LayerParams> {
        &mut self.params
    }

    /// Overwrites one layer's parameters; shapes must match.
    pub fn set_params(&mut self, id: LayerId, weight: Vec<f64>, bias: Vec<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(&id)
            .ok_or_else(|| config_err(format!("layer {id} has no parameters")))?;
        if weight.len() != p.weight.len() || bias.len() != p.bias.len() {
            return Err(config_err(format!("parameter size mismatch for layer {id}")));
        }
        p.weight.values_mut().copy_from_slice(&weight);
        p.bias.values_mut().copy_from_slice(&bias);
        Ok(())
    }

    pub fn param_layers(&self) -> Vec<LayerId> {
        self.params.keys().copied().collect()
    }

    /// Parameterized layers whose output feeds a monitored ReLU.
    pub fn monitored_layers(&self) -> Vec<LayerId> {
        let mut ids: Vec<_> = self.monitors.values().copied().collect();
        ids.sort();
        ids
    }

    pub fn is_monitored(&self, id: LayerId) -> bool {
        self.monitors.values().any(|&o| o == id)
    }

    fn input_dims(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.out_shapes[i - 1]
        }
    }

    fn geom(&self, i: usize) -> ConvGeom {
        let (kernel, stride, padding) = match self.layers[i] {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => (kernel, stride, padding),
            LayerSpec::MaxPool2d {
                kernel,
                stride,
                padding,
            } => (kernel, stride.unwrap_or(kernel), padding),
            _ => unreachable!("geometry requested for a non-spatial layer"),
        };
        let d = self.input_dims(i);
        ConvGeom {
            channels: d[0],
            height: d[1],
            width: d[2],
            kernel,
            stride,
            padding,
        }
    }
}

fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> LayerParams {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    let out = shape[0];
    LayerParams {
        weight: Tensor::new(shape, values).expect("kaiming shape"),
        bias: Tensor::zeros(vec![out]),
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    /// Input to a dense, conv or ReLU layer.
    Input(Tensor),
    Pool { argmax: Vec<usize>, input_len: usize },
    Flatten,
}

/// Result of a forward pass: logits plus everything backward needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    logits: Tensor,
    cache: Vec<LayerCache>,
    /// Owner layer -> index of the monitored ReLU whose cached input is the
    /// preactivation. Empty unless the pass ran with capture enabled.
    captured: BTreeMap<LayerId, usize>,
    counts: BTreeMap<LayerId, FusedCounts>,
    capture_time: Duration,
}

/// Per-unit positive counts gathered inside the ReLU pass.
#[derive(Clone, Debug)]
pub(crate) struct FusedCounts {
    pub counts: Vec<u64>,
    pub non_finite: bool,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn batch_size(&self) -> usize {
        self.logits.batch()
    }

    /// Preactivations of a monitored layer as a `[B, ...]` tensor; the
    /// trailing dims flatten to the layer's `d` units.
    pub fn preactivation(&self, layer: LayerId) -> Option<&Tensor> {
        let idx = *self.captured.get(&layer)?;
        match &self.cache[idx] {
            LayerCache::Input(t) => Some(t),
            _ => None,
        }
    }

    pub(crate) fn fused_counts(&self, layer: LayerId) -> Option<&FusedCounts> {
        self.counts.get(&layer)
    }

    /// Wall time spent counting active units during the pass. Zero without
    /// capture.
    pub fn capture_time(&self) -> Duration {
        self.capture_time
    }

    /// All captured preactivations in layer order.
    pub fn preactivations(&self) -> impl Iterator<Item = (LayerId, &Tensor)> + '_ {
        self.captured
            .keys()
            .filter_map(move |&id| self.preactivation(id).map(|t| (id, t)))
    }
}

fn check_input(net: &Network, batch: &Tensor) -> Result<()> {
    if batch.sample_shape() != net.input_shape() {
        return Err(layer_err(
            0,
            &net.layers[0],
            format!(
                "expected per-sample input {:?}, got batch shape {:?}",
                net.input_shape(),
                batch.shape()
            ),
        ));
    }
    Ok(())
}

struct Pass {
    out: Tensor,
    cache: Vec<LayerCache>,
    counts: BTreeMap<LayerId, FusedCounts>,
    capture_time: Duration,
}

fn run(net: &Network, batch: &Tensor, keep_cache: bool, counting: bool) -> Result<Pass> {
    check_input(net, batch)?;
    let b = batch.batch();
    let mut cur = batch.clone();
    let mut cache = Vec::with_capacity(if keep_cache { net.layers.len() } else { 0 });
    let mut fused = BTreeMap::new();
    let mut capture_time = Duration::ZERO;
    for (i, spec) in net.layers.iter().enumerate() {
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&net.out_shapes[i]);
        let (next, entry) = match *spec {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let p = &net.params[&LayerId(i)];
                let y = kernels::dense_forward(
                    cur.values(),
                    b,
                    p.weight.values(),
                    p.bias.values(),
                    in_features,
                    out_features,
                );
                (Tensor::new(out_shape, y)?, None)
            }
            LayerSpec::Conv2d { out_channels, .. } => {
                let p = &net.params[&LayerId(i)];
                let y = kernels::conv_forward(
                    cur.values(),
                    b,
                    &net.geom(i),
                    p.weight.values(),
                    p.bias.values(),
                    out_channels,
                );
                (Tensor::new(out_shape, y)?, None)
            }
            LayerSpec::MaxPool2d { .. } => {
                let (y, argmax) = kernels::maxpool_forward(cur.values(), b, &net.geom(i));
                let input_len = cur.len();
                (
                    Tensor::new(out_shape, y)?,
                    Some(LayerCache::Pool { argmax, input_len }),
                )
            }
            LayerSpec::Relu { .. } => {
                let x = cur.values();
                let mut y = vec![0.0; x.len()];
                match counting.then(|| net.monitors.get(&i)).flatten() {
                    Some(&owner) => {
                        kernels::relu(x, &mut y);
                        // count while the preactivations are still cache-resident
                        let t0 = Instant::now();
                        let d = x.len() / b;
                        let mut counts = vec![0u64; d];
                        let mut non_finite = false;
                        for row in x.chunks_exact(d) {
                            non_finite |= kernels::count_positive(row, &mut counts);
                        }
                        capture_time += t0.elapsed();
                        fused.insert(owner, FusedCounts { counts, non_finite });
                    }
                    None => kernels::relu(x, &mut y),
                }
                (Tensor::new(out_shape, y)?, None)
            }
            LayerSpec::Flatten => {
                let flat = std::mem::replace(&mut cur, Tensor::zeros(vec![1])).reshape(out_shape)?;
                (flat, Some(LayerCache::Flatten))
            }
        };
        if keep_cache {
            let prev = std::mem::replace(&mut cur, next);
            cache.push(entry.unwrap_or(LayerCache::Input(prev)));
        } else {
            cur = next;
        }
    }
    Ok(Pass {
        out: cur,
        cache,
        counts: fused,
        capture_time,
    })
}

/// Forward pass that caches intermediates for [`backward`]. With `capture`,
/// the preactivation of every monitored layer is exposed on the trace
/// exactly as it entered the ReLU. Capture never changes the logits.
pub fn forward(net: &Network, batch: &Tensor, capture: bool) -> Result<ForwardTrace> {
    let pass = run(net, batch, true, capture)?;
    let captured = if capture {
        net.monitors.iter().map(|(&relu, &owner)| (owner, relu)).collect()
    } else {
        BTreeMap::new()
    };
    Ok(ForwardTrace {
        logits: pass.out,
        cache: pass.cache,
        captured,
        counts: pass.counts,
        capture_time: pass.capture_time,
    })
}

/// Inference-only forward pass: logits without cached intermediates.
pub fn predict(net: &Network, batch: &Tensor) -> Result<Tensor> {
    run(net, batch, false, false).map(|p| p.out)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(input_err("empty batch"));
    }
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(input_err(format!(
            "logits shape {:?} does not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(input_err(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean softmax cross-entropy, and optionally its gradient w.r.t. logits.
fn xent(logits: &Tensor, labels: &[usize], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let b = labels.len();
    let c = logits.shape()[1];
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; b * c]);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        // clamps rounding below zero; NaN must survive, so no f64::max
        let l = lse - row[y];
        total += if l < 0.0 { 0.0 } else { l };
        if let Some(g) = grad.as_mut() {
            let gr = &mut g[i * c..(i + 1) * c];
            for (k, gk) in gr.iter_mut().enumerate() {
                *gk = (row[k] - lse).exp() / b as f64;
            }
            gr[y] -= 1.0 / b as f64;
        }
    }
    (total / b as f64, grad)
}

/// Mean softmax cross-entropy over the batch.
pub fn loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    Ok(xent(logits, labels, false).0)
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Parameter gradients of the mean loss, plus the input gradient.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: BTreeMap<LayerId, LayerParams>,
    pub input: Tensor,
    pub loss: f64,
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.weight.values().iter().chain(p.bias.values()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            p.weight.values_mut().iter_mut().for_each(|g| *g *= factor);
            p.bias.values_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Backpropagates mean softmax cross-entropy through a trace produced by
/// [`forward`] on the same network and parameters.
pub fn backward(net: &Network, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
    check_labels(&trace.logits, labels)?;
    if trace.cache.len() != net.layers.len() {
        return Err(config_err("trace was not produced by this network"));
    }
    let b = labels.len();
    let (loss, dlogits) = xent(&trace.logits, labels, true);
    let mut grad = dlogits.expect("gradient requested");
    let mut params = BTreeMap::new();

    for (i, spec) in net.layers.iter().enumerate().rev() {
        grad = match (spec, &trace.cache[i]) {
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                LayerCache::Input(x),
            ) => {
                let p = &net.params[&LayerId(i)];
                let (dx, dw, db) = kernels::dense_backward(
                    x.values(),
                    &grad,
                    b,
                    p.weight.values(),
                    *in_features,
                    *out_features,
                );
                params.insert(LayerId(i), grads_like(p, dw, db)?);
                dx
            }
            (LayerSpec::Conv2d { out_channels, .. }, LayerCache::Input(x)) => {
                let p = &net.params[&LayerId(i)];
                let (dx, dw, db) = kernels::conv_backward(
                    x.values(),
                    &grad,
                    b,
                    &net.geom(i),
                    p.weight.values(),
                    *out_channels,
                );
                params.insert(LayerId(i), grads_like(p, dw, db)?);
                dx
            }
            (LayerSpec::MaxPool2d { .. }, LayerCache::Pool { argmax, input_len }) => {
                kernels::maxpool_backward(&grad, argmax, *input_len)
            }
            (LayerSpec::Relu { .. }, LayerCache::Input(x)) => grad
                .iter()
                .zip(x.values())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            (LayerSpec::Flatten, LayerCache::Flatten) => grad,
            _ => return Err(config_err(format!("trace does not match layer {i}"))),
        };
    }
    let mut input_shape = vec![b];
    input_shape.extend_from_slice(net.input_shape());
    Ok(Gradients {
        params,
        input: Tensor::new(input_shape, grad)?,
        loss,
    })
}

fn grads_like(p: &LayerParams, dw: Vec<f64>, db: Vec<f64>) -> Result<LayerParams> {
    Ok(LayerParams {
        weight: Tensor::new(p.weight.shape().to_vec(), dw)?,
        bias: Tensor::new(p.bias.shape().to_vec(), db)?,
    })
}
