//! Sequential CNN: layer specs, shape inference, initialization, and
//! hand-written forward/backward passes.
//!
//! Activations are NHWC. Convolution weights are laid out `(k, k, in, filters)`
//! and dense weights `(in, units)`, both row-major, so a convolution is an
//! im2col patch matrix times the flattened weight matrix.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{gemm, gemm_nt, gemm_tn, Real, Tensor};

/// Number of conv blocks in the default architecture at full resolution.
pub const DEFAULT_CONV_BLOCKS: usize = 6;
pub const DEFAULT_FILTERS: [usize; DEFAULT_CONV_BLOCKS] = [32, 64, 64, 64, 64, 64];
pub const DEFAULT_HIDDEN_UNITS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LayerSpec {
    Conv2D {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    ReLU,
    MaxPool2D {
        pool: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// (height, width, channels)
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub class_names: Vec<String>,
}

fn conv_out(input: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Valid if input >= k => Some((input - k) / stride + 1),
        Padding::Valid => None,
        Padding::Same => Some(input.div_ceil(stride)),
    }
}

/// Leading padding for `same` convolution (extra padding goes after).
fn same_pad_before(input: usize, out: usize, k: usize, stride: usize) -> usize {
    ((out - 1) * stride + k).saturating_sub(input) / 2
}

impl ModelSpec {
    /// Default architecture: up to six Conv(3×3, valid)+ReLU+MaxPool(2×2)
    /// blocks with filters `[32, 64, 64, 64, 64, 64]`, then Dense(64)+ReLU
    /// and Dense(n_classes)+Softmax. Inputs too small for all six blocks keep
    /// as many leading blocks as still produce a positive spatial extent.
    pub fn default_for(image_size: usize, class_names: Vec<String>) -> Result<ModelSpec> {
        let mut layers = Vec::new();
        let mut side = image_size;
        for &filters in DEFAULT_FILTERS.iter() {
            let after = match conv_out(side, 3, 1, Padding::Valid) {
                Some(c) if c >= 2 => (c - 2) / 2 + 1,
                _ => break,
            };
            layers.extend([
                LayerSpec::Conv2D {
                    filters,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Valid,
                },
                LayerSpec::ReLU,
                LayerSpec::MaxPool2D { pool: 2, stride: 2 },
            ]);
            side = after;
        }
        if layers.is_empty() {
            return Err(Error::Spec(format!(
                "image size {image_size} too small for a conv block"
            )));
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense {
                units: DEFAULT_HIDDEN_UNITS,
            },
            LayerSpec::ReLU,
            LayerSpec::Dense {
                units: class_names.len(),
            },
            LayerSpec::Softmax,
        ]);
        let spec = ModelSpec {
            input_shape: [image_size, image_size, 3],
            layers,
            class_names,
        };
        spec.infer_shapes()?;
        Ok(spec)
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Output shape (without batch axis) of every layer, in order.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.contains(&0) {
            return Err(Error::Spec(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Spec(format!("layer {i} ({layer:?}): {msg}"));
            shape = match *layer {
                LayerSpec::Conv2D {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("filters, kernel and stride must be positive".into()));
                    }
                    let [h, w, _] = spatial(&shape).ok_or_else(|| bad(rank3(&shape)))?;
                    let oh = conv_out(h, kernel, stride, padding);
                    let ow = conv_out(w, kernel, stride, padding);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => vec![oh, ow, filters],
                        _ => return Err(bad(format!("kernel {kernel} larger than input {h}x{w}"))),
                    }
                }
                LayerSpec::MaxPool2D { pool, stride } => {
                    if pool == 0 || stride == 0 {
                        return Err(bad("pool and stride must be positive".into()));
                    }
                    let [h, w, c] = spatial(&shape).ok_or_else(|| bad(rank3(&shape)))?;
                    match (
                        conv_out(h, pool, stride, Padding::Valid),
                        conv_out(w, pool, stride, Padding::Valid),
                    ) {
                        (Some(oh), Some(ow)) => vec![oh, ow, c],
                        _ => return Err(bad(format!("pool {pool} larger than input {h}x{w}"))),
                    }
                }
                LayerSpec::ReLU => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(bad(format!("dense needs a flat input, got {shape:?}")));
                    }
                    if units == 0 {
                        return Err(bad("units must be positive".into()));
                    }
                    vec![units]
                }
                LayerSpec::Softmax => {
                    if shape.len() != 1 {
                        return Err(bad(format!("softmax needs a flat input, got {shape:?}")));
                    }
                    shape
                }
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Full structural validation, including the classifier head.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.infer_shapes()?;
        if self.class_names.is_empty() {
            return Err(Error::Spec("no class names".into()));
        }
        let mut sorted = self.class_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.class_names.len() {
            return Err(Error::Spec("duplicate class names".into()));
        }
        let n = self.layers.len();
        match (n.checked_sub(2).map(|i| &self.layers[i]), self.layers.last()) {
            (Some(LayerSpec::Dense { units }), Some(LayerSpec::Softmax))
                if *units == self.n_classes() => {}
            _ => {
                return Err(Error::Spec(format!(
                    "model must end with Dense{{units: {}}} followed by Softmax",
                    self.n_classes()
                )))
            }
        }
        if self.layers[..n - 1]
            .iter()
            .any(|l| matches!(l, LayerSpec::Softmax))
        {
            return Err(Error::Spec("softmax is only allowed as the final layer".into()));
        }
        Ok(shapes)
    }

    pub fn input_size(&self) -> usize {
        self.input_shape[0]
    }
}

fn spatial(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [h, w, c] => Some([h, w, c]),
        _ => None,
    }
}

fn rank3(shape: &[usize]) -> String {
    format!("needs an HxWxC input, got {shape:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    /// One entry per layer; `None` for parameter-free layers.
    layers: Vec<Option<LayerParams<T>>>,
    /// Per-layer output shapes (no batch axis).
    shapes: Vec<Vec<usize>>,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training,
}

/// What backward needs from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    /// Index of the layer the pass started at.
    first: usize,
    /// `inputs[i]` is the input to layer `first + i`.
    inputs: Vec<Tensor<T>>,
    /// Per max-pool layer: flat (per-sample) index of each window's winner.
    pool_winners: Vec<Option<Vec<u32>>>,
}

impl<T> ActivationCache<T> {
    /// The recorded input to `layer`, if the pass covered it.
    pub fn layer_input(&self, layer: usize) -> Option<&Tensor<T>> {
        self.inputs.get(layer.checked_sub(self.first)?)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T = f32> {
    /// Pre-softmax scores, N×K.
    pub logits: Tensor<T>,
    /// Softmax probabilities, N×K.
    pub probs: Tensor<T>,
    pub cache: Option<ActivationCache<T>>,
}

/// Parameter gradients in declaration order (weights, then bias, per layer).
pub type Gradients<T = f32> = Vec<Tensor<T>>;

fn uniform01(rng: &mut Xoshiro256StarStar) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl<T: Real> Model<T> {
    /// He-uniform weights `U(-b, b)`, `b = sqrt(6 / fan_in)`, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut in_shape = spec.input_shape.to_vec();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (layer, out_shape) in spec.layers.iter().zip(&shapes) {
            let (w_shape, fan_in, units) = match *layer {
                LayerSpec::Conv2D {
                    filters, kernel, ..
                } => {
                    let c = in_shape[2];
                    (vec![kernel, kernel, c, filters], kernel * kernel * c, filters)
                }
                LayerSpec::Dense { units } => (vec![in_shape[0], units], in_shape[0], units),
                _ => {
                    layers.push(None);
                    in_shape = out_shape.clone();
                    continue;
                }
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights =
                Tensor::from_fn(&w_shape, |_| T::from_f64((2.0 * uniform01(&mut rng) - 1.0) * bound));
            layers.push(Some(LayerParams {
                weights,
                bias: Tensor::zeros(&[units]),
            }));
            in_shape = out_shape.clone();
        }
        Ok(Model {
            spec,
            layers,
            shapes,
            seed,
        })
    }

    /// Rebuilds a model from stored parameters (declaration order).
    pub fn from_params(spec: ModelSpec, seed: u64, params: Vec<Tensor<T>>) -> Result<Self> {
        let mut model = Self::init(spec, seed)?;
        let expected: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::Shape("parameter set does not match model spec".into()));
        }
        for (slot, p) in model.params_mut().into_iter().zip(params) {
            *slot = p;
        }
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter value".into()));
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_names(&self) -> &[String] {
        &self.spec.class_names
    }

    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams<T>> {
        self.layers.get(layer).and_then(Option::as_ref)
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> Option<&mut LayerParams<T>> {
        self.layers.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weights, &p.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weights, &mut p.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weights: p.weights.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
            shapes: self.shapes.clone(),
            seed: self.seed,
        }
    }

    pub fn forward(&self, batch: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        self.forward_with(batch, mode, Exec::default())
    }

    pub fn forward_with(&self, batch: &Tensor<T>, mode: Mode, exec: Exec) -> Result<ForwardPass<T>> {
        self.forward_range(0, batch, mode, exec)
    }

    /// Runs layers `first..` on `activation`, the input to layer `first`
    /// (as recorded by [`ActivationCache::layer_input`]). Backward needs a
    /// pass that started at layer 0.
    pub fn forward_from(&self, first: usize, activation: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        self.forward_range(first, activation, mode, Exec::default())
    }

    fn forward_range(&self, first: usize, batch: &Tensor<T>, mode: Mode, exec: Exec) -> Result<ForwardPass<T>> {
        let last = self.spec.layers.len() - 1;
        if first > last {
            return Err(Error::InvalidArgument(format!("layer {first} out of range")));
        }
        let expected: &[usize] = if first == 0 {
            &self.spec.input_shape
        } else {
            &self.shapes[first - 1]
        };
        if batch.rank() != expected.len() + 1 || batch.shape()[1..] != *expected || batch.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "batch {:?} does not match layer {first} input N x {:?}",
                batch.shape(),
                expected
            )));
        }
        let n = batch.shape()[0];
        let mut cache = (mode == Mode::Training).then(|| ActivationCache {
            first,
            inputs: Vec::with_capacity(last - first),
            pool_winners: Vec::with_capacity(last - first),
        });
        let mut x = batch.clone();
        for (i, layer) in self.spec.layers.iter().enumerate().take(last).skip(first) {
            let mut winners = None;
            let out_shape: Vec<usize> = std::iter::once(n).chain(self.shapes[i].iter().copied()).collect();
            let y = match *layer {
                LayerSpec::Conv2D {
                    stride, padding, ..
                } => {
                    let p = self.layers[i].as_ref().expect("conv params");
                    conv2d_forward(&x, &p.weights, &p.bias, stride, padding, &out_shape, exec)
                }
                LayerSpec::ReLU => x.map(|v| if v > T::zero() { v } else { T::zero() }),
                LayerSpec::MaxPool2D { pool, stride } => {
                    let (y, w) = maxpool_forward(&x, pool, stride, &out_shape, exec);
                    winners = Some(w);
                    y
                }
                LayerSpec::Flatten => x.clone().reshape(&out_shape)?,
                LayerSpec::Dense { .. } => {
                    let p = self.layers[i].as_ref().expect("dense params");
                    dense_forward(&x, &p.weights, &p.bias)
                }
                LayerSpec::Softmax => unreachable!("validated: softmax is last"),
            };
            if !y.all_finite() {
                return Err(Error::NonFiniteActivation { layer: i });
            }
            if let Some(c) = cache.as_mut() {
                c.inputs.push(std::mem::replace(&mut x, y));
                c.pool_winners.push(winners);
            } else {
                x = y;
            }
        }
        let probs = softmax_rows(&x);
        if !probs.all_finite() {
            return Err(Error::NonFiniteActivation { layer: last });
        }
        Ok(ForwardPass {
            logits: x,
            probs,
            cache,
        })
    }

    /// The piecewise-linear regime a training pass ran in: one entry per
    /// ReLU input (1 if positive) and per max-pool window (winner index).
    /// Two passes with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self, pass: &ForwardPass<T>) -> Result<Vec<u32>> {
        let cache = pass.cache.as_ref().ok_or(Error::MissingCache)?;
        let mut pattern = Vec::new();
        let layers = &self.spec.layers[cache.first..cache.first + cache.inputs.len()];
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                LayerSpec::ReLU => pattern.extend(cache.inputs[i].data().iter().map(|&v| u32::from(v > T::zero()))),
                LayerSpec::MaxPool2D { .. } => {
                    pattern.extend_from_slice(cache.pool_winners[i].as_deref().ok_or(Error::MissingCache)?)
                }
                _ => {}
            }
        }
        Ok(pattern)
    }

    /// Gradients of the loss with respect to every parameter, given the
    /// gradient with respect to the logits (the input of the final softmax).
    pub fn backward(&self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_with(pass, grad_logits, Exec::default())
            .map(|(g, _)| g)
    }

    /// Like [`Model::backward`], also returning the gradient with respect to
    /// the input batch.
    pub fn backward_full(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        let (g, dx) = self.backward_impl(pass, grad_logits, Exec::default(), true)?;
        Ok((g, dx.expect("requested input gradient")))
    }

    pub fn backward_with(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &Tensor<T>,
        exec: Exec,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        self.backward_impl(pass, grad_logits, exec, false)
    }

    fn backward_impl(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &Tensor<T>,
        exec: Exec,
        want_input: bool,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        let cache = pass.cache.as_ref().ok_or(Error::MissingCache)?;
        let last = self.spec.layers.len() - 1;
        if cache.first != 0 || cache.inputs.len() != last {
            return Err(Error::MissingCache);
        }
        if grad_logits.shape() != pass.logits.shape() {
            return Err(Error::Shape(format!(
                "grad {:?} vs logits {:?}",
                grad_logits.shape(),
                pass.logits.shape()
            )));
        }
        let mut per_layer: Vec<Option<(Tensor<T>, Tensor<T>)>> = vec![None; last];
        let mut dy = grad_logits.clone();
        for i in (0..last).rev() {
            let x = &cache.inputs[i];
            let need_dx = i > 0 || want_input;
            dy = match self.spec.layers[i] {
                LayerSpec::Conv2D {
                    stride, padding, ..
                } => {
                    let p = self.layers[i].as_ref().expect("conv params");
                    let (dx, dw, db) =
                        conv2d_backward(x, &p.weights, &dy, stride, padding, need_dx, exec);
                    per_layer[i] = Some((dw, db));
                    dx.unwrap_or_else(|| Tensor::zeros(&[0]))
                }
                LayerSpec::ReLU => {
                    let data = x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
                LayerSpec::MaxPool2D { .. } => {
                    let winners = cache.pool_winners[i].as_ref().ok_or(Error::MissingCache)?;
                    maxpool_backward(x.shape(), winners, &dy)
                }
                LayerSpec::Flatten => dy.reshape(x.shape())?,
                LayerSpec::Dense { .. } => {
                    let p = self.layers[i].as_ref().expect("dense params");
                    let (dx, dw, db) = dense_backward(x, &p.weights, &dy);
                    per_layer[i] = Some((dw, db));
                    dx
                }
                LayerSpec::Softmax => unreachable!("validated: softmax is last"),
            };
        }
        let grads = per_layer
            .into_iter()
            .flatten()
            .flat_map(|(w, b)| [w, b])
            .collect();
        Ok((grads, want_input.then_some(dy)))
    }
}

/// Row-wise softmax of an N×K tensor, shifted by the row max.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Vector-Jacobian product of row-wise softmax: given the probabilities and
/// the gradient with respect to them, returns the gradient w.r.t. the logits.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != grad_probs.shape() || probs.rank() != 2 {
        return Err(Error::Shape(format!(
            "softmax backward {:?} vs {:?}",
            probs.shape(),
            grad_probs.shape()
        )));
    }
    let k = probs.shape()[1];
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(k).zip(grad_probs.data().chunks(k)) {
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(probs.shape().to_vec(), out)
}

struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(x_shape: &[usize], out_shape: &[usize], k: usize, stride: usize, padding: Padding) -> Self {
        let (h, w, c) = (x_shape[1], x_shape[2], x_shape[3]);
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let (pad_top, pad_left) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => (same_pad_before(h, oh, k, stride), same_pad_before(w, ow, k, stride)),
        };
        ConvGeom {
            h,
            w,
            c,
            oh,
            ow,
            k,
            stride,
            pad_top,
            pad_left,
        }
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source offset in the sample for patch row `(oy, ox)` and tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then(|| (iy * self.w + ix) * self.c)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let kc = self.k * self.c;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * self.patch_len()..][..self.patch_len()];
                for ky in 0..self.k {
                    let dst = &mut row[ky * kc..(ky + 1) * kc];
                    for kx in 0..self.k {
                        let d = &mut dst[kx * self.c..(kx + 1) * self.c];
                        match self.source(oy, ox, ky, kx) {
                            Some(s) => d.copy_from_slice(&x[s..s + self.c]),
                            None => d.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * self.patch_len()..][..self.patch_len()];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        if let Some(s) = self.source(oy, ox, ky, kx) {
                            let src = &row[(ky * self.k + kx) * self.c..][..self.c];
                            for (d, &v) in dx[s..s + self.c].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: Padding,
    out_shape: &[usize],
    exec: Exec,
) -> Tensor<T> {
    let k = w.shape()[0];
    let filters = w.shape()[3];
    let g = ConvGeom::new(x.shape(), out_shape, k, stride, padding);
    let in_len = g.h * g.w * g.c;
    let out_len = g.positions() * filters;
    let mut out = vec![T::zero(); out_shape.iter().product()];
    exec.for_each_chunk_mut(&mut out, out_len, |s, y| {
        let mut cols = vec![T::zero(); g.positions() * g.patch_len()];
        g.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        for row in y.chunks_mut(filters) {
            row.copy_from_slice(b.data());
        }
        gemm(&cols, w.data(), y, g.positions(), g.patch_len(), filters);
    });
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dx: bool,
    exec: Exec,
) -> ConvGrads<T> {
    let k = w.shape()[0];
    let filters = w.shape()[3];
    let g = ConvGeom::new(x.shape(), dy.shape(), k, stride, padding);
    let n = x.shape()[0];
    let in_len = g.h * g.w * g.c;
    let out_len = g.positions() * filters;
    let (p, kl) = (g.positions(), g.patch_len());

    let per_sample = exec.map(n, |s| {
        let mut cols = vec![T::zero(); p * kl];
        g.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        let dys = &dy.data()[s * out_len..(s + 1) * out_len];
        let mut dw = vec![T::zero(); kl * filters];
        gemm_tn(&cols, dys, &mut dw, p, kl, filters);
        let mut db = vec![T::zero(); filters];
        for row in dys.chunks(filters) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        let dx = need_dx.then(|| {
            gemm_nt(dys, w.data(), &mut cols, p, filters, kl);
            let mut dx = vec![T::zero(); in_len];
            g.col2im(&cols, &mut dx);
            dx
        });
        (dx, dw, db)
    });

    let mut dw = vec![T::zero(); kl * filters];
    let mut db = vec![T::zero(); filters];
    let mut dx = need_dx.then(|| Vec::with_capacity(n * in_len));
    for (sdx, sdw, sdb) in per_sample {
        dw.iter_mut().zip(&sdw).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&sdb).for_each(|(a, &b)| *a = *a + b);
        if let (Some(all), Some(s)) = (dx.as_mut(), sdx) {
            all.extend(s);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![filters], db).expect("db shape"),
    )
}

fn maxpool_forward<T: Real>(
    x: &Tensor<T>,
    pool: usize,
    stride: usize,
    out_shape: &[usize],
    exec: Exec,
) -> (Tensor<T>, Vec<u32>) {
    let (h, w, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let in_len = h * w * c;
    let out_len = oh * ow * c;
    let n = x.shape()[0];
    let per_sample = exec.map(n, |s| {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let mut vals = Vec::with_capacity(out_len);
        let mut idx = Vec::with_capacity(out_len);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    // Scan order is increasing flat index, so strict `>` keeps
                    // the lowest index on ties.
                    let mut best = (oy * stride * w + ox * stride) * c + ch;
                    for py in 0..pool {
                        for px in 0..pool {
                            let at = ((oy * stride + py) * w + ox * stride + px) * c + ch;
                            if xs[at] > xs[best] {
                                best = at;
                            }
                        }
                    }
                    vals.push(xs[best]);
                    idx.push(best as u32);
                }
            }
        }
        (vals, idx)
    });
    let mut out = Vec::with_capacity(n * out_len);
    let mut winners = Vec::with_capacity(n * out_len);
    for (v, i) in per_sample {
        out.extend(v);
        winners.extend(i);
    }
    (
        Tensor::new(out_shape.to_vec(), out).expect("pool output shape"),
        winners,
    )
}

fn maxpool_backward<T: Real>(x_shape: &[usize], winners: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let n = x_shape[0];
    let in_len: usize = x_shape[1..].iter().product();
    let out_len = dy.len() / n.max(1);
    let mut dx = vec![T::zero(); n * in_len];
    for s in 0..n {
        let base = s * in_len;
        for j in 0..out_len {
            let at = base + winners[s * out_len + j] as usize;
            dx[at] = dx[at] + dy.data()[s * out_len + j];
        }
    }
    Tensor::new(x_shape.to_vec(), dx).expect("pool dx shape")
}

fn dense_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, inp) = (x.shape()[0], x.shape()[1]);
    let units = w.shape()[1];
    let mut out = Vec::with_capacity(n * units);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(x.data(), w.data(), &mut out, n, inp, units);
    Tensor::new(vec![n, units], out).expect("dense output shape")
}

fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, inp) = (x.shape()[0], x.shape()[1]);
    let units = w.shape()[1];
    let mut dw = vec![T::zero(); inp * units];
    gemm_tn(x.data(), dy.data(), &mut dw, n, inp, units);
    let mut db = vec![T::zero(); units];
    for row in dy.data().chunks(units) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
    }
    let mut dx = vec![T::zero(); n * inp];
    gemm_nt(dy.data(), w.data(), &mut dx, n, units, inp);
    (
        Tensor::new(vec![n, inp], dx).expect("dense dx shape"),
        Tensor::new(vec![inp, units], dw).expect("dense dw shape"),
        Tensor::new(vec![units], db).expect("dense db shape"),
    )
}
