//! The sequential embedding network and its reverse-mode pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    conv_backward_item, conv_forward_item, fc_backward_batch, fc_forward_batch,
    maxpool_backward_item, maxpool_forward_item, relu_backward_in_place, relu_in_place,
    ConvGeom, KERNEL,
};
use crate::error::{Error, Result};
use crate::tensor::{all_finite, Scalar, Tensor};

pub const INPUT_SIZE: usize = 160;
pub const INPUT_CHANNELS: usize = 3;
pub const EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// 3x3 kernel, stride 1, same padding.
    Conv { out_channels: usize },
    Relu,
    /// 2x2 window, stride 2.
    MaxPool,
    Fc { out_features: usize },
}

impl LayerKind {
    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_owned(),
            kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[H, W, C]`
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::damage_embedding(INPUT_SIZE, EMBED_DIM)
    }
}

impl NetworkSpec {
    /// Four conv-relu(-pool) stages with 8/32/64/128 filters, a 128-wide
    /// fully connected layer and a linear embedding head.
    ///
    /// `input_size` must be divisible by 8; at 160 this gives a 20x20x128
    /// feature map and 6,650,704 learnables.
    pub fn damage_embedding(input_size: usize, embed_dim: usize) -> Self {
        use LayerKind::*;
        let layers = vec![
            LayerSpec::new("conv1", Conv { out_channels: 8 }),
            LayerSpec::new("relu1", Relu),
            LayerSpec::new("maxpool1", MaxPool),
            LayerSpec::new("conv2", Conv { out_channels: 32 }),
            LayerSpec::new("relu2", Relu),
            LayerSpec::new("maxpool2", MaxPool),
            LayerSpec::new("conv3", Conv { out_channels: 64 }),
            LayerSpec::new("relu3", Relu),
            LayerSpec::new("maxpool3", MaxPool),
            LayerSpec::new("conv4", Conv { out_channels: 128 }),
            LayerSpec::new("relu4", Relu),
            LayerSpec::new("fc1", Fc { out_features: 128 }),
            LayerSpec::new("relu5", Relu),
            LayerSpec::new("fc2", Fc { out_features: embed_dim }),
        ];
        NetworkSpec {
            input_shape: [input_size, input_size, INPUT_CHANNELS],
            layers,
        }
    }

    /// Output shape `[H, W, C]` of every layer; fully connected outputs are `[1, 1, n]`.
    pub fn output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = self.input_shape;
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("empty input shape {shape:?}")));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match layer.kind {
                LayerKind::Conv { out_channels } => [shape[0], shape[1], out_channels],
                LayerKind::Relu => shape,
                LayerKind::MaxPool => {
                    if shape[0] % 2 != 0 || shape[1] % 2 != 0 {
                        return Err(Error::config(format!(
                            "layer `{}` pools an odd {}x{} map",
                            layer.name, shape[0], shape[1]
                        )));
                    }
                    [shape[0] / 2, shape[1] / 2, shape[2]]
                }
                LayerKind::Fc { out_features } => [1, 1, out_features],
            };
            out.push(shape);
        }
        Ok(out)
    }

    /// Learnable parameter count per layer (0 for relu/pool).
    pub fn param_counts(&self) -> Result<Vec<usize>> {
        let shapes = self.output_shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let input = if i == 0 { self.input_shape } else { shapes[i - 1] };
                match layer.kind {
                    LayerKind::Conv { out_channels } => {
                        KERNEL * KERNEL * input[2] * out_channels + out_channels
                    }
                    LayerKind::Fc { out_features } => {
                        input.iter().product::<usize>() * out_features + out_features
                    }
                    _ => 0,
                }
            })
            .collect())
    }

    pub fn total_params(&self) -> Result<usize> {
        Ok(self.param_counts()?.iter().sum())
    }

    pub fn embed_dim(&self) -> usize {
        self.output_shapes()
            .ok()
            .and_then(|s| s.last().map(|s| s[2]))
            .unwrap_or(0)
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::config(format!("unknown layer `{name}`")))
    }

    fn input_shape_of(&self, shapes: &[[usize; 3]], layer: usize) -> [usize; 3] {
        if layer == 0 {
            self.input_shape
        } else {
            shapes[layer - 1]
        }
    }
}

/// Weights and bias of one learnable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-layer parameter tensors; `None` for layers without parameters.
/// Used both for network weights and for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    fn zeros_like(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.output_shapes()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let input = spec.input_shape_of(&shapes, i);
                match layer.kind {
                    LayerKind::Conv { out_channels } => Some(LayerParams {
                        weights: Tensor::zeros(&[KERNEL, KERNEL, input[2], out_channels]),
                        bias: Tensor::zeros(&[out_channels]),
                    }),
                    LayerKind::Fc { out_features } => Some(LayerParams {
                        weights: Tensor::zeros(&[input.iter().product(), out_features]),
                        bias: Tensor::zeros(&[out_features]),
                    }),
                    _ => None,
                }
            })
            .collect();
        Ok(ParamSet { layers })
    }

    /// Flat views in layer order, weights before bias.
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [p.weights.data(), p.bias.data()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [p.weights.data_mut(), p.bias.data_mut()])
            .collect()
    }

    /// Tensor shapes in the same order as [`ParamSet::slices`].
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [p.weights.shape().to_vec(), p.bias.shape().to_vec()])
            .collect()
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weights: p.weights.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }
}

pub type Gradients<T> = ParamSet<T>;

/// Activations retained by a recording forward pass.
///
/// `values[0]` is the input batch and `values[i + 1]` the output of layer
/// `i`. Only the values some backward step reads are kept.
///
/// A tape can be passed back to [`Network::forward_recorded_into`] to reuse
/// its buffers.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    values: Vec<Option<Tensor<T>>>,
    batch: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape {
            values: Vec::new(),
            batch: 0,
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Output of layer `layer` as `[B, H, W, C]`, if it was retained.
    pub fn output(&self, layer: usize) -> Option<&Tensor<T>> {
        self.values.get(layer + 1).and_then(Option::as_ref)
    }

    fn value(&self, idx: usize) -> Result<&Tensor<T>> {
        self.values
            .get(idx)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Usage(format!("missing recorded activation #{idx}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar = f64> {
    spec: NetworkSpec,
    params: ParamSet<T>,
}

impl<T: Scalar> Network<T> {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut params = ParamSet::zeros_like(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in params.layers.iter_mut().flatten() {
            let fan_in = p.weights.shape()[..p.weights.shape().len() - 1]
                .iter()
                .product::<usize>();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::config(e.to_string()))?;
            for w in p.weights.data_mut() {
                *w = T::from_f64(normal.sample(&mut rng));
            }
        }
        Ok(Network { spec, params })
    }

    pub fn from_params(spec: NetworkSpec, params: ParamSet<T>) -> Result<Self> {
        let expected = ParamSet::<T>::zeros_like(&spec)?;
        if expected.shapes() != params.shapes() {
            return Err(Error::config("parameter shapes do not match the network spec"));
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(batch, None, false)
    }

    /// Forward pass that keeps what [`Network::backward`] needs.
    pub fn forward_recorded(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let mut tape = Tape::default();
        let out = self.run(batch, Some(&mut tape), false)?;
        Ok((out, tape))
    }

    /// Forward pass that keeps the output of every layer, so that
    /// [`Tape::output`] is available for all of them.
    pub fn forward_recorded_all(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let mut tape = Tape::default();
        let out = self.run(batch, Some(&mut tape), true)?;
        Ok((out, tape))
    }

    /// Like [`Network::forward_recorded`], overwriting `tape` in place.
    pub fn forward_recorded_into(&self, batch: &Tensor<T>, tape: &mut Tape<T>) -> Result<Tensor<T>> {
        self.run(batch, Some(tape), false)
    }

    /// Which entries of `values` a backward pass reads.
    fn retained(&self) -> Vec<bool> {
        let layers = &self.spec.layers;
        (0..=layers.len())
            .map(|i| {
                let consumer_reads_input = layers
                    .get(i)
                    .is_some_and(|l| l.kind.is_learnable() || l.kind == LayerKind::MaxPool);
                let producer_relu = i > 0 && layers[i - 1].kind == LayerKind::Relu;
                consumer_reads_input || producer_relu
            })
            .collect()
    }

    /// Layers before the first fully connected one run image by image so
    /// their feature maps stay in cache.
    fn spatial_prefix(&self) -> usize {
        self.spec
            .layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Fc { .. }))
            .unwrap_or(self.spec.layers.len())
    }

    /// Apply layer `i` to one image. The result is left in `cur`.
    fn layer_item(
        &self,
        i: usize,
        shapes: &[[usize; 3]],
        cur: &mut Vec<T>,
        next: &mut Vec<T>,
        cols: &mut Vec<T>,
    ) {
        let [ih, iw, ic] = self.spec.input_shape_of(shapes, i);
        let out_len = shapes[i].iter().product();
        match &self.spec.layers[i].kind {
            LayerKind::Conv { out_channels } => {
                let p = self.params.layers[i].as_ref().expect("conv params");
                let g = ConvGeom {
                    h: ih,
                    w: iw,
                    cin: ic,
                    cout: *out_channels,
                };
                next.resize(out_len, T::zero());
                conv_forward_item(cur, p.weights.data(), p.bias.data(), g, cols, next);
                std::mem::swap(cur, next);
            }
            LayerKind::Relu => relu_in_place(cur),
            LayerKind::MaxPool => {
                next.resize(out_len, T::zero());
                maxpool_forward_item(cur, ih, iw, ic, next, None);
                std::mem::swap(cur, next);
            }
            LayerKind::Fc { .. } => unreachable!("fully connected layers run batched"),
        }
    }

    /// Apply layer `i` to a whole `[B, H, W, C]` batch.
    fn layer_batch(
        &self,
        i: usize,
        shapes: &[[usize; 3]],
        mut current: Tensor<T>,
        cur: &mut Vec<T>,
        next: &mut Vec<T>,
        cols: &mut Vec<T>,
    ) -> Result<Tensor<T>> {
        let layer = &self.spec.layers[i];
        let b = current.shape()[0];
        let [ih, iw, ic] = self.spec.input_shape_of(shapes, i);
        let out_shape = shapes[i];
        match &layer.kind {
            LayerKind::Relu => relu_in_place(current.data_mut()),
            LayerKind::Fc { out_features } => {
                let p = self.params.layers[i].as_ref().expect("fc params");
                let mut out = Tensor::zeros(&[b, 1, 1, *out_features]);
                for row in out.data_mut().chunks_exact_mut(*out_features) {
                    row.copy_from_slice(p.bias.data());
                }
                fc_forward_batch(
                    current.data(),
                    b,
                    p.weights.data(),
                    ih * iw * ic,
                    *out_features,
                    out.data_mut(),
                );
                current = out;
            }
            LayerKind::Conv { .. } | LayerKind::MaxPool => {
                let mut out = Tensor::zeros(&[b, out_shape[0], out_shape[1], out_shape[2]]);
                for item in 0..b {
                    cur.clear();
                    cur.extend_from_slice(current.item(item));
                    self.layer_item(i, shapes, cur, next, cols);
                    out.item_mut(item).copy_from_slice(cur);
                }
                current = out;
            }
        }
        if !current.all_finite() {
            return Err(Error::NonFinite {
                layer: layer.name.clone(),
            });
        }
        Ok(current)
    }

    /// Run layers `start..` on `input`, the `[B, H, W, C]` input of layer
    /// `start` (for example a recorded [`Tape`] entry). Returns `[B, L]`.
    pub fn forward_from(&self, input: &Tensor<T>, start: usize) -> Result<Tensor<T>> {
        let shapes = self.spec.output_shapes()?;
        let n = self.spec.layers.len();
        if start >= n {
            return Err(Error::config(format!("layer #{start} out of range")));
        }
        let expected = self.spec.input_shape_of(&shapes, start);
        let b = match input.shape() {
            [b, rest @ ..] if rest == expected => *b,
            other => {
                return Err(Error::config(format!(
                    "input shape {other:?} does not match layer #{start} input {expected:?}"
                )))
            }
        };
        let (mut cur, mut next, mut cols) = (Vec::new(), Vec::new(), Vec::new());
        let mut current = input.clone();
        for i in start..n {
            current = self.layer_batch(i, &shapes, current, &mut cur, &mut next, &mut cols)?;
        }
        let embed = current.item_len();
        current.reshape(&[b, embed])
    }

    fn run(&self, batch: &Tensor<T>, mut tape: Option<&mut Tape<T>>, keep_all: bool) -> Result<Tensor<T>> {
        let spec = &self.spec;
        let b = match batch.shape() {
            [b, h, w, c] if [*h, *w, *c] == spec.input_shape => *b,
            other => {
                return Err(Error::config(format!(
                    "batch shape {other:?} does not match input {:?}",
                    spec.input_shape
                )))
            }
        };
        let shapes = spec.output_shapes()?;
        let n = spec.layers.len();
        let split = self.spatial_prefix();
        let retained = if keep_all { vec![true; n + 1] } else { self.retained() };
        let record = tape.is_some();
        let mut values: Vec<Option<Tensor<T>>> = match tape.as_deref_mut() {
            Some(t) => std::mem::take(&mut t.values),
            None => Vec::new(),
        };
        values.resize(n + 1, None);
        for (i, v) in values.iter_mut().enumerate() {
            if !(record && retained[i]) {
                *v = None;
                continue;
            }
            let s = spec.input_shape_of(&shapes, i);
            let full = [b, s[0], s[1], s[2]];
            match v {
                Some(t) => t.reset(&full),
                None => *v = Some(Tensor::zeros(&full)),
            }
        }
        if let Some(v) = values[0].as_mut() {
            v.data_mut().copy_from_slice(batch.data());
        }

        let mid = spec.input_shape_of(&shapes, split);
        let mut current = Tensor::zeros(&[b, mid[0], mid[1], mid[2]]);
        let (mut cur, mut next, mut cols) = (Vec::new(), Vec::new(), Vec::new());
        for item in 0..b {
            cur.clear();
            cur.extend_from_slice(batch.item(item));
            for i in 0..split {
                self.layer_item(i, &shapes, &mut cur, &mut next, &mut cols);
                // ReLU and pooling cannot turn finite values into non-finite ones.
                if spec.layers[i].kind.is_learnable() && !all_finite(&cur) {
                    return Err(Error::NonFinite {
                        layer: spec.layers[i].name.clone(),
                    });
                }
                if i + 1 < split {
                    if let Some(v) = values[i + 1].as_mut() {
                        v.item_mut(item).copy_from_slice(&cur);
                    }
                }
            }
            current.item_mut(item).copy_from_slice(&cur);
        }
        if split > 0 {
            if let Some(v) = values[split].as_mut() {
                v.data_mut().copy_from_slice(current.data());
            }
        }

        for i in split..n {
            current = self.layer_batch(i, &shapes, current, &mut cur, &mut next, &mut cols)?;
            if let Some(v) = values[i + 1].as_mut() {
                v.data_mut().copy_from_slice(current.data());
            }
        }
        if let Some(t) = tape {
            t.values = values;
            t.batch = b;
        }
        let embed = current.item_len();
        current.reshape(&[b, embed])
    }

    /// Parameter gradients of a scalar loss given `dL/d(output)` as `[B, L]`.
    pub fn backward(&self, tape: &Tape<T>, grad_output: &Tensor<T>) -> Result<Gradients<T>> {
        let n = self.spec.layers.len();
        let (grads, _) = self.backward_range(tape, n, grad_output, 0, false)?;
        Ok(grads)
    }

    /// Propagate a gradient given with respect to the output of layer
    /// `top - 1` down through layers `bottom..top`, returning the parameter
    /// gradients of those layers and the gradient with respect to the
    /// output of layer `bottom - 1` (the input of layer `bottom`).
    pub fn backward_between(
        &self,
        tape: &Tape<T>,
        top: usize,
        grad: &Tensor<T>,
        bottom: usize,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        let (g, input_grad) = self.backward_range(tape, top, grad, bottom, true)?;
        Ok((g, input_grad.expect("input gradient requested")))
    }

    /// Backward step through layer `i` for one image; `g` holds the gradient
    /// with respect to the layer output and is replaced by the gradient with
    /// respect to its input when `need_input` is set.
    #[allow(clippy::too_many_arguments)]
    fn layer_backward_item(
        &self,
        i: usize,
        shapes: &[[usize; 3]],
        tape: &Tape<T>,
        item: usize,
        grads: &mut Gradients<T>,
        g: &mut Vec<T>,
        next: &mut Vec<T>,
        cols: &mut Vec<T>,
        need_input: bool,
    ) -> Result<()> {
        let [ih, iw, ic] = self.spec.input_shape_of(shapes, i);
        let in_len = ih * iw * ic;
        match &self.spec.layers[i].kind {
            LayerKind::Relu => relu_backward_in_place(tape.value(i + 1)?.item(item), g),
            LayerKind::MaxPool => {
                next.resize(in_len, T::zero());
                maxpool_backward_item(tape.value(i)?.item(item), ih, iw, ic, g, next);
                std::mem::swap(g, next);
            }
            LayerKind::Conv { out_channels } => {
                let p = self.params.layers[i].as_ref().expect("conv params");
                let gp = grads.layers[i].as_mut().expect("conv grads");
                let geom = ConvGeom {
                    h: ih,
                    w: iw,
                    cin: ic,
                    cout: *out_channels,
                };
                next.resize(in_len, T::zero());
                conv_backward_item(
                    tape.value(i)?.item(item),
                    g,
                    p.weights.data(),
                    geom,
                    gp.weights.data_mut(),
                    gp.bias.data_mut(),
                    need_input.then_some(&mut next[..]),
                    cols,
                );
                std::mem::swap(g, next);
            }
            LayerKind::Fc { .. } => unreachable!("fully connected layers run batched"),
        }
        Ok(())
    }

    fn backward_range(
        &self,
        tape: &Tape<T>,
        top: usize,
        grad: &Tensor<T>,
        bottom: usize,
        want_input_grad: bool,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        let spec = &self.spec;
        if bottom > top || top > spec.layers.len() {
            return Err(Error::Usage(format!("invalid backward range {bottom}..{top}")));
        }
        let shapes = spec.output_shapes()?;
        let b = tape.batch;
        let top_shape = spec.input_shape_of(&shapes, top);
        let expected = b * top_shape.iter().product::<usize>();
        if grad.len() != expected {
            return Err(Error::config(format!(
                "upstream gradient has {} values, expected {expected}",
                grad.len()
            )));
        }
        let mut grads = ParamSet::zeros_like(spec)?;
        let mut upstream = grad.clone().reshape(&[b, top_shape[0], top_shape[1], top_shape[2]])?;
        let (mut g, mut next, mut cols) = (Vec::new(), Vec::new(), Vec::new());
        let split = self.spatial_prefix().clamp(bottom, top);

        for i in (split..top).rev() {
            let layer = &spec.layers[i];
            let [ih, iw, ic] = spec.input_shape_of(&shapes, i);
            let need_input = i > bottom || want_input_grad;
            match &layer.kind {
                LayerKind::Relu => relu_backward_in_place(tape.value(i + 1)?.data(), upstream.data_mut()),
                LayerKind::Fc { out_features } => {
                    let p = self.params.layers[i].as_ref().expect("fc params");
                    let gp = grads.layers[i].as_mut().expect("fc grads");
                    let mut dinput = Tensor::zeros(&[b, ih, iw, ic]);
                    fc_backward_batch(
                        tape.value(i)?.data(),
                        upstream.data(),
                        b,
                        p.weights.data(),
                        ih * iw * ic,
                        *out_features,
                        gp.weights.data_mut(),
                        gp.bias.data_mut(),
                        need_input.then(|| dinput.data_mut()),
                    );
                    upstream = dinput;
                }
                LayerKind::Conv { .. } | LayerKind::MaxPool => {
                    let mut dinput = Tensor::zeros(&[b, ih, iw, ic]);
                    for item in 0..b {
                        g.clear();
                        g.extend_from_slice(upstream.item(item));
                        self.layer_backward_item(
                            i, &shapes, tape, item, &mut grads, &mut g, &mut next, &mut cols, need_input,
                        )?;
                        if need_input {
                            dinput.item_mut(item).copy_from_slice(&g);
                        }
                    }
                    upstream = dinput;
                }
            }
            if need_input && !upstream.all_finite() {
                return Err(Error::NonFinite {
                    layer: format!("{} (backward)", layer.name),
                });
            }
        }

        if bottom < split {
            let s = spec.input_shape_of(&shapes, bottom);
            let mut input_grad = want_input_grad.then(|| Tensor::zeros(&[b, s[0], s[1], s[2]]));
            for item in 0..b {
                g.clear();
                g.extend_from_slice(upstream.item(item));
                for i in (bottom..split).rev() {
                    let need_input = i > bottom || want_input_grad;
                    self.layer_backward_item(
                        i, &shapes, tape, item, &mut grads, &mut g, &mut next, &mut cols, need_input,
                    )?;
                    if need_input && !all_finite(&g) {
                        return Err(Error::NonFinite {
                            layer: format!("{} (backward)", spec.layers[i].name),
                        });
                    }
                }
                if let Some(t) = input_grad.as_mut() {
                    t.item_mut(item).copy_from_slice(&g);
                }
            }
            if let Some(t) = input_grad {
                upstream = t;
            }
        }
        Ok((grads, want_input_grad.then_some(upstream)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes_and_counts() {
        let spec = NetworkSpec::default();
        let shapes = spec.output_shapes().unwrap();
        let expected = [
            [160, 160, 8],
            [160, 160, 8],
            [80, 80, 8],
            [80, 80, 32],
            [80, 80, 32],
            [40, 40, 32],
            [40, 40, 64],
            [40, 40, 64],
            [20, 20, 64],
            [20, 20, 128],
            [20, 20, 128],
            [1, 1, 128],
            [1, 1, 128],
            [1, 1, 16],
        ];
        assert_eq!(shapes, expected);
        let counts: Vec<usize> = spec.param_counts().unwrap().into_iter().filter(|&c| c > 0).collect();
        assert_eq!(counts, [224, 2_336, 18_496, 73_856, 6_553_728, 2_064]);
        assert_eq!(spec.total_params().unwrap(), 6_650_704);
        assert_eq!(spec.embed_dim(), 16);
    }

    #[test]
    fn odd_pooling_is_rejected() {
        assert!(NetworkSpec::damage_embedding(12, 4).output_shapes().is_err());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let net: Network<f64> = Network::new(NetworkSpec::damage_embedding(16, 4), 5).unwrap();
        assert_eq!(net.params().count(), net.spec().total_params().unwrap());
        let x = Tensor::from_fn(&[2, 16, 16, 3], |i| ((i * 37) % 11) as f64 / 11.0);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.shape(), &[2, 4]);
        assert_eq!(a, b);
        let (c, tape) = net.forward_recorded(&x).unwrap();
        assert_eq!(a, c);
        assert_eq!(tape.batch(), 2);
        assert_eq!(tape.output(10).unwrap().shape(), &[2, 2, 2, 128]);
    }

    #[test]
    fn wrong_batch_shape_is_a_config_error() {
        let net: Network<f64> = Network::new(NetworkSpec::damage_embedding(16, 4), 0).unwrap();
        let x = Tensor::zeros(&[1, 8, 8, 3]);
        assert!(matches!(net.forward(&x), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let net: Network<f64> = Network::new(NetworkSpec::damage_embedding(16, 4), 0).unwrap();
        let mut x = Tensor::zeros(&[1, 16, 16, 3]);
        x.data_mut()[0] = f64::NAN;
        match net.forward(&x) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, "conv1"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
