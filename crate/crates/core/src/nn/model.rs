use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv_backward, conv_forward, fc_backward, fc_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, softmax_cross_entropy,
};
use super::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::gemm::Matrix;
use crate::real::Real;
use crate::tensor::{ConvGeometry, Tensor4D};

/// Weights of one conv or fc layer. Fc weights are stored as `out x in x 1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor4D<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn weight_matrix(&self) -> Matrix<T> {
        self.weight.as_im2col().to_matrix()
    }
}

/// Parameters aligned with `NetworkSpec::layers` (`None` for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Real> Params<T> {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        Ok(Self {
            layers: spec
                .weight_dims()?
                .into_iter()
                .map(|d| d.map(|dims| LayerParams { weight: Tensor4D::zeros(dims), bias: vec![T::zero(); dims[0]] }))
                .collect(),
        })
    }

    pub fn layer(&self, i: usize) -> Option<&LayerParams<T>> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, i: usize) -> Option<&mut LayerParams<T>> {
        self.layers.get_mut(i).and_then(Option::as_mut)
    }

    pub fn count(&self) -> usize {
        self.layers.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// `sum w^2` over all weights (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data())
            .map(|w| w.as_f64() * w.as_f64())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.iter().map(|b| U::of(b.as_f64())).collect(),
                    })
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: T) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.data_mut().iter_mut().for_each(|v| *v *= factor);
            p.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`) and zero biases
/// from a seeded ChaCha8 stream.
pub fn init_params<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Params<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut params = Params::zeros(spec)?;
    for p in params.layers.iter_mut().flatten() {
        let fan_in = p.weight.item_len() as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in p.weight.data_mut() {
            *w = T::of(rng.gen_range(-bound..bound));
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Conv { cols: Matrix<T>, input_dims: [usize; 4] },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize>, input_dims: [usize; 4] },
    Fc { input: Matrix<T>, input_dims: [usize; 4] },
}

/// Result of a forward pass with everything backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub logits: Matrix<T>,
    pub probs: Matrix<T>,
    pub loss: T,
    caches: Vec<LayerCache<T>>,
}

impl<T: Real> ForwardPass<T> {
    /// ReLU on/off pattern and max-pool winners; two passes with equal
    /// patterns lie on the same smooth piece of the loss.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for c in &self.caches {
            match c {
                LayerCache::Relu { mask } => out.extend(mask.iter().map(|&m| m as usize)),
                LayerCache::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Predicted class per sample (first maximum on ties).
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

pub(crate) fn argmax_rows<T: Real>(m: &Matrix<T>) -> Vec<usize> {
    (0..m.rows())
        .map(|b| {
            let row = m.row(b);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_input<T: Real>(spec: &NetworkSpec, inputs: &Tensor4D<T>) -> Result<()> {
    let [_, c, h, w] = inputs.dims();
    if (c, h, w) != (spec.input.c, spec.input.h, spec.input.w) {
        return Err(Error::shape(
            "input",
            format!("batch item {c}x{h}x{w} does not match network input {:?}", spec.input),
        ));
    }
    Ok(())
}

fn param<'a, T: Real>(params: &'a Params<T>, i: usize) -> Result<&'a LayerParams<T>> {
    params.layer(i).ok_or_else(|| Error::shape(format!("layer {i}"), "missing parameters"))
}

fn finite_or_fail<T: Real>(data: &[T], layer: usize, op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure { layer, op })
    }
}

fn run_layers<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    inputs: &Tensor4D<T>,
    keep_cache: bool,
) -> Result<(Matrix<T>, Vec<LayerCache<T>>)> {
    check_input(spec, inputs)?;
    let batch = inputs.n();
    let mut x = inputs.clone();
    let mut caches = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let input_dims = x.dims();
        let (y, cache) = match *layer {
            LayerSpec::Conv { kernel, stride, pad, .. } => {
                let p = param(params, i)?;
                let geom = ConvGeometry::square(kernel, stride, pad);
                let (y, cols) = conv_forward(&x, &p.weight_matrix(), &p.bias, geom, None)?;
                (y, LayerCache::Conv { cols, input_dims })
            }
            LayerSpec::Relu => {
                let (y, mask) = relu_forward(&x);
                (y, LayerCache::Relu { mask })
            }
            LayerSpec::MaxPool { size, stride } => {
                let (y, argmax) = maxpool_forward(&x, size, stride);
                (y, LayerCache::MaxPool { argmax, input_dims })
            }
            LayerSpec::Fc { out_features } => {
                let p = param(params, i)?;
                let flat = Matrix::from_vec(batch, x.item_len(), x.into_vec())?;
                let y = fc_forward(&flat, &p.weight_matrix(), &p.bias)?;
                let y4 = Tensor4D::from_vec([batch, out_features, 1, 1], y.into_vec())?;
                (y4, LayerCache::Fc { input: flat, input_dims })
            }
        };
        finite_or_fail(y.data(), i, "forward")?;
        if keep_cache {
            caches.push(cache);
        }
        x = y;
    }
    let classes = x.c();
    Ok((Matrix::from_vec(batch, classes, x.into_vec())?, caches))
}

/// Class logits for a batch, without loss or caches.
pub fn predict<T: Real>(spec: &NetworkSpec, params: &Params<T>, inputs: &Tensor4D<T>) -> Result<Matrix<T>> {
    Ok(run_layers(spec, params, inputs, false)?.0)
}

/// Forward pass with softmax cross-entropy averaged over the batch.
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    inputs: &Tensor4D<T>,
    labels: &[usize],
) -> Result<ForwardPass<T>> {
    if labels.len() != inputs.n() {
        return Err(Error::shape("labels", format!("{} labels for a batch of {}", labels.len(), inputs.n())));
    }
    let classes = spec.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::shape("labels", format!("label {bad} out of range for {classes} classes")));
    }
    let (logits, caches) = run_layers(spec, params, inputs, true)?;
    let (loss, probs) = softmax_cross_entropy(&logits, labels);
    if !loss.is_finite() {
        return Err(Error::NumericFailure { layer: spec.layers.len(), op: "loss" });
    }
    Ok(ForwardPass { logits, probs, loss, caches })
}

/// Gradients of the prediction loss only (no regularization terms).
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    pass: &ForwardPass<T>,
    labels: &[usize],
) -> Result<Params<T>> {
    backward_scaled(spec, params, pass, labels, T::one())
}

/// Gradients of `loss_scale * L`.
pub fn backward_scaled<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    pass: &ForwardPass<T>,
    labels: &[usize],
    loss_scale: T,
) -> Result<Params<T>> {
    let batch = labels.len();
    let classes = pass.probs.cols();
    let mut dlogits = pass.probs.clone();
    let inv = loss_scale / T::of(batch as f64);
    for (b, &label) in labels.iter().enumerate() {
        for j in 0..classes {
            let g = dlogits.get(b, j) - if j == label { T::one() } else { T::zero() };
            dlogits.set(b, j, g * inv);
        }
    }
    let mut grads = Params::zeros(spec)?;
    let mut dy = Tensor4D::from_vec([batch, classes, 1, 1], dlogits.into_vec())?;
    for (i, (layer, cache)) in spec.layers.iter().zip(&pass.caches).enumerate().rev() {
        let dx = match (*layer, cache) {
            (LayerSpec::Conv { kernel, stride, pad, .. }, LayerCache::Conv { cols, input_dims }) => {
                let p = param(params, i)?;
                let geom = ConvGeometry::square(kernel, stride, pad);
                let (dw, db, dx) = conv_backward(&dy, cols, &p.weight_matrix(), *input_dims, geom, i > 0)?;
                let g = grads.layer_mut(i).expect("conv has params");
                g.weight.data_mut().copy_from_slice(dw.data());
                g.bias = db;
                dx
            }
            (LayerSpec::Relu, LayerCache::Relu { mask }) => Some(relu_backward(&dy, mask)),
            (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { argmax, input_dims }) => {
                Some(maxpool_backward(&dy, argmax, *input_dims))
            }
            (LayerSpec::Fc { .. }, LayerCache::Fc { input, input_dims }) => {
                let p = param(params, i)?;
                let dy_mat = Matrix::from_vec(batch, dy.c(), dy.into_vec())?;
                let (dw, db, dx) = fc_backward(&dy_mat, input, &p.weight_matrix())?;
                let g = grads.layer_mut(i).expect("fc has params");
                g.weight.data_mut().copy_from_slice(dw.data());
                g.bias = db;
                Some(Tensor4D::from_vec(*input_dims, dx.into_vec())?)
            }
            _ => return Err(Error::State(format!("forward cache does not match layer {i}"))),
        };
        if let Some(g) = grads.layer(i) {
            finite_or_fail(g.weight.data(), i, "backward")?;
        }
        match dx {
            Some(dx) => {
                finite_or_fail(dx.data(), i, "backward")?;
                dy = dx;
            }
            None => break,
        }
    }
    Ok(grads)
}
