//! Minimal deterministic CNN engine.
//!
//! Layers: convolution (im2col + GEMM), ReLU, max-pooling, fully connected,
//! and a softmax cross-entropy head. Backprop is hand-derived per layer.

mod gradcheck;
pub mod layers;
mod model;
mod sgd;

use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, grad_check_against, GradCheckReport, LayerCheck};
pub use model::{backward, backward_scaled, forward, init_params, predict, ForwardPass, LayerParams, Params};
pub use sgd::{sgd_step, GroupTerms, SgdConfig};
pub(crate) use model::argmax_rows;

use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

/// `channels x height x width` of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { size: usize, stride: usize },
    Fc { out_features: usize },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Fc { .. } => "fc",
        }
    }
}

/// Ordered layer stack with a per-conv-layer pruning ratio.
///
/// The final layer must be fully connected; its outputs are the class logits
/// fed to the softmax cross-entropy head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    /// One entry per conv layer, in layer order.
    pub prune_ratios: Vec<f64>,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>, prune_ratios: Vec<f64>) -> Result<Self> {
        let spec = Self { input, layers, prune_ratios };
        spec.validate()?;
        Ok(spec)
    }

    /// Two conv blocks and a classifier: conv(c1,3x3,p1)-relu-pool2-conv(c2,3x3,p1)-relu-pool2-fc.
    pub fn toy(input: Shape, classes: usize, c1: usize, c2: usize, ratio: f64) -> Result<Self> {
        use LayerSpec::*;
        Self::new(
            input,
            vec![
                Conv { out_channels: c1, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool { size: 2, stride: 2 },
                Conv { out_channels: c2, kernel: 3, stride: 1, pad: 1 },
                Relu,
                MaxPool { size: 2, stride: 2 },
                Fc { out_features: classes },
            ],
            vec![ratio; 2],
        )
    }

    /// Parses `conv:OUT:K:STRIDE:PAD,relu,maxpool:SIZE:STRIDE,fc:OUT`.
    pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
        let mut layers = Vec::new();
        for (i, item) in text.split(',').map(str::trim).enumerate() {
            let parts: Vec<&str> = item.split(':').collect();
            let num = |k: usize| -> Result<usize> {
                parts
                    .get(k)
                    .ok_or_else(|| Error::config(format!("network[{i}]"), format!("`{item}` is missing a field")))?
                    .parse::<usize>()
                    .map_err(|e| Error::config(format!("network[{i}]"), format!("`{item}`: {e}")))
            };
            let layer = match parts[0] {
                "conv" if parts.len() == 5 => {
                    LayerSpec::Conv { out_channels: num(1)?, kernel: num(2)?, stride: num(3)?, pad: num(4)? }
                }
                "relu" if parts.len() == 1 => LayerSpec::Relu,
                "maxpool" if parts.len() == 3 => LayerSpec::MaxPool { size: num(1)?, stride: num(2)? },
                "fc" if parts.len() == 2 => LayerSpec::Fc { out_features: num(1)? },
                _ => return Err(Error::config(format!("network[{i}]"), format!("unrecognized layer `{item}`"))),
            };
            layers.push(layer);
        }
        Ok(layers)
    }

    /// Checks that shapes compose end to end and returns the input shape of
    /// every layer followed by the output shape of the last one.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        if self.input.is_empty() {
            return Err(Error::shape("input", "empty input shape"));
        }
        match self.layers.last() {
            Some(LayerSpec::Fc { .. }) => {}
            _ => return Err(Error::shape("network", "last layer must be fully connected (class logits)")),
        }
        let convs = self.conv_layers().len();
        if self.prune_ratios.len() != convs {
            return Err(Error::shape(
                "network",
                format!("{} prune ratios for {convs} conv layers", self.prune_ratios.len()),
            ));
        }
        for (i, &r) in self.prune_ratios.iter().enumerate() {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("prune_ratios[{i}]"), format!("ratio {r} outside [0, 1)")));
            }
        }
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let label = || format!("layer {i} ({})", layer.name());
            cur = match *layer {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    if flat {
                        return Err(Error::shape(label(), "convolution after a fully connected layer"));
                    }
                    if out_channels == 0 {
                        return Err(Error::shape(label(), "zero output channels"));
                    }
                    let (oh, ow) = ConvGeometry::square(kernel, stride, pad)
                        .output_dims(cur.h, cur.w)
                        .ok_or_else(|| Error::shape(label(), format!("kernel {kernel} does not fit {}x{}", cur.h, cur.w)))?;
                    Shape::new(out_channels, oh, ow)
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { size, stride } => {
                    if flat {
                        return Err(Error::shape(label(), "pooling after a fully connected layer"));
                    }
                    let (oh, ow) = ConvGeometry::square(size, stride, 0)
                        .output_dims(cur.h, cur.w)
                        .ok_or_else(|| Error::shape(label(), format!("window {size} does not fit {}x{}", cur.h, cur.w)))?;
                    Shape::new(cur.c, oh, ow)
                }
                LayerSpec::Fc { out_features } => {
                    if out_features == 0 {
                        return Err(Error::shape(label(), "zero output features"));
                    }
                    flat = true;
                    Shape::new(out_features, 1, 1)
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Indices (into `layers`) of the conv layers.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Fc { out_features }) => *out_features,
            _ => 0,
        }
    }

    /// Weight tensor dims for each layer (`None` for parameter-free layers).
    pub fn weight_dims(&self) -> Result<Vec<Option<[usize; 4]>>> {
        let shapes = self.validate()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, inp)| match *layer {
                LayerSpec::Conv { out_channels, kernel, .. } => Some([out_channels, inp.c, kernel, kernel]),
                LayerSpec::Fc { out_features } => Some([out_features, inp.len(), 1, 1]),
                _ => None,
            })
            .collect())
    }

    /// Multiply-accumulate count of each conv layer for one sample.
    pub fn conv_macs(&self) -> Result<Vec<usize>> {
        let shapes = self.validate()?;
        Ok(self
            .conv_layers()
            .into_iter()
            .map(|i| {
                let (inp, out) = (shapes[i], shapes[i + 1]);
                match self.layers[i] {
                    LayerSpec::Conv { kernel, .. } => out.c * inp.c * kernel * kernel * out.h * out.w,
                    _ => unreachable!(),
                }
            })
            .collect())
    }
}
