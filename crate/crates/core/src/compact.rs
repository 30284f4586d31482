//! Physical removal of pruned groups.
//!
//! Row pruning drops filters and the matching input channels of the next conv
//! layer (or the matching flattened slice of the next fc layer). Column
//! pruning drops im2col columns; the compact layer gathers only the kept patch
//! rows before its GEMM.
//!
//! # `compact_model.bin`
//!
//! All integers are `u32` little-endian, all floats `f32` little-endian.
//!
//! ```text
//! "PRUNECMP" version=1 C H W layer_count
//! per layer: kind:u8 then
//!   0 conv    out in kh kw stride pad gather_len gather[gather_len]
//!             weights[out * K] (row-major, im2col column order) bias[out]
//!   1 relu
//!   2 maxpool size stride
//!   3 fc      out in weights[out * in] bias[out]
//! ```
//!
//! `K` is `gather_len` when nonzero, otherwise `in * kh * kw`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gemm::Matrix;
use crate::groups::{apply_mask, partition, GroupMask, GroupType};
use crate::nn::layers::{conv_forward, fc_forward, maxpool_forward, relu_forward};
use crate::nn::{predict, LayerSpec, NetworkSpec, Params, Shape};
use crate::real::Real;
use crate::tensor::{ConvGeometry, Tensor4D};

pub const MAGIC: &[u8; 8] = b"PRUNECMP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CompactLayer<T> {
    Conv {
        in_channels: usize,
        geom: ConvGeometry,
        /// `out x K'`, where `K'` is the gathered column count.
        weights: Matrix<T>,
        bias: Vec<T>,
        gather: Option<Vec<usize>>,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Fc {
        weights: Matrix<T>,
        bias: Vec<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel<T> {
    pub input: Shape,
    pub layers: Vec<CompactLayer<T>>,
}

/// What was kept in one parameterized layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerPlan {
    pub layer: usize,
    /// Kept filters (conv) or output units (fc).
    pub kept_rows: Vec<usize>,
    /// Kept weight-matrix columns in original numbering.
    pub kept_cols: Vec<usize>,
}

/// Input channels removed from `to_layer` because filters of `from_layer` were removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Propagation {
    pub from_layer: usize,
    pub to_layer: usize,
    pub removed_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompactPlan {
    pub group_type: GroupType,
    pub layers: Vec<LayerPlan>,
    pub propagation: Vec<Propagation>,
}

fn check_masks(spec: &NetworkSpec, masks: &[GroupMask]) -> Result<Vec<[usize; 4]>> {
    let convs = spec.conv_layers();
    if masks.len() != convs.len() {
        return Err(Error::Contract(format!("{} masks for {} conv layers", masks.len(), convs.len())));
    }
    let dims = spec.weight_dims()?;
    Ok(convs.iter().map(|&i| dims[i].expect("conv has weights")).collect())
}

/// Copy of `params` with every pruned group zeroed. In row mode the bias of a
/// removed filter is zeroed too, so the filter's output is exactly zero.
pub fn masked_params<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    masks: &[GroupMask],
    group_type: GroupType,
) -> Result<Params<T>> {
    check_masks(spec, masks)?;
    let mut out = params.clone();
    for (&li, mask) in spec.conv_layers().iter().zip(masks) {
        let p = out.layer_mut(li).ok_or_else(|| Error::shape(format!("layer {li}"), "missing parameters"))?;
        let part = partition(li, &p.weight, group_type);
        apply_mask(&mut p.weight, &part, mask)?;
        if group_type == GroupType::Row {
            for f in (0..mask.len()).filter(|&f| mask.is_pruned(f)) {
                p.bias[f] = T::zero();
            }
        }
    }
    Ok(out)
}

/// Builds the smaller dense model realized by `masks` (one per conv layer).
///
/// `params` need not be masked: only kept weights are copied. Removing every
/// filter or every column of a layer disconnects the network and is rejected.
pub fn build_compact<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    masks: &[GroupMask],
    group_type: GroupType,
) -> Result<(CompactModel<T>, CompactPlan)> {
    let conv_dims = check_masks(spec, masks)?;
    let shapes = spec.validate()?;
    let convs = spec.conv_layers();
    for (k, (mask, dims)) in masks.iter().zip(&conv_dims).enumerate() {
        let groups = match group_type {
            GroupType::Row => dims[0],
            GroupType::Column => dims[1] * dims[2] * dims[3],
        };
        if mask.len() != groups {
            return Err(Error::shape(format!("layer {}", convs[k]), format!("mask has {} groups, layer {groups}", mask.len())));
        }
        if mask.kept().is_empty() {
            return Err(Error::config(
                format!("prune_ratio[{k}]"),
                format!("mask removes every {group_type} group of layer {}; the network would disconnect", convs[k]),
            ));
        }
    }

    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut plans = Vec::new();
    let mut propagation = Vec::new();
    // Channels of the current activation that survive, and the conv that produced them.
    let mut live: Vec<usize> = (0..spec.input.c).collect();
    let mut source: Option<(usize, Vec<usize>)> = None;
    let mut conv_k = 0;

    for (i, layer) in spec.layers.iter().enumerate() {
        let p = || params.layer(i).ok_or_else(|| Error::shape(format!("layer {i}"), "missing parameters"));
        match *layer {
            LayerSpec::Conv { kernel, stride, pad, .. } => {
                let lp = p()?;
                let [n, c, kh, kw] = lp.weight.dims();
                let mask = &masks[conv_k];
                let full = lp.weight_matrix();
                let (kept_rows, kept_cols, gather) = match group_type {
                    GroupType::Row => {
                        let cols: Vec<usize> =
                            live.iter().flat_map(|&ch| (ch * kh * kw..(ch + 1) * kh * kw).collect::<Vec<_>>()).collect();
                        (mask.kept(), cols, None)
                    }
                    GroupType::Column => {
                        let kept = mask.kept();
                        ((0..n).collect(), kept.clone(), Some(kept))
                    }
                };
                if let Some((from, removed)) = source.take() {
                    if !removed.is_empty() {
                        propagation.push(Propagation { from_layer: from, to_layer: i, removed_channels: removed });
                    }
                }
                let weights = full.gather_rows(&kept_rows).gather_cols(&kept_cols);
                let bias = kept_rows.iter().map(|&r| lp.bias[r]).collect();
                layers.push(CompactLayer::Conv {
                    in_channels: live.len(),
                    geom: ConvGeometry::square(kernel, stride, pad),
                    weights,
                    bias,
                    gather,
                });
                debug_assert_eq!(c * kh * kw, full.cols());
                if group_type == GroupType::Row {
                    let removed = (0..n).filter(|&f| mask.is_pruned(f)).collect();
                    source = Some((i, removed));
                    live = kept_rows.clone();
                } else {
                    live = (0..n).collect();
                }
                plans.push(LayerPlan { layer: i, kept_rows, kept_cols });
                conv_k += 1;
            }
            LayerSpec::Relu => layers.push(CompactLayer::Relu),
            LayerSpec::MaxPool { size, stride } => layers.push(CompactLayer::MaxPool { size, stride }),
            LayerSpec::Fc { out_features } => {
                let lp = p()?;
                let inp = shapes[i];
                let hw = inp.h * inp.w;
                let kept_cols: Vec<usize> =
                    live.iter().flat_map(|&ch| (ch * hw..(ch + 1) * hw).collect::<Vec<_>>()).collect();
                if let Some((from, removed)) = source.take() {
                    if !removed.is_empty() {
                        propagation.push(Propagation { from_layer: from, to_layer: i, removed_channels: removed });
                    }
                }
                let weights = lp.weight_matrix().gather_cols(&kept_cols);
                layers.push(CompactLayer::Fc { weights, bias: lp.bias.clone() });
                plans.push(LayerPlan { layer: i, kept_rows: (0..out_features).collect(), kept_cols });
                live = (0..out_features).collect();
            }
        }
    }
    Ok((CompactModel { input: spec.input, layers }, CompactPlan { group_type, layers: plans, propagation }))
}

impl<T: Real> CompactModel<T> {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                CompactLayer::Conv { weights, bias, .. } | CompactLayer::Fc { weights, bias } => {
                    weights.data().len() + bias.len()
                }
                _ => 0,
            })
            .sum()
    }

    /// Class logits, `batch x classes`.
    pub fn forward(&self, inputs: &Tensor4D<T>) -> Result<Matrix<T>> {
        let [batch, c, h, w] = inputs.dims();
        if (c, h, w) != (self.input.c, self.input.h, self.input.w) {
            return Err(Error::shape("input", format!("{c}x{h}x{w} does not match compact input {:?}", self.input)));
        }
        let mut x = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                CompactLayer::Conv { in_channels, geom, weights, bias, gather } => {
                    if x.c() != *in_channels {
                        return Err(Error::shape(format!("layer {i} (conv)"), format!("{} channels, expected {in_channels}", x.c())));
                    }
                    conv_forward(&x, weights, bias, *geom, gather.as_deref())?.0
                }
                CompactLayer::Relu => relu_forward(&x).0,
                CompactLayer::MaxPool { size, stride } => maxpool_forward(&x, *size, *stride).0,
                CompactLayer::Fc { weights, bias } => {
                    let flat = Matrix::from_vec(batch, x.item_len(), x.into_vec())?;
                    let y = fc_forward(&flat, weights, bias)?;
                    Tensor4D::from_vec([batch, weights.rows(), 1, 1], y.into_vec())?
                }
            };
        }
        let classes = x.c();
        Matrix::from_vec(batch, classes, x.into_vec())
    }

    pub fn cast<U: Real>(&self) -> CompactModel<U> {
        let m = |w: &Matrix<T>| {
            Matrix::from_vec(w.rows(), w.cols(), w.data().iter().map(|v| U::of(v.as_f64())).collect())
                .expect("same dims")
        };
        let v = |b: &[T]| b.iter().map(|x| U::of(x.as_f64())).collect();
        CompactModel {
            input: self.input,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    CompactLayer::Conv { in_channels, geom, weights, bias, gather } => CompactLayer::Conv {
                        in_channels: *in_channels,
                        geom: *geom,
                        weights: m(weights),
                        bias: v(bias),
                        gather: gather.clone(),
                    },
                    CompactLayer::Relu => CompactLayer::Relu,
                    CompactLayer::MaxPool { size, stride } => CompactLayer::MaxPool { size: *size, stride: *stride },
                    CompactLayer::Fc { weights, bias } => CompactLayer::Fc { weights: m(weights), bias: v(bias) },
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub inputs: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random inputs uniform in `[-1, 1]`, drawn from a seeded stream.
pub fn random_inputs<T: Real>(shape: Shape, n: usize, seed: u64) -> Tensor4D<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let data = (0..n * shape.len()).map(|_| T::of(rng.gen_range(-1.0..=1.0))).collect();
    Tensor4D::from_vec([n, shape.c, shape.h, shape.w], data).expect("sized")
}

/// Compares the logits of the masked full model against the compact model.
pub fn equivalence_check<T: Real>(
    spec: &NetworkSpec,
    masked: &Params<T>,
    compact: &CompactModel<T>,
    n_inputs: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let inputs = random_inputs::<T>(spec.input, n_inputs, seed);
    let a = predict(spec, masked, &inputs)?;
    let b = compact.forward(&inputs)?;
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Ok(EquivalenceReport { inputs: n_inputs, max_abs_diff: f64::INFINITY, tolerance: tol, passed: false });
    }
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max);
    let diff = if a.data().iter().chain(b.data()).all(|v| v.is_finite()) { diff } else { f64::INFINITY };
    Ok(EquivalenceReport { inputs: n_inputs, max_abs_diff: diff, tolerance: tol, passed: diff <= tol })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s<T: Real>(out: &mut Vec<u8>, vals: &[T]) {
    for v in vals {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Serializes to the `compact_model.bin` layout (weights stored as f32).
pub fn encode_compact<T: Real>(model: &CompactModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [model.input.c, model.input.h, model.input.w, model.layers.len()] {
        put_u32(&mut out, v)?;
    }
    for layer in &model.layers {
        match layer {
            CompactLayer::Conv { in_channels, geom, weights, bias, gather } => {
                out.push(0);
                for v in [weights.rows(), *in_channels, geom.kh, geom.kw, geom.stride, geom.pad] {
                    put_u32(&mut out, v)?;
                }
                let g = gather.as_deref().unwrap_or(&[]);
                put_u32(&mut out, g.len())?;
                for &j in g {
                    put_u32(&mut out, j)?;
                }
                put_f32s(&mut out, weights.data());
                put_f32s(&mut out, bias);
            }
            CompactLayer::Relu => out.push(1),
            CompactLayer::MaxPool { size, stride } => {
                out.push(2);
                put_u32(&mut out, *size)?;
                put_u32(&mut out, *stride)?;
            }
            CompactLayer::Fc { weights, bias } => {
                out.push(3);
                put_u32(&mut out, weights.rows())?;
                put_u32(&mut out, weights.cols())?;
                put_f32s(&mut out, weights.data());
                put_f32s(&mut out, bias);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("compact model truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn decode_compact(bytes: &[u8]) -> Result<CompactModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a compact model (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported compact model version {version}")));
    }
    let input = Shape::new(r.u32()?, r.u32()?, r.u32()?);
    let count = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let layer = match r.u8()? {
            0 => {
                let (out, in_channels, kh, kw, stride, pad) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let glen = r.u32()?;
                let gather: Vec<usize> = (0..glen).map(|_| r.u32()).collect::<Result<_>>()?;
                let k = if glen > 0 { glen } else { in_channels * kh * kw };
                let weights = Matrix::from_vec(out, k, r.f32s(out * k)?)?;
                let bias = r.f32s(out)?;
                CompactLayer::Conv {
                    in_channels,
                    geom: ConvGeometry { kh, kw, stride, pad },
                    weights,
                    bias,
                    gather: (glen > 0).then_some(gather),
                }
            }
            1 => CompactLayer::Relu,
            2 => CompactLayer::MaxPool { size: r.u32()?, stride: r.u32()? },
            3 => {
                let (out, inp) = (r.u32()?, r.u32()?);
                let weights = Matrix::from_vec(out, inp, r.f32s(out * inp)?)?;
                CompactLayer::Fc { weights, bias: r.f32s(out)? }
            }
            k => return Err(Error::Format(format!("unknown layer kind byte {k}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after compact model", bytes.len() - r.pos)));
    }
    Ok(CompactModel { input, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn toy() -> NetworkSpec {
        NetworkSpec::toy(Shape::new(2, 8, 8), 3, 10, 6, 0.5).unwrap()
    }

    fn random_mask(groups: usize, pruned: usize, seed: u64) -> GroupMask {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..groups).collect();
        idx.shuffle(&mut rng);
        let mut m = GroupMask::new(groups);
        for &g in &idx[..pruned] {
            m.prune(g);
        }
        m
    }

    #[test]
    fn no_pruning_is_identity() {
        let spec = toy();
        let params = init_params::<f32>(&spec, 1).unwrap();
        let masks = vec![GroupMask::new(10), GroupMask::new(6)];
        let (model, plan) = build_compact(&spec, &params, &masks, GroupType::Row).unwrap();
        assert_eq!(model.param_count(), params.count());
        assert!(plan.propagation.is_empty());
        let rep = equivalence_check(&spec, &params, &model, 20, 0.0, 3).unwrap();
        assert_eq!(rep.max_abs_diff, 0.0);
    }

    #[test]
    fn row_pruning_propagates_channels() {
        let spec = toy();
        let params = init_params::<f32>(&spec, 2).unwrap();
        let mut m0 = GroupMask::new(10);
        for f in [1, 4, 5, 9] {
            m0.prune(f);
        }
        let masks = vec![m0, GroupMask::new(6)];
        let (model, plan) = build_compact(&spec, &params, &masks, GroupType::Row).unwrap();
        match (&model.layers[0], &model.layers[3]) {
            (CompactLayer::Conv { weights: w0, .. }, CompactLayer::Conv { weights: w1, in_channels, .. }) => {
                assert_eq!(w0.rows(), 6);
                assert_eq!(*in_channels, 6);
                assert_eq!((w1.rows(), w1.cols()), (6, 6 * 9));
            }
            _ => panic!("unexpected layer kinds"),
        }
        assert_eq!(plan.propagation, vec![Propagation { from_layer: 0, to_layer: 3, removed_channels: vec![1, 4, 5, 9] }]);
        let masked = masked_params(&spec, &params, &masks, GroupType::Row).unwrap();
        let rep = equivalence_check(&spec, &masked, &model, 100, 1e-5, 4).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn last_conv_rows_slice_the_classifier() {
        let spec = toy();
        let params = init_params::<f32>(&spec, 5).unwrap();
        let masks = vec![GroupMask::new(10), random_mask(6, 3, 1)];
        let (model, plan) = build_compact(&spec, &params, &masks, GroupType::Row).unwrap();
        let CompactLayer::Fc { weights, .. } = &model.layers[6] else { panic!() };
        assert_eq!(weights.cols(), 3 * 2 * 2);
        assert_eq!(plan.propagation[0].to_layer, 6);
        let masked = masked_params(&spec, &params, &masks, GroupType::Row).unwrap();
        assert!(equivalence_check(&spec, &masked, &model, 100, 1e-5, 9).unwrap().passed);
    }

    #[test]
    fn parameter_count_matches_removed_structure() {
        let spec = toy();
        let params = init_params::<f32>(&spec, 6).unwrap();
        let masks = vec![random_mask(10, 4, 2), random_mask(6, 2, 3)];
        let (model, _) = build_compact(&spec, &params, &masks, GroupType::Row).unwrap();
        // Filters carry 2*9 and 10*9 weights plus a bias; the second conv keeps 4 of 6 filters,
        // each losing 4 input channels of 9 weights; the fc layer loses 2 channels of 2*2 inputs per class.
        let removed = 4 * (2 * 9 + 1) + 2 * (10 * 9 + 1) + 4 * 4 * 9 + 3 * 2 * 4;
        assert_eq!(model.param_count(), params.count() - removed);

        let cmasks = vec![random_mask(18, 9, 4), random_mask(90, 45, 5)];
        let (model, _) = build_compact(&spec, &params, &cmasks, GroupType::Column).unwrap();
        assert_eq!(model.param_count(), params.count() - 9 * 10 - 45 * 6);
    }

    #[test]
    fn column_pruning_matches_masked_model() {
        let spec = toy();
        for seed in 0..3 {
            let params = init_params::<f32>(&spec, seed).unwrap();
            let masks = vec![random_mask(18, 9, seed), random_mask(90, 45, seed + 10)];
            let (model, plan) = build_compact(&spec, &params, &masks, GroupType::Column).unwrap();
            assert!(plan.layers[0].kept_cols.windows(2).all(|w| w[0] < w[1]));
            let masked = masked_params(&spec, &params, &masks, GroupType::Column).unwrap();
            let rep = equivalence_check(&spec, &masked, &model, 100, 1e-5, seed).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn float64_equivalence_is_tight() {
        let spec = toy();
        let params = init_params::<f64>(&spec, 8).unwrap();
        for ty in [GroupType::Row, GroupType::Column] {
            let masks = match ty {
                GroupType::Row => vec![random_mask(10, 5, 1), random_mask(6, 3, 2)],
                GroupType::Column => vec![random_mask(18, 9, 1), random_mask(90, 45, 2)],
            };
            let (model, _) = build_compact(&spec, &params, &masks, ty).unwrap();
            let masked = masked_params(&spec, &params, &masks, ty).unwrap();
            let rep = equivalence_check(&spec, &masked, &model, 100, 1e-10, 1).unwrap();
            assert!(rep.passed, "{ty}: {rep:?}");
        }
    }

    #[test]
    fn mis_sliced_model_fails() {
        let spec = toy();
        let params = init_params::<f32>(&spec, 3).unwrap();
        let masks = vec![random_mask(10, 4, 7), GroupMask::new(6)];
        let (mut model, _) = build_compact(&spec, &params, &masks, GroupType::Row).unwrap();
        if let CompactLayer::Conv { weights, .. } = &mut model.layers[3] {
            let cols = weights.cols();
            let shifted: Vec<usize> = (0..cols).map(|j| (j + 9) % cols).collect();
            *weights = weights.gather_cols(&shifted);
        }
        let masked = masked_params(&spec, &params, &masks, GroupType::Row).unwrap();
        let rep = equivalence_check(&spec, &masked, &model, 100, 1e-5, 0).unwrap();
        assert!(!rep.passed && rep.max_abs_diff > 1e-3, "{rep:?}");
    }

    #[test]
    fn removing_a_whole_layer_is_rejected() {
        let spec = toy();
        let params = init_params::<f32>(&spec, 3).unwrap();
        let masks = vec![GroupMask::from_flags(vec![true; 10]), GroupMask::new(6)];
        assert!(matches!(build_compact(&spec, &params, &masks, GroupType::Row), Err(Error::Config { .. })));
    }

    #[test]
    fn binary_round_trip() {
        let spec = toy();
        let params = init_params::<f32>(&spec, 4).unwrap();
        for (ty, masks) in [
            (GroupType::Row, vec![random_mask(10, 4, 1), random_mask(6, 2, 2)]),
            (GroupType::Column, vec![random_mask(18, 5, 1), random_mask(90, 30, 2)]),
        ] {
            let (model, _) = build_compact(&spec, &params, &masks, ty).unwrap();
            let bytes = encode_compact(&model).unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            let back = decode_compact(&bytes).unwrap();
            assert_eq!(back, model);
            assert!(decode_compact(&bytes[..bytes.len() - 1]).is_err());
            let mut extra = bytes.clone();
            extra.push(0);
            assert!(decode_compact(&extra).is_err());
        }
    }
}
