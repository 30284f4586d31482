use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};
use crate::groups::{GroupMask, GroupPartition, GroupType};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Base weight decay applied to every weight (not to biases).
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Per-group decay factors and prune mask for one conv layer.
#[derive(Debug, Clone, Copy)]
pub struct GroupTerms<'a> {
    pub partition: &'a GroupPartition,
    pub lambdas: &'a [f64],
    pub mask: Option<&'a GroupMask>,
}

/// One SGD step on `E = L + (λ/2)·Σw² + Σ_g (λ_g/2)·Σ_{w∈g} w²`:
/// `w ← w − lr·(∂L/∂w + λ·w + λ_g(w)·w)`.
///
/// `groups` is aligned with the network layers. Weights of pruned groups are
/// written as exactly zero, as is a pruned filter's bias in row mode.
pub fn sgd_step<T: Real>(
    params: &mut Params<T>,
    grads: &Params<T>,
    groups: &[Option<GroupTerms<'_>>],
    cfg: &SgdConfig,
) -> Result<()> {
    if params.layers.len() != grads.layers.len() {
        return Err(Error::shape("sgd", "parameter and gradient layer counts differ"));
    }
    let lr = T::of(cfg.learning_rate);
    for (i, (p, g)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        let (p, g) = match (p, g) {
            (Some(p), Some(g)) => (p, g),
            (None, None) => continue,
            _ => return Err(Error::shape(format!("layer {i}"), "parameter/gradient presence differs")),
        };
        if p.weight.dims() != g.weight.dims() || p.bias.len() != g.bias.len() {
            return Err(Error::shape(format!("layer {i}"), "gradient shape differs from weights"));
        }
        let mut decay = vec![cfg.weight_decay; p.weight.len()];
        let mut keep: Option<Vec<bool>> = None;
        let mut pruned_bias: Vec<usize> = Vec::new();
        if let Some(terms) = groups.get(i).copied().flatten() {
            let part = terms.partition;
            if part.dims() != p.weight.dims() || terms.lambdas.len() != part.len() {
                return Err(Error::shape(format!("layer {i}"), "group terms do not match the weights"));
            }
            for (gi, &lambda) in terms.lambdas.iter().enumerate() {
                if lambda != 0.0 {
                    for &w in part.group(gi) {
                        decay[w] += lambda;
                    }
                }
            }
            if let Some(mask) = terms.mask {
                if mask.len() != part.len() {
                    return Err(Error::shape(format!("layer {i}"), "mask does not match partition"));
                }
                keep = Some(mask.weight_mask(part));
                if part.group_type() == GroupType::Row {
                    pruned_bias = (0..mask.len()).filter(|&f| mask.is_pruned(f)).collect();
                }
            }
        }
        for (idx, (w, &dw)) in p.weight.data_mut().iter_mut().zip(g.weight.data()).enumerate() {
            if keep.as_ref().is_some_and(|k| !k[idx]) {
                *w = T::zero();
            } else {
                *w = *w - lr * (dw + T::of(decay[idx]) * *w);
            }
        }
        for (b, &db) in p.bias.iter_mut().zip(&g.bias) {
            *b = *b - lr * db;
        }
        for f in pruned_bias {
            p.bias[f] = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::partition;
    use crate::nn::{LayerSpec, NetworkSpec, Shape};

    fn single_conv() -> NetworkSpec {
        NetworkSpec::new(
            Shape::new(1, 1, 1),
            vec![LayerSpec::Conv { out_channels: 2, kernel: 1, stride: 1, pad: 0 }, LayerSpec::Fc { out_features: 2 }],
            vec![0.5],
        )
        .unwrap()
    }

    fn cfg(lr: f64, wd: f64) -> SgdConfig {
        SgdConfig { learning_rate: lr, weight_decay: wd, batch_size: 1 }
    }

    #[test]
    fn zero_gradient_and_decay_is_identity() {
        let spec = single_conv();
        let mut params = crate::nn::init_params::<f64>(&spec, 1).unwrap();
        let before = params.clone();
        let grads = Params::zeros(&spec).unwrap();
        sgd_step(&mut params, &grads, &[], &cfg(0.1, 0.0)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn pure_group_decay() {
        let spec = single_conv();
        let mut params = Params::<f64>::zeros(&spec).unwrap();
        params.layer_mut(0).unwrap().weight.data_mut()[0] = 1.0;
        let grads = Params::zeros(&spec).unwrap();
        let part = partition(0, &params.layer(0).unwrap().weight, GroupType::Row);
        let lambdas = [0.1, 0.0];
        let terms = [Some(GroupTerms { partition: &part, lambdas: &lambdas, mask: None }), None];
        sgd_step(&mut params, &grads, &terms, &cfg(1.0, 0.0)).unwrap();
        assert_eq!(params.layer(0).unwrap().weight.data()[0], 0.9);
    }

    #[test]
    fn base_and_group_decay_add() {
        let spec = single_conv();
        let mut params = Params::<f64>::zeros(&spec).unwrap();
        params.layer_mut(0).unwrap().weight.data_mut()[1] = 2.0;
        let mut grads = Params::zeros(&spec).unwrap();
        grads.layer_mut(0).unwrap().weight.data_mut()[1] = 0.5;
        let part = partition(0, &params.layer(0).unwrap().weight, GroupType::Row);
        let lambdas = [0.0, 0.25];
        let terms = [Some(GroupTerms { partition: &part, lambdas: &lambdas, mask: None }), None];
        sgd_step(&mut params, &grads, &terms, &cfg(0.5, 0.25)).unwrap();
        // 2 - 0.5 * (0.5 + 0.25*2 + 0.25*2) = 1.25
        assert_eq!(params.layer(0).unwrap().weight.data()[1], 1.25);
    }

    #[test]
    fn masked_group_stays_zero() {
        let spec = single_conv();
        let mut params = Params::<f32>::zeros(&spec).unwrap();
        let mut grads = Params::<f32>::zeros(&spec).unwrap();
        grads.layer_mut(0).unwrap().weight.data_mut().iter_mut().for_each(|g| *g = 3.0);
        grads.layer_mut(0).unwrap().bias.iter_mut().for_each(|g| *g = 3.0);
        let part = partition(0, &params.layer(0).unwrap().weight, GroupType::Row);
        let mut mask = GroupMask::new(2);
        mask.prune(0);
        let lambdas = [0.0, 0.0];
        let terms = [Some(GroupTerms { partition: &part, lambdas: &lambdas, mask: Some(&mask) }), None];
        for _ in 0..5 {
            sgd_step(&mut params, &grads, &terms, &cfg(0.1, 0.01)).unwrap();
        }
        let l0 = params.layer(0).unwrap();
        assert_eq!(l0.weight.data()[0], 0.0);
        assert_eq!(l0.bias[0], 0.0);
        assert!(l0.weight.data()[1] != 0.0);
        assert!(l0.bias[1] != 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.0, 0.0).validate().is_err());
        assert!(cfg(0.1, -1.0).validate().is_err());
        assert!(cfg(0.1, 0.0).validate().is_ok());
    }
}
