use serde::Serialize;

use super::{backward, forward, NetworkSpec, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor4D;

/// Relative errors are computed as `|a - n| / max(|a|, |n|, REL_FLOOR)`, so
/// entries whose true gradient is below the floor are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Entries whose ±h probes switched a ReLU or max-pool winner; finite
    /// differences are meaningless across such kinks.
    pub skipped_kinks: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| !l.flagged)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn flagged_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.flagged).map(|l| l.layer).collect()
    }
}

/// Compares backprop gradients with central differences in float64.
pub fn grad_check(
    spec: &NetworkSpec,
    params: &Params<f64>,
    inputs: &Tensor4D<f64>,
    labels: &[usize],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let pass = forward(spec, params, inputs, labels)?;
    let analytic = backward(spec, params, &pass, labels)?;
    grad_check_against(spec, params, inputs, labels, &analytic, h, tolerance)
}

/// Like [`grad_check`] but against caller-supplied analytic gradients.
pub fn grad_check_against(
    spec: &NetworkSpec,
    params: &Params<f64>,
    inputs: &Tensor4D<f64>,
    labels: &[usize],
    analytic: &Params<f64>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let base_pattern = forward(spec, params, inputs, labels)?.activation_pattern();
    let mut probe = params.clone();
    let mut layers = Vec::new();
    for i in 0..spec.layers.len() {
        let (Some(p), Some(a)) = (params.layer(i), analytic.layer(i)) else { continue };
        let mut check = LayerCheck {
            layer: i,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
            flagged: false,
        };
        let n_w = p.weight.len();
        for k in 0..n_w + p.bias.len() {
            let get = |pp: &Params<f64>| {
                let l = pp.layer(i).unwrap();
                if k < n_w { l.weight.data()[k] } else { l.bias[k - n_w] }
            };
            let set = |pp: &mut Params<f64>, v: f64| {
                let l = pp.layer_mut(i).unwrap();
                if k < n_w { l.weight.data_mut()[k] = v } else { l.bias[k - n_w] = v }
            };
            let orig = get(&probe);
            set(&mut probe, orig + h);
            let plus = forward(spec, &probe, inputs, labels)?;
            set(&mut probe, orig - h);
            let minus = forward(spec, &probe, inputs, labels)?;
            set(&mut probe, orig);
            if plus.activation_pattern() != base_pattern || minus.activation_pattern() != base_pattern {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * h);
            let exact = if k < n_w { a.weight.data()[k] } else { a.bias[k - n_w] };
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(REL_FLOOR);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked += 1;
        }
        check.flagged = check.max_rel_error >= tolerance;
        layers.push(check);
    }
    Ok(GradCheckReport { h, tolerance, layers })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{init_params, LayerSpec, Shape};

    fn data(spec: &NetworkSpec, n: usize, seed: u64) -> (Tensor4D<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [n, spec.input.c, spec.input.h, spec.input.w];
        let x = (0..dims.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = (0..n).map(|_| rng.gen_range(0..spec.num_classes())).collect();
        (Tensor4D::from_vec(dims, x).unwrap(), y)
    }

    #[test]
    fn linear_net_is_near_exact() {
        let spec = NetworkSpec::new(Shape::new(6, 1, 1), vec![LayerSpec::Fc { out_features: 3 }], vec![]).unwrap();
        let params = init_params::<f64>(&spec, 2).unwrap();
        let (x, y) = data(&spec, 4, 3);
        let report = grad_check(&spec, &params, &x, &y, 1e-5, 1e-6).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let spec = NetworkSpec::toy(Shape::new(1, 4, 4), 2, 2, 2, 0.5).unwrap();
        let params = init_params::<f64>(&spec, 4).unwrap();
        let (x, y) = data(&spec, 2, 5);
        let pass = forward(&spec, &params, &x, &y).unwrap();
        let mut grads = backward(&spec, &params, &pass, &y).unwrap();
        grads.scale(1.01);
        let report = grad_check_against(&spec, &params, &x, &y, &grads, 1e-5, 1e-6).unwrap();
        assert!(!report.passed());
        assert_eq!(report.flagged_layers(), vec![0, 3, 6]);
    }
}
