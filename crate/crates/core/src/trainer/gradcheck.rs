//! Central finite-difference oracle for the full training objective.
//!
//! Uses only forward evaluations, so it is independent of the analytic
//! backward pass it checks. Run it with the smooth surrogate quantizer;
//! the hard sign step has no derivative to compare against.

use crate::bsq::BsqConfig;
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams, QuantMode};
use crate::tensor::Matrix;

/// Gradient magnitudes below this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares every parameter's analytic gradient with `(L(p+h) − L(p−h)) / 2h`.
pub fn check_gradients(
    params: &ModelParams<f64>,
    features: &Matrix<f64>,
    model: &ModelConfig,
    bsq: &BsqConfig,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = params.loss_and_grad(features, model, bsq, QuantMode::Surrogate)?;
    let analytic = analytic.tensors().into_iter().map(|(n, m)| (n, m.clone())).collect::<Vec<_>>();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (t, (name, grad)) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.tensors()[t].1.as_slice()[i];
            set_entry(&mut probe, t, i, original + step);
            let plus = probe.loss(features, model, bsq, QuantMode::Surrogate)?.total;
            set_entry(&mut probe, t, i, original - step);
            let minus = probe.loss(features, model, bsq, QuantMode::Surrogate)?.total;
            set_entry(&mut probe, t, i, original);
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.as_slice()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = format!("{name}[{i}]");
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn set_entry(params: &mut ModelParams<f64>, tensor: usize, index: usize, value: f64) {
    params.tensors_mut()[tensor].1.as_mut_slice()[index] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> (ModelConfig, BsqConfig) {
        let model = ModelConfig {
            feature_dim: 4,
            token_rate: 25.0,
            chunk_duration: 0.12,
            frame_rate: 50.0,
            max_frames: 6,
            enc_layers: 1,
            dec_layers: 1,
            enc_width: 8,
            dec_width: 8,
            heads: 2,
            mlp_ratio: 2,
        };
        (model, BsqConfig { dim: 3, ..Default::default() })
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let (model, bsq) = tiny();
        assert_eq!((model.num_slots(), model.chunk_frames()), (3, 6));
        let params = ModelParams::<f64>::init(&model, &bsq, 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::<f64>::randn(6, 4, 1.0, &mut rng);
        let report = check_gradients(&params, &x, &model, &bsq, 1e-5).unwrap();
        assert_eq!(report.checked, params.num_parameters());
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
