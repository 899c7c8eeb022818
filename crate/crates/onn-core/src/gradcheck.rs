//! Finite-difference gradient oracle.
//!
//! Checks analytic gradients against central differences
//! `(f(x+ε) − f(x−ε)) / 2ε`. The oracle only ever calls the *forward* path,
//! so it stays independent of the backward implementations it verifies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step, applied in the tensor's own precision.
    pub epsilon: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Check at most this many elements per tensor (seeded subsample);
    /// `None` checks every element.
    pub samples_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-3,
            tolerance: 1e-3,
            samples_per_tensor: None,
            seed: 0,
        }
    }
}

/// Worst relative error observed for one named tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub elements_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    /// Names of tensors whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.max_rel_err > self.tolerance)
            .map(|c| c.name.as_str())
            .collect()
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compare analytic gradients against central finite differences.
///
/// `loss` must be a deterministic function of `tensors` (run dropout in eval
/// mode or replay a fixed mask). `analytic` pairs with `tensors` by position.
pub fn grad_check<S, F>(
    mut loss: F,
    tensors: &[(String, Tensor<S>)],
    analytic: &[Tensor<S>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&[Tensor<S>]) -> Result<S>,
{
    assert_eq!(
        tensors.len(),
        analytic.len(),
        "one analytic gradient per checked tensor"
    );
    let mut work: Vec<Tensor<S>> = tensors.iter().map(|(_, t)| t.clone()).collect();
    let eps = S::from_f64(cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::with_capacity(tensors.len());

    for ti in 0..tensors.len() {
        let len = work[ti].len();
        let elems: Vec<usize> = match cfg.samples_per_tensor {
            Some(count) if count < len => {
                let mut picked = rand::seq::index::sample(&mut rng, len, count).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };

        let grad = &analytic[ti];
        assert_eq!(
            grad.shape(),
            tensors[ti].1.shape(),
            "gradient shape must match its tensor ({})",
            tensors[ti].0
        );

        let mut max_rel = 0.0f64;
        for &ei in &elems {
            let original = work[ti].data()[ei];
            work[ti].data_mut()[ei] = original + eps;
            let plus = loss(&work)?.as_f64();
            work[ti].data_mut()[ei] = original - eps;
            let minus = loss(&work)?.as_f64();
            work[ti].data_mut()[ei] = original;

            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let rel = relative_error(grad.data()[ei].as_f64(), numeric);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        checks.push(TensorCheck {
            name: tensors[ti].0.clone(),
            max_rel_err: max_rel,
            elements_checked: elems.len(),
        });
    }

    Ok(GradCheckReport {
        checks,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_near_zero_error() {
        // f(x) = 3·Σx, so df/dx_i = 3 everywhere.
        let x = Tensor::from_vec(&[3], vec![0.37f64, -1.2, 2.5]).unwrap();
        let grad = Tensor::filled(&[3], 3.0f64);
        let report = grad_check(
            |ts: &[Tensor<f64>]| Ok(ts[0].data().iter().map(|v| 3.0 * v).sum()),
            &[("x".into(), x)],
            &[grad],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-9, "{}", report.max_rel_err());
        assert!(report.passed());
    }

    #[test]
    fn linear_function_in_f32_stays_within_tolerance() {
        let x = Tensor::from_vec(&[3], vec![0.37f32, -1.2, 2.5]).unwrap();
        let grad = Tensor::filled(&[3], 3.0f32);
        let report = grad_check(
            |ts: &[Tensor<f32>]| Ok(ts[0].data().iter().map(|v| 3.0 * v).sum()),
            &[("x".into(), x)],
            &[grad],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-3, "{}", report.max_rel_err());
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let wrong = Tensor::filled(&[2], 5.0f64);
        let report = grad_check(
            |ts: &[Tensor<f64>]| Ok(ts[0].data().iter().map(|v| 3.0 * v).sum()),
            &[("x".into(), x)],
            &[wrong],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures(), vec!["x"]);
    }

    #[test]
    fn sampling_checks_requested_count() {
        let x = Tensor::filled(&[100], 1.0f64);
        let grad = Tensor::filled(&[100], 3.0f64);
        let cfg = GradCheckConfig {
            samples_per_tensor: Some(7),
            ..GradCheckConfig::default()
        };
        let report = grad_check(
            |ts: &[Tensor<f64>]| Ok(ts[0].data().iter().map(|v| 3.0 * v).sum()),
            &[("x".into(), x)],
            &[grad],
            &cfg,
        )
        .unwrap();
        assert_eq!(report.checks[0].elements_checked, 7);
    }
}
