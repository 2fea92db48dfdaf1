use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    K1,
    K2,
    K3,
}

/// Per-token KL estimate from `d = ref - new`.
pub fn kl_value(estimator: KlEstimator, new: f64, reference: f64) -> f64 {
    let d = reference - new;
    match estimator {
        KlEstimator::K1 => -d,
        KlEstimator::K2 => 0.5 * d * d,
        KlEstimator::K3 => d.exp() - d - 1.0,
    }
}

/// Derivative of [`kl_value`] with respect to `new`.
pub fn kl_grad(estimator: KlEstimator, new: f64, reference: f64) -> f64 {
    let d = reference - new;
    match estimator {
        KlEstimator::K1 => 1.0,
        KlEstimator::K2 => -d,
        KlEstimator::K3 => 1.0 - d.exp(),
    }
}

/// Masked per-token KL values (0 off the mask).
pub fn kl_penalty(
    new: &[f64],
    reference: &[f64],
    mask: &[f64],
    estimator: KlEstimator,
) -> Vec<f64> {
    new.iter()
        .zip(reference)
        .zip(mask)
        .map(|((&n, &r), &m)| {
            if m != 0.0 {
                kl_value(estimator, n, r)
            } else {
                0.0
            }
        })
        .collect()
}
