use crate::error::{Error, Result};
use crate::numkernel::graph::softmax_in_place;
use crate::numkernel::Tensor;

/// Temperature-scaled softmax, `exp(z_i / tau) / sum_j exp(z_j / tau)`.
pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of empty logits"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logit"));
    }
    let mut out: Vec<f64> = logits.iter().map(|z| z / tau).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Jacobian of [`softmax`] with respect to its logits, evaluated at `probs`:
/// entry `(i, j)` is `f_i (delta_ij - f_j) / tau`.
pub fn softmax_jacobian(probs: &[f64], tau: f64) -> Result<Tensor> {
    if probs.is_empty() {
        return Err(Error::shape("empty probability vector"));
    }
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-8 || probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::input(format!(
            "not a probability vector (sum = {total})"
        )));
    }
    let k = probs.len();
    let mut data = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let delta = if i == j { 1.0 } else { 0.0 };
            data[i * k + j] = probs[i] * (delta - probs[j]) / tau;
        }
    }
    Ok(Tensor::from_raw(vec![k, k], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_and_closed_form_values() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
        let q = softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-15);
    }

    #[test]
    fn overflow_safe() {
        let p = softmax(&[1000.0, 999.0, -1000.0], 0.01).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(softmax(&[], 1.0), Err(Error::InvalidShape(_))));
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(softmax(&[1.0], -1.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(
            softmax_jacobian(&[0.5, 0.4], 1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn two_class_jacobian() {
        let j = softmax_jacobian(&[0.5, 0.5], 1.0).unwrap();
        assert_eq!(j.data(), &[0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn jacobian_entry_matches_central_differences() {
        let z = [1.0, 0.0];
        let p = softmax(&z, 1.0).unwrap();
        let j = softmax_jacobian(&p, 1.0).unwrap();
        assert!((j.data()[3] - 0.19661).abs() < 1e-5);
        let h = 1e-6;
        let fd = (softmax(&[1.0, h], 1.0).unwrap()[1] - softmax(&[1.0, -h], 1.0).unwrap()[1])
            / (2.0 * h);
        assert!((fd - j.data()[3]).abs() < 1e-6);
    }
}
