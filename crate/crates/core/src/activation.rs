//! Prediction-activation inconsistency: one minus the Pearson correlation
//! between an input's last-conv magnitude distribution and the reference
//! distribution of its predicted class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionSource {
    Practical,
    Profile,
}

/// Per-channel mean absolute activation of the last conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDistribution {
    pub values: Vec<f64>,
    pub source: DistributionSource,
    pub label: Option<String>,
}

impl ActivationDistribution {
    pub fn practical(values: Vec<f64>) -> Self {
        ActivationDistribution {
            values,
            source: DistributionSource::Practical,
            label: None,
        }
    }

    pub fn profile(label: impl Into<String>, values: Vec<f64>) -> Self {
        ActivationDistribution {
            values,
            source: DistributionSource::Profile,
            label: Some(label.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Pearson correlation with population moments.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidShape {
            shape: vec![a.len()],
            len: a.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::ConstantDistribution);
    }
    let r = (cov / n) / ((va / n).sqrt() * (vb / n).sqrt());
    if !r.is_finite() {
        return Err(Error::NonFinite("pearson correlation".into()));
    }
    Ok(r.clamp(-1.0, 1.0))
}

/// `1 − PCC`, in `[0, 2]`.
pub fn activation_inconsistency(practical: &ActivationDistribution, expected: &ActivationDistribution) -> Result<f64> {
    Ok(1.0 - pearson(&practical.values, &expected.values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(a: &[f64], b: &[f64]) -> Result<f64> {
        activation_inconsistency(
            &ActivationDistribution::practical(a.to_vec()),
            &ActivationDistribution::profile("x", b.to_vec()),
        )
    }

    #[test]
    fn self_correlation_is_zero_distance() {
        let f = [0.3, 1.2, 0.0, 4.5];
        assert!(d(&f, &f).unwrap().abs() < 1e-15);
    }

    #[test]
    fn positive_affine_map_is_zero_distance() {
        let f = [0.3, 1.2, 0.0, 4.5];
        let g: Vec<f64> = f.iter().map(|v| 2.5 * v + 7.0).collect();
        assert!(d(&f, &g).unwrap().abs() < 1e-12);
    }

    #[test]
    fn reversed_ramp_is_distance_two() {
        assert!((d(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_vectors_are_rejected() {
        assert!(matches!(
            d(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]),
            Err(Error::ConstantDistribution)
        ));
        assert!(matches!(d(&[1.0, 2.0], &[5.0, 5.0]), Err(Error::ConstantDistribution)));
    }

    #[test]
    fn length_checks() {
        assert!(d(&[1.0], &[1.0]).is_err());
        assert!(d(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }
}
