//! Gaussian mechanism: noise calibration, clipping and privatized execution.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Bounds;
use crate::lipschitz::SensitivityReport;
use crate::runtime::{CompiledProgram, RuntimeError};
use crate::tensor::{Shape, Tensor};

/// Relative width at which the calibration bisection stops.
pub const CALIBRATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MechanismError {
    #[error("invalid privacy parameters: {0}")]
    InvalidParams(String),
    #[error("report was computed for graph {report}, program is {program}")]
    FingerprintMismatch { report: String, program: String },
    #[error("invalid sensitivity report: {0}")]
    InvalidReport(String),
    #[error("no data for {0}")]
    MissingInput(String),
    #[error("data for {name} has shape {got}, expected {expected}")]
    ShapeMismatch { name: String, expected: Shape, got: Shape },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyMode {
    FixedEpsilonDelta,
    /// As above, and additionally refuse when the sensitivity exceeds the cap.
    MaxSensitivityCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub mode: PrivacyMode,
    pub sensitivity_cap: Option<f64>,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            mode: PrivacyMode::FixedEpsilonDelta,
            sensitivity_cap: None,
        }
    }

    pub fn with_cap(epsilon: f64, delta: f64, cap: f64) -> Self {
        Self {
            epsilon,
            delta,
            mode: PrivacyMode::MaxSensitivityCap,
            sensitivity_cap: Some(cap),
        }
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        let bad = |m: String| Err(MechanismError::InvalidParams(m));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive and finite, got {}", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        match (self.mode, self.sensitivity_cap) {
            (PrivacyMode::FixedEpsilonDelta, None) => Ok(()),
            (PrivacyMode::FixedEpsilonDelta, Some(_)) => bad("a sensitivity cap requires max_sensitivity_cap mode".into()),
            (PrivacyMode::MaxSensitivityCap, None) => bad("max_sensitivity_cap mode requires a cap".into()),
            (PrivacyMode::MaxSensitivityCap, Some(c)) if !(c.is_finite() && c > 0.0) => {
                bad(format!("sensitivity cap must be positive and finite, got {c}"))
            }
            (PrivacyMode::MaxSensitivityCap, Some(_)) => Ok(()),
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Left side of the analytic Gaussian mechanism condition
/// `Phi(D/2s - e s/D) - exp(e) Phi(-D/2s - e s/D)`; the mechanism is
/// `(epsilon, delta)`-private when this is at most `delta`.
pub fn gaussian_condition(sigma: f64, delta2: f64, epsilon: f64) -> f64 {
    let a = delta2 / (2.0 * sigma);
    let b = epsilon * sigma / delta2;
    normal_cdf(a - b) - epsilon.exp() * normal_cdf(-a - b)
}

/// Classic `D sqrt(2 ln(1.25/delta)) / epsilon`, valid for `epsilon <= 1`.
pub fn classic_sigma(delta2: f64, epsilon: f64, delta: f64) -> f64 {
    delta2 * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

/// Smallest noise scale meeting the analytic condition, by bisection.
pub fn calibrate_sigma(delta2: f64, params: &PrivacyParams) -> Result<f64, MechanismError> {
    params.validate()?;
    if !(delta2.is_finite() && delta2 > 0.0) {
        return Err(MechanismError::InvalidParams(format!(
            "sensitivity must be positive and finite, got {delta2}"
        )));
    }
    let (eps, delta) = (params.epsilon, params.delta);
    // The condition depends on sigma / delta2 only; solve at unit sensitivity.
    let holds = |s: f64| gaussian_condition(s, 1.0, eps) <= delta;
    let mut hi = 1.0;
    while !holds(hi) {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(MechanismError::InvalidParams("no noise scale satisfies the condition".into()));
        }
    }
    let mut lo = hi;
    while holds(lo) {
        lo *= 0.5;
        if lo < 1e-300 {
            return Ok(lo * delta2);
        }
    }
    while hi - lo > CALIBRATION_TOLERANCE * hi {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi * delta2)
}

/// Projects `data` onto `bounds` and reports the fraction of elements moved.
pub fn clip(data: &Tensor, bounds: &Bounds) -> Result<(Tensor, f64), MechanismError> {
    let (out, changed) = clip_count(data, bounds, "data")?;
    let n = data.numel();
    Ok((out, changed as f64 / n as f64))
}

fn clip_count(data: &Tensor, bounds: &Bounds, name: &str) -> Result<(Tensor, usize), MechanismError> {
    if !bounds.is_broadcast() && bounds.lo.shape() != data.shape() {
        return Err(MechanismError::ShapeMismatch {
            name: name.to_string(),
            expected: bounds.lo.shape().clone(),
            got: data.shape().clone(),
        });
    }
    let mut out = data.clone();
    let mut changed = 0;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = v.clamp(bounds.lo_at(i), bounds.hi_at(i));
        if c.to_bits() != v.to_bits() {
            changed += 1;
            *v = c;
        }
    }
    Ok((out, changed))
}

/// Privatized query result. Holds no un-noised query values apart from the
/// output norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismOutput {
    /// One noised tensor per query output.
    pub value: Vec<Tensor>,
    pub sigma: f64,
    /// Fraction of private-input elements changed by clipping.
    pub clipped_fraction: f64,
    /// L2 norm of the clipped, noise-free output, for individual accounting.
    pub output_l2_norm: f64,
    pub seed: u64,
}

/// Clips `data` to the program's bounds, then evaluates and adds isotropic
/// Gaussian noise calibrated from `report.bound`. `data` is keyed by
/// variable name and must cover every variable the program reads.
///
/// The noise generator is seeded from `seed`; callers wanting real privacy
/// must supply an unpredictable seed.
pub fn privatize(
    program: &CompiledProgram,
    data: &HashMap<String, Tensor>,
    params: &PrivacyParams,
    report: &SensitivityReport,
    seed: u64,
) -> Result<MechanismOutput, MechanismError> {
    params.validate()?;
    if !(report.bound.is_finite() && report.bound > 0.0) {
        return Err(MechanismError::InvalidReport(format!(
            "bound must be positive and finite, got {}",
            report.bound
        )));
    }
    let expected = program.fingerprint().to_hex();
    if report.fingerprint != expected {
        return Err(MechanismError::FingerprintMismatch {
            report: report.fingerprint.clone(),
            program: expected,
        });
    }
    if let (PrivacyMode::MaxSensitivityCap, Some(cap)) = (params.mode, params.sensitivity_cap) {
        if report.bound > cap {
            return Err(MechanismError::InvalidParams(format!(
                "sensitivity exceeds cap ({} > {cap})",
                report.bound
            )));
        }
    }
    let sigma = calibrate_sigma(report.bound, params)?;

    let source = program.source_graph();
    let mut inputs = Vec::with_capacity(program.inputs().len());
    let (mut changed, mut private_total) = (0usize, 0usize);
    for input in program.inputs() {
        let value = data.get(&input.name).ok_or_else(|| MechanismError::MissingInput(input.name.clone()))?;
        if value.shape() != &input.shape {
            return Err(MechanismError::ShapeMismatch {
                name: input.name.clone(),
                expected: input.shape.clone(),
                got: value.shape().clone(),
            });
        }
        let private = source.private_inputs().contains(&input.source_id);
        let clipped = match source.bounds().get(&input.source_id) {
            Some(b) => {
                let (t, n) = clip_count(value, b, &input.name)?;
                if private {
                    changed += n;
                }
                t
            }
            None => value.clone(),
        };
        if private {
            private_total += value.numel();
        }
        inputs.push(clipped);
    }
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let mut outputs = program.execute_positional(&refs)?;

    let output_l2_norm = outputs.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for t in &mut outputs {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
    Ok(MechanismOutput {
        value: outputs,
        sigma,
        clipped_fraction: if private_total == 0 {
            0.0
        } else {
            changed as f64 / private_total as f64
        },
        output_l2_norm,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        assert!(PrivacyParams::new(1.0, 1e-5).validate().is_ok());
        assert!(PrivacyParams::new(0.0, 1e-5).validate().is_err());
        assert!(PrivacyParams::new(1.0, 1.5).validate().is_err());
        assert!(PrivacyParams::new(1.0, 0.0).validate().is_err());
        assert!(PrivacyParams::with_cap(1.0, 1e-5, 2.0).validate().is_ok());
        assert!(PrivacyParams::with_cap(1.0, 1e-5, -2.0).validate().is_err());
        let mut p = PrivacyParams::new(1.0, 1e-5);
        p.sensitivity_cap = Some(1.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn calibration_meets_condition_and_ceiling() {
        let p = PrivacyParams::new(1.0, 1e-5);
        let s = calibrate_sigma(1.0, &p).unwrap();
        assert!(s <= 4.8414);
        assert!(s <= classic_sigma(1.0, 1.0, 1e-5));
        let c = gaussian_condition(s, 1.0, 1.0);
        assert!(c <= 1e-5 && (c - 1e-5).abs() < 1e-6);
        assert!(gaussian_condition(0.999 * s, 1.0, 1.0) > 1e-5);
        assert_eq!(calibrate_sigma(2.0, &p).unwrap(), 2.0 * s);
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.0) - 0.8413447460685429).abs() < 1e-15);
        assert!((normal_cdf(-3.0) - 0.0013498980316300946).abs() < 1e-17);
    }

    #[test]
    fn clip_examples() {
        let b = Bounds::uniform(0.0, 1.0);
        let (t, f) = clip(&Tensor::from_vec(vec![-0.5, 0.5, 1.5]), &b).unwrap();
        assert_eq!(t.data(), &[0.0, 0.5, 1.0]);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        let (t, f) = clip(&Tensor::from_vec(vec![0.25, 0.75]), &b).unwrap();
        assert_eq!(t.data(), &[0.25, 0.75]);
        assert_eq!(f, 0.0);
        let nines = Tensor::filled(Shape::matrix(2, 2), 9.0);
        let (t, f) = clip(&nines, &b).unwrap();
        assert!(t.is_all(1.0));
        assert_eq!(f, 1.0);
        let full = b.expand(&Shape::vector(3));
        assert!(matches!(clip(&nines, &full), Err(MechanismError::ShapeMismatch { .. })));
    }
}
