//! Empirical CVaR: the mean of the upper `α` tail of a sample set.
//!
//! With `M` samples the tail holds the `m = ceil(α·M)` largest values; ties at
//! the threshold are taken in sorted order until `m` are included.

use crate::error::{Error, Result};
use crate::return_dist::{shifted_mean, EmpiricalDistribution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskSpec {
    alpha: f64,
}

impl RiskSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Self { alpha })
        } else {
            Err(Error::Instance(format!("risk level must lie in (0,1], got {alpha}")))
        }
    }

    /// `α = 1`: the plain mean.
    pub fn neutral() -> Self {
        Self { alpha: 1.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Tail size `ceil(α·M)`, at least one.
    pub fn tail_count(&self, m: usize) -> usize {
        // guard against α·M landing a hair above an integer
        let raw = self.alpha * m as f64;
        let rounded = raw.round();
        let k = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
            rounded
        } else {
            raw.ceil()
        };
        (k as usize).clamp(1, m)
    }
}

pub fn cvar(d: &EmpiricalDistribution, spec: RiskSpec) -> f64 {
    let s = d.samples();
    let m = spec.tail_count(s.len());
    shifted_mean(&s[s.len() - m..])
}

/// The smallest sample in the CVaR tail.
pub fn value_at_risk(d: &EmpiricalDistribution, spec: RiskSpec) -> f64 {
    let s = d.samples();
    s[s.len() - spec.tail_count(s.len())]
}

/// CVaR of an unsorted buffer, reordering it in place (linear-time selection).
/// Agrees with [`cvar`] up to summation order.
pub fn cvar_unsorted(samples: &mut [f64], spec: RiskSpec) -> Result<f64> {
    let len = samples.len();
    if len == 0 {
        return Err(Error::EmptyDistribution);
    }
    let m = spec.tail_count(len);
    let (origin, tail) = if m == len {
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        (min, &samples[..])
    } else {
        let (_, &mut threshold, upper) = samples.select_nth_unstable_by(len - m, f64::total_cmp);
        (threshold, &*upper)
    };
    // the threshold itself is the first tail element and contributes zero
    Ok(origin + tail.iter().map(|v| v - origin).sum::<f64>() / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emp(v: &[f64]) -> EmpiricalDistribution {
        EmpiricalDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn reference_values() {
        let d = emp(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(cvar(&d, RiskSpec::neutral()), 2.5);
        assert_eq!(cvar(&d, RiskSpec::new(0.5).unwrap()), 3.5);
        assert_eq!(value_at_risk(&d, RiskSpec::new(0.5).unwrap()), 3.0);
        assert_eq!(value_at_risk(&d, RiskSpec::neutral()), 1.0);
        let c = emp(&[2.5; 7]);
        for a in [0.01, 0.3, 1.0] {
            assert_eq!(cvar(&c, RiskSpec::new(a).unwrap()), 2.5);
            assert_eq!(value_at_risk(&c, RiskSpec::new(a).unwrap()), 2.5);
        }
        assert_eq!(value_at_risk(&emp(&[9.0]), RiskSpec::new(0.2).unwrap()), 9.0);
    }

    #[test]
    fn risk_level_bounds() {
        assert!(RiskSpec::new(0.0).is_err());
        assert!(RiskSpec::new(1.01).is_err());
        assert!(RiskSpec::new(f64::NAN).is_err());
        assert!(RiskSpec::new(1.0).is_ok());
    }

    #[test]
    fn tail_count_rounding() {
        assert_eq!(RiskSpec::new(0.4).unwrap().tail_count(20_000), 8_000);
        assert_eq!(RiskSpec::new(0.1).unwrap().tail_count(30), 3);
        assert_eq!(RiskSpec::new(0.25).unwrap().tail_count(5), 2);
        assert_eq!(RiskSpec::new(1e-6).unwrap().tail_count(5), 1);
    }

    #[test]
    fn unsorted_matches_sorted() {
        let v = vec![5.0, -1.0, 3.0, 3.0, 8.0, 0.5, 2.0];
        for a in [0.1, 0.3, 0.5, 0.99, 1.0] {
            let spec = RiskSpec::new(a).unwrap();
            let mut buf = v.clone();
            let (u, c) = (cvar_unsorted(&mut buf, spec).unwrap(), cvar(&emp(&v), spec));
            assert!((u - c).abs() <= 1e-14 * c.abs().max(1.0), "{u} vs {c}");
        }
        assert!(cvar_unsorted(&mut [], RiskSpec::neutral()).is_err());
        assert_eq!(cvar_unsorted(&mut [2.5; 9], RiskSpec::new(0.3).unwrap()).unwrap(), 2.5);
    }

    proptest! {
        #[test]
        fn cvar_dominates_var_and_mean(
            v in prop::collection::vec(-100.0f64..100.0, 1..200),
            a in 0.01f64..=1.0,
        ) {
            let d = emp(&v);
            let spec = RiskSpec::new(a).unwrap();
            let c = cvar(&d, spec);
            prop_assert!(c >= value_at_risk(&d, spec));
            prop_assert!(c >= d.mean() - 1e-12 * d.mean().abs().max(1.0));
        }
    }
}
