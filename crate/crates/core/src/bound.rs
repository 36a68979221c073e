//! Sup-CDF truncation-error bound `sup_z |F(z) − F_N(z)| ≤ C·γ^N`.
//!
//! ```text
//! C / L₀ = λ_max(P)·σ₀²·γ/(1−γ)
//!        + 2μ₀·‖P‖₂·‖x‖₂·γ/(1−γρ)
//!        + 2μ₀²·‖P‖₂·γρ/((1−γ)(1−ρ))
//! ```
//!
//! where `ρ = ‖A_K‖₂ < 1` and `L₀` bounds the density of `G_N(x)`. `L₀` is
//! rarely known; without it only `C/L₀` is reported.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::lin_sys::{spectral_norm, NoiseModel};
use crate::lqr::ValueCertificate;
use crate::return_dist::{histogram, EmpiricalDistribution};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub cert: ValueCertificate,
    pub rho: f64,
    pub gamma: f64,
    pub x: DVector<f64>,
    pub sigma0_sq: f64,
    pub mu0: f64,
    pub density_bound: Option<f64>,
}

impl BoundInputs {
    pub fn new(cert: ValueCertificate, rho: f64, gamma: f64, x: DVector<f64>, noise: &NoiseModel) -> Self {
        Self {
            cert,
            rho,
            gamma,
            x,
            sigma0_sq: noise.sigma0_sq(),
            mu0: noise.mu0(),
            density_bound: None,
        }
    }

    pub fn with_density_bound(mut self, l0: f64) -> Self {
        self.density_bound = Some(l0);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho < 1.0) {
            return Err(Error::Hypothesis(format!("‖A_K‖₂ = {} is not below 1", self.rho)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.gamma * self.rho < 1.0) {
            return Err(Error::Hypothesis(format!(
                "need 0 < γ < 1 and γρ < 1, got γ = {}, ρ = {}",
                self.gamma, self.rho
            )));
        }
        if !(self.sigma0_sq >= 0.0 && self.mu0 >= 0.0) {
            return Err(Error::Hypothesis("moment bounds must be nonnegative".into()));
        }
        if let Some(l0) = self.density_bound {
            if !(l0 > 0.0 && l0.is_finite()) {
                return Err(Error::Hypothesis(format!("density bound must be positive, got {l0}")));
            }
        }
        if self.x.len() != self.cert.p.nrows() {
            return Err(Error::Instance("initial state dimension does not match P".into()));
        }
        Ok(())
    }
}

/// The three summands of `C/L₀`, kept separate for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstant {
    pub quadratic_term: f64,
    pub state_term: f64,
    pub cross_term: f64,
    /// `C/L₀`
    pub unnormalized: f64,
    /// `C`, when `L₀` was supplied.
    pub normalized: Option<f64>,
}

pub fn bound_constant(b: &BoundInputs) -> Result<BoundConstant> {
    b.validate()?;
    let (g, rho) = (b.gamma, b.rho);
    let p_norm = spectral_norm(&b.cert.p);
    let lambda_max = b.cert.p.clone().symmetric_eigenvalues().max();
    let quadratic_term = lambda_max * b.sigma0_sq * g / (1.0 - g);
    let state_term = 2.0 * b.mu0 * p_norm * b.x.norm() * g / (1.0 - g * rho);
    let cross_term = 2.0 * b.mu0 * b.mu0 * p_norm * g * rho / ((1.0 - g) * (1.0 - rho));
    let unnormalized = quadratic_term + state_term + cross_term;
    Ok(BoundConstant {
        quadratic_term,
        state_term,
        cross_term,
        unnormalized,
        normalized: b.density_bound.map(|l0| l0 * unnormalized),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundValue {
    pub value: f64,
    /// True when `L₀` was absent and `value` is `C/L₀·γ^N`.
    pub unnormalized: bool,
}

/// `C·γ^N` for `N ≥ 1`.
pub fn bound_at(b: &BoundInputs, depth: usize) -> Result<BoundValue> {
    if depth == 0 {
        return Err(Error::Instance("the truncation bound needs N ≥ 1".into()));
    }
    let c = bound_constant(b)?;
    let scale = b.gamma.powi(depth as i32);
    Ok(match c.normalized {
        Some(v) => BoundValue {
            value: v * scale,
            unnormalized: false,
        },
        None => BoundValue {
            value: c.unnormalized * scale,
            unnormalized: true,
        },
    })
}

/// Density bound estimate: the tallest bar of a `ceil(sqrt(M))`-bin
/// histogram, converted from frequency to density.
pub fn estimate_density_bound(d: &EmpiricalDistribution) -> Result<f64> {
    let bins = (d.count() as f64).sqrt().ceil().max(1.0) as usize;
    let h = histogram(d, bins, None)?;
    let width = if h.len() > 1 {
        h[1].center - h[0].center
    } else {
        let (lo, hi) = crate::return_dist::auto_range(d.min(), d.max());
        hi - lo
    };
    let max_freq = h.iter().map(|b| b.frequency).fold(0.0, f64::max);
    Ok(max_freq / width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lin_sys::{close_loop, FeedbackGain, LinearSystem};
    use crate::lqr::solve_lyapunov;
    use approx::assert_abs_diff_eq;

    fn scalar_inputs(x: f64, sigma0_sq: f64, mu0: f64) -> BoundInputs {
        let sys = LinearSystem::scalar(1.0, 1.0, 1.0, 1.0, 0.6).unwrap();
        let k = FeedbackGain::scalar(-0.4684);
        let cert = solve_lyapunov(&sys, &k, 1e-12, 1_000_000).unwrap();
        let rho = close_loop(&sys, &k).unwrap().rho;
        BoundInputs {
            cert,
            rho,
            gamma: 0.6,
            x: DVector::from_vec(vec![x]),
            sigma0_sq,
            mu0,
            density_bound: None,
        }
    }

    #[test]
    fn scalar_reference_constant() {
        let mu0 = (2.0 / std::f64::consts::PI).sqrt();
        let b = scalar_inputs(1.0, 1.0, mu0);
        let c = bound_constant(&b).unwrap();
        // term by term with P = 1.468373..., ρ = 0.5316, γ = 0.6
        let p = b.cert.p[(0, 0)];
        let t1 = p * 0.6 / 0.4;
        let t2 = 2.0 * mu0 * p * 0.6 / (1.0 - 0.6 * 0.5316);
        let t3 = 2.0 * mu0 * mu0 * p * 0.6 * 0.5316 / (0.4 * (1.0 - 0.5316));
        assert_abs_diff_eq!(c.quadratic_term, t1, epsilon = 1e-12);
        assert_abs_diff_eq!(c.state_term, t2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.cross_term, t3, epsilon = 1e-12);
        assert!((c.unnormalized - 7.45).abs() < 0.005, "{}", c.unnormalized);
        assert!(c.normalized.is_none());

        let v = bound_at(&b.clone().with_density_bound(1.0), 15).unwrap();
        assert!(!v.unnormalized);
        assert!((v.value - 3.5e-3).abs() < 0.05e-3, "{}", v.value);
    }

    #[test]
    fn degenerate_noise_gives_zero() {
        let b = scalar_inputs(1.0, 0.0, 0.0);
        assert_eq!(bound_constant(&b).unwrap().unnormalized, 0.0);
        for n in 1..10 {
            assert_eq!(bound_at(&b, n).unwrap().value, 0.0);
        }
    }

    #[test]
    fn origin_drops_state_term() {
        let a = bound_constant(&scalar_inputs(0.0, 1.0, 0.5)).unwrap();
        assert_eq!(a.state_term, 0.0);
        assert_abs_diff_eq!(a.unnormalized, a.quadratic_term + a.cross_term, epsilon = 1e-15);
    }

    #[test]
    fn geometric_in_depth() {
        let b = scalar_inputs(2.0, 1.0, 0.7).with_density_bound(0.3);
        let mut prev = bound_at(&b, 1).unwrap().value;
        for n in 2..40 {
            let v = bound_at(&b, n).unwrap().value;
            assert!(v < prev);
            assert_abs_diff_eq!(v / prev, 0.6, epsilon = 1e-12);
            prev = v;
        }
        assert!(bound_at(&b, 0).is_err());
    }

    #[test]
    fn hypotheses_enforced() {
        let mut b = scalar_inputs(1.0, 1.0, 0.5);
        b.rho = 1.0;
        assert!(matches!(bound_constant(&b), Err(Error::Hypothesis(_))));
        let b = scalar_inputs(1.0, 1.0, 0.5).with_density_bound(0.0);
        assert!(bound_constant(&b).is_err());
    }

    #[test]
    fn density_estimate_of_uniform() {
        let v: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
        let d = EmpiricalDistribution::new(v).unwrap();
        let l0 = estimate_density_bound(&d).unwrap();
        assert!((l0 - 1.0).abs() < 0.02, "{l0}");
    }
}
