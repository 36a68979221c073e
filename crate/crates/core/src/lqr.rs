//! Discounted Lyapunov and Riccati equations, solved by fixed-point iteration
//! started from `P₀ = Q`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lin_sys::{close_loop, ClosedLoop, FeedbackGain, LinearSystem};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

/// Cost-to-go matrix of a gain: `xᵀPx` is the expected discounted cost of
/// the noise-free part of the return.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueCertificate {
    pub p: DMatrix<f64>,
    pub gain: FeedbackGain,
    /// Relative fixed-point residual `max|P − T(P)| / max|P|` (entrywise) of the returned `p`.
    pub residual: f64,
    pub iterations: usize,
}

impl ValueCertificate {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x))
    }
}

fn symmetric(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

// entrywise max norm: the Frobenius norm overflows long before the entries do
fn relative_gap(next: &DMatrix<f64>, prev: &DMatrix<f64>) -> f64 {
    let scale = next.amax().max(f64::MIN_POSITIVE);
    (next - prev).amax() / scale
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(Error::Instance(format!("tolerance must be positive, got {tol}")))
    }
}

fn lyapunov_step(cl: &ClosedLoop, gamma: f64, p: &DMatrix<f64>) -> DMatrix<f64> {
    symmetric(&cl.q_k + (cl.a_k.transpose() * p * &cl.a_k) * gamma)
}

/// Solve `P = Q_K + γ A_Kᵀ P A_K` for a fixed gain.
pub fn solve_lyapunov(
    sys: &LinearSystem,
    gain: &FeedbackGain,
    tol: f64,
    max_iter: usize,
) -> Result<ValueCertificate> {
    check_tol(tol)?;
    let cl = close_loop(sys, gain)?;
    let gamma = sys.gamma();
    if !cl.stability(gamma).mean_square_stable {
        return Err(Error::UnstableGain(format!(
            "γ·ρ(A_K)² = {:.6} ≥ 1",
            gamma * cl.spectral_radius * cl.spectral_radius
        )));
    }
    let mut p = sys.q().clone();
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let next = lyapunov_step(&cl, gamma, &p);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonConvergence {
                iterations: iter,
                residual,
            });
        }
        residual = relative_gap(&next, &p);
        p = next;
        if residual <= tol {
            let check = relative_gap(&lyapunov_step(&cl, gamma, &p), &p);
            return Ok(ValueCertificate {
                p,
                gain: gain.clone(),
                residual: check,
                iterations: iter,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// `(R + γ BᵀPB)⁻¹ BᵀPA`, the shared factor of the Riccati map and the gain.
fn gain_factor(sys: &LinearSystem, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let gamma = sys.gamma();
    let bt_p = sys.b().transpose() * p;
    let s = symmetric(sys.r() + (&bt_p * sys.b()) * gamma);
    s.cholesky().map(|c| c.solve(&(bt_p * sys.a())))
}

/// One value-iteration step of the discounted Riccati map
/// `P ↦ Q + γAᵀPA − γ²AᵀPB(R + γBᵀPB)⁻¹BᵀPA`.
pub fn riccati_step(sys: &LinearSystem, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let gamma = sys.gamma();
    let factor = gain_factor(sys, p)?;
    let at_p = sys.a().transpose() * p;
    let next = sys.q() + (&at_p * sys.a()) * gamma - (at_p * sys.b() * factor) * (gamma * gamma);
    Some(symmetric(next))
}

/// The optimal gain `−γ(R + γBᵀPB)⁻¹BᵀPA` for a given `P`.
pub fn optimal_gain(sys: &LinearSystem, p: &DMatrix<f64>) -> Option<FeedbackGain> {
    gain_factor(sys, p).map(|f| FeedbackGain::new(f * -sys.gamma()))
}

/// Solve the discounted Riccati equation and return the risk-neutral optimal gain.
pub fn solve_riccati(
    sys: &LinearSystem,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueCertificate, FeedbackGain)> {
    check_tol(tol)?;
    let mut p = sys.q().clone();
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let next = match riccati_step(sys, &p) {
            Some(next) if next.iter().all(|v| v.is_finite()) => next,
            _ => {
                return Err(Error::NonConvergence {
                    iterations: iter,
                    residual,
                })
            }
        };
        residual = relative_gap(&next, &p);
        p = next;
        if residual <= tol {
            let gain = optimal_gain(sys, &p).ok_or(Error::NonConvergence {
                iterations: iter,
                residual,
            })?;
            let cl = close_loop(sys, &gain)?;
            if !cl.stability(sys.gamma()).mean_square_stable {
                return Err(Error::UnstableGain(
                    "Riccati fixed point yields a gain that is not mean-square stable".into(),
                ));
            }
            let check = riccati_step(sys, &p)
                .map(|n| relative_gap(&n, &p))
                .unwrap_or(residual);
            let cert = ValueCertificate {
                p,
                gain: gain.clone(),
                residual: check,
                iterations: iter,
            };
            return Ok((cert, gain));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_scalar(gamma: f64) -> LinearSystem {
        LinearSystem::scalar(1.0, 1.0, 1.0, 1.0, gamma).unwrap()
    }

    /// Scalar Lyapunov closed form `Q_K / (1 − γ A_K²)`.
    fn scalar_lyapunov(a: f64, b: f64, q: f64, r: f64, gamma: f64, k: f64) -> f64 {
        let ak = a + b * k;
        (q + r * k * k) / (1.0 - gamma * ak * ak)
    }

    #[test]
    fn lyapunov_scalar_matches_closed_form() {
        for (gamma, expect) in [(0.6, 1.468373), (0.8, 1.575609)] {
            let cert = solve_lyapunov(&unit_scalar(gamma), &FeedbackGain::scalar(-0.4684), DEFAULT_TOL, DEFAULT_MAX_ITER)
                .unwrap();
            let exact = scalar_lyapunov(1.0, 1.0, 1.0, 1.0, gamma, -0.4684);
            assert_abs_diff_eq!(cert.p[(0, 0)], exact, epsilon = 1e-11);
            assert_abs_diff_eq!(cert.p[(0, 0)], expect, epsilon = 5e-6);
            assert!(cert.residual <= DEFAULT_TOL);
        }
    }

    #[test]
    fn deadbeat_gain_gives_stage_cost() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DMatrix::identity(2, 2) * 0.5,
            0.95,
        )
        .unwrap();
        let k = FeedbackGain::new(-sys.a().clone());
        let cert = solve_lyapunov(&sys, &k, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let cl = close_loop(&sys, &k).unwrap();
        assert_eq!(cert.p, cl.q_k);
    }

    #[test]
    fn lyapunov_rejects_unstable_and_bad_tol() {
        let sys = unit_scalar(0.9);
        assert!(matches!(
            solve_lyapunov(&sys, &FeedbackGain::scalar(0.5), 1e-12, 100),
            Err(Error::UnstableGain(_))
        ));
        assert!(solve_lyapunov(&sys, &FeedbackGain::scalar(-0.5), 0.0, 100).is_err());
        assert!(matches!(
            solve_lyapunov(&sys, &FeedbackGain::scalar(-0.01), 1e-14, 3),
            Err(Error::NonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn riccati_scalar_reference() {
        let (cert, k) = solve_riccati(&unit_scalar(0.6), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        // 0.6 P² − 0.2 P − 1 = 0
        let p_exact = (0.2 + (0.04f64 + 2.4).sqrt()) / 1.2;
        assert_abs_diff_eq!(cert.p[(0, 0)], p_exact, epsilon = 1e-10);
        assert_abs_diff_eq!(cert.p[(0, 0)], 1.4683749, epsilon = 1e-7);
        assert_abs_diff_eq!(k.matrix()[(0, 0)], -0.468375, epsilon = 1e-6);
    }

    #[test]
    fn riccati_without_actuation_is_lyapunov() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.4, -0.2, 0.3]),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            0.9,
        )
        .unwrap();
        let (cert, k) = solve_riccati(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(k.matrix().iter().all(|v| *v == 0.0));
        let lyap = solve_lyapunov(&sys, &FeedbackGain::zeros(&sys), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((cert.p - lyap.p).abs().max() < 1e-10);
    }

    #[test]
    fn riccati_static_problem() {
        let sys = LinearSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            0.7,
        )
        .unwrap();
        let (cert, k) = solve_riccati(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(cert.p, DMatrix::identity(2, 2));
        assert!(k.matrix().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn riccati_diverges_without_stabilizability() {
        let sys = LinearSystem::scalar(2.0, 0.0, 1.0, 1.0, 0.6).unwrap();
        assert!(matches!(
            solve_riccati(&sys, DEFAULT_TOL, DEFAULT_MAX_ITER),
            Err(Error::NonConvergence { .. })
        ));
    }

    fn random_system(n: usize, p: usize, entries: &[f64], gamma: f64) -> LinearSystem {
        let mut it = entries.iter().copied().cycle();
        let a = DMatrix::from_fn(n, n, |_, _| it.next().unwrap());
        let b = DMatrix::from_fn(n, p, |_, _| it.next().unwrap());
        let lq = DMatrix::from_fn(n, n, |_, _| it.next().unwrap());
        let lr = DMatrix::from_fn(p, p, |_, _| it.next().unwrap());
        let q = &lq * lq.transpose() + DMatrix::identity(n, n) * 0.1;
        let r = &lr * lr.transpose() + DMatrix::identity(p, p) * 0.1;
        LinearSystem::new(a, b, q, r, gamma).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn optimal_gain_cost_matches_riccati(
            n in 1usize..=3, p in 1usize..=2,
            entries in prop::collection::vec(-1.0f64..1.0, 40),
            gamma in 0.3f64..0.95,
        ) {
            let sys = random_system(n, p, &entries, gamma);
            let tol = 1e-12;
            let (cert, k) = solve_riccati(&sys, tol, DEFAULT_MAX_ITER).unwrap();
            let lyap = solve_lyapunov(&sys, &k, tol, DEFAULT_MAX_ITER).unwrap();
            let scale = cert.p.norm();
            prop_assert!((&cert.p - &lyap.p).norm() <= 10.0 * tol * scale.max(1.0),
                "gap {}", (&cert.p - &lyap.p).norm());
        }

        #[test]
        fn value_iteration_is_monotone(
            n in 1usize..=3, p in 1usize..=2,
            entries in prop::collection::vec(-1.0f64..1.0, 40),
            gamma in 0.3f64..0.95,
        ) {
            let sys = random_system(n, p, &entries, gamma);
            let tol = 1e-9;
            let mut prev = sys.q().clone();
            for _ in 0..200 {
                let next = riccati_step(&sys, &prev).unwrap();
                let diff = &next - &prev;
                let min_eig = diff.symmetric_eigenvalues().min();
                prop_assert!(min_eig >= -tol * next.norm().max(1.0), "min eig {min_eig}");
                prev = next;
            }
        }

        #[test]
        fn optimal_gain_minimizes_cost(
            n in 1usize..=2, p in 1usize..=2,
            entries in prop::collection::vec(-1.0f64..1.0, 40),
            perturb in prop::collection::vec(-0.3f64..0.3, 4),
            x in prop::collection::vec(-2.0f64..2.0, 2),
            gamma in 0.3f64..0.95,
        ) {
            let sys = random_system(n, p, &entries, gamma);
            let tol = 1e-12;
            let (cert, k) = solve_riccati(&sys, tol, DEFAULT_MAX_ITER).unwrap();
            let mut it = perturb.iter().copied();
            let other = FeedbackGain::new(k.matrix() + DMatrix::from_fn(p, n, |_, _| it.next().unwrap()));
            if let Ok(alt) = solve_lyapunov(&sys, &other, tol, DEFAULT_MAX_ITER) {
                let x = DVector::from_fn(n, |i, _| x[i]);
                let slack = 1e-9 * cert.value(&x).abs().max(1.0);
                prop_assert!(alt.value(&x) >= cert.value(&x) - slack);
            }
        }
    }
}
