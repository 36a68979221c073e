//! Monte Carlo reference: simulate the closed loop and accumulate discounted
//! stage costs up to a finite horizon.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lin_sys::{close_loop, ClosedLoop, FeedbackGain, LinearSystem, NoiseModel};
use crate::lqr::{solve_lyapunov, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::return_dist::EmpiricalDistribution;
use crate::rng::stream;

pub const MC_STREAM_TAG: &str = "mc";
pub const MIN_HORIZON: usize = 50;
pub const DEFAULT_TAIL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub samples: usize,
    /// Target for the deterministic tail estimate `γ^H·c̄/(1−γ)`.
    pub tail_tol: f64,
    /// Tail estimate at the chosen horizon.
    pub tail_bound: f64,
}

/// Stage-cost scale `c̄ = (1−γ)·xᵀPx + λ_max(P)·σ₀²`, an upper estimate of
/// `(1−γ)·E[G(x)]`.
pub fn stage_cost_scale(sys: &LinearSystem, gain: &FeedbackGain, noise: &NoiseModel, x: &DVector<f64>) -> Result<f64> {
    let cert = solve_lyapunov(sys, gain, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let lambda_max = cert.p.clone().symmetric_eigenvalues().max();
    Ok((1.0 - sys.gamma()) * cert.value(x) + lambda_max * noise.sigma0_sq())
}

impl RolloutConfig {
    /// Explicit horizon; the tail estimate is still computed and reported.
    pub fn with_horizon(
        sys: &LinearSystem,
        gain: &FeedbackGain,
        noise: &NoiseModel,
        x: &DVector<f64>,
        horizon: usize,
        samples: usize,
    ) -> Result<Self> {
        if horizon == 0 || samples == 0 {
            return Err(Error::Instance("horizon and sample count must be ≥ 1".into()));
        }
        let gamma = sys.gamma();
        let scale = stage_cost_scale(sys, gain, noise, x)?;
        let tail_bound = gamma.powi(horizon as i32) * scale / (1.0 - gamma);
        Ok(Self {
            horizon,
            samples,
            tail_tol: tail_bound,
            tail_bound,
        })
    }

    /// `H = ceil(log(tail_tol·(1−γ)/c̄) / log γ)`, at least `MIN_HORIZON`.
    pub fn auto(
        sys: &LinearSystem,
        gain: &FeedbackGain,
        noise: &NoiseModel,
        x: &DVector<f64>,
        samples: usize,
        tail_tol: f64,
    ) -> Result<Self> {
        if !(tail_tol > 0.0) {
            return Err(Error::Instance(format!("tail tolerance must be positive, got {tail_tol}")));
        }
        let gamma = sys.gamma();
        let scale = stage_cost_scale(sys, gain, noise, x)?;
        let needed = if scale > 0.0 {
            ((tail_tol * (1.0 - gamma) / scale).ln() / gamma.ln()).ceil()
        } else {
            0.0
        };
        let horizon = (needed.max(0.0) as usize).max(MIN_HORIZON);
        let mut cfg = Self::with_horizon(sys, gain, noise, x, horizon, samples)?;
        cfg.tail_tol = tail_tol;
        Ok(cfg)
    }
}

fn mean_square_loop(sys: &LinearSystem, gain: &FeedbackGain) -> Result<ClosedLoop> {
    let cl = close_loop(sys, gain)?;
    if !cl.stability(sys.gamma()).mean_square_stable {
        return Err(Error::UnstableGain(format!(
            "γ·ρ(A_K)² = {:.6} ≥ 1",
            sys.gamma() * cl.spectral_radius * cl.spectral_radius
        )));
    }
    Ok(cl)
}

fn check_dims(sys: &LinearSystem, noise: &NoiseModel, x: &DVector<f64>) -> Result<()> {
    let n = sys.state_dim();
    if x.len() != n || noise.dim() != n {
        return Err(Error::Instance(format!(
            "state ({}) and noise ({}) must have dimension {n}",
            x.len(),
            noise.dim()
        )));
    }
    Ok(())
}

/// Discounted cost of a rollout on a given noise sequence; returns the cost
/// `Σ_{t<H} γ^t x_tᵀQ_Kx_t` and the terminal state `x_H`.
pub fn rollout_with_noise(cl: &ClosedLoop, gamma: f64, x: &DVector<f64>, noise: &[DVector<f64>]) -> (f64, DVector<f64>) {
    let mut state = x.clone();
    let mut total = 0.0;
    let mut disc = 1.0;
    for w in noise {
        total += disc * state.dot(&(&cl.q_k * &state));
        state = &cl.a_k * &state + w;
        disc *= gamma;
    }
    (total, state)
}

/// One simulated discounted return truncated at `horizon`.
pub fn rollout_return<R: rand::Rng + ?Sized>(
    sys: &LinearSystem,
    gain: &FeedbackGain,
    noise: &NoiseModel,
    x: &DVector<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dims(sys, noise, x)?;
    let cl = mean_square_loop(sys, gain)?;
    let seq: Vec<_> = (0..horizon).map(|_| noise.sample(rng)).collect();
    Ok(rollout_with_noise(&cl, sys.gamma(), x, &seq).0)
}

/// Raw rollout returns; trajectory `i` uses `stream(seed, "mc", i)`.
pub fn mc_returns(
    sys: &LinearSystem,
    gain: &FeedbackGain,
    noise: &NoiseModel,
    x: &DVector<f64>,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_dims(sys, noise, x)?;
    let cl = mean_square_loop(sys, gain)?;
    let gamma = sys.gamma();
    let n = sys.state_dim();
    Ok((0..samples)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n], vec![0.0; n]),
            |(state, next, w), i| {
                let mut rng = stream(seed, MC_STREAM_TAG, i as u64);
                let mut tmp = vec![0.0; n];
                state.copy_from_slice(x.as_slice());
                let mut total = 0.0;
                let mut disc = 1.0;
                for _ in 0..horizon {
                    let mut cost = 0.0;
                    for r in 0..n {
                        let mut row = 0.0;
                        for c in 0..n {
                            row += cl.q_k[(r, c)] * state[c];
                        }
                        cost += state[r] * row;
                    }
                    total += disc * cost;
                    noise.sample_into(&mut rng, w, &mut tmp);
                    for r in 0..n {
                        let mut acc = w[r];
                        for c in 0..n {
                            acc += cl.a_k[(r, c)] * state[c];
                        }
                        next[r] = acc;
                    }
                    std::mem::swap(state, next);
                    disc *= gamma;
                }
                total
            },
        )
        .collect())
}

pub fn build_mc_distribution(
    sys: &LinearSystem,
    gain: &FeedbackGain,
    noise: &NoiseModel,
    x: &DVector<f64>,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<EmpiricalDistribution> {
    if cfg.samples == 0 {
        return Err(Error::EmptyDistribution);
    }
    EmpiricalDistribution::new(mc_returns(sys, gain, noise, x, cfg.horizon, cfg.samples, seed)?)
}
