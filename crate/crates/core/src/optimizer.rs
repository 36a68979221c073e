//! Risk-averse policy gradient over static gains with a residual-feedback
//! zeroth-order gradient estimate.
//!
//! Each episode perturbs the current gain on the Frobenius sphere of radius
//! `δ`, evaluates the CVaR of the truncated return at the perturbed gain, and
//! differences it against the previous episode's evaluation:
//!
//! ```text
//! K̂_t = K_t + U_t,   g_t = (d/δ²)·(Ĉ(K̂_t) − Ĉ(K̂_{t−1}))·U_t,   K_{t+1} = K_t − η·g_t
//! ```
//!
//! with `d = p·n`. `Ĉ(K̂_0)` is evaluated before the first episode at
//! `K̂_0 = K_0 + U_0`. Perturbations that destabilize the loop are redrawn;
//! updates that would destabilize it have their step halved.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lin_sys::{is_mean_square_stable, FeedbackGain, LinearSystem, NoiseModel};
use crate::return_dist::{build_empirical, evaluate_bank, sample_returns, NoiseBank, ReturnModel};
use crate::risk::{cvar, cvar_unsorted, RiskSpec};
use crate::rng::{derive_seed, stream};

pub const MAX_RESAMPLES: usize = 100;
pub const MAX_STEP_HALVINGS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct PGConfig {
    pub eta: f64,
    pub delta: f64,
    pub episodes: usize,
    /// Truncation depth `N` of the return.
    pub depth: usize,
    /// Samples `M` per CVaR estimate.
    pub samples: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Reuse one set of noise sequences for every evaluation.
    pub crn: bool,
}

impl Default for PGConfig {
    fn default() -> Self {
        Self {
            eta: 4e-4,
            delta: 0.1,
            episodes: 3000,
            depth: 10,
            samples: 20_000,
            alpha: 1.0,
            seed: 0,
            crn: true,
        }
    }
}

impl PGConfig {
    fn validate(&self) -> Result<RiskSpec> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Instance(format!("step size must be ≥ 0, got {}", self.eta)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Instance(format!("smoothing radius must be > 0, got {}", self.delta)));
        }
        if self.samples == 0 {
            return Err(Error::Instance("CVaR sample count must be ≥ 1".into()));
        }
        RiskSpec::new(self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub t: usize,
    /// `K_t`
    pub gain: DMatrix<f64>,
    /// `K̂_t = K_t + U_t`
    pub perturbed: DMatrix<f64>,
    /// `Ĉ(K̂_t)`
    pub objective: f64,
    pub gradient: DMatrix<f64>,
    pub stability_resamples: usize,
    pub step_halvings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerTrace {
    pub records: Vec<EpisodeRecord>,
    /// `K_{T+1}`, the gain after the last update.
    pub final_gain: DMatrix<f64>,
}

impl OptimizerTrace {
    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }
}

/// Uniform direction on the Frobenius sphere of radius `delta`.
pub fn sample_perturbation<R: Rng + ?Sized>(rows: usize, cols: usize, delta: f64, rng: &mut R) -> DMatrix<f64> {
    loop {
        let u = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = u.norm();
        if norm > 0.0 {
            return (u / norm) * delta;
        }
    }
}

/// `(d/δ²)·(current − previous)·U`.
pub fn residual_gradient(dim: usize, delta: f64, current: f64, previous: f64, u: &DMatrix<f64>) -> DMatrix<f64> {
    u * (dim as f64 / (delta * delta) * (current - previous))
}

/// `CVaR_α` of `M` draws of `G_N(x)` under `gain`, drawn with `seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    sys: &LinearSystem,
    gain: &FeedbackGain,
    noise: &NoiseModel,
    x: &DVector<f64>,
    depth: usize,
    samples: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    let spec = RiskSpec::new(alpha)?;
    let model = ReturnModel::new(sys.clone(), gain.clone(), noise.clone(), depth)?;
    Ok(cvar(&build_empirical(&model, x, samples, seed)?, spec))
}

/// Zeroth-order descent on an arbitrary objective. `stable` gates both the
/// perturbed and the updated gains.
pub fn run_with_objective<S, F>(k0: &DMatrix<f64>, cfg: &PGConfig, stable: S, mut objective: F) -> Result<OptimizerTrace>
where
    S: Fn(&DMatrix<f64>) -> bool,
    F: FnMut(&DMatrix<f64>) -> Result<f64>,
{
    cfg.validate()?;
    if !stable(k0) {
        return Err(Error::UnstableGain("initial gain fails the stability predicate".into()));
    }
    let (rows, cols) = k0.shape();
    let dim = rows * cols;
    let mut rng = stream(cfg.seed, "perturbation", 0);
    let mut records: Vec<EpisodeRecord> = Vec::with_capacity(cfg.episodes);
    let mut gain = k0.clone();

    let mut draw = |gain: &DMatrix<f64>, episode: usize, records: &Vec<EpisodeRecord>| {
        for attempt in 0..MAX_RESAMPLES {
            let u = sample_perturbation(rows, cols, cfg.delta, &mut rng);
            let perturbed = gain + &u;
            if stable(&perturbed) {
                return Ok((u, perturbed, attempt));
            }
        }
        Err(Error::StabilityBoundary {
            episode,
            attempts: MAX_RESAMPLES,
            trace: Box::new(OptimizerTrace {
                records: records.clone(),
                final_gain: gain.clone(),
            }),
        })
    };

    let (_, first, _) = draw(&gain, 0, &records)?;
    let mut previous = objective(&first)?;

    for t in 1..=cfg.episodes {
        let (u, perturbed, resamples) = draw(&gain, t, &records)?;
        let current = objective(&perturbed)?;
        let gradient = residual_gradient(dim, cfg.delta, current, previous, &u);

        let mut step = cfg.eta;
        let mut halvings = 0;
        let mut next = &gain - &gradient * step;
        while !stable(&next) {
            if halvings == MAX_STEP_HALVINGS {
                next = gain.clone();
                break;
            }
            step *= 0.5;
            halvings += 1;
            next = &gain - &gradient * step;
        }

        records.push(EpisodeRecord {
            t,
            gain: gain.clone(),
            perturbed,
            objective: current,
            gradient,
            stability_resamples: resamples,
            step_halvings: halvings,
        });
        previous = current;
        gain = next;
    }

    Ok(OptimizerTrace {
        records,
        final_gain: gain,
    })
}

/// Seed of the noise used for objective evaluation `index` (always 0 under CRN).
pub fn objective_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, "objective", index)
}

/// Minimize `CVaR_α[G_N^K(x)]` over `K` starting from `k0`.
pub fn run(
    sys: &LinearSystem,
    noise: &NoiseModel,
    x: &DVector<f64>,
    k0: &FeedbackGain,
    cfg: &PGConfig,
) -> Result<OptimizerTrace> {
    let spec = cfg.validate()?;
    k0.check_dims(sys)?;
    if x.len() != sys.state_dim() || noise.dim() != sys.state_dim() {
        return Err(Error::Instance("initial state and noise must match the state dimension".into()));
    }
    let stable = |k: &DMatrix<f64>| is_mean_square_stable(sys, &FeedbackGain::new(k.clone()));

    if cfg.crn {
        let bank = NoiseBank::draw(noise, cfg.depth, cfg.samples, objective_seed(cfg.seed, 0));
        let objective = |k: &DMatrix<f64>| {
            let model = ReturnModel::new(sys.clone(), FeedbackGain::new(k.clone()), noise.clone(), cfg.depth)?;
            let mut values = evaluate_bank(&model, x, &bank, cfg.samples)?;
            cvar_unsorted(&mut values, spec)
        };
        run_with_objective(k0.matrix(), cfg, stable, objective)
    } else {
        let mut index = 0u64;
        let objective = |k: &DMatrix<f64>| {
            let model = ReturnModel::new(sys.clone(), FeedbackGain::new(k.clone()), noise.clone(), cfg.depth)?;
            let mut values = sample_returns(&model, x, cfg.samples, objective_seed(cfg.seed, index))?;
            index += 1;
            cvar_unsorted(&mut values, spec)
        };
        run_with_objective(k0.matrix(), cfg, stable, objective)
    }
}
