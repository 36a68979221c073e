//! Problem instances: dynamics, cost weights, disturbance laws and closed-loop
//! stability predicates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative eigenvalue threshold for positive-definiteness checks.
pub const PD_RELATIVE_TOL: f64 = 1e-10;

/// Discrete-time system `x' = A x + B u + w` with stage cost `xᵀQx + uᵀRu`
/// discounted by `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    gamma: f64,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Instance(format!("{name} has non-finite entries")))
    }
}

/// Symmetrize `m` and verify its smallest eigenvalue is above
/// `PD_RELATIVE_TOL` times its largest.
fn check_positive_definite(name: &'static str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigenvalues();
    let max_eig = eig.max();
    let min_eig = eig.min();
    if max_eig > 0.0 && min_eig > PD_RELATIVE_TOL * max_eig {
        Ok(sym)
    } else {
        Err(Error::NotPositiveDefinite {
            name,
            min_eig,
            max_eig,
        })
    }
}

impl LinearSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        let p = b.ncols();
        if n == 0 || p == 0 {
            return Err(Error::Instance("state and input dimensions must be ≥ 1".into()));
        }
        if a.ncols() != n {
            return Err(Error::Instance(format!("A must be square, got {}×{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Instance(format!("B must have {n} rows, got {}", b.nrows())));
        }
        if q.shape() != (n, n) {
            return Err(Error::Instance(format!("Q must be {n}×{n}, got {:?}", q.shape())));
        }
        if r.shape() != (p, p) {
            return Err(Error::Instance(format!("R must be {p}×{p}, got {:?}", r.shape())));
        }
        for (name, m) in [("A", &a), ("B", &b), ("Q", &q), ("R", &r)] {
            check_finite(name, m)?;
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Instance(format!("discount must lie in (0,1), got {gamma}")));
        }
        let q = check_positive_definite("Q", &q)?;
        let r = check_positive_definite("R", &r)?;
        Ok(Self { a, b, q, r, gamma })
    }

    /// Scalar instance `x' = a x + b u + w`.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, gamma: f64) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(b), m(q), m(r), gamma)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Same dynamics and costs under a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.r.clone(),
            gamma,
        )
    }
}

/// Static state feedback `u = K x`, `K` of shape p×n.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain(DMatrix<f64>);

impl FeedbackGain {
    pub fn new(k: DMatrix<f64>) -> Self {
        Self(k)
    }

    pub fn scalar(k: f64) -> Self {
        Self(DMatrix::from_element(1, 1, k))
    }

    pub fn zeros(sys: &LinearSystem) -> Self {
        Self(DMatrix::zeros(sys.input_dim(), sys.state_dim()))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn check_dims(&self, sys: &LinearSystem) -> Result<()> {
        let want = (sys.input_dim(), sys.state_dim());
        if self.0.shape() != want {
            return Err(Error::Instance(format!(
                "gain must be {}×{}, got {:?}",
                want.0,
                want.1,
                self.0.shape()
            )));
        }
        if !self.0.iter().all(|v| v.is_finite()) {
            return Err(Error::Instance("gain has non-finite entries".into()));
        }
        Ok(())
    }
}

impl From<DMatrix<f64>> for FeedbackGain {
    fn from(k: DMatrix<f64>) -> Self {
        Self(k)
    }
}

/// Closed-loop quantities for a fixed gain.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    /// `A + B K`
    pub a_k: DMatrix<f64>,
    /// `Q + Kᵀ R K`
    pub q_k: DMatrix<f64>,
    /// Operator 2-norm of `a_k`.
    pub rho: f64,
    pub spectral_radius: f64,
}

/// Three independent stability predicates. The sampler only needs
/// `mean_square_stable`; the truncation bound needs `norm_contractive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StabilityFlags {
    /// `γ·ρ(A_K)² < 1`
    pub mean_square_stable: bool,
    /// `‖A_K‖₂ < 1`
    pub norm_contractive: bool,
    /// `γ·‖A_K‖₂ < 1`
    pub discount_contractive: bool,
}

impl StabilityFlags {
    pub fn all(&self) -> bool {
        self.mean_square_stable && self.norm_contractive && self.discount_contractive
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.clone().singular_values().max()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn close_loop(sys: &LinearSystem, gain: &FeedbackGain) -> Result<ClosedLoop> {
    gain.check_dims(sys)?;
    let k = gain.matrix();
    let a_k = sys.a() + sys.b() * k;
    let q_k = sys.q() + k.transpose() * sys.r() * k;
    let rho = spectral_norm(&a_k);
    let mut radius = spectral_radius(&a_k);
    // eigen- and singular-value solvers round independently
    if radius > rho {
        radius = rho;
    }
    Ok(ClosedLoop {
        a_k,
        q_k,
        rho,
        spectral_radius: radius,
    })
}

impl ClosedLoop {
    pub fn stability(&self, gamma: f64) -> StabilityFlags {
        StabilityFlags {
            mean_square_stable: self.spectral_radius * self.spectral_radius * gamma < 1.0,
            norm_contractive: self.rho < 1.0,
            discount_contractive: gamma * self.rho < 1.0,
        }
    }
}

/// `γ·ρ(A + BK)² < 1`, with dimension errors reported as not stable.
pub fn is_mean_square_stable(sys: &LinearSystem, gain: &FeedbackGain) -> bool {
    close_loop(sys, gain)
        .map(|cl| cl.stability(sys.gamma()).mean_square_stable)
        .unwrap_or(false)
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    Gaussian {
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    },
    UniformBox {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    Degenerate {
        point: DVector<f64>,
    },
}

/// I.i.d. disturbance law together with the moment bounds
/// `E[wᵀw] ≤ sigma0_sq` and `E[‖w‖₂] ≤ mu0` used by the truncation bound.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    kind: NoiseKind,
    sigma0_sq: f64,
    mu0: f64,
    /// Column-major factor `L` with `L Lᵀ = Σ` (gaussian only).
    factor: Option<DMatrix<f64>>,
}

fn check_vec_finite(name: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Instance(format!("{name} has non-finite entries")))
    }
}

impl NoiseModel {
    pub fn gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::Instance("noise dimension must be ≥ 1".into()));
        }
        if covariance.shape() != (n, n) {
            return Err(Error::Instance(format!(
                "covariance must be {n}×{n}, got {:?}",
                covariance.shape()
            )));
        }
        check_vec_finite("noise mean", &mean)?;
        check_finite("noise covariance", &covariance)?;
        let cov = symmetrize(&covariance);
        let eig = cov.clone().symmetric_eigen();
        let max_eig = eig.eigenvalues.max().max(0.0);
        let min_eig = eig.eigenvalues.min();
        if min_eig < -PD_RELATIVE_TOL * max_eig.max(1.0) {
            return Err(Error::Instance(format!(
                "noise covariance is not positive-semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        let sigma0_sq = cov.trace() + mean.norm_squared();
        Ok(Self {
            kind: NoiseKind::Gaussian {
                mean,
                covariance: cov,
            },
            sigma0_sq,
            mu0: sigma0_sq.sqrt(),
            factor: Some(factor),
        })
    }

    /// Standard normal noise in `n` dimensions.
    pub fn standard_gaussian(n: usize) -> Result<Self> {
        Self::gaussian(DVector::zeros(n), DMatrix::identity(n, n))
    }

    pub fn uniform_box(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Instance("box bounds must be nonempty and of equal length".into()));
        }
        check_vec_finite("box lower", &lower)?;
        check_vec_finite("box upper", &upper)?;
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::Instance("box requires lower ≤ upper elementwise".into()));
        }
        let sigma0_sq = lower
            .iter()
            .zip(upper.iter())
            .map(|(l, u)| {
                let mid = 0.5 * (l + u);
                (u - l) * (u - l) / 12.0 + mid * mid
            })
            .sum::<f64>();
        Ok(Self {
            kind: NoiseKind::UniformBox { lower, upper },
            sigma0_sq,
            mu0: sigma0_sq.sqrt(),
            factor: None,
        })
    }

    pub fn degenerate(point: DVector<f64>) -> Result<Self> {
        if point.is_empty() {
            return Err(Error::Instance("noise dimension must be ≥ 1".into()));
        }
        check_vec_finite("degenerate point", &point)?;
        let norm = point.norm();
        Ok(Self {
            kind: NoiseKind::Degenerate { point },
            sigma0_sq: norm * norm,
            mu0: norm,
            factor: None,
        })
    }

    /// Replace the analytic moment bounds with user-supplied ones.
    pub fn with_moment_bounds(mut self, sigma0_sq: Option<f64>, mu0: Option<f64>) -> Result<Self> {
        if let Some(s) = sigma0_sq {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Instance(format!("sigma0_sq must be ≥ 0, got {s}")));
            }
            self.sigma0_sq = s;
        }
        if let Some(m) = mu0 {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Instance(format!("mu0 must be ≥ 0, got {m}")));
            }
            self.mu0 = m;
        }
        // Jensen: E‖w‖ ≤ sqrt(E[wᵀw])
        if self.mu0 * self.mu0 > self.sigma0_sq * (1.0 + 1e-12) {
            return Err(Error::Instance(format!(
                "moment bounds violate Jensen's inequality: mu0² = {} > sigma0_sq = {}",
                self.mu0 * self.mu0,
                self.sigma0_sq
            )));
        }
        Ok(self)
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            NoiseKind::Gaussian { mean, .. } => mean.len(),
            NoiseKind::UniformBox { lower, .. } => lower.len(),
            NoiseKind::Degenerate { point } => point.len(),
        }
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    pub fn mean(&self) -> DVector<f64> {
        match &self.kind {
            NoiseKind::Gaussian { mean, .. } => mean.clone(),
            NoiseKind::UniformBox { lower, upper } => (lower + upper) * 0.5,
            NoiseKind::Degenerate { point } => point.clone(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.kind {
            NoiseKind::Gaussian { covariance, .. } => covariance.clone(),
            NoiseKind::UniformBox { lower, upper } => {
                DMatrix::from_diagonal(&(upper - lower).map(|d| d * d / 12.0))
            }
            NoiseKind::Degenerate { point } => DMatrix::zeros(point.len(), point.len()),
        }
    }

    /// True when every draw is the zero vector.
    pub fn is_zero(&self) -> bool {
        matches!(&self.kind, NoiseKind::Degenerate { point } if point.iter().all(|v| *v == 0.0))
    }

    /// Write one draw into `out` (length `dim()`); `scratch` needs the same length.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64], scratch: &mut [f64]) {
        match &self.kind {
            NoiseKind::Gaussian { mean, .. } => {
                let l = self.factor.as_ref().expect("gaussian factor");
                let n = mean.len();
                for z in scratch.iter_mut().take(n) {
                    *z = rng.sample(StandardNormal);
                }
                for (i, o) in out.iter_mut().enumerate().take(n) {
                    let mut acc = mean[i];
                    for (j, z) in scratch.iter().enumerate().take(n) {
                        acc += l[(i, j)] * z;
                    }
                    *o = acc;
                }
            }
            NoiseKind::UniformBox { lower, upper } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let u: f64 = rng.random();
                    *o = lower[i] + (upper[i] - lower[i]) * u;
                }
            }
            NoiseKind::Degenerate { point } => out.copy_from_slice(point.as_slice()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        self.sample_into(rng, &mut out, &mut scratch);
        DVector::from_vec(out)
    }
}

/// `count` i.i.d. draws from `model`.
pub fn sample_noise<R: Rng + ?Sized>(model: &NoiseModel, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..count).map(|_| model.sample(rng)).collect()
}
