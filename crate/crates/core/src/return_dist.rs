//! The truncated random return
//!
//! ```text
//! G_N(x) = xᵀPx + Σ_{k<N} γ^{k+1} w_kᵀPw_k
//!               + 2 Σ_{k<N} γ^{k+1} w_kᵀP A_K^{k+1} x
//!               + 2 Σ_{1≤k<N} γ^{k+1} w_kᵀP Σ_{τ<k} A_K^{k−τ} w_τ
//! ```
//!
//! with `P` the Lyapunov matrix of the gain, plus empirical distributions
//! built from i.i.d. draws of it.
//!
//! Draw `i` of a sample set seeded with `seed` consumes the stream
//! `rng::stream(seed, RETURN_STREAM_TAG, i)`, taking `w_0, w_1, …` in order.
//! Sample sets at different depths built from the same seed therefore share
//! their noise prefixes draw by draw.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lin_sys::{close_loop, FeedbackGain, LinearSystem, NoiseModel};
use crate::lqr::{solve_lyapunov, ValueCertificate, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::rng::stream;

pub const RETURN_STREAM_TAG: &str = "return";

/// Everything needed to draw `G_N(x)` for one gain.
#[derive(Debug, Clone)]
pub struct ReturnModel {
    sys: LinearSystem,
    gain: FeedbackGain,
    cert: ValueCertificate,
    noise: NoiseModel,
    depth: usize,
    // row-major copies for the inner loops
    p: Vec<f64>,
    a_k: Vec<f64>,
}

fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

#[inline]
fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Noise-independent parts of `G_N(x)` for one state: `xᵀPx`, the discounts
/// `γ^{k+1}` and the drift vectors `γ^{k+1}·P·A_K^{k+1}x`.
#[derive(Debug, Clone)]
pub struct StateTerms {
    base: f64,
    disc: Vec<f64>,
    drift: Vec<f64>,
}

/// Reusable buffers for one evaluation thread.
#[derive(Debug, Clone)]
pub struct Scratch {
    s: Vec<f64>,
    pw: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    pub fn new(n: usize) -> Self {
        Self {
            s: vec![0.0; n],
            pw: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

impl ReturnModel {
    /// Solve the Lyapunov equation for `gain` and assemble the model.
    pub fn new(sys: LinearSystem, gain: FeedbackGain, noise: NoiseModel, depth: usize) -> Result<Self> {
        let cert = solve_lyapunov(&sys, &gain, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        Self::with_certificate(sys, gain, cert, noise, depth)
    }

    pub fn with_certificate(
        sys: LinearSystem,
        gain: FeedbackGain,
        cert: ValueCertificate,
        noise: NoiseModel,
        depth: usize,
    ) -> Result<Self> {
        let n = sys.state_dim();
        if noise.dim() != n {
            return Err(Error::Instance(format!(
                "noise dimension {} does not match state dimension {n}",
                noise.dim()
            )));
        }
        if cert.gain != gain || cert.p.shape() != (n, n) {
            return Err(Error::Instance("certificate does not belong to this gain".into()));
        }
        let cl = close_loop(&sys, &gain)?;
        Ok(Self {
            p: row_major(&cert.p),
            a_k: row_major(&cl.a_k),
            sys,
            gain,
            cert,
            noise,
            depth,
        })
    }

    pub fn system(&self) -> &LinearSystem {
        &self.sys
    }

    pub fn gain(&self) -> &FeedbackGain {
        &self.gain
    }

    pub fn certificate(&self) -> &ValueCertificate {
        &self.cert
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    /// Same model truncated at a different depth.
    pub fn with_depth(&self, depth: usize) -> Self {
        Self {
            depth,
            ..self.clone()
        }
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Instance(format!(
                "initial state has dimension {}, expected {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// The parts of the four-term sum that depend on `x` but not on the noise.
    pub fn state_terms(&self, x: &[f64]) -> StateTerms {
        let n = x.len();
        let gamma = self.sys.gamma();
        let mut px = vec![0.0; n];
        mat_vec(&self.p, x, &mut px);
        let base = dot(x, &px);

        let mut disc = Vec::with_capacity(self.depth);
        let mut drift = vec![0.0; self.depth * n];
        let mut y = vec![0.0; n];
        let mut next = vec![0.0; n];
        mat_vec(&self.a_k, x, &mut y);
        let mut g = gamma;
        for chunk in drift.chunks_exact_mut(n) {
            mat_vec(&self.p, &y, chunk);
            chunk.iter_mut().for_each(|v| *v *= g);
            disc.push(g);
            mat_vec(&self.a_k, &y, &mut next);
            std::mem::swap(&mut y, &mut next);
            g *= gamma;
        }
        StateTerms { base, disc, drift }
    }

    /// Evaluate the four-term sum on a given flat noise sequence
    /// (`w_k = noise[k·n..(k+1)·n]`, only the first `depth` steps are read).
    ///
    /// The inner sum `s_k = Σ_{τ<k} A_K^{k−τ} w_τ` follows `s_k = A_K(s_{k−1} + w_{k−1})`.
    pub fn evaluate_with(&self, x: &[f64], noise: &[f64], scratch: &mut Scratch) -> f64 {
        self.evaluate_terms(&self.state_terms(x), noise, scratch)
    }

    /// [`evaluate_with`](Self::evaluate_with) with the state terms computed once.
    pub fn evaluate_terms(&self, terms: &StateTerms, noise: &[f64], scratch: &mut Scratch) -> f64 {
        let n = scratch.s.len();
        let mut quad = 0.0;
        let mut cross_state = 0.0;
        let mut cross_noise = 0.0;
        if n == 1 {
            let (p, a) = (self.p[0], self.a_k[0]);
            let mut s = 0.0;
            for ((&w, &g), &d) in noise.iter().zip(&terms.disc).zip(&terms.drift) {
                let pw = p * w;
                quad += g * (w * pw);
                cross_state += d * w;
                cross_noise += g * (pw * s);
                s = a * (s + w);
            }
        } else {
            scratch.s.iter_mut().for_each(|v| *v = 0.0);
            let steps = noise.chunks_exact(n).zip(&terms.disc).zip(terms.drift.chunks_exact(n));
            for ((w, &g), d) in steps {
                mat_vec(&self.p, w, &mut scratch.pw);
                quad += g * dot(w, &scratch.pw);
                cross_state += dot(d, w);
                cross_noise += g * dot(&scratch.pw, &scratch.s);
                for (t, (s, wi)) in scratch.tmp.iter_mut().zip(scratch.s.iter().zip(w)) {
                    *t = s + wi;
                }
                mat_vec(&self.a_k, &scratch.tmp, &mut scratch.s);
            }
        }
        terms.base + quad + 2.0 * cross_state + 2.0 * cross_noise
    }

    /// Deterministic evaluation of `G_N(x)` on an explicit noise sequence.
    pub fn evaluate(&self, x: &DVector<f64>, noise: &[DVector<f64>]) -> Result<f64> {
        self.check_state(x.as_slice())?;
        if noise.len() != self.depth || noise.iter().any(|w| w.len() != self.state_dim()) {
            return Err(Error::Instance(format!(
                "expected {} noise vectors of dimension {}",
                self.depth,
                self.state_dim()
            )));
        }
        let flat: Vec<f64> = noise.iter().flat_map(|w| w.iter().copied()).collect();
        Ok(self.evaluate_with(x.as_slice(), &flat, &mut Scratch::new(self.state_dim())))
    }

    /// Draw `depth` disturbances from `rng` into `buf` (resized as needed).
    fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R, buf: &mut Vec<f64>, scratch: &mut Scratch) {
        let n = self.state_dim();
        buf.resize(self.depth * n, 0.0);
        for w in buf.chunks_exact_mut(n) {
            self.noise.sample_into(rng, w, &mut scratch.tmp);
        }
    }
}

/// One draw of `G_N(x)`.
pub fn sample_return<R: Rng + ?Sized>(model: &ReturnModel, x: &DVector<f64>, rng: &mut R) -> Result<f64> {
    model.check_state(x.as_slice())?;
    let mut scratch = Scratch::new(model.state_dim());
    let mut buf = Vec::new();
    model.draw_noise(rng, &mut buf, &mut scratch);
    Ok(model.evaluate_with(x.as_slice(), &buf, &mut scratch))
}

/// The same quantity written as a closed-loop rollout:
/// `xᵀPx + Σ_{t<N} γ^{t+1}(w_tᵀPw_t + 2 w_tᵀP A_K x_t)` with
/// `x_{t+1} = A_K x_t + w_t`.
pub fn sample_return_via_rollout(model: &ReturnModel, x: &DVector<f64>, noise: &[DVector<f64>]) -> Result<f64> {
    model.check_state(x.as_slice())?;
    if noise.len() != model.depth() {
        return Err(Error::Instance(format!(
            "noise sequence has {} entries, expected {}",
            noise.len(),
            model.depth()
        )));
    }
    let p = &model.certificate().p;
    let a_k = close_loop(model.system(), model.gain())?.a_k;
    let gamma = model.system().gamma();
    let mut state = x.clone();
    let mut total = x.dot(&(p * x));
    let mut disc = gamma;
    for w in noise {
        if w.len() != state.len() {
            return Err(Error::Instance("noise vector has wrong dimension".into()));
        }
        let pw = p * w;
        let next_mean = &a_k * &state;
        total += disc * (w.dot(&pw) + 2.0 * pw.dot(&next_mean));
        state = next_mean + w;
        disc *= gamma;
    }
    Ok(total)
}

/// Pre-drawn disturbance sequences, laid out exactly as `build_empirical`
/// would draw them for the same seed. Evaluating many gains against one bank
/// gives common random numbers.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    depth: usize,
    dim: usize,
    data: Vec<f64>,
}

impl NoiseBank {
    pub fn draw(noise: &NoiseModel, depth: usize, count: usize, seed: u64) -> Self {
        let dim = noise.dim();
        let stride = depth * dim;
        let mut data = vec![0.0; stride * count];
        if stride > 0 {
            data.par_chunks_mut(stride).enumerate().for_each(|(i, chunk)| {
                let mut rng = stream(seed, RETURN_STREAM_TAG, i as u64);
                let mut tmp = vec![0.0; dim];
                for w in chunk.chunks_exact_mut(dim) {
                    noise.sample_into(&mut rng, w, &mut tmp);
                }
            });
        }
        Self { depth, dim, data }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn count(&self) -> usize {
        if self.depth * self.dim == 0 {
            0
        } else {
            self.data.len() / (self.depth * self.dim)
        }
    }

    /// Noise sequence of draw `i`.
    pub fn sequence(&self, i: usize) -> &[f64] {
        let stride = self.depth * self.dim;
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// Evaluate `G_N(x)` for every sequence of a bank whose depth is at least the model's.
/// The bank must hold at least one sequence when `depth` is zero.
pub fn evaluate_bank(model: &ReturnModel, x: &DVector<f64>, bank: &NoiseBank, count: usize) -> Result<Vec<f64>> {
    model.check_state(x.as_slice())?;
    if bank.dim != model.state_dim() || bank.depth < model.depth() {
        return Err(Error::Instance("noise bank is too shallow or has the wrong dimension".into()));
    }
    if model.depth() > 0 && count > bank.count() {
        return Err(Error::Instance(format!("noise bank holds {} sequences, need {count}", bank.count())));
    }
    let n = model.state_dim();
    let terms = model.state_terms(x.as_slice());
    Ok((0..count)
        .into_par_iter()
        .map_init(
            || Scratch::new(n),
            |scratch, i| {
                let seq = if bank.depth == 0 { &[][..] } else { bank.sequence(i) };
                model.evaluate_terms(&terms, seq, scratch)
            },
        )
        .collect())
}

/// Raw (unsorted) draws `G_N(x)`, draw `i` from `stream(seed, "return", i)`.
pub fn sample_returns(model: &ReturnModel, x: &DVector<f64>, count: usize, seed: u64) -> Result<Vec<f64>> {
    model.check_state(x.as_slice())?;
    let n = model.state_dim();
    let terms = model.state_terms(x.as_slice());
    Ok((0..count)
        .into_par_iter()
        .map_init(
            || (Scratch::new(n), Vec::new()),
            |(scratch, buf), i| {
                let mut rng = stream(seed, RETURN_STREAM_TAG, i as u64);
                model.draw_noise(&mut rng, buf, scratch);
                model.evaluate_terms(&terms, buf, scratch)
            },
        )
        .collect())
}

/// `count` i.i.d. draws of `G_N(x)`, sorted.
pub fn build_empirical(model: &ReturnModel, x: &DVector<f64>, count: usize, seed: u64) -> Result<EmpiricalDistribution> {
    if count == 0 {
        return Err(Error::EmptyDistribution);
    }
    EmpiricalDistribution::new(sample_returns(model, x, count, seed)?)
}

/// Mean of a nonempty slice, accumulated as offsets from its first element so
/// that a point mass averages to itself exactly.
pub fn shifted_mean(values: &[f64]) -> f64 {
    let origin = values[0];
    origin + values.iter().map(|v| v - origin).sum::<f64>() / values.len() as f64
}

/// A sorted sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    samples: Vec<f64>,
}

impl EmpiricalDistribution {
    /// Sort `samples`; NaN and empty input are rejected.
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        if samples.iter().any(|v| v.is_nan()) {
            return Err(Error::Instance("sample set contains NaN".into()));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn min(&self) -> f64 {
        self.samples[0]
    }

    pub fn max(&self) -> f64 {
        self.samples[self.samples.len() - 1]
    }

    pub fn mean(&self) -> f64 {
        shifted_mean(&self.samples)
    }

    /// Unbiased sample variance (zero for a single sample).
    pub fn variance(&self) -> f64 {
        let m = self.count();
        if m < 2 {
            return 0.0;
        }
        let mean = self.mean();
        self.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64
    }

    /// `(#samples ≤ z) / count`.
    pub fn cdf(&self, z: f64) -> f64 {
        self.samples.partition_point(|v| *v <= z) as f64 / self.count() as f64
    }

    /// Apply a nondecreasing map to every sample.
    pub fn map_monotone(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|v| f(*v)).collect())
    }
}

/// Exact two-sample Kolmogorov–Smirnov statistic `sup_z |F_a(z) − F_b(z)|`.
pub fn ks_distance(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> f64 {
    let (xa, xb) = (a.samples(), b.samples());
    let (na, nb) = (xa.len() as u128, xb.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    // gap kept as the integer |i·nb − j·na| so the result is a correctly rounded ratio
    let mut sup = 0u128;
    while i < xa.len() && j < xb.len() {
        let z = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= z {
            i += 1;
        }
        while j < xb.len() && xb[j] <= z {
            j += 1;
        }
        sup = sup.max((i as u128 * nb).abs_diff(j as u128 * na));
    }
    // once one side is exhausted its CDF is 1 and the gap only shrinks
    sup as f64 / (na * nb) as f64
}

/// One histogram bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub center: f64,
    pub frequency: f64,
}

/// Bin range used when none is supplied: the sample range, widened to unit
/// width around a point mass.
pub fn auto_range(min: f64, max: f64) -> (f64, f64) {
    if max > min {
        (min, max)
    } else {
        (min - 0.5, max + 0.5)
    }
}

/// Relative frequencies over `bins` equal-width bins on `[lo, hi]`; samples
/// outside the range are counted in the end bins.
pub fn histogram(d: &EmpiricalDistribution, bins: usize, range: Option<(f64, f64)>) -> Result<Vec<Bin>> {
    if bins == 0 {
        return Err(Error::Instance("histogram needs at least one bin".into()));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Instance(format!("histogram range requires lo < hi, got ({lo}, {hi})")));
            }
            (lo, hi)
        }
        None => auto_range(d.min(), d.max()),
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in d.samples() {
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
        counts[idx] += 1;
    }
    let total = d.count() as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| Bin {
            center: lo + (i as f64 + 0.5) * width,
            frequency: c as f64 / total,
        })
        .collect())
}
