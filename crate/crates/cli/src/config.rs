//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [system]
//! A = [[1.0]]
//! B = [[1.0]]
//! Q = [[1.0]]
//! R = [[1.0]]
//! gamma = 0.6
//!
//! [noise]
//! kind = "gaussian"
//! mean = [0.0]
//! covariance = [[1.0]]
//!
//! [task.dist]
//! K = "optimal"
//! x = [1.0]
//! N = [3, 10]
//! M = 10000
//! reference = "mc"
//!
//! [output]
//! directory = "out/fig1a"
//! ```
//!
//! Matrices are lists of rows. A scalar is accepted wherever a 1×1 matrix or
//! a length-1 vector is expected. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use dlqr_core::{FeedbackGain, LinearSystem, NoiseModel};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub system: SystemBlock,
    pub noise: NoiseBlock,
    #[serde(default)]
    pub task: TaskBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    #[serde(rename = "A")]
    pub a: MatrixValue,
    #[serde(rename = "B")]
    pub b: MatrixValue,
    #[serde(rename = "Q")]
    pub q: MatrixValue,
    #[serde(rename = "R")]
    pub r: MatrixValue,
    pub gamma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixValue {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum VectorValue {
    Scalar(f64),
    Entries(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindName {
    Gaussian,
    UniformBox,
    Degenerate,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub kind: NoiseKindName,
    pub mean: Option<VectorValue>,
    pub covariance: Option<MatrixValue>,
    pub lower: Option<VectorValue>,
    pub upper: Option<VectorValue>,
    pub point: Option<VectorValue>,
    pub sigma0_sq: Option<f64>,
    pub mu0: Option<f64>,
}

/// `"optimal"` or an explicit gain.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GainSpec {
    Named(String),
    Matrix(MatrixValue),
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec::Named("optimal".into())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DepthList {
    One(usize),
    Many(Vec<usize>),
}

impl DepthList {
    pub fn values(&self) -> Vec<usize> {
        match self {
            DepthList::One(n) => vec![*n],
            DepthList::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistReference {
    #[default]
    None,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompareReference {
    Mc,
    #[default]
    Truncated,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DensityBound {
    Value(f64),
    Named(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBlock {
    pub solve: Option<SolveTask>,
    pub dist: Option<DistTask>,
    pub compare: Option<CompareTask>,
    pub bound: Option<BoundTask>,
    pub optimize: Option<OptimizeTask>,
}

fn default_tol() -> f64 {
    dlqr_core::lqr::DEFAULT_TOL
}

fn default_max_iter() -> usize {
    dlqr_core::lqr::DEFAULT_MAX_ITER
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveTask {
    #[serde(rename = "K", default)]
    pub k: GainSpec,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_bins() -> usize {
    60
}

fn default_dist_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistTask {
    #[serde(rename = "K", default)]
    pub k: GainSpec,
    pub x: VectorValue,
    #[serde(rename = "N")]
    pub n: DepthList,
    #[serde(rename = "M", default = "default_dist_samples")]
    pub m: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub reference: DistReference,
    /// MC horizon; chosen from the tail estimate when absent.
    pub horizon: Option<usize>,
    /// Shared histogram range; the union of the sample ranges when absent.
    pub range: Option<[f64; 2]>,
}

fn default_reference_depth() -> usize {
    200
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareTask {
    #[serde(rename = "K", default)]
    pub k: GainSpec,
    pub x: VectorValue,
    #[serde(rename = "N")]
    pub n: DepthList,
    #[serde(rename = "M", default = "default_dist_samples")]
    pub m: usize,
    #[serde(default)]
    pub reference: CompareReference,
    #[serde(default = "default_reference_depth")]
    pub reference_n: usize,
    /// Draw the truncated reference from the same noise sequences as the sweep.
    #[serde(default = "default_true")]
    pub common_seeds: bool,
    pub horizon: Option<usize>,
    #[serde(rename = "L0")]
    pub l0: Option<DensityBound>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundTask {
    #[serde(rename = "K", default)]
    pub k: GainSpec,
    pub x: VectorValue,
    #[serde(rename = "N")]
    pub n: DepthList,
    #[serde(rename = "L0")]
    pub l0: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeTask {
    /// Initial gain.
    #[serde(rename = "K")]
    pub k: GainSpec,
    pub x: VectorValue,
    #[serde(rename = "N", default = "defaults::depth")]
    pub n: usize,
    #[serde(rename = "M", default = "defaults::samples")]
    pub m: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default = "defaults::episodes")]
    pub episodes: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_true")]
    pub crn: bool,
}

mod defaults {
    use dlqr_core::optimizer::PGConfig;

    pub fn depth() -> usize {
        PGConfig::default().depth
    }
    pub fn samples() -> usize {
        PGConfig::default().samples
    }
    pub fn alpha() -> f64 {
        PGConfig::default().alpha
    }
    pub fn eta() -> f64 {
        PGConfig::default().eta
    }
    pub fn delta() -> f64 {
        PGConfig::default().delta
    }
    pub fn episodes() -> usize {
        PGConfig::default().episodes
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default)]
    pub prefix: String,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            prefix: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn build_system(&self) -> Result<LinearSystem, CliError> {
        let s = &self.system;
        let a = matrix("system.A", &s.a)?;
        let n = a.nrows();
        LinearSystem::new(
            a,
            matrix("system.B", &s.b)?,
            matrix("system.Q", &s.q)?,
            matrix("system.R", &s.r)?,
            s.gamma,
        )
        .map_err(|e| CliError::Config(format!("system: {e} (state dimension {n})")))
    }

    pub fn build_noise(&self) -> Result<NoiseModel, CliError> {
        let b = &self.noise;
        let allowed: &[&str] = match b.kind {
            NoiseKindName::Gaussian => &["mean", "covariance"],
            NoiseKindName::UniformBox => &["lower", "upper"],
            NoiseKindName::Degenerate => &["point"],
        };
        let present = [
            ("mean", b.mean.is_some()),
            ("covariance", b.covariance.is_some()),
            ("lower", b.lower.is_some()),
            ("upper", b.upper.is_some()),
            ("point", b.point.is_some()),
        ];
        for (key, set) in present {
            if set && !allowed.contains(&key) {
                return Err(CliError::Config(format!("noise.{key} does not apply to kind {:?}", b.kind)));
            }
        }
        let need = |v: &Option<VectorValue>, key: &str| -> Result<DVector<f64>, CliError> {
            v.as_ref()
                .map(vector)
                .ok_or_else(|| CliError::Config(format!("noise.{key} is required for kind {:?}", b.kind)))
        };
        let model = match b.kind {
            NoiseKindName::Gaussian => {
                let cov = b
                    .covariance
                    .as_ref()
                    .ok_or_else(|| CliError::Config("noise.covariance is required for a Gaussian".into()))
                    .and_then(|m| matrix("noise.covariance", m))?;
                let mean = match &b.mean {
                    Some(m) => vector(m),
                    None => DVector::zeros(cov.nrows()),
                };
                NoiseModel::gaussian(mean, cov)
            }
            NoiseKindName::UniformBox => NoiseModel::uniform_box(need(&b.lower, "lower")?, need(&b.upper, "upper")?),
            NoiseKindName::Degenerate => NoiseModel::degenerate(need(&b.point, "point")?),
        }
        .map_err(|e| CliError::Config(format!("noise: {e}")))?;
        model
            .with_moment_bounds(b.sigma0_sq, b.mu0)
            .map_err(|e| CliError::Config(format!("noise: {e}")))
    }
}

pub fn matrix(name: &str, m: &MatrixValue) -> Result<DMatrix<f64>, CliError> {
    match m {
        MatrixValue::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
        MatrixValue::Rows(rows) => {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.is_empty() || cols == 0 {
                return Err(CliError::Config(format!("{name} is empty")));
            }
            if rows.iter().any(|r| r.len() != cols) {
                return Err(CliError::Config(format!("{name} has rows of unequal length")));
            }
            Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
        }
    }
}

pub fn vector(v: &VectorValue) -> DVector<f64> {
    match v {
        VectorValue::Scalar(x) => DVector::from_element(1, *x),
        VectorValue::Entries(e) => DVector::from_column_slice(e),
    }
}

/// An explicit gain, or `None` for `"optimal"`.
pub fn explicit_gain(spec: &GainSpec) -> Result<Option<FeedbackGain>, CliError> {
    match spec {
        GainSpec::Named(name) if name == "optimal" => Ok(None),
        GainSpec::Named(name) => Err(CliError::Config(format!(
            "K must be \"optimal\" or a matrix, got \"{name}\""
        ))),
        GainSpec::Matrix(m) => Ok(Some(FeedbackGain::new(matrix("K", m)?))),
    }
}
