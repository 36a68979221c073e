//! The five subcommands. Each one validates everything it can before sampling
//! (`prepare_*`), then computes and writes its files.

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dlqr_core::bound::{bound_at, bound_constant, estimate_density_bound, BoundInputs};
use dlqr_core::lin_sys::{close_loop, ClosedLoop};
use dlqr_core::lqr::{solve_lyapunov, solve_riccati, DEFAULT_MAX_ITER, DEFAULT_TOL};
use dlqr_core::mc::{build_mc_distribution, RolloutConfig, DEFAULT_TAIL_TOL};
use dlqr_core::optimizer::{self, OptimizerTrace, PGConfig};
use dlqr_core::return_dist::{auto_range, histogram};
use dlqr_core::rng::derive_seed;
use dlqr_core::{
    build_empirical, ks_distance, EmpiricalDistribution, Error as CoreError, FeedbackGain, LinearSystem, NoiseModel,
    ReturnModel, RiskSpec, ValueCertificate,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{
    explicit_gain, vector, BoundTask, CompareReference, CompareTask, DensityBound, DistReference, DistTask,
    ExperimentConfig, GainSpec, OptimizeTask, SolveTask,
};
use crate::error::CliError;
use crate::output::{fmt_f64, gain_columns, row_major, OutputDir, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Dist,
    Compare,
    Bound,
    Optimize,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Dist => "dist",
            Command::Compare => "compare",
            Command::Bound => "bound",
            Command::Optimize => "optimize",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Validate only; no sampling and no files.
    pub check: bool,
    pub config_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    /// Human-readable lines for stdout.
    pub lines: Vec<String>,
}

/// Run `cmd` against `cfg`. Files named in the report have been written; on a
/// stability boundary in `optimize`, partial traces are written before the
/// error is returned.
pub fn run(cmd: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport, CliError> {
    let root = opts.seed.or(cfg.seed).unwrap_or(0);
    let sys = cfg.build_system()?;
    let noise = cfg.build_noise()?;
    if noise.dim() != sys.state_dim() {
        return Err(CliError::Config(format!(
            "noise dimension {} does not match state dimension {}",
            noise.dim(),
            sys.state_dim()
        )));
    }
    let ctx = Context {
        sys,
        noise,
        root,
        out_dir: opts.out.clone().unwrap_or_else(|| cfg.output.directory.clone()),
        prefix: cfg.output.prefix.clone(),
        config_path: opts.config_path.clone(),
        started: Instant::now(),
    };
    let missing = || CliError::Config(format!("config has no [task.{}] block", cmd.name()));
    match cmd {
        Command::Solve => {
            let default = SolveTask {
                k: GainSpec::default(),
                tol: DEFAULT_TOL,
                max_iter: DEFAULT_MAX_ITER,
            };
            let task = cfg.task.solve.clone().unwrap_or(default);
            let plan = prepare_solve(&ctx, &task)?;
            finish(&ctx, cmd, opts.check, |out| exec_solve(&ctx, plan, out))
        }
        Command::Dist => {
            let plan = prepare_dist(&ctx, cfg.task.dist.as_ref().ok_or_else(missing)?)?;
            finish(&ctx, cmd, opts.check, |out| exec_dist(&ctx, plan, out))
        }
        Command::Compare => {
            let plan = prepare_compare(&ctx, cfg.task.compare.as_ref().ok_or_else(missing)?)?;
            finish(&ctx, cmd, opts.check, |out| exec_compare(&ctx, plan, out))
        }
        Command::Bound => {
            let plan = prepare_bound(&ctx, cfg.task.bound.as_ref().ok_or_else(missing)?)?;
            finish(&ctx, cmd, opts.check, |out| exec_bound(&ctx, plan, out))
        }
        Command::Optimize => {
            let plan = prepare_optimize(&ctx, cfg.task.optimize.as_ref().ok_or_else(missing)?)?;
            finish(&ctx, cmd, opts.check, |out| exec_optimize(&ctx, plan, out))
        }
    }
}

struct Context {
    sys: LinearSystem,
    noise: NoiseModel,
    root: u64,
    out_dir: PathBuf,
    prefix: String,
    config_path: Option<PathBuf>,
    started: Instant,
}

/// What an executed command hands back for the metadata file.
struct Outcome {
    files: Vec<PathBuf>,
    lines: Vec<String>,
    meta: Map<String, Value>,
    error: Option<CliError>,
}

impl Outcome {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            lines: Vec::new(),
            meta: Map::new(),
            error: None,
        }
    }
}

fn finish<F>(ctx: &Context, cmd: Command, check: bool, exec: F) -> Result<RunReport, CliError>
where
    F: FnOnce(&OutputDir) -> Result<Outcome, CliError>,
{
    if check {
        return Ok(RunReport {
            files: Vec::new(),
            lines: vec![format!("{}: configuration ok", cmd.name())],
        });
    }
    let out = OutputDir::create(&ctx.out_dir, &ctx.prefix)?;
    let mut outcome = exec(&out)?;

    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut meta = Map::new();
    meta.insert("command".into(), json!(cmd.name()));
    meta.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    meta.insert("root_seed".into(), json!(ctx.root));
    meta.insert(
        "config".into(),
        json!(ctx.config_path.as_ref().map(|p| p.display().to_string())),
    );
    meta.insert("timestamp_unix".into(), json!(timestamp));
    meta.insert("elapsed_seconds".into(), json!(ctx.started.elapsed().as_secs_f64()));
    meta.insert(
        "files".into(),
        json!(outcome
            .files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect::<Vec<_>>()),
    );
    if let Some(e) = &outcome.error {
        meta.insert("error".into(), json!(e.to_string()));
    }
    meta.append(&mut outcome.meta);
    let meta_path = out.write_json("meta.json", &Value::Object(meta))?;
    outcome.files.push(meta_path);

    match outcome.error {
        Some(e) => Err(e),
        None => Ok(RunReport {
            files: outcome.files,
            lines: outcome.lines,
        }),
    }
}

/// `(K, P(K))`: the Riccati solution for `"optimal"`, else the given gain with
/// its Lyapunov certificate.
fn resolve_gain(sys: &LinearSystem, spec: &GainSpec, tol: f64, max_iter: usize) -> Result<(FeedbackGain, ValueCertificate), CliError> {
    match explicit_gain(spec)? {
        None => {
            let (cert, gain) = solve_riccati(sys, tol, max_iter)?;
            Ok((gain, cert))
        }
        Some(k) => {
            k.check_dims(sys).map_err(|e| CliError::Config(format!("K: {e}")))?;
            let cert = solve_lyapunov(sys, &k, tol, max_iter)?;
            Ok((k, cert))
        }
    }
}

fn state(ctx: &Context, x: &crate::config::VectorValue) -> Result<DVector<f64>, CliError> {
    let x = vector(x);
    if x.len() != ctx.sys.state_dim() {
        return Err(CliError::Config(format!(
            "x has dimension {}, expected {}",
            x.len(),
            ctx.sys.state_dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config("x has non-finite entries".into()));
    }
    Ok(x)
}

fn depths(list: &crate::config::DepthList) -> Result<Vec<usize>, CliError> {
    let v = list.values();
    if v.is_empty() {
        return Err(CliError::Config("N list is empty".into()));
    }
    let mut sorted = v.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != v.len() {
        return Err(CliError::Config("N list has duplicates".into()));
    }
    Ok(v)
}

fn positive(name: &str, v: usize) -> Result<usize, CliError> {
    if v == 0 {
        Err(CliError::Config(format!("{name} must be ≥ 1")))
    } else {
        Ok(v)
    }
}

fn rollout_config(ctx: &Context, gain: &FeedbackGain, x: &DVector<f64>, horizon: Option<usize>, m: usize) -> Result<RolloutConfig, CliError> {
    Ok(match horizon {
        Some(h) => RolloutConfig::with_horizon(&ctx.sys, gain, &ctx.noise, x, positive("horizon", h)?, m)?,
        None => RolloutConfig::auto(&ctx.sys, gain, &ctx.noise, x, m, DEFAULT_TAIL_TOL)?,
    })
}

fn bool_num(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn gain_json(k: &DMatrix<f64>) -> Value {
    json!((0..k.nrows())
        .map(|r| (0..k.ncols()).map(|c| k[(r, c)]).collect::<Vec<_>>())
        .collect::<Vec<_>>())
}

// ---------------------------------------------------------------- solve

struct SolvePlan {
    gain: FeedbackGain,
    cert: ValueCertificate,
    cl: ClosedLoop,
    optimal: bool,
}

fn prepare_solve(ctx: &Context, task: &SolveTask) -> Result<SolvePlan, CliError> {
    if !(task.tol > 0.0 && task.tol.is_finite()) {
        return Err(CliError::Config(format!("tol must be positive, got {}", task.tol)));
    }
    positive("max_iter", task.max_iter)?;
    let optimal = explicit_gain(&task.k)?.is_none();
    let (gain, cert) = resolve_gain(&ctx.sys, &task.k, task.tol, task.max_iter)?;
    let cl = close_loop(&ctx.sys, &gain)?;
    Ok(SolvePlan {
        gain,
        cert,
        cl,
        optimal,
    })
}

fn exec_solve(ctx: &Context, plan: SolvePlan, out: &OutputDir) -> Result<Outcome, CliError> {
    let flags = plan.cl.stability(ctx.sys.gamma());
    let mut t = Table::new(["quantity", "row", "col", "value"]);
    let mut push = |q: &str, r: usize, c: usize, v: f64| t.push(vec![q.into(), r.to_string(), c.to_string(), fmt_f64(v)]);
    for r in 0..plan.cert.p.nrows() {
        for c in 0..plan.cert.p.ncols() {
            push("P", r, c, plan.cert.p[(r, c)]);
        }
    }
    let k = plan.gain.matrix();
    for r in 0..k.nrows() {
        for c in 0..k.ncols() {
            push("K", r, c, k[(r, c)]);
        }
    }
    push("residual", 0, 0, plan.cert.residual);
    push("iterations", 0, 0, plan.cert.iterations as f64);
    push("mean_square_stable", 0, 0, bool_num(flags.mean_square_stable));
    push("norm_contractive", 0, 0, bool_num(flags.norm_contractive));
    push("discount_contractive", 0, 0, bool_num(flags.discount_contractive));
    push("closed_loop_norm", 0, 0, plan.cl.rho);
    push("spectral_radius", 0, 0, plan.cl.spectral_radius);

    let mut o = Outcome::new();
    o.files.push(out.write_csv("solve.csv", &t)?);
    o.lines.push(format!(
        "{} gain {}, residual {:e} after {} iterations",
        if plan.optimal { "optimal" } else { "given" },
        fmt_matrix(k),
        plan.cert.residual,
        plan.cert.iterations
    ));
    o.meta.insert("optimal".into(), json!(plan.optimal));
    o.meta.insert("K".into(), gain_json(k));
    o.meta.insert("P".into(), gain_json(&plan.cert.p));
    Ok(o)
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|r| {
            let cells: Vec<String> = (0..m.ncols()).map(|c| format!("{:.6}", m[(r, c)])).collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

// ---------------------------------------------------------------- dist

struct DistPlan {
    model: ReturnModel,
    x: DVector<f64>,
    depths: Vec<usize>,
    m: usize,
    bins: usize,
    range: Option<(f64, f64)>,
    mc: Option<RolloutConfig>,
}

fn sampling_model(ctx: &Context, spec: &GainSpec) -> Result<ReturnModel, CliError> {
    let (gain, cert) = resolve_gain(&ctx.sys, spec, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    Ok(ReturnModel::with_certificate(ctx.sys.clone(), gain, cert, ctx.noise.clone(), 0)?)
}

fn prepare_dist(ctx: &Context, task: &DistTask) -> Result<DistPlan, CliError> {
    let x = state(ctx, &task.x)?;
    let depths = depths(&task.n)?;
    let m = positive("M", task.m)?;
    let bins = positive("bins", task.bins)?;
    let range = match task.range {
        Some([lo, hi]) if lo < hi && lo.is_finite() && hi.is_finite() => Some((lo, hi)),
        Some([lo, hi]) => return Err(CliError::Config(format!("range needs lo < hi, got [{lo}, {hi}]"))),
        None => None,
    };
    if task.horizon.is_some() && task.reference != DistReference::Mc {
        return Err(CliError::Config("horizon applies only to reference = \"mc\"".into()));
    }
    let model = sampling_model(ctx, &task.k)?;
    let mc = match task.reference {
        DistReference::Mc => Some(rollout_config(ctx, model.gain(), &x, task.horizon, m)?),
        DistReference::None => None,
    };
    Ok(DistPlan {
        model,
        x,
        depths,
        m,
        bins,
        range,
        mc,
    })
}

fn histogram_table(d: &EmpiricalDistribution, bins: usize, range: (f64, f64)) -> Result<Table, CliError> {
    let mut t = Table::new(["bin_center", "frequency"]);
    for b in histogram(d, bins, Some(range))? {
        t.push_f64(&[b.center, b.frequency]);
    }
    Ok(t)
}

fn samples_table(d: &EmpiricalDistribution) -> Table {
    let mut t = Table::new(["sample"]);
    for v in d.samples() {
        t.push_f64(&[*v]);
    }
    t
}

fn shared_range<'a>(dists: impl Iterator<Item = &'a EmpiricalDistribution>) -> (f64, f64) {
    let (lo, hi) = dists.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
        (lo.min(d.min()), hi.max(d.max()))
    });
    auto_range(lo, hi)
}

fn exec_dist(ctx: &Context, plan: DistPlan, out: &OutputDir) -> Result<Outcome, CliError> {
    let seed = derive_seed(ctx.root, "dist", 0);
    let mc_seed = derive_seed(ctx.root, "dist-mc", 0);
    // one seed for every N: the draws share noise prefixes
    let dists: Vec<EmpiricalDistribution> = plan
        .depths
        .iter()
        .map(|&n| build_empirical(&plan.model.with_depth(n), &plan.x, plan.m, seed))
        .collect::<Result<_, _>>()?;
    let mc = match &plan.mc {
        Some(cfg) => Some(build_mc_distribution(
            &ctx.sys,
            plan.model.gain(),
            &ctx.noise,
            &plan.x,
            cfg,
            mc_seed,
        )?),
        None => None,
    };
    let range = plan
        .range
        .unwrap_or_else(|| shared_range(dists.iter().chain(mc.as_ref())));

    let mut o = Outcome::new();
    for (n, d) in plan.depths.iter().zip(&dists) {
        o.files.push(out.write_csv(&format!("dist_N{n}.csv"), &histogram_table(d, plan.bins, range)?)?);
        o.files.push(out.write_csv(&format!("dist_N{n}_samples.csv"), &samples_table(d))?);
    }
    let mut ks_meta = Map::new();
    if let Some(mc) = &mc {
        o.files.push(out.write_csv("dist_MC.csv", &histogram_table(mc, plan.bins, range)?)?);
        o.files.push(out.write_csv("dist_MC_samples.csv", &samples_table(mc))?);
        let mut t = Table::new(["N", "ks_to_mc"]);
        for (n, d) in plan.depths.iter().zip(&dists) {
            let ks = ks_distance(d, mc);
            t.push(vec![n.to_string(), fmt_f64(ks)]);
            ks_meta.insert(n.to_string(), json!(ks));
            o.lines.push(format!("N = {n}: KS to MC reference {ks:.4}"));
        }
        o.files.push(out.write_csv("dist_ks.csv", &t)?);
    }
    for (n, d) in plan.depths.iter().zip(&dists) {
        o.lines.push(format!("N = {n}: mean {:.6}, variance {:.6}", d.mean(), d.variance()));
    }

    o.meta.insert("seed".into(), json!(seed));
    o.meta.insert("M".into(), json!(plan.m));
    o.meta.insert("bins".into(), json!(plan.bins));
    o.meta.insert("N".into(), json!(plan.depths));
    o.meta.insert("range".into(), json!([range.0, range.1]));
    o.meta.insert("K".into(), gain_json(plan.model.gain().matrix()));
    if let Some(cfg) = &plan.mc {
        o.meta.insert(
            "mc".into(),
            json!({"seed": mc_seed, "horizon": cfg.horizon, "tail_bound": cfg.tail_bound, "ks_to_mc": ks_meta}),
        );
    }
    Ok(o)
}

// ---------------------------------------------------------------- compare

enum ComparisonReference {
    Truncated { depth: usize, seed: u64 },
    Mc { cfg: RolloutConfig, seed: u64 },
}

enum DensityChoice {
    None,
    Given(f64),
    Estimate,
}

struct ComparePlan {
    model: ReturnModel,
    x: DVector<f64>,
    depths: Vec<usize>,
    m: usize,
    reference: ComparisonReference,
    density: DensityChoice,
    bound: Result<BoundInputs, String>,
}

fn bound_inputs(ctx: &Context, model: &ReturnModel, x: &DVector<f64>) -> Result<BoundInputs, CliError> {
    let cl = close_loop(&ctx.sys, model.gain())?;
    let b = BoundInputs::new(model.certificate().clone(), cl.rho, ctx.sys.gamma(), x.clone(), &ctx.noise);
    bound_constant(&b)?;
    Ok(b)
}

fn prepare_compare(ctx: &Context, task: &CompareTask) -> Result<ComparePlan, CliError> {
    let x = state(ctx, &task.x)?;
    let depths = depths(&task.n)?;
    let m = positive("M", task.m)?;
    let model = sampling_model(ctx, &task.k)?;
    let density = match &task.l0 {
        None => DensityChoice::None,
        Some(DensityBound::Value(v)) if *v > 0.0 && v.is_finite() => DensityChoice::Given(*v),
        Some(DensityBound::Value(v)) => return Err(CliError::Config(format!("L0 must be positive, got {v}"))),
        Some(DensityBound::Named(s)) if s == "estimate" => DensityChoice::Estimate,
        Some(DensityBound::Named(s)) => {
            return Err(CliError::Config(format!("L0 must be a number or \"estimate\", got \"{s}\"")))
        }
    };
    let reference = match task.reference {
        CompareReference::Truncated => {
            if task.horizon.is_some() {
                return Err(CliError::Config("horizon applies only to reference = \"mc\"".into()));
            }
            let seed = if task.common_seeds {
                derive_seed(ctx.root, "compare", 0)
            } else {
                derive_seed(ctx.root, "compare-reference", 0)
            };
            ComparisonReference::Truncated {
                depth: task.reference_n,
                seed,
            }
        }
        CompareReference::Mc => ComparisonReference::Mc {
            cfg: rollout_config(ctx, model.gain(), &x, task.horizon, m)?,
            seed: derive_seed(ctx.root, "compare-mc", 0),
        },
    };
    // the bound is reported when its hypotheses hold and left blank otherwise
    let bound = bound_inputs(ctx, &model, &x).map_err(|e| e.to_string());
    Ok(ComparePlan {
        model,
        x,
        depths,
        m,
        reference,
        density,
        bound,
    })
}

fn exec_compare(ctx: &Context, plan: ComparePlan, out: &OutputDir) -> Result<Outcome, CliError> {
    let seed = derive_seed(ctx.root, "compare", 0);
    let reference = match &plan.reference {
        ComparisonReference::Truncated { depth, seed } => {
            build_empirical(&plan.model.with_depth(*depth), &plan.x, plan.m, *seed)?
        }
        ComparisonReference::Mc { cfg, seed } => {
            build_mc_distribution(&ctx.sys, plan.model.gain(), &ctx.noise, &plan.x, cfg, *seed)?
        }
    };
    let ks: Vec<f64> = plan
        .depths
        .par_iter()
        .map(|&n| build_empirical(&plan.model.with_depth(n), &plan.x, plan.m, seed).map(|d| ks_distance(&d, &reference)))
        .collect::<Result<_, _>>()?;

    let l0 = match plan.density {
        DensityChoice::None => None,
        DensityChoice::Given(v) => Some(v),
        DensityChoice::Estimate => Some(estimate_density_bound(&reference)?),
    };
    let bound = plan.bound.as_ref().ok().map(|b| match l0 {
        Some(v) => b.clone().with_density_bound(v),
        None => b.clone(),
    });

    let mut t = Table::new(["N", "ks_to_reference", "bound_over_l0", "bound_at_N"]);
    let mut o = Outcome::new();
    for (&n, &k) in plan.depths.iter().zip(&ks) {
        let (unnorm, norm) = match &bound {
            Some(b) if n > 0 => {
                let c = bound_constant(b)?;
                let scale = b.gamma.powi(n as i32);
                (Some(c.unnormalized * scale), c.normalized.map(|v| v * scale))
            }
            _ => (None, None),
        };
        let cell = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        t.push(vec![n.to_string(), fmt_f64(k), cell(unnorm), cell(norm)]);
        o.lines.push(format!(
            "N = {n}: KS {k:.5}{}",
            norm.map(|v| format!(", bound {v:.5}")).unwrap_or_default()
        ));
    }
    o.files.push(out.write_csv("ks_vs_N.csv", &t)?);

    o.meta.insert("seed".into(), json!(seed));
    o.meta.insert("M".into(), json!(plan.m));
    o.meta.insert("N".into(), json!(plan.depths));
    o.meta.insert("K".into(), gain_json(plan.model.gain().matrix()));
    o.meta.insert(
        "reference".into(),
        match &plan.reference {
            ComparisonReference::Truncated { depth, seed } => json!({"kind": "truncated", "N": depth, "seed": seed}),
            ComparisonReference::Mc { cfg, seed } => {
                json!({"kind": "mc", "horizon": cfg.horizon, "tail_bound": cfg.tail_bound, "seed": seed})
            }
        },
    );
    o.meta.insert("L0".into(), json!(l0));
    if let Err(reason) = &plan.bound {
        o.meta.insert("bound_unavailable".into(), json!(reason));
    }
    Ok(o)
}

// ---------------------------------------------------------------- bound

struct BoundPlan {
    inputs: BoundInputs,
    depths: Vec<usize>,
}

fn prepare_bound(ctx: &Context, task: &BoundTask) -> Result<BoundPlan, CliError> {
    let x = state(ctx, &task.x)?;
    let depths = depths(&task.n)?;
    if depths.contains(&0) {
        return Err(CliError::Config("the bound needs N ≥ 1".into()));
    }
    let model = sampling_model(ctx, &task.k)?;
    let mut inputs = bound_inputs(ctx, &model, &x)?;
    if let Some(l0) = task.l0 {
        inputs = inputs.with_density_bound(l0);
        bound_constant(&inputs).map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(BoundPlan { inputs, depths })
}

fn exec_bound(_ctx: &Context, plan: BoundPlan, out: &OutputDir) -> Result<Outcome, CliError> {
    let b = &plan.inputs;
    let c = bound_constant(b)?;
    let mut constant = Table::new(["quantity", "value"]);
    let mut push = |q: &str, v: f64| constant.push(vec![q.into(), fmt_f64(v)]);
    push("quadratic_term", c.quadratic_term);
    push("state_term", c.state_term);
    push("cross_term", c.cross_term);
    push("C_over_L0", c.unnormalized);
    if let (Some(l0), Some(cn)) = (b.density_bound, c.normalized) {
        push("L0", l0);
        push("C", cn);
    }
    push("rho", b.rho);
    push("gamma", b.gamma);
    push("sigma0_sq", b.sigma0_sq);
    push("mu0", b.mu0);

    let mut table = Table::new(["N", "bound_over_l0", "bound"]);
    let mut o = Outcome::new();
    for &n in &plan.depths {
        let scale = b.gamma.powi(n as i32);
        let normalized = bound_at(b, n)?;
        let cell = if normalized.unnormalized {
            String::new()
        } else {
            fmt_f64(normalized.value)
        };
        table.push(vec![n.to_string(), fmt_f64(c.unnormalized * scale), cell]);
    }
    o.files.push(out.write_csv("bound_constant.csv", &constant)?);
    o.files.push(out.write_csv("bound.csv", &table)?);
    o.lines.push(format!("C/L0 = {:.6}", c.unnormalized));
    if let Some(cn) = c.normalized {
        o.lines.push(format!("C = {cn:.6}"));
    }
    o.meta.insert("N".into(), json!(plan.depths));
    o.meta.insert("C_over_L0".into(), json!(c.unnormalized));
    Ok(o)
}

// ---------------------------------------------------------------- optimize

struct OptimizePlan {
    k0: FeedbackGain,
    x: DVector<f64>,
    base: PGConfig,
    seeds: Vec<u64>,
}

fn prepare_optimize(ctx: &Context, task: &OptimizeTask) -> Result<OptimizePlan, CliError> {
    let x = state(ctx, &task.x)?;
    positive("M", task.m)?;
    if task.seeds.is_empty() {
        return Err(CliError::Config("seeds list is empty".into()));
    }
    let mut sorted = task.seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != task.seeds.len() {
        return Err(CliError::Config("seeds list has duplicates".into()));
    }
    RiskSpec::new(task.alpha).map_err(|e| CliError::Config(e.to_string()))?;
    if !(task.eta >= 0.0 && task.eta.is_finite()) {
        return Err(CliError::Config(format!("eta must be ≥ 0, got {}", task.eta)));
    }
    if !(task.delta > 0.0 && task.delta.is_finite()) {
        return Err(CliError::Config(format!("delta must be > 0, got {}", task.delta)));
    }
    // the initial gain must be stabilizing; its certificate proves it
    let (k0, _) = resolve_gain(&ctx.sys, &task.k, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    Ok(OptimizePlan {
        k0,
        x,
        base: PGConfig {
            eta: task.eta,
            delta: task.delta,
            episodes: task.episodes,
            depth: task.n,
            samples: task.m,
            alpha: task.alpha,
            seed: 0,
            crn: task.crn,
        },
        seeds: task.seeds.clone(),
    })
}

fn trace_table(trace: &OptimizerTrace, rows: usize, cols: usize) -> Table {
    let mut header = vec!["t".to_string()];
    header.extend(gain_columns("K", rows, cols));
    header.extend(gain_columns("Khat", rows, cols));
    header.extend(["objective", "grad_norm", "stability_resamples", "step_halvings"].map(String::from));
    let mut t = Table::new(header);
    for r in &trace.records {
        let mut row = vec![r.t.to_string()];
        row.extend(row_major(&r.gain).into_iter().map(fmt_f64));
        row.extend(row_major(&r.perturbed).into_iter().map(fmt_f64));
        row.push(fmt_f64(r.objective));
        row.push(fmt_f64(r.gradient.norm()));
        row.push(r.stability_resamples.to_string());
        row.push(r.step_halvings.to_string());
        t.push(row);
    }
    t
}

fn exec_optimize(ctx: &Context, plan: OptimizePlan, out: &OutputDir) -> Result<Outcome, CliError> {
    let (rows, cols) = plan.k0.matrix().shape();
    let results: Vec<(u64, u64, Result<OptimizerTrace, CoreError>)> = plan
        .seeds
        .par_iter()
        .map(|&s| {
            let seed = derive_seed(ctx.root, "optimize", s);
            let cfg = PGConfig { seed, ..plan.base.clone() };
            (s, seed, optimizer::run(&ctx.sys, &ctx.noise, &plan.x, &plan.k0, &cfg))
        })
        .collect();

    let mut o = Outcome::new();
    let mut complete: Vec<(u64, OptimizerTrace)> = Vec::new();
    let mut seeds_meta = Map::new();
    for (s, seed, result) in results {
        seeds_meta.insert(s.to_string(), json!(seed));
        match result {
            Ok(trace) => {
                o.files.push(out.write_csv(&format!("trace_{s}.csv"), &trace_table(&trace, rows, cols))?);
                complete.push((s, trace));
            }
            Err(CoreError::StabilityBoundary { episode, attempts, trace }) => {
                o.files.push(out.write_csv(&format!("trace_{s}.csv"), &trace_table(&trace, rows, cols))?);
                o.lines.push(format!("seed {s}: stopped at episode {episode}, partial trace written"));
                if o.error.is_none() {
                    o.error = Some(CliError::Core(CoreError::StabilityBoundary {
                        episode,
                        attempts,
                        trace,
                    }));
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
    if o.error.is_some() {
        o.meta.insert("seeds".into(), Value::Object(seeds_meta));
        return Ok(o);
    }

    let mut header = vec!["t".to_string()];
    header.extend(gain_columns("K", rows, cols));
    header.push("objective".into());
    let mut summary = Table::new(header);
    let count = complete.len() as f64;
    for e in 0..plan.base.episodes {
        let mut k = DMatrix::zeros(rows, cols);
        let mut obj = 0.0;
        for (_, trace) in &complete {
            k += &trace.records[e].gain;
            obj += trace.records[e].objective;
        }
        let mut row = vec![(e + 1).to_string()];
        row.extend(row_major(&(k / count)).into_iter().map(fmt_f64));
        row.push(fmt_f64(obj / count));
        summary.push(row);
    }
    o.files.push(out.write_csv("summary.csv", &summary)?);

    let mut header = vec!["seed".to_string()];
    header.extend(gain_columns("K", rows, cols));
    header.push("objective".into());
    let mut finals = Table::new(header);
    let mut mean_final = DMatrix::zeros(rows, cols);
    for (s, trace) in &complete {
        let mut row = vec![s.to_string()];
        row.extend(row_major(&trace.final_gain).into_iter().map(fmt_f64));
        row.push(trace.final_objective().map(fmt_f64).unwrap_or_default());
        finals.push(row);
        mean_final += &trace.final_gain;
    }
    mean_final /= count;
    o.files.push(out.write_csv("final.csv", &finals)?);
    o.lines.push(format!("seed-averaged final gain {}", fmt_matrix(&mean_final)));

    o.meta.insert("seeds".into(), Value::Object(seeds_meta));
    o.meta.insert("episodes".into(), json!(plan.base.episodes));
    o.meta.insert("N".into(), json!(plan.base.depth));
    o.meta.insert("M".into(), json!(plan.base.samples));
    o.meta.insert("alpha".into(), json!(plan.base.alpha));
    o.meta.insert("crn".into(), json!(plan.base.crn));
    o.meta.insert("mean_final_K".into(), gain_json(&mean_final));
    Ok(o)
}
