//! Metrics and the Monte-Carlo benchmark over training-set sizes.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experts::CnnArchitecture;
use crate::grid::{FieldRaster, GridIndex, GridSpec, Position};
use crate::inference::{
    fit_posterior, marginal_theta, predict, select_lambda, FitConfig, LaplacePosterior,
    DEFAULT_LAMBDA_CANDIDATES,
};
use crate::model::ModelContext;
use crate::pooling::{PoolingConfig, PriorConfig};
use crate::scene::{Scene, SceneConfig};

/// Column names of the results table, in order.
pub const RUN_RESULT_COLUMNS: [&str; 8] = [
    "n_train",
    "seed",
    "loc_error_m",
    "posterior_std_m",
    "test_rmse_dbw",
    "test_rmpv_dbw",
    "lambda_selected",
    "wall_time_s",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub n_train: usize,
    pub seed: u64,
    pub loc_error_m: f64,
    /// `sqrt(trace(Σ_θ) / 2)` in meters.
    pub posterior_std_m: f64,
    pub test_rmse_dbw: f64,
    pub test_rmpv_dbw: f64,
    pub lambda_selected: f64,
    /// Zero unless timing was requested, which keeps tables reproducible.
    pub wall_time_s: f64,
}

/// Euclidean distance between two positions, in meters.
pub fn loc_error(theta_hat: Position, theta_true: Position, grid: &GridSpec) -> f64 {
    (theta_hat.row - theta_true.row).hypot(theta_hat.col - theta_true.col) * grid.cell_size()
}

fn check_points(raster: &FieldRaster, points: &[GridIndex]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::config("test_points", "must not be empty"));
    }
    for &p in points {
        raster.spec().check(p)?;
        if !raster.is_valid(p) {
            return Err(Error::MaskedCell(p));
        }
    }
    Ok(())
}

/// Root mean predictive variance over the test points.
pub fn rmpv(variance: &FieldRaster, test_points: &[GridIndex]) -> Result<f64> {
    check_points(variance, test_points)?;
    let spec = variance.spec();
    let total: f64 = test_points
        .iter()
        .map(|&p| variance.values()[spec.offset(p)])
        .sum();
    Ok((total / test_points.len() as f64).sqrt())
}

/// Root mean squared difference between two rasters over the test points.
pub fn rmse(
    prediction: &FieldRaster,
    truth: &FieldRaster,
    test_points: &[GridIndex],
) -> Result<f64> {
    check_points(prediction, test_points)?;
    check_points(truth, test_points)?;
    let spec = prediction.spec();
    let total: f64 = test_points
        .iter()
        .map(|&p| {
            let k = spec.offset(p);
            (prediction.values()[k] - truth.values()[k]).powi(2)
        })
        .sum();
    Ok((total / test_points.len() as f64).sqrt())
}

/// How λ is chosen in each run.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaMode {
    Select(Vec<f64>),
    Fixed(f64),
}

impl Default for LambdaMode {
    fn default() -> Self {
        Self::Select(DEFAULT_LAMBDA_CANDIDATES.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub train_sizes: Vec<usize>,
    pub n_runs: usize,
    pub master_seed: u64,
    pub arch: CnnArchitecture,
    /// Expert precisions; λ comes from `lambda`.
    pub pooling: PoolingConfig,
    pub lambda: LambdaMode,
    pub priors: PriorConfig,
    pub fit: FitConfig,
    pub record_timing: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            train_sizes: vec![20, 50, 100, 200],
            n_runs: 20,
            master_seed: 0,
            arch: CnnArchitecture::default(),
            pooling: PoolingConfig::default(),
            lambda: LambdaMode::default(),
            priors: PriorConfig::default(),
            fit: FitConfig::default(),
            record_timing: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_sizes.is_empty() || self.train_sizes.contains(&0) {
            return Err(Error::config(
                "train_sizes",
                "must be a non-empty list of positive sizes",
            ));
        }
        if self.n_runs == 0 {
            return Err(Error::config("n_runs", "must be positive"));
        }
        self.arch.validate()?;
        self.pooling.validate()?;
        self.priors.validate()?;
        self.fit.validate()?;
        match &self.lambda {
            LambdaMode::Select(c) if c.is_empty() => {
                Err(Error::config("lambda_candidates", "must not be empty"))
            }
            LambdaMode::Select(c) => c
                .iter()
                .try_for_each(|&l| self.pooling.with_lambda(l).map(drop)),
            LambdaMode::Fixed(l) => self.pooling.with_lambda(*l).map(drop),
        }
    }
}

/// Seed of run `run` at training size `n`.
pub fn run_seed(master: u64, n: usize, run: usize) -> u64 {
    let mut z = master
        .wrapping_add((n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((run as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fit (with or without λ selection) for the configured mode.
pub fn fit_for_mode(
    ds: &crate::grid::Dataset,
    ctx: &ModelContext,
    cfg: &McConfig,
    fit: &FitConfig,
) -> Result<(f64, LaplacePosterior)> {
    match &cfg.lambda {
        LambdaMode::Select(candidates) => {
            let sel = select_lambda(ds, ctx, cfg.pooling, &cfg.priors, fit, candidates)?;
            Ok((sel.lambda, sel.posterior))
        }
        LambdaMode::Fixed(l) => {
            let (_, post) = fit_posterior(ds, ctx, cfg.pooling.with_lambda(*l)?, &cfg.priors, fit)?;
            Ok((*l, post))
        }
    }
}

/// One full pipeline run: sample, fit, Laplace, predict on held-out cells.
pub fn run_once(
    scene: &Scene,
    ctx: &ModelContext,
    cfg: &McConfig,
    n: usize,
    seed: u64,
) -> Result<RunResult> {
    let start = Instant::now();
    let ds = scene.sample(n, seed)?;
    let fit = FitConfig {
        seed: seed ^ 0x5eed,
        ..cfg.fit.clone()
    };
    let (lambda, post) = fit_for_mode(&ds, ctx, cfg, &fit)?;

    let train: HashSet<GridIndex> = ds.positions().into_iter().collect();
    let test: Vec<GridIndex> = scene
        .true_field
        .outdoor_cells()
        .into_iter()
        .filter(|p| !train.contains(p))
        .collect();
    if test.iter().any(|p| train.contains(p)) {
        return Err(Error::config(
            "test_points",
            "overlap with training positions",
        ));
    }
    if test.is_empty() {
        return Err(Error::config("train_size", "leaves no held-out cells"));
    }

    let spec = *scene.true_field.spec();
    let mut sq_err = 0.0;
    let mut var_sum = 0.0;
    for &p in &test {
        let (mean, var) = predict(p, &post, ctx)?;
        sq_err += (mean - scene.true_field.values()[spec.offset(p)]).powi(2);
        var_sum += var;
    }
    let m = test.len() as f64;
    let sigma = marginal_theta(&post)?;
    let result = RunResult {
        n_train: n,
        seed,
        loc_error_m: loc_error(post.psi_map().theta(), scene.config.jammer_true, &spec),
        posterior_std_m: (0.5 * sigma.trace()).sqrt() * spec.cell_size(),
        test_rmse_dbw: (sq_err / m).sqrt(),
        test_rmpv_dbw: (var_sum / m).sqrt(),
        lambda_selected: lambda,
        wall_time_s: if cfg.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    };
    let metrics = [
        result.loc_error_m,
        result.posterior_std_m,
        result.test_rmse_dbw,
        result.test_rmpv_dbw,
    ];
    if metrics.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NonFinite {
            what: "run metric".into(),
        });
    }
    Ok(result)
}

/// A run that failed, kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub n_train: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McTable {
    /// Successful runs ordered by training size, then run index.
    pub rows: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

impl McTable {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.rows.iter().map(|r| r.n_train).collect();
        s.dedup();
        s
    }

    /// Median of a metric over the rows with `n_train == n`.
    pub fn median_at(&self, n: usize, metric: impl Fn(&RunResult) -> f64) -> Option<f64> {
        median(
            self.rows
                .iter()
                .filter(|r| r.n_train == n)
                .map(metric)
                .collect(),
        )
    }
}

pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[k]
    } else {
        0.5 * (values[k - 1] + values[k])
    })
}

/// Runs every `(size, run)` pair on one generated scene. Individual failures
/// are recorded; more than 10% failures is an error.
pub fn run_mc(scene_cfg: &SceneConfig, cfg: &McConfig) -> Result<McTable> {
    cfg.validate()?;
    let scene = Scene::generate(scene_cfg)?;
    let ctx = ModelContext::new(&scene.heights, cfg.arch.clone())?;
    let available = scene.true_field.outdoor_count();
    if let Some(&n) = cfg.train_sizes.iter().find(|&&n| n >= available) {
        return Err(Error::InsufficientCells {
            requested: n,
            available,
        });
    }
    let jobs: Vec<(usize, u64)> = cfg
        .train_sizes
        .iter()
        .flat_map(|&n| (0..cfg.n_runs).map(move |r| (n, run_seed(cfg.master_seed, n, r))))
        .collect();
    let outcomes: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(n, seed)| run_once(&scene, &ctx, cfg, n, seed))
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((n, seed), out) in jobs.iter().zip(outcomes) {
        match out {
            Ok(r) => rows.push(r),
            Err(e) => failures.push(RunFailure {
                n_train: *n,
                seed: *seed,
                message: e.to_string(),
            }),
        }
    }
    if failures.len() * 10 > jobs.len() {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: jobs.len(),
            first: failures[0].message.clone(),
        });
    }
    Ok(McTable { rows, failures })
}

/// CSV with one row per run and the [`RUN_RESULT_COLUMNS`] header.
pub fn results_to_csv(rows: &[RunResult]) -> String {
    let mut out = RUN_RESULT_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.n_train,
            r.seed,
            r.loc_error_m,
            r.posterior_std_m,
            r.test_rmse_dbw,
            r.test_rmpv_dbw,
            r.lambda_selected,
            r.wall_time_s
        );
    }
    out
}

/// Parses a table written by [`results_to_csv`].
pub fn parse_results(text: &str, path: &str) -> Result<Vec<RunResult>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RUN_RESULT_COLUMNS.join(",") => {}
        _ => return Err(parse_err(1, "missing or unexpected header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != RUN_RESULT_COLUMNS.len() {
            return Err(parse_err(
                i + 1,
                format!("expected 8 fields, got {}", fields.len()),
            ));
        }
        let real = |k: usize| {
            fields[k]
                .parse::<f64>()
                .map_err(|e| parse_err(i + 1, format!("{}: {e}", RUN_RESULT_COLUMNS[k])))
        };
        rows.push(RunResult {
            n_train: fields[0]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("n_train: {e}")))?,
            seed: fields[1]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("seed: {e}")))?,
            loc_error_m: real(2)?,
            posterior_std_m: real(3)?,
            test_rmse_dbw: real(4)?,
            test_rmpv_dbw: real(5)?,
            lambda_selected: real(6)?,
            wall_time_s: real(7)?,
        });
    }
    Ok(rows)
}
