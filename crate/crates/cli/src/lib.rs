//! Command implementations behind the `jamfield` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jamfield::evaluation::{fit_for_mode, results_to_csv, run_mc, McTable};
use jamfield::grid::Position;
use jamfield::inference::{marginal_theta, predict_field};
use jamfield::io::{
    dataset_to_csv, mask_to_csv, raster_to_csv, raster_values_to_csv, read_dataset, read_heights,
    write_atomic,
};
use jamfield::model::ModelContext;
use jamfield::scene::Scene;

pub use config::CliConfig;

pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("trend check failed: {0}")]
    Trend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Trend(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Inference(_) => 4,
        }
    }

    /// Library errors raised while computing: bad settings stay config errors.
    fn compute(e: jamfield::Error) -> Self {
        match e {
            jamfield::Error::InvalidConfig { .. } => CliError::Config(e.to_string()),
            jamfield::Error::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Inference(e.to_string()),
        }
    }

    /// Library errors raised while reading or writing files.
    fn io(e: jamfield::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn prepare_out(out: &Path, cfg: &CliConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    write(out, EFFECTIVE_CONFIG, &cfg.to_text())
}

fn write(out: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    write_atomic(&out.join(name), contents).map_err(|e| CliError::Io(format!("{name}: {e}")))
}

/// Writes the scene rasters and a sampled training set; returns the written paths.
pub fn cmd_gen(cfg: &CliConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let scene = Scene::generate(&cfg.scene_config()).map_err(CliError::compute)?;
    let ds = scene
        .sample(cfg.train_size, cfg.data_seed())
        .map_err(CliError::compute)?;
    prepare_out(out, cfg)?;
    let files = [
        ("heights.csv", raster_values_to_csv(&scene.heights)),
        ("mask.csv", mask_to_csv(&scene.heights)),
        ("true_field.csv", raster_to_csv(&scene.true_field)),
        ("dataset.csv", dataset_to_csv(&ds)),
    ];
    let mut paths = Vec::new();
    for (name, text) in files {
        write(out, name, &text)?;
        paths.push(out.join(name));
    }
    Ok(paths)
}

/// Result of `fit`, as written to `estimate.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub theta: Position,
    pub cell_size: f64,
    pub p0: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Row-major entries of Σ_θ in cells².
    pub sigma_theta: [f64; 4],
    pub log_evidence: f64,
    pub objective: f64,
}

impl Estimate {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let s = self.sigma_theta;
        vec![
            ("theta_row_cells", self.theta.row),
            ("theta_col_cells", self.theta.col),
            ("theta_row_m", self.theta.row * self.cell_size),
            ("theta_col_m", self.theta.col * self.cell_size),
            ("p0_dbw", self.p0),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("sigma_theta_rr", s[0]),
            ("sigma_theta_rc", s[1]),
            ("sigma_theta_cr", s[2]),
            ("sigma_theta_cc", s[3]),
            ("log_evidence", self.log_evidence),
            ("objective", self.objective),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,value\n");
        for (k, v) in self.rows() {
            writeln!(out, "{k},{v}").unwrap();
        }
        out
    }

    /// One-line summary; θ̂ uses the same number formatting as the CSV.
    pub fn summary(&self) -> String {
        format!(
            "theta_hat = ({}, {}) cells, P0 = {:.3} dBW, gamma = {:.3}, lambda = {}, std = {:.2} m",
            self.theta.row,
            self.theta.col,
            self.p0,
            self.gamma,
            self.lambda,
            (0.5 * (self.sigma_theta[0] + self.sigma_theta[3])).sqrt() * self.cell_size
        )
    }
}

/// Parses `estimate.csv` back into `(quantity, value)` pairs.
pub fn parse_estimate(text: &str) -> Result<Vec<(String, f64)>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some("quantity,value") {
        return Err(CliError::Io("estimate: bad header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let (k, v) = line
                .split_once(',')
                .ok_or_else(|| CliError::Io(format!("estimate:{}: expected two fields", i + 2)))?;
            let v = v
                .parse()
                .map_err(|e| CliError::Io(format!("estimate:{}: {e}", i + 2)))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

/// Fits a dataset against a heights raster and writes the estimate and predictive rasters.
pub fn cmd_fit(
    cfg: &CliConfig,
    dataset: &Path,
    heights: &Path,
    out: &Path,
) -> Result<Estimate, CliError> {
    cfg.validate()?;
    let heights = read_heights(heights).map_err(CliError::io)?;
    let ds = read_dataset(dataset, heights).map_err(CliError::io)?;
    let ctx = ModelContext::new(ds.heights(), cfg.arch.clone()).map_err(CliError::compute)?;
    let (lambda, post) =
        fit_for_mode(&ds, &ctx, &cfg.mc_config(), &cfg.fit_config()).map_err(CliError::compute)?;
    let sigma = marginal_theta(&post).map_err(CliError::compute)?;
    let field = predict_field(&post, &ctx).map_err(CliError::compute)?;
    let psi = post.psi_map();
    let est = Estimate {
        theta: psi.theta(),
        cell_size: ds.spec().cell_size(),
        p0: psi.p0(),
        gamma: psi.gamma(),
        lambda,
        sigma_theta: [sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 0)], sigma[(1, 1)]],
        log_evidence: post.log_evidence(),
        objective: post.objective(),
    };
    prepare_out(out, cfg)?;
    write(out, "estimate.csv", &est.to_csv())?;
    write(out, "field_mean.csv", &raster_to_csv(&field.mean))?;
    write(out, "field_var.csv", &raster_to_csv(&field.variance))?;
    Ok(est)
}

/// Runs the Monte-Carlo sweep and writes `sweep.csv`.
pub fn cmd_sweep(cfg: &CliConfig, out: &Path) -> Result<McTable, CliError> {
    cfg.validate()?;
    let table = run_mc(&cfg.scene_config(), &cfg.mc_config()).map_err(CliError::compute)?;
    prepare_out(out, cfg)?;
    write(out, "sweep.csv", &results_to_csv(&table.rows))?;
    Ok(table)
}

/// Per-size medians of the sweep metrics, one line per size.
pub fn sweep_summary(table: &McTable) -> String {
    let mut out =
        String::from("n_train  runs  loc_error_m  posterior_std_m  rmse_dbw  rmpv_dbw  lambda\n");
    for n in table.sizes() {
        let med = |f: fn(&jamfield::evaluation::RunResult) -> f64| {
            table.median_at(n, f).unwrap_or(f64::NAN)
        };
        let runs = table.rows.iter().filter(|r| r.n_train == n).count();
        writeln!(
            out,
            "{n:>7}  {runs:>4}  {:>11.2}  {:>15.2}  {:>8.3}  {:>8.3}  {:>6.2}",
            med(|r| r.loc_error_m),
            med(|r| r.posterior_std_m),
            med(|r| r.test_rmse_dbw),
            med(|r| r.test_rmpv_dbw),
            med(|r| r.lambda_selected),
        )
        .unwrap();
    }
    if !table.failures.is_empty() {
        writeln!(out, "{} failed runs", table.failures.len()).unwrap();
    }
    out
}

/// Fails unless the median localization error at the largest size is below the one at the smallest.
pub fn check_trend(table: &McTable) -> Result<(), CliError> {
    let sizes = table.sizes();
    let (Some(&small), Some(&large)) = (sizes.first(), sizes.last()) else {
        return Err(CliError::Trend("empty results table".into()));
    };
    let err = |n| table.median_at(n, |r| r.loc_error_m).unwrap_or(f64::NAN);
    let (e_small, e_large) = (err(small), err(large));
    if small == large || e_large.partial_cmp(&e_small) != Some(std::cmp::Ordering::Less) {
        return Err(CliError::Trend(format!(
            "median localization error {e_large} m at n={large} is not below {e_small} m at n={small}"
        )));
    }
    Ok(())
}
