//! Flat `key = value` configuration with defaults for every field.

use std::fmt::Write as _;
use std::path::Path;

use jamfield::evaluation::{LambdaMode, McConfig};
use jamfield::experts::CnnArchitecture;
use jamfield::grid::{make_grid, Position};
use jamfield::inference::{FitConfig, DEFAULT_LAMBDA_CANDIDATES};
use jamfield::pooling::{PoolingConfig, PriorConfig};
use jamfield::scene::SceneConfig;

use crate::CliError;

/// Every setting the commands use, merged from defaults, a config file and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    /// Master seed: scene layout, dataset sampling, optimizer and sweep seeds derive from it.
    pub seed: u64,
    pub scene: SceneConfig,
    pub train_size: usize,
    pub arch: CnnArchitecture,
    pub pooling: PoolingConfig,
    /// `None` selects λ from `lambda_candidates` by evidence.
    pub lambda: Option<f64>,
    pub lambda_candidates: Vec<f64>,
    pub priors: PriorConfig,
    pub fit: FitConfig,
    pub sweep_sizes: Vec<usize>,
    pub sweep_runs: usize,
    pub record_timing: bool,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scene: SceneConfig::default(),
            train_size: 200,
            arch: CnnArchitecture::default(),
            pooling: PoolingConfig::default(),
            lambda: None,
            lambda_candidates: DEFAULT_LAMBDA_CANDIDATES.to_vec(),
            priors: PriorConfig::default(),
            fit: FitConfig {
                max_iters: 500,
                ..FitConfig::default()
            },
            sweep_sizes: vec![20, 50, 100, 200],
            sweep_runs: 20,
            record_timing: false,
        }
    }
}

fn bad(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {reason}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| bad(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got `{value}`"))),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl CliConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let s = &mut self.scene;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "grid_height" | "grid_width" | "cell_size" => {
                let (mut h, mut w, mut c) = (s.grid.height(), s.grid.width(), s.grid.cell_size());
                match key {
                    "grid_height" => h = parse_num(key, v)?,
                    "grid_width" => w = parse_num(key, v)?,
                    _ => c = parse_num(key, v)?,
                }
                s.grid = make_grid(h, w, c).map_err(|e| bad(key, e))?;
            }
            "n_blocks_x" => s.n_blocks_x = parse_num(key, v)?,
            "n_blocks_y" => s.n_blocks_y = parse_num(key, v)?,
            "street_width" => s.street_width = parse_num(key, v)?,
            "height_min" => s.height_range.0 = parse_num(key, v)?,
            "height_max" => s.height_range.1 = parse_num(key, v)?,
            "jammer_row" => s.jammer_true = Position::new(parse_num(key, v)?, s.jammer_true.col),
            "jammer_col" => s.jammer_true = Position::new(s.jammer_true.row, parse_num(key, v)?),
            "p0_true" => s.p0_true = parse_num(key, v)?,
            "gamma_true" => s.gamma_true = parse_num(key, v)?,
            "shadow_db_per_building" => s.shadow_db_per_building = parse_num(key, v)?,
            "canyon_gain_db" => s.canyon_gain_db = parse_num(key, v)?,
            "noise_precision" => s.noise_precision = parse_num(key, v)?,
            "train_size" => self.train_size = parse_num(key, v)?,
            "cnn_channels" => self.arch.hidden_channels = parse_list(key, v)?,
            "cnn_head_channels" => self.arch.head_channels = parse_num(key, v)?,
            "dropout" => self.arch.dropout = parse_num(key, v)?,
            "lambda" => {
                self.lambda = match v {
                    "select" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "lambda_candidates" => self.lambda_candidates = parse_list(key, v)?,
            "beta1" => self.pooling.beta1 = parse_num(key, v)?,
            "beta2" => self.pooling.beta2 = parse_num(key, v)?,
            "sigma_omega" => self.priors.sigma_omega = parse_num(key, v)?,
            "p_min" => self.priors.p_min = parse_num(key, v)?,
            "p_max" => self.priors.p_max = parse_num(key, v)?,
            "gamma_min" => self.priors.gamma_min = parse_num(key, v)?,
            "gamma_max" => self.priors.gamma_max = parse_num(key, v)?,
            "sigma_c" => self.priors.sigma_c = parse_num(key, v)?,
            "tau" => self.priors.tau = parse_num(key, v)?,
            "max_iters" => self.fit.max_iters = parse_num(key, v)?,
            "learning_rate" => self.fit.learning_rate = parse_num(key, v)?,
            "adam_beta1" => self.fit.adam_betas.0 = parse_num(key, v)?,
            "adam_beta2" => self.fit.adam_betas.1 = parse_num(key, v)?,
            "convergence_tol" => self.fit.convergence_tol = parse_num(key, v)?,
            "patience" => self.fit.patience = parse_num(key, v)?,
            "restarts" => self.fit.restarts = parse_num(key, v)?,
            "polish_steps" => self.fit.polish_steps = parse_num(key, v)?,
            "sweep_sizes" => self.sweep_sizes = parse_list(key, v)?,
            "sweep_runs" => self.sweep_runs = parse_num(key, v)?,
            "record_timing" => self.record_timing = parse_bool(key, v)?,
            _ => return Err(bad(key, "unknown setting")),
        }
        Ok(())
    }

    /// Applies a config file on top of the current values. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{path}:{}: expected `key = value`", i + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("{path}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Scene used by the commands; its layout seed is the master seed.
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    /// Seed for sampling the `gen` dataset.
    pub fn data_seed(&self) -> u64 {
        self.seed
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(1)
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            seed: self.seed,
            ..self.fit.clone()
        }
    }

    pub fn lambda_mode(&self) -> LambdaMode {
        match self.lambda {
            Some(l) => LambdaMode::Fixed(l),
            None => LambdaMode::Select(self.lambda_candidates.clone()),
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            train_sizes: self.sweep_sizes.clone(),
            n_runs: self.sweep_runs,
            master_seed: self.seed,
            arch: self.arch.clone(),
            pooling: self.pooling,
            lambda: self.lambda_mode(),
            priors: self.priors,
            fit: self.fit.clone(),
            record_timing: self.record_timing,
        }
    }

    /// Checks every component, naming the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: jamfield::Error| CliError::Config(e.to_string());
        self.scene_config().validate().map_err(cfg)?;
        if self.train_size == 0 {
            return Err(bad("train_size", "must be positive"));
        }
        self.mc_config().validate().map_err(cfg)?;
        Ok(())
    }

    /// The effective configuration as `key = value` lines, readable by [`CliConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("grid_height", s.grid.height().to_string());
        put("grid_width", s.grid.width().to_string());
        put("cell_size", s.grid.cell_size().to_string());
        put("n_blocks_x", s.n_blocks_x.to_string());
        put("n_blocks_y", s.n_blocks_y.to_string());
        put("street_width", s.street_width.to_string());
        put("height_min", s.height_range.0.to_string());
        put("height_max", s.height_range.1.to_string());
        put("jammer_row", s.jammer_true.row.to_string());
        put("jammer_col", s.jammer_true.col.to_string());
        put("p0_true", s.p0_true.to_string());
        put("gamma_true", s.gamma_true.to_string());
        put(
            "shadow_db_per_building",
            s.shadow_db_per_building.to_string(),
        );
        put("canyon_gain_db", s.canyon_gain_db.to_string());
        put("noise_precision", s.noise_precision.to_string());
        put("train_size", self.train_size.to_string());
        put("cnn_channels", join(&self.arch.hidden_channels));
        put("cnn_head_channels", self.arch.head_channels.to_string());
        put("dropout", self.arch.dropout.to_string());
        put(
            "lambda",
            self.lambda.map_or("select".into(), |l| l.to_string()),
        );
        put("lambda_candidates", join(&self.lambda_candidates));
        put("beta1", self.pooling.beta1.to_string());
        put("beta2", self.pooling.beta2.to_string());
        put("sigma_omega", self.priors.sigma_omega.to_string());
        put("p_min", self.priors.p_min.to_string());
        put("p_max", self.priors.p_max.to_string());
        put("gamma_min", self.priors.gamma_min.to_string());
        put("gamma_max", self.priors.gamma_max.to_string());
        put("sigma_c", self.priors.sigma_c.to_string());
        put("tau", self.priors.tau.to_string());
        put("max_iters", self.fit.max_iters.to_string());
        put("learning_rate", self.fit.learning_rate.to_string());
        put("adam_beta1", self.fit.adam_betas.0.to_string());
        put("adam_beta2", self.fit.adam_betas.1.to_string());
        put("convergence_tol", self.fit.convergence_tol.to_string());
        put("patience", self.fit.patience.to_string());
        put("restarts", self.fit.restarts.to_string());
        put("polish_steps", self.fit.polish_steps.to_string());
        put("sweep_sizes", join(&self.sweep_sizes));
        put("sweep_runs", self.sweep_runs.to_string());
        put("record_timing", self.record_timing.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = CliConfig::default();
        cfg.apply_text(
            "seed = 3\nlambda = 0.25\ncnn_channels = 2, 5\n# note\n\nsweep_sizes=20,40",
            "t",
        )
        .unwrap();
        assert_eq!(cfg.lambda, Some(0.25));
        assert_eq!(cfg.arch.hidden_channels, vec![2, 5]);
        let mut back = CliConfig::default();
        back.apply_text(&cfg.to_text(), "echo").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn errors_name_the_line_and_key() {
        let mut cfg = CliConfig::default();
        let err = cfg
            .apply_text("seed = 1\nbogus = 2\n", "c.txt")
            .unwrap_err()
            .to_string();
        assert!(err.contains("c.txt:2") && err.contains("bogus"), "{err}");
        let err = cfg
            .apply_text("p_min = x\n", "c.txt")
            .unwrap_err()
            .to_string();
        assert!(err.contains("p_min"), "{err}");
        cfg.apply_text("p_min = 30", "c.txt").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("p_min"));
    }

    #[test]
    fn defaults_are_valid() {
        CliConfig::default().validate().unwrap();
    }
}
