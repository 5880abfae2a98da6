use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::adam::Adam;
use super::laplace::{FactorRoute, GaussNewtonHessian};
use crate::error::{Error, Result};
use crate::experts::DropoutMasks;
use crate::gradient::Objective;
use crate::grid::{Dataset, GridIndex, Position};
use crate::model::{Linearization, ModelContext};
use crate::params::{ParamGroup, ParamVector};
use crate::pooling::{NegLogPosterior, PoolingConfig, Prior, PriorConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Adam step size in units of each coordinate's prior standard deviation.
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    /// Relative objective change treated as "no progress".
    pub convergence_tol: f64,
    /// Consecutive no-progress iterations before stopping.
    pub patience: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Damped Gauss–Newton steps applied after Adam.
    pub polish_steps: usize,
    /// Parameter groups held at their initial values.
    pub frozen: Vec<ParamGroup>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            learning_rate: 0.01,
            adam_betas: (0.9, 0.999),
            convergence_tol: 1e-6,
            patience: 25,
            restarts: 0,
            seed: 0,
            polish_steps: 10,
            frozen: Vec::new(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("max_iters", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                "must be a nonnegative number",
            ));
        }
        let (b1, b2) = self.adam_betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::config(
                "adam_betas",
                "both must lie strictly between 0 and 1",
            ));
        }
        if !(self.convergence_tol > 0.0 && self.convergence_tol.is_finite()) {
            return Err(Error::config("convergence_tol", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub psi: ParamVector,
    /// `J(ψ̂)` evaluated without dropout.
    pub objective: f64,
    /// Objective per Adam iteration of the winning restart (with dropout, if any).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Index of the winning restart.
    pub restart: usize,
    /// Final objective of every restart; `None` for diverged ones.
    pub restart_objectives: Vec<Option<f64>>,
    pub prior: Prior,
}

/// Seed of restart `r` derived from the master seed.
fn restart_seed(seed: u64, r: usize) -> u64 {
    let mut z = seed
        ^ (r as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Initial point of restart `r`: ω from the network initializer, P0 and γ at
/// their prior means, θ at the prior center (perturbed by a prior draw for
/// `r > 0`).
fn initial_point(
    ctx: &ModelContext,
    prior: &Prior,
    r: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    let omega = ctx.init_omega(rng);
    let mut theta = prior.theta_mean;
    if r > 0 {
        let noise =
            Normal::new(0.0, prior.sigma_c).map_err(|e| Error::config("sigma_c", e.to_string()))?;
        let spec = ctx.spec();
        theta = Position::new(
            (theta.row + noise.sample(rng)).clamp(0.0, (spec.height() - 1) as f64),
            (theta.col + noise.sample(rng)).clamp(0.0, (spec.width() - 1) as f64),
        );
    }
    ParamVector::from_parts(
        ctx.layout().clone(),
        &omega,
        theta,
        prior.p0_mean,
        prior.gamma_mean,
    )
}

/// MAP estimate of ψ: the best of `1 + restarts` Adam runs by final objective.
pub fn fit_map(
    ds: &Dataset,
    ctx: &ModelContext,
    pooling: PoolingConfig,
    priors: &PriorConfig,
    fit: &FitConfig,
) -> Result<FitOutcome> {
    priors.validate()?;
    pooling.validate()?;
    fit.validate()?;
    let prior = priors.for_data(ds.measurements());
    let runs: Vec<Result<FitOutcome>> = (0..=fit.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(fit.seed, r));
            let init = initial_point(ctx, &prior, r, &mut rng)?;
            let mut out = run(ctx, ds, pooling, prior, init, fit, &mut rng)?;
            out.restart = r;
            Ok(out)
        })
        .collect();
    pick_best(runs)
}

/// A single optimization from a given starting point, seeded by `fit.seed`.
pub fn fit_map_from(
    ds: &Dataset,
    ctx: &ModelContext,
    pooling: PoolingConfig,
    prior: Prior,
    init: ParamVector,
    fit: &FitConfig,
) -> Result<FitOutcome> {
    pooling.validate()?;
    fit.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(fit.seed, 0));
    pick_best(vec![run(ctx, ds, pooling, prior, init, fit, &mut rng)])
}

fn pick_best(runs: Vec<Result<FitOutcome>>) -> Result<FitOutcome> {
    let attempts = runs.len();
    let mut objectives = Vec::with_capacity(attempts);
    let mut best: Option<FitOutcome> = None;
    for run in runs {
        match run {
            Ok(out) => {
                objectives.push(Some(out.objective));
                if best.as_ref().is_none_or(|b| out.objective < b.objective) {
                    best = Some(out);
                }
            }
            Err(
                Error::NonFinite { .. } | Error::NonFiniteParam { .. } | Error::Diverged { .. },
            ) => objectives.push(None),
            Err(e) => return Err(e),
        }
    }
    let mut best = best.ok_or(Error::Diverged { attempts })?;
    best.restart_objectives = objectives;
    Ok(best)
}

fn run(
    ctx: &ModelContext,
    ds: &Dataset,
    pooling: PoolingConfig,
    prior: Prior,
    init: ParamVector,
    fit: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FitOutcome> {
    let objective = NegLogPosterior::new(ctx, ds.measurements(), pooling, prior);
    let layout = init.layout().clone();
    let free = layout.free_indices(&fit.frozen);
    let stds = prior.stds(&layout);
    let mut rates = vec![0.0; layout.total_dim()];
    for &k in &free {
        rates[k] = fit.learning_rate * stds[k];
    }
    let use_dropout = pooling.weights().0 > 0.0
        && ctx.arch().dropout > 0.0
        && !fit.frozen.contains(&ParamGroup::Omega);

    let mut psi = init;
    let mut adam = Adam::new(rates, fit.adam_betas);
    let mut trace: Vec<f64> = Vec::new();
    let mut calm = 0;
    let mut converged = false;
    for _ in 0..fit.max_iters {
        let masks = use_dropout.then(|| DropoutMasks::sample(ctx.arch(), ctx.spec(), rng));
        let (value, grad) = objective.value_grad_with(&psi, masks.as_ref())?;
        if !value.is_finite() {
            return Err(Error::Diverged { attempts: 1 });
        }
        if let Some(&prev) = trace.last() {
            let change: f64 = (value - prev).abs() / f64::max(prev.abs(), f64::MIN_POSITIVE);
            calm = if change < fit.convergence_tol {
                calm + 1
            } else {
                0
            };
        }
        trace.push(value);
        if calm >= fit.patience {
            converged = true;
            break;
        }
        adam.step(psi.as_mut_slice(), &grad);
    }
    if fit.polish_steps > 0 && !free.is_empty() {
        polish(
            ctx,
            &objective,
            &mut psi,
            &free,
            &ds.positions(),
            fit.polish_steps,
        )?;
    }
    let value = objective.value(&psi)?;
    Ok(FitOutcome {
        iterations: trace.len(),
        psi,
        objective: value,
        trace,
        converged,
        restart: 0,
        restart_objectives: Vec::new(),
        prior,
    })
}

/// Gauss–Newton steps `δ = −H⁻¹∇J` with backtracking on the exact objective.
fn polish(
    ctx: &ModelContext,
    objective: &NegLogPosterior<'_>,
    psi: &mut ParamVector,
    free: &[usize],
    positions: &[GridIndex],
    steps: usize,
) -> Result<()> {
    for _ in 0..steps {
        let (value, grad) = objective.value_grad(psi)?;
        let lin = Linearization::new(ctx, psi, objective.pooling)?;
        let factor = GaussNewtonHessian::assemble(ctx, &lin, positions, &objective.prior, free)?
            .factor(FactorRoute::Auto)?;
        let g = DVector::from_iterator(free.len(), free.iter().map(|&k| grad[k]));
        let delta = factor.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = psi.clone();
            for (c, &k) in free.iter().enumerate() {
                trial.as_mut_slice()[k] -= t * delta[c];
            }
            if let Ok(v) = objective.value(&trial) {
                if v < value {
                    *psi = trial;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(())
}
