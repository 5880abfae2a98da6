use rayon::prelude::*;

use super::fit::{fit_map, FitConfig, FitOutcome};
use super::laplace::{FactorRoute, LaplacePosterior};
use crate::error::{Error, Result};
use crate::grid::Dataset;
use crate::model::ModelContext;
use crate::pooling::{PoolingConfig, PriorConfig};

pub const DEFAULT_LAMBDA_CANDIDATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// MAP fit followed by the Laplace posterior at a fixed λ.
pub fn fit_posterior(
    ds: &Dataset,
    ctx: &ModelContext,
    pooling: PoolingConfig,
    priors: &PriorConfig,
    fit: &FitConfig,
) -> Result<(FitOutcome, LaplacePosterior)> {
    let out = fit_map(ds, ctx, pooling, priors, fit)?;
    let post = LaplacePosterior::build(
        ctx,
        ds,
        pooling,
        out.prior,
        &out.psi,
        &fit.frozen,
        out.trace.clone(),
        FactorRoute::Auto,
    )?;
    Ok((out, post))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaScore {
    pub lambda: f64,
    /// Laplace log evidence; `None` when the fit failed.
    pub log_evidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub scores: Vec<LambdaScore>,
    pub fit: FitOutcome,
    pub posterior: LaplacePosterior,
}

/// Type-II maximum likelihood over a grid of λ values: each candidate is
/// fitted and scored by its Laplace evidence; ties go to the smaller λ.
pub fn select_lambda(
    ds: &Dataset,
    ctx: &ModelContext,
    pooling: PoolingConfig,
    priors: &PriorConfig,
    fit: &FitConfig,
    candidates: &[f64],
) -> Result<LambdaSelection> {
    if candidates.is_empty() {
        return Err(Error::config("lambda_candidates", "must not be empty"));
    }
    let configs = candidates
        .iter()
        .map(|&l| pooling.with_lambda(l))
        .collect::<Result<Vec<_>>>()?;
    let fits: Vec<Result<(FitOutcome, LaplacePosterior)>> = configs
        .par_iter()
        .map(|&cfg| fit_posterior(ds, ctx, cfg, priors, fit))
        .collect();

    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, f64, FitOutcome, LaplacePosterior)> = None;
    let mut first_error = None;
    for (&lambda, result) in candidates.iter().zip(fits) {
        match result {
            Ok((out, post)) => {
                let score = post.log_evidence();
                scores.push(LambdaScore {
                    lambda,
                    log_evidence: Some(score),
                });
                let better = best
                    .as_ref()
                    .is_none_or(|(bl, bs, ..)| score > *bs || (score == *bs && lambda < *bl));
                if better {
                    best = Some((lambda, score, out, post));
                }
            }
            Err(e) => {
                scores.push(LambdaScore {
                    lambda,
                    log_evidence: None,
                });
                first_error.get_or_insert(e);
            }
        }
    }
    match best {
        Some((lambda, _, fit, posterior)) => Ok(LambdaSelection {
            lambda,
            scores,
            fit,
            posterior,
        }),
        None => Err(first_error.unwrap_or(Error::Diverged {
            attempts: candidates.len(),
        })),
    }
}
