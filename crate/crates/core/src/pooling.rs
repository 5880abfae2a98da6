//! Log-linear pooling of the two Gaussian experts, the parameter priors and
//! the negative log-posterior objective.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::experts::cnn::{self, Normalization, Window};
use crate::experts::{pl_mean_grad, DropoutMasks};
use crate::gradient::Objective;
use crate::grid::{Dataset, Measurement, Position};
use crate::model::ModelContext;
use crate::params::{ParamLayout, ParamVector};

/// Default expert noise standard deviation (dBW) behind `beta1`/`beta2`.
pub const DEFAULT_EXPERT_SIGMA_DBW: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingConfig {
    /// Weight of the CNN expert in [0, 1].
    pub lambda: f64,
    /// CNN expert precision (dBW⁻²).
    pub beta1: f64,
    /// Path-loss expert precision (dBW⁻²).
    pub beta2: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        let beta = DEFAULT_EXPERT_SIGMA_DBW.powi(-2);
        Self {
            lambda: 0.5,
            beta1: beta,
            beta2: beta,
        }
    }
}

impl PoolingConfig {
    pub fn new(lambda: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            beta1,
            beta2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(lambda, self.beta1, self.beta2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                "lambda",
                format!("must lie in [0, 1], got {}", self.lambda),
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1.is_finite()) {
            return Err(Error::config("beta1", "must be positive"));
        }
        if !(self.beta2 > 0.0 && self.beta2.is_finite()) {
            return Err(Error::config("beta2", "must be positive"));
        }
        Ok(())
    }

    /// Pooled precision `λ β1 + (1 − λ) β2`.
    pub fn precision(&self) -> f64 {
        self.lambda * self.beta1 + (1.0 - self.lambda) * self.beta2
    }

    /// Mixing weights `(λ β1 / β, (1 − λ) β2 / β)` of the CNN and path-loss means.
    pub fn weights(&self) -> (f64, f64) {
        let beta = self.precision();
        (
            self.lambda * self.beta1 / beta,
            (1.0 - self.lambda) * self.beta2 / beta,
        )
    }

    /// Pooled mean of two expert means.
    pub fn combine(&self, mu_cnn: f64, mu_pl: f64) -> f64 {
        let (wc, wp) = self.weights();
        wc * mu_cnn + wp * mu_pl
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub sigma_omega: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Standard deviation of the jammer-position prior, in cells.
    pub sigma_c: f64,
    /// Centroid temperature (dBW).
    pub tau: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma_omega: 1.0,
            p_min: 5.0,
            p_max: 20.0,
            gamma_min: 2.0,
            gamma_max: 10.0,
            sigma_c: 10.0,
            tau: 5.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_omega", self.sigma_omega),
            ("sigma_c", self.sigma_c),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.p_min < self.p_max) {
            return Err(Error::config(
                "p_min",
                format!(
                    "p_min ({}) must be below p_max ({})",
                    self.p_min, self.p_max
                ),
            ));
        }
        if !(self.gamma_min < self.gamma_max) {
            return Err(Error::config(
                "gamma_min",
                format!(
                    "gamma_min ({}) must be below gamma_max ({})",
                    self.gamma_min, self.gamma_max
                ),
            ));
        }
        Ok(())
    }

    /// Resolves the prior around a given θ center.
    pub fn resolve(&self, theta_mean: Position) -> Prior {
        Prior {
            sigma_omega: self.sigma_omega,
            p0_mean: 0.5 * (self.p_min + self.p_max),
            p0_std: 0.5 * (self.p_max - self.p_min),
            gamma_mean: 0.5 * (self.gamma_min + self.gamma_max),
            gamma_std: 0.5 * (self.gamma_max - self.gamma_min),
            theta_mean,
            sigma_c: self.sigma_c,
        }
    }

    /// Prior centered on the weighted centroid of the measurements.
    pub fn for_data(&self, measurements: &[Measurement]) -> Prior {
        self.resolve(weighted_centroid(measurements, self.tau))
    }
}

/// Temperature-weighted centroid `Σ exp(y_i/τ) p_i / Σ exp(y_i/τ)`, computed
/// with the maximum RSS subtracted before exponentiation.
pub fn weighted_centroid(measurements: &[Measurement], tau: f64) -> Position {
    let y_max = measurements
        .iter()
        .map(|m| m.rss)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut wr, mut wc, mut total) = (0.0, 0.0, 0.0);
    for m in measurements {
        let w = ((m.rss - y_max) / tau).exp();
        wr += w * m.position.row as f64;
        wc += w * m.position.col as f64;
        total += w;
    }
    Position::new(wr / total, wc / total)
}

pub fn dataset_centroid(ds: &Dataset, tau: f64) -> Position {
    weighted_centroid(ds.measurements(), tau)
}

/// Independent Gaussian priors over ψ with the θ center held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub sigma_omega: f64,
    pub p0_mean: f64,
    pub p0_std: f64,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    pub theta_mean: Position,
    pub sigma_c: f64,
}

impl Prior {
    /// Per-coordinate prior means.
    pub fn means(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut m = vec![0.0; layout.total_dim()];
        let n = layout.omega_len();
        m[n] = self.theta_mean.row;
        m[n + 1] = self.theta_mean.col;
        m[n + 2] = self.p0_mean;
        m[n + 3] = self.gamma_mean;
        m
    }

    /// Per-coordinate prior standard deviations.
    pub fn stds(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut s = vec![self.sigma_omega; layout.total_dim()];
        let n = layout.omega_len();
        s[n] = self.sigma_c;
        s[n + 1] = self.sigma_c;
        s[n + 2] = self.p0_std;
        s[n + 3] = self.gamma_std;
        s
    }

    /// Diagonal of the (constant) prior Hessian.
    pub fn precision_diag(&self, layout: &ParamLayout) -> Vec<f64> {
        self.stds(layout).into_iter().map(|s| s.powi(-2)).collect()
    }

    /// `R(ψ)`: sum of the quadratic prior penalties, constants dropped.
    pub fn penalty(&self, psi: &ParamVector) -> f64 {
        let layout = psi.layout();
        let n = layout.omega_len();
        let x = psi.as_slice();
        let omega: f64 = x[..n].iter().map(|w| w * w).sum::<f64>() / self.sigma_omega.powi(2);
        let theta = ((x[n] - self.theta_mean.row).powi(2)
            + (x[n + 1] - self.theta_mean.col).powi(2))
            / self.sigma_c.powi(2);
        let p0 = ((x[n + 2] - self.p0_mean) / self.p0_std).powi(2);
        let gamma = ((x[n + 3] - self.gamma_mean) / self.gamma_std).powi(2);
        0.5 * (omega + theta + p0 + gamma)
    }

    /// The part of [`Prior::penalty`] contributed by the given coordinates.
    pub fn penalty_over(&self, psi: &ParamVector, indices: &[usize]) -> f64 {
        let layout = psi.layout();
        let means = self.means(layout);
        let prec = self.precision_diag(layout);
        let x = psi.as_slice();
        0.5 * indices
            .iter()
            .map(|&k| prec[k] * (x[k] - means[k]).powi(2))
            .sum::<f64>()
    }

    pub fn add_gradient(&self, psi: &ParamVector, grad: &mut [f64]) {
        let layout = psi.layout();
        let means = self.means(layout);
        let prec = self.precision_diag(layout);
        for (k, g) in grad.iter_mut().enumerate() {
            *g += prec[k] * (psi.as_slice()[k] - means[k]);
        }
    }

    /// `Σ_k −½ log(2π σ_k²)` over the given coordinates.
    pub fn log_normalizer(&self, layout: &ParamLayout, indices: &[usize]) -> f64 {
        let stds = self.stds(layout);
        indices
            .iter()
            .map(|&k| -0.5 * (2.0 * PI * stds[k] * stds[k]).ln())
            .sum()
    }
}

/// `J(ψ) = β/2 Σ (y_i − μ(p_i; ψ))² + R(ψ)`.
///
/// The CNN is evaluated with batch statistics of the full grid; an optional
/// dropout mask makes the pass stochastic during optimization.
pub struct NegLogPosterior<'a> {
    pub ctx: &'a ModelContext,
    pub measurements: &'a [Measurement],
    pub pooling: PoolingConfig,
    pub prior: Prior,
}

impl<'a> NegLogPosterior<'a> {
    pub fn new(
        ctx: &'a ModelContext,
        measurements: &'a [Measurement],
        pooling: PoolingConfig,
        prior: Prior,
    ) -> Self {
        Self {
            ctx,
            measurements,
            pooling,
            prior,
        }
    }

    /// Sum of squared residuals `Σ (y_i − μ_i)²`.
    pub fn residual_sum_of_squares(&self, psi: &ParamVector) -> Result<f64> {
        let (w_cnn, w_pl) = self.pooling.weights();
        let cnn_out = if w_cnn > 0.0 {
            Some(self.ctx.cnn_train_output(psi.omega(), None)?.into_output())
        } else {
            None
        };
        let pl = psi.path_loss();
        let spec = self.ctx.spec();
        Ok(self
            .measurements
            .iter()
            .map(|m| {
                let mu_cnn = cnn_out.as_ref().map_or(0.0, |o| o[spec.offset(m.position)]);
                let mu = w_cnn * mu_cnn + w_pl * crate::experts::pl_mean(m.position, &pl, spec);
                (m.rss - mu).powi(2)
            })
            .sum())
    }

    /// Value and gradient, optionally under a dropout mask.
    pub fn value_grad_with(
        &self,
        psi: &ParamVector,
        dropout: Option<&DropoutMasks>,
    ) -> Result<(f64, Vec<f64>)> {
        psi.check_finite()?;
        let ctx = self.ctx;
        let spec = ctx.spec();
        let beta = self.pooling.precision();
        let (w_cnn, w_pl) = self.pooling.weights();
        let n_omega = psi.layout().omega_len();
        let pl = psi.path_loss();
        let mut grad = vec![0.0; psi.len()];

        let trace = if w_cnn > 0.0 {
            Some(cnn::forward(
                ctx.arch(),
                ctx.input(),
                psi.omega(),
                Window::full(spec),
                Normalization::Batch,
                dropout,
            )?)
        } else {
            None
        };
        let mut d_out = trace.as_ref().map(|_| vec![0.0; spec.len()]);
        let mut rss = 0.0;
        for m in self.measurements {
            let k = spec.offset(m.position);
            let mu_cnn = trace.as_ref().map_or(0.0, |t| t.output()[k]);
            let (mu_pl, g_pl) = pl_mean_grad(m.position, &pl, spec);
            let r = m.rss - (w_cnn * mu_cnn + w_pl * mu_pl);
            rss += r * r;
            // dJ/dμ = −β r
            let dmu = -beta * r;
            if let Some(d) = d_out.as_mut() {
                d[k] += dmu * w_cnn;
            }
            for (j, g) in g_pl.iter().enumerate() {
                grad[n_omega + j] += dmu * w_pl * g;
            }
        }
        if let (Some(t), Some(d)) = (trace.as_ref(), d_out.as_ref()) {
            let g_omega = cnn::backward(ctx.arch(), t, psi.omega(), d);
            grad[..n_omega].copy_from_slice(&g_omega);
        }
        self.prior.add_gradient(psi, &mut grad);
        let value = 0.5 * beta * rss + self.prior.penalty(psi);
        Ok((value, grad))
    }
}

impl Objective for NegLogPosterior<'_> {
    fn layout(&self) -> &ParamLayout {
        self.ctx.layout()
    }

    fn value(&self, psi: &ParamVector) -> Result<f64> {
        psi.check_finite()?;
        let v = 0.5 * self.pooling.precision() * self.residual_sum_of_squares(psi)?
            + self.prior.penalty(psi);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "negative log-posterior".into(),
            });
        }
        Ok(v)
    }

    fn value_grad(&self, psi: &ParamVector) -> Result<(f64, Vec<f64>)> {
        self.value_grad_with(psi, None)
    }
}

/// Convenience wrapper: objective value for a dataset.
pub fn neg_log_posterior(
    psi: &ParamVector,
    ds: &Dataset,
    ctx: &ModelContext,
    pooling: PoolingConfig,
    priors: &PriorConfig,
) -> Result<f64> {
    NegLogPosterior::new(
        ctx,
        ds.measurements(),
        pooling,
        priors.for_data(ds.measurements()),
    )
    .value(psi)
}
