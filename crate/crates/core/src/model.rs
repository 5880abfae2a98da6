//! The pooled mean model and its linearization around a parameter point.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::experts::cnn::{self, CnnTrace, Normalization, Window};
use crate::experts::{pl_mean, pl_mean_grad, CnnArchitecture, CnnInput, DropoutMasks, NormStats};
use crate::grid::{FieldRaster, GridIndex, GridSpec};
use crate::params::{check_finite, ParamLayout, ParamVector};
use crate::pooling::PoolingConfig;

/// Everything the mean function needs besides ψ: grid, network input and architecture.
#[derive(Debug, Clone)]
pub struct ModelContext {
    spec: GridSpec,
    arch: CnnArchitecture,
    input: CnnInput,
    layout: Arc<ParamLayout>,
}

impl ModelContext {
    pub fn new(heights: &FieldRaster, arch: CnnArchitecture) -> Result<Self> {
        arch.validate()?;
        let layout = Arc::new(ParamLayout::new(&arch.layout()));
        Ok(Self {
            spec: *heights.spec(),
            input: CnnInput::from_heights(heights),
            arch,
            layout,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn arch(&self) -> &CnnArchitecture {
        &self.arch
    }

    pub fn input(&self) -> &CnnInput {
        &self.input
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Outdoor-cell mask.
    pub fn mask(&self) -> &[bool] {
        self.input.mask()
    }

    pub fn check_outdoor(&self, p: GridIndex) -> Result<()> {
        self.spec.check(p)?;
        if !self.mask()[self.spec.offset(p)] {
            return Err(Error::MaskedCell(p));
        }
        Ok(())
    }

    pub fn init_omega<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.arch.init(rng)
    }

    /// Full-grid pass with batch statistics.
    pub fn cnn_train_output(
        &self,
        omega: &[f64],
        dropout: Option<&DropoutMasks>,
    ) -> Result<CnnTrace> {
        cnn::forward(
            &self.arch,
            &self.input,
            omega,
            Window::full(&self.spec),
            Normalization::Batch,
            dropout,
        )
    }
}

/// Pooled mean `β⁻¹(λβ1 μ_CNN(p) + (1 − λ)β2 μ_PL(p))` at an outdoor cell.
pub fn pooled_mean(
    p: GridIndex,
    psi: &ParamVector,
    pooling: &PoolingConfig,
    ctx: &ModelContext,
) -> Result<f64> {
    ctx.check_outdoor(p)?;
    let (w_cnn, w_pl) = pooling.weights();
    let mu_cnn = if w_cnn > 0.0 {
        ctx.cnn_train_output(psi.omega(), None)?.output()[ctx.spec.offset(p)]
    } else {
        0.0
    };
    Ok(w_cnn * mu_cnn + w_pl * pl_mean(p, &psi.path_loss(), &ctx.spec))
}

/// The model frozen at one parameter point: normalization statistics and the
/// CNN field are computed once, so means and Jacobian rows are cheap.
#[derive(Debug, Clone)]
pub struct Linearization {
    psi: ParamVector,
    pooling: PoolingConfig,
    stats: Option<NormStats>,
    cnn_field: Option<Vec<f64>>,
}

impl Linearization {
    /// When the CNN carries no weight (λ = 0) it is not evaluated at all.
    pub fn new(ctx: &ModelContext, psi: &ParamVector, pooling: PoolingConfig) -> Result<Self> {
        psi.check_finite()?;
        let (stats, cnn_field) = if pooling.weights().0 > 0.0 {
            let trace = ctx.cnn_train_output(psi.omega(), None)?;
            let stats = trace.stats().clone();
            (Some(stats), Some(trace.into_output()))
        } else {
            (None, None)
        };
        Ok(Self {
            psi: psi.clone(),
            pooling,
            stats,
            cnn_field,
        })
    }

    pub fn psi(&self) -> &ParamVector {
        &self.psi
    }

    pub fn pooling(&self) -> &PoolingConfig {
        &self.pooling
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    /// `(μ_CNN(p), μ_PL(p))`; the CNN mean is reported as 0 when it is not evaluated.
    pub fn expert_means(&self, ctx: &ModelContext, p: GridIndex) -> (f64, f64) {
        let spec = ctx.spec();
        let cnn = self.cnn_field.as_ref().map_or(0.0, |f| f[spec.offset(p)]);
        (cnn, pl_mean(p, &self.psi.path_loss(), spec))
    }

    pub fn mean(&self, ctx: &ModelContext, p: GridIndex) -> f64 {
        let (c, l) = self.expert_means(ctx, p);
        self.pooling.combine(c, l)
    }

    /// Pooled mean and its gradient `∇_ψ μ(p)` with normalization statistics held fixed.
    pub fn jacobian_row(&self, ctx: &ModelContext, p: GridIndex) -> Result<(f64, Vec<f64>)> {
        ctx.check_outdoor(p)?;
        let (w_cnn, w_pl) = self.pooling.weights();
        let layout = self.psi.layout();
        let n = layout.omega_len();
        let mut row = vec![0.0; layout.total_dim()];
        let mut mu_cnn = 0.0;
        if let Some(stats) = &self.stats {
            let (v, g) =
                cnn::local_output_grad(ctx.arch(), ctx.input(), self.psi.omega(), stats, p)?;
            mu_cnn = v;
            for (r, gv) in row[..n].iter_mut().zip(&g) {
                *r = w_cnn * gv;
            }
        }
        let (mu_pl, g_pl) = pl_mean_grad(p, &self.psi.path_loss(), ctx.spec());
        for (j, gv) in g_pl.iter().enumerate() {
            row[n + j] = w_pl * gv;
        }
        check_finite(layout, &row)?;
        Ok((w_cnn * mu_cnn + w_pl * mu_pl, row))
    }
}

/// `∇_ψ μ(p; ψ)` for the pooled mean, normalization statistics frozen at ψ.
pub fn mean_jacobian_row(
    p: GridIndex,
    psi: &ParamVector,
    pooling: &PoolingConfig,
    ctx: &ModelContext,
) -> Result<Vec<f64>> {
    Ok(Linearization::new(ctx, psi, *pooling)?
        .jacobian_row(ctx, p)?
        .1)
}
