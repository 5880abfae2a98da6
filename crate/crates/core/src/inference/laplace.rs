//! Gauss–Newton Laplace posterior, the θ marginal and the linearized
//! predictive distribution.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};

use crate::error::{Error, Result};
use crate::gradient::Objective;
use crate::grid::{Dataset, FieldRaster, GridIndex};
use crate::model::{Linearization, ModelContext};
use crate::params::{ParamGroup, ParamVector};
use crate::pooling::{NegLogPosterior, PoolingConfig, Prior, PriorConfig};

/// Diagonal jitter tried in turn when a Cholesky factorization fails.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// How `H` is factored. Both routes are exact; the low-rank route applies the
/// Woodbury identity to `D + β JᵀJ` and wins when there are fewer data rows
/// than free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FactorRoute {
    #[default]
    Auto,
    Dense,
    LowRank,
}

/// `H = D + β JᵀJ` over the free coordinates, kept in factored form.
#[derive(Debug, Clone)]
pub struct GaussNewtonHessian {
    free: Vec<usize>,
    prior_precision: Vec<f64>,
    jacobian: DMatrix<f64>,
    beta: f64,
}

impl GaussNewtonHessian {
    /// Jacobian rows at `positions` from the linearization, restricted to `free`.
    pub fn assemble(
        ctx: &ModelContext,
        lin: &Linearization,
        positions: &[GridIndex],
        prior: &Prior,
        free: &[usize],
    ) -> Result<Self> {
        let prec = prior.precision_diag(lin.psi().layout());
        let mut jacobian = DMatrix::zeros(positions.len(), free.len());
        for (i, &p) in positions.iter().enumerate() {
            let (_, row) = lin.jacobian_row(ctx, p)?;
            for (c, &k) in free.iter().enumerate() {
                jacobian[(i, c)] = row[k];
            }
        }
        Ok(Self {
            free: free.to_vec(),
            prior_precision: free.iter().map(|&k| prec[k]).collect(),
            jacobian,
            beta: lin.pooling().precision(),
        })
    }

    /// Builds `diag(prior_precision) + β JᵀJ` from explicit parts; the free
    /// indices are `0..prior_precision.len()`.
    pub fn from_parts(
        prior_precision: Vec<f64>,
        jacobian: DMatrix<f64>,
        beta: f64,
    ) -> Result<Self> {
        if jacobian.ncols() != prior_precision.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} Jacobian columns", prior_precision.len()),
                actual: jacobian.ncols().to_string(),
            });
        }
        if prior_precision.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::config("prior_precision", "entries must be positive"));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config("beta", "must be positive"));
        }
        if jacobian.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "Jacobian entry".into(),
            });
        }
        Ok(Self {
            free: (0..prior_precision.len()).collect(),
            prior_precision,
            jacobian,
            beta,
        })
    }

    /// Flat indices (into ψ) of the rows and columns of `H`.
    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn dim(&self) -> usize {
        self.free.len()
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn prior_precision(&self) -> &[f64] {
        &self.prior_precision
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = self.jacobian.tr_mul(&self.jacobian) * self.beta;
        for (k, d) in self.prior_precision.iter().enumerate() {
            h[(k, k)] += d;
        }
        h
    }

    /// Keeps the listed columns (positions within `free`).
    fn restrict(&self, cols: &[usize]) -> Self {
        Self {
            free: cols.iter().map(|&c| self.free[c]).collect(),
            prior_precision: cols.iter().map(|&c| self.prior_precision[c]).collect(),
            jacobian: self.jacobian.select_columns(cols),
            beta: self.beta,
        }
    }

    pub fn factor(&self, route: FactorRoute) -> Result<HessianFactor> {
        let low_rank = match route {
            FactorRoute::Auto => self.jacobian.nrows() < self.dim(),
            FactorRoute::Dense => false,
            FactorRoute::LowRank => true,
        };
        if low_rank {
            self.factor_low_rank()
        } else {
            let (chol, jitter) = cholesky_with_jitter(&self.to_dense())?;
            Ok(HessianFactor {
                dim: self.dim(),
                jitter,
                kind: FactorKind::Dense(chol),
            })
        }
    }

    fn factor_low_rank(&self) -> Result<HessianFactor> {
        let mut last = None;
        for jitter in JITTER_LADDER {
            let scale = DVector::from_iterator(
                self.dim(),
                self.prior_precision.iter().map(|d| (d + jitter).powf(-0.5)),
            );
            // A = √β J D^{-1/2}
            let mut a = self.jacobian.clone() * self.beta.sqrt();
            for (c, s) in scale.iter().enumerate() {
                a.column_mut(c).scale_mut(*s);
            }
            let mut k = &a * a.transpose();
            for i in 0..k.nrows() {
                k[(i, i)] += 1.0;
            }
            match cholesky_with_jitter(&k) {
                Ok((k_chol, _)) => {
                    return Ok(HessianFactor {
                        dim: self.dim(),
                        jitter,
                        kind: FactorKind::LowRank {
                            scale,
                            a,
                            k: k_chol,
                        },
                    })
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::NotPositiveDefinite("empty jitter ladder".into())))
    }
}

fn cholesky_with_jitter(h: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "Hessian entry".into(),
        });
    }
    for jitter in JITTER_LADDER {
        let mut m = h.clone();
        for k in 0..m.nrows() {
            m[(k, k)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter));
        }
    }
    Err(Error::NotPositiveDefinite(format!(
        "{}x{} matrix, jitter up to {:e}",
        h.nrows(),
        h.ncols(),
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

#[derive(Debug, Clone)]
enum FactorKind {
    Dense(Cholesky<f64, Dyn>),
    /// `H = D^{1/2}(I + AᵀA)D^{1/2}` with `K = I + AAᵀ` factored.
    LowRank {
        scale: DVector<f64>,
        a: DMatrix<f64>,
        k: Cholesky<f64, Dyn>,
    },
}

/// A symmetric positive-definite factorization of `H`.
#[derive(Debug, Clone)]
pub struct HessianFactor {
    dim: usize,
    jitter: f64,
    kind: FactorKind,
}

impl HessianFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Diagonal jitter that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn route(&self) -> FactorRoute {
        match self.kind {
            FactorKind::Dense(_) => FactorRoute::Dense,
            FactorKind::LowRank { .. } => FactorRoute::LowRank,
        }
    }

    /// `H⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            FactorKind::Dense(chol) => chol.solve(b),
            FactorKind::LowRank { scale, a, k } => {
                let u = b.component_mul(scale);
                let w = &u - a.tr_mul(&k.solve(&(a * &u)));
                w.component_mul(scale)
            }
        }
    }

    /// `gᵀ H⁻¹ g`, clamped at 0.
    pub fn quad_form(&self, g: &DVector<f64>) -> f64 {
        let q = match &self.kind {
            FactorKind::Dense(chol) => lower_solve(chol, g).norm_squared(),
            FactorKind::LowRank { scale, a, k } => {
                let u = g.component_mul(scale);
                let z = lower_solve(k, &(a * &u));
                u.norm_squared() - z.norm_squared()
            }
        };
        q.max(0.0)
    }

    pub fn log_det(&self) -> f64 {
        match &self.kind {
            FactorKind::Dense(chol) => chol.ln_determinant(),
            FactorKind::LowRank { scale, k, .. } => {
                // det H = det D · det(I + AAᵀ), and scale = D^{-1/2}
                -2.0 * scale.iter().map(|s| s.ln()).sum::<f64>() + k.ln_determinant()
            }
        }
    }

    /// Dense `H⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        match &self.kind {
            FactorKind::Dense(chol) => chol.inverse(),
            FactorKind::LowRank { scale, a, k } => {
                let n = self.dim;
                let ka = k.solve(a);
                let mut inv = -a.tr_mul(&ka);
                for i in 0..n {
                    inv[(i, i)] += 1.0;
                }
                for i in 0..n {
                    for j in 0..n {
                        inv[(i, j)] *= scale[i] * scale[j];
                    }
                }
                inv
            }
        }
    }
}

/// `L⁻¹ b` for the Cholesky factor `L`.
fn lower_solve(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    // The factor's diagonal is strictly positive, so the solve cannot fail.
    chol.l_dirty().solve_lower_triangular_unchecked_mut(&mut x);
    x
}

/// Dense `β JᵀJ + prior precision` over every coordinate of ψ.
pub fn gauss_newton_hessian(
    psi: &ParamVector,
    ds: &Dataset,
    ctx: &ModelContext,
    pooling: PoolingConfig,
    priors: &PriorConfig,
) -> Result<DMatrix<f64>> {
    let lin = Linearization::new(ctx, psi, pooling)?;
    let prior = priors.for_data(ds.measurements());
    let free: Vec<usize> = (0..psi.len()).collect();
    Ok(GaussNewtonHessian::assemble(ctx, &lin, &ds.positions(), &prior, &free)?.to_dense())
}

/// Marginal covariance of the `keep` block of `H⁻¹` through the Schur
/// complement `(H_kk − H_kr H_rr⁻¹ H_rk)⁻¹`.
pub fn schur_marginal(h: &DMatrix<f64>, keep: &[usize]) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::ShapeMismatch {
            expected: "square matrix".into(),
            actual: format!("{}x{}", n, h.ncols()),
        });
    }
    if let Some(&k) = keep.iter().find(|&&k| k >= n) {
        return Err(Error::ShapeMismatch {
            expected: format!("indices below {n}"),
            actual: k.to_string(),
        });
    }
    let rest: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
    let h_kk = h.select_rows(keep).select_columns(keep);
    let schur = if rest.is_empty() {
        h_kk
    } else {
        let h_rr = h.select_rows(&rest).select_columns(&rest);
        let h_rk = h.select_rows(&rest).select_columns(keep);
        let (chol, _) = cholesky_with_jitter(&h_rr)?;
        h_kk - h_rk.tr_mul(&chol.solve(&h_rk))
    };
    let (chol, _) = cholesky_with_jitter(&schur)?;
    Ok(chol.inverse())
}

/// `Σ_θ` from the structured Hessian: `H_rr` is factored with θ's columns
/// removed, and the 2×2 Schur complement inverted.
fn theta_schur(
    hessian: &GaussNewtonHessian,
    theta: [usize; 2],
    route: FactorRoute,
) -> Result<Matrix2<f64>> {
    let rest: Vec<usize> = (0..hessian.dim()).filter(|c| !theta.contains(c)).collect();
    let j_t = hessian.jacobian.select_columns(&theta);
    let beta = hessian.beta;
    let mut h_tt = j_t.tr_mul(&j_t) * beta;
    h_tt[(0, 0)] += hessian.prior_precision[theta[0]];
    h_tt[(1, 1)] += hessian.prior_precision[theta[1]];
    let schur = if rest.is_empty() {
        h_tt
    } else {
        let sub = hessian.restrict(&rest);
        let factor = sub.factor(route)?;
        // H_rθ = β J_rᵀ J_θ; the prior block is diagonal so contributes nothing here.
        let h_rt = sub.jacobian.tr_mul(&j_t) * beta;
        let x0 = factor.solve(&h_rt.column(0).into_owned());
        let x1 = factor.solve(&h_rt.column(1).into_owned());
        let mut s = h_tt;
        for (i, x) in [x0, x1].iter().enumerate() {
            for j in 0..2 {
                s[(j, i)] -= h_rt.column(j).dot(x);
            }
        }
        s
    };
    let s = Matrix2::new(
        schur[(0, 0)],
        0.5 * (schur[(0, 1)] + schur[(1, 0)]),
        0.5 * (schur[(0, 1)] + schur[(1, 0)]),
        schur[(1, 1)],
    );
    let det = s.determinant();
    if !(s[(0, 0)] > 0.0 && det > 0.0 && det.is_finite()) {
        return Err(Error::NotPositiveDefinite("θ Schur complement".into()));
    }
    Ok(Matrix2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]) / det)
}

/// Gaussian approximation `N(ψ̂, H⁻¹)` over the free coordinates of ψ.
#[derive(Debug, Clone)]
pub struct LaplacePosterior {
    lin: Linearization,
    hessian: GaussNewtonHessian,
    factor: HessianFactor,
    sigma_theta: Option<Matrix2<f64>>,
    objective: f64,
    objective_trace: Vec<f64>,
    log_evidence: f64,
    prior: Prior,
}

impl LaplacePosterior {
    /// Linearizes at `psi_map`, factors `H` and computes `Σ_θ` and the
    /// Laplace evidence. Coordinates in `frozen` groups are treated as fixed.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        ctx: &ModelContext,
        ds: &Dataset,
        pooling: PoolingConfig,
        prior: Prior,
        psi_map: &ParamVector,
        frozen: &[ParamGroup],
        objective_trace: Vec<f64>,
        route: FactorRoute,
    ) -> Result<Self> {
        pooling.validate()?;
        let lin = Linearization::new(ctx, psi_map, pooling)?;
        let objective =
            NegLogPosterior::new(ctx, ds.measurements(), pooling, prior).value(psi_map)?;
        let layout = psi_map.layout();
        let free = layout.free_indices(frozen);
        let hessian = GaussNewtonHessian::assemble(ctx, &lin, &ds.positions(), &prior, &free)?;
        let factor = hessian.factor(route)?;

        let theta = layout.range(ParamGroup::Theta);
        let sigma_theta = match (
            free.iter().position(|&k| k == theta.start),
            free.iter().position(|&k| k == theta.start + 1),
        ) {
            (Some(a), Some(b)) => Some(theta_schur(&hessian, [a, b], route)?),
            _ => None,
        };

        // Frozen coordinates are constants, so their prior terms stay out of the evidence.
        let frozen_idx: Vec<usize> = (0..layout.total_dim())
            .filter(|k| !free.contains(k))
            .collect();
        let data_and_free_prior = objective - prior.penalty_over(psi_map, &frozen_idx);
        let n = ds.len() as f64;
        let f = free.len() as f64;
        let beta = pooling.precision();
        let log_evidence = -data_and_free_prior
            + 0.5 * n * (beta / (2.0 * PI)).ln()
            + prior.log_normalizer(layout, &free)
            + 0.5 * f * (2.0 * PI).ln()
            - 0.5 * factor.log_det();
        if !log_evidence.is_finite() {
            return Err(Error::NonFinite {
                what: "log evidence".into(),
            });
        }
        Ok(Self {
            lin,
            hessian,
            factor,
            sigma_theta,
            objective,
            objective_trace,
            log_evidence,
            prior,
        })
    }

    pub fn psi_map(&self) -> &ParamVector {
        self.lin.psi()
    }

    pub fn pooling(&self) -> &PoolingConfig {
        self.lin.pooling()
    }

    pub fn linearization(&self) -> &Linearization {
        &self.lin
    }

    pub fn hessian(&self) -> &GaussNewtonHessian {
        &self.hessian
    }

    pub fn factor(&self) -> &HessianFactor {
        &self.factor
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    /// Free coordinates of ψ, in the order of `H`'s rows.
    pub fn free_indices(&self) -> &[usize] {
        self.hessian.free()
    }

    /// Marginal covariance of θ in cells², or `None` when θ was frozen.
    pub fn sigma_theta(&self) -> Option<Matrix2<f64>> {
        self.sigma_theta
    }

    /// `J(ψ̂)` without dropout.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    /// Laplace approximation of `log p(D | λ)`.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    /// Posterior covariance `H⁻¹` over the free coordinates.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    fn free_part(&self, row: &[f64]) -> DVector<f64> {
        let free = self.hessian.free();
        DVector::from_iterator(free.len(), free.iter().map(|&k| row[k]))
    }
}

/// θ marginal of the posterior via the Schur complement of `H`.
pub fn marginal_theta(post: &LaplacePosterior) -> Result<Matrix2<f64>> {
    post.sigma_theta
        .ok_or_else(|| Error::config("frozen", "θ is frozen, so it has no posterior marginal"))
}

/// Predictive mean and variance `β⁻¹ + gᵀH⁻¹g` at an outdoor cell.
pub fn predict(p: GridIndex, post: &LaplacePosterior, ctx: &ModelContext) -> Result<(f64, f64)> {
    let (mean, row) = post.lin.jacobian_row(ctx, p)?;
    let g = post.free_part(&row);
    Ok((
        mean,
        1.0 / post.pooling().precision() + post.factor.quad_form(&g),
    ))
}

/// Predictive rasters over the grid, plus the two expert means at ψ̂.
#[derive(Debug, Clone)]
pub struct PredictedField {
    pub mean: FieldRaster,
    pub variance: FieldRaster,
    pub cnn_mean: FieldRaster,
    pub pl_mean: FieldRaster,
}

/// Applies [`predict`] to every outdoor cell. Building cells are NaN.
pub fn predict_field(post: &LaplacePosterior, ctx: &ModelContext) -> Result<PredictedField> {
    let spec = *ctx.spec();
    let mask = ctx.mask().to_vec();
    let mut mean = vec![f64::NAN; spec.len()];
    let mut var = vec![f64::NAN; spec.len()];
    let mut cnn = vec![f64::NAN; spec.len()];
    let mut pl = vec![f64::NAN; spec.len()];
    for (k, p) in spec.indices().enumerate() {
        if !mask[k] {
            continue;
        }
        let (m, v) = predict(p, post, ctx)?;
        let (c, l) = post.lin.expert_means(ctx, p);
        mean[k] = m;
        var[k] = v;
        cnn[k] = c;
        pl[k] = l;
    }
    Ok(PredictedField {
        mean: FieldRaster::new(spec, mean, mask.clone(), "dBW")?,
        variance: FieldRaster::new(spec, var, mask.clone(), "dBW^2")?,
        cnn_mean: FieldRaster::new(spec, cnn, mask.clone(), "dBW")?,
        pl_mean: FieldRaster::new(spec, pl, mask, "dBW")?,
    })
}
