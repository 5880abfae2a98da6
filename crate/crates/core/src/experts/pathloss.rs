use std::f64::consts::LN_10;

use crate::grid::{GridIndex, GridSpec, Position};

/// Singularity guard added to the distance, in meters.
pub const PATH_LOSS_EPSILON_M: f64 = 1.0;

/// Log-distance path-loss parameters. `theta` is in cells, `p0` in dBW.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossParams {
    pub theta: Position,
    pub p0: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl PathLossParams {
    pub fn new(theta: Position, p0: f64, gamma: f64) -> Self {
        Self {
            theta,
            p0,
            gamma,
            epsilon: PATH_LOSS_EPSILON_M,
        }
    }
}

/// `P0 - 10 γ log10(d + ε)` with `d` the distance in meters from `p` to `θ`.
pub fn pl_mean(p: GridIndex, params: &PathLossParams, grid: &GridSpec) -> f64 {
    let d = grid.distance_m(p, params.theta);
    params.p0 - 10.0 * params.gamma * (d + params.epsilon).log10()
}

/// Value and gradient with respect to `(θ_row, θ_col, P0, γ)`.
///
/// At `d = 0` the distance is not differentiable; the θ entries are 0 there.
pub fn pl_mean_grad(p: GridIndex, params: &PathLossParams, grid: &GridSpec) -> (f64, [f64; 4]) {
    let dr = params.theta.row - p.row as f64;
    let dc = params.theta.col - p.col as f64;
    let cells = dr.hypot(dc);
    let d = cells * grid.cell_size();
    let log_term = (d + params.epsilon).log10();
    let value = params.p0 - 10.0 * params.gamma * log_term;
    let (gr, gc) = if cells > 0.0 {
        // dμ/dd · dd/dθ, dd/dθ = cell_size · (θ - p) / |θ - p|
        let dmu_dd = -10.0 * params.gamma / (LN_10 * (d + params.epsilon));
        let s = dmu_dd * grid.cell_size() / cells;
        (s * dr, s * dc)
    } else {
        (0.0, 0.0)
    };
    (value, [gr, gc, 1.0, -10.0 * log_term])
}
