//! MAP fitting, the Gauss–Newton Laplace posterior and λ selection.

mod adam;
mod fit;
mod lambda;
mod laplace;

pub use fit::{fit_map, fit_map_from, FitConfig, FitOutcome};
pub use lambda::{
    fit_posterior, select_lambda, LambdaScore, LambdaSelection, DEFAULT_LAMBDA_CANDIDATES,
};
pub use laplace::{
    gauss_newton_hessian, marginal_theta, predict, predict_field, schur_marginal, FactorRoute,
    GaussNewtonHessian, HessianFactor, LaplacePosterior, PredictedField,
};
