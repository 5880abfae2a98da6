//! The two expert mean functions: log-distance path loss and the CNN.

pub mod cnn;
mod pathloss;

pub use cnn::{CnnArchitecture, CnnInput, CnnMode, DropoutMasks, NormStats};
pub use pathloss::{pl_mean, pl_mean_grad, PathLossParams, PATH_LOSS_EPSILON_M};
