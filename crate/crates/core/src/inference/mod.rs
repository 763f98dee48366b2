//! Approximate Bayesian inference: nested Laplace approximations integrated
//! over a hyperparameter grid.

pub mod criteria;
pub mod fit;
pub mod laplace;

pub use criteria::{compute_dic, compute_waic, DevianceDiagnostics, Dic, Waic};
pub use fit::{fit_model, FitResult, GridConfig, GridPoint, HyperSummary, PosteriorDraws};
pub use laplace::{find_mode, gaussian_approx, log_marginal_hyper, GaussianApprox};
