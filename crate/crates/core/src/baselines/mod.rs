//! Comparison methods: regular-grid imputation (linear spline and RBF
//! kernel regression) and BFGS fits of the mechanistic models.

mod bfgs;
mod fit;
mod impute;

pub use bfgs::{bfgs_minimize, fd_gradient, BfgsOptions, BfgsResult};
pub use fit::{
    fit_forecast, fit_mechanistic_bfgs, mechanistic_nll, mechanistic_nll_checked, read_fit_csv, write_fit_csv,
    FitOptions, FitResult, FitRow,
};
pub use impute::{
    impute_linear, impute_rbf, interp_linear, make_regular_grid, median_gap_bandwidth, nadaraya_watson, Bandwidth,
    ImputeMethod, ImputedGrid,
};
