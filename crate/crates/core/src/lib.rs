//! Small-risk-aversion expansions of entropy-penalised control problems on
//! Wiener space, with the Monte Carlo, regression and oracle machinery needed
//! to evaluate and check them.

pub mod clark;
pub mod error;
pub mod expansion;
pub mod functionals;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod wiener;

pub use clark::{clark_integrand, kw_decompose, residual_variance, ClarkEstimate, ClarkOptions, ClarkRoute, KWDecomposition, RegressionBasis};
pub use error::{Error, Result};
pub use expansion::{
    control_value_expansion, first_order_control, indifference_price_expansion, mean_variance_form, memm_entropy_expansion,
    relative_entropy_mc, ExpansionOptions, ExpansionReport, FirstOrderControl, ZerothEstimator,
};
pub use functionals::{lookback_put_on_factor, mv_tradeoff_functional, vanilla_on_factor, ClaimFunctional, OptionKind};
pub use models::{basis_risk_2d, simulate_state, stochastic_vol_model, BasisRiskParams, ItoMarketModel, MeasureSpec, StateEnsemble};
pub use stats::{Estimate, Moments};
pub use wiener::{BrownianEnsemble, ControlProcess, Path, TimeGrid};
