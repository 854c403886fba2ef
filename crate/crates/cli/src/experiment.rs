use std::sync::Arc;

use serde_json::{json, Value};

use dualexp::expansion::{control_value_from, indifference_analysis, memm_entropy_expansion_with};
use dualexp::models::Family;
use dualexp::oracle::{
    distortion_price_quadrature, dp_control_value, entropy_minimum_dp, exponential_formula_value, linear_control_value,
    quadratic_control_value, verify_directional_derivative, verify_l2_convergence, DpInstance,
};
use dualexp::{clark_integrand, BrownianEnsemble, ClaimFunctional, ClarkOptions, ControlProcess, ExpansionOptions, OptionKind, RegressionBasis, TimeGrid};

use crate::catalog::{self, Built};
use crate::config::{ExperimentConfig, Kind};
use crate::Issue;

/// Tabular result: a header and rows of optional numbers (empty cells for
/// values an experiment cannot provide).
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Option<f64>>>,
}

pub struct Outcome {
    pub table: Table,
    pub diagnostics: Value,
}

pub const PRICE_COLUMNS: [&str; 8] = ["alpha", "zeroth", "correction", "total", "oracle", "gap", "se_zeroth", "se_correction"];
pub const SCALING_COLUMNS: [&str; 9] = ["eps", "zeroth", "correction", "total", "oracle", "gap", "se_zeroth", "se_correction", "se_oracle"];
pub const ENTROPY_COLUMNS: [&str; 8] = ["one_minus_rho2", "zeroth", "correction", "total", "oracle", "gap", "se_zeroth", "se_correction"];
pub const LEMMA_COLUMNS: [&str; 15] = [
    "eps",
    "finite_difference",
    "se_finite_difference",
    "integration_by_parts",
    "se_integration_by_parts",
    "difference",
    "se_difference",
    "residual",
    "se_residual",
    "residual_pathwise",
    "se_residual_pathwise",
    "residual_ratio",
    "l2_distance",
    "se_l2_distance",
    "l2_ratio",
];
pub const COMPARE_COLUMNS: [&str; 8] = ["eps", "expansion", "se_expansion", "exponential_formula", "se_exponential_formula", "dp", "closed_form", "dp_gap"];

fn options(cfg: &ExperimentConfig) -> Result<ExpansionOptions, Issue> {
    let basis = RegressionBasis::new(cfg.settings.basis_degree).map_err(|e| Issue::from_core(&e))?;
    Ok(ExpansionOptions { clark: ClarkOptions { basis, ..Default::default() }, zeroth: cfg.settings.zeroth })
}

fn ensemble(cfg: &ExperimentConfig, dim: usize) -> Result<BrownianEnsemble, Issue> {
    let s = &cfg.settings;
    let grid = TimeGrid::new(s.horizon, s.n_steps).map_err(|e| Issue::from_core(&e))?;
    BrownianEnsemble::generate(dim, grid, s.n_paths, s.seed).map_err(|e| Issue::from_core(&e))
}

fn first<T>(r: Result<T, Vec<Issue>>) -> Result<T, Issue> {
    r.map_err(|mut v| v.remove(0))
}

fn core<T>(r: dualexp::Result<T>) -> Result<T, Issue> {
    r.map_err(|e| Issue::from_core(&e))
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome, Issue> {
    let model = first(catalog::build_model(&cfg.model))?;
    if let Some(issue) = catalog::kind_compatibility(cfg.kind, &model, cfg.claim.as_ref()).into_iter().next() {
        return Err(issue);
    }
    if cfg.kind == Kind::Entropy {
        return entropy(cfg, &model);
    }
    let section = cfg.claim.as_ref().ok_or_else(|| Issue::config("missing claim section"))?;
    let claim = first(catalog::build_claim(section, &model))?;
    match cfg.kind {
        Kind::Price => price(cfg, &model, claim.as_ref()),
        Kind::ExpansionScaling => scaling(cfg, &model, claim.as_ref()),
        Kind::VerifyLemma => lemma(cfg, &model, claim.as_ref()),
        Kind::OracleCompare => compare(cfg, &model, claim.as_ref()),
        Kind::Entropy => unreachable!(),
    }
}

/// Exact distortion price when the model and claim admit it.
fn distortion_oracle(cfg: &ExperimentConfig, model: &Built, alpha: f64) -> Result<Option<f64>, Issue> {
    let (Built::Market(m), Some(c)) = (model, &cfg.claim) else { return Ok(None) };
    let Family::BasisRisk2d(p) = &m.family else { return Ok(None) };
    let kind = match c.label.as_str() {
        "put" => OptionKind::Put,
        "call" => OptionKind::Call,
        _ => return Ok(None),
    };
    let strike = c.params.get("strike").and_then(Value::as_f64).unwrap_or(100.0);
    core(distortion_price_quadrature(p, strike, kind, alpha, cfg.settings.horizon)).map(Some)
}

fn price(cfg: &ExperimentConfig, model: &Built, claim: &dyn ClaimFunctional) -> Result<Outcome, Issue> {
    let ens = ensemble(cfg, model.dim())?;
    let a = core(indifference_analysis(claim, &ens, &options(cfg)?))?;
    let mut rows = Vec::new();
    let mut mean_variance = Vec::new();
    for &alpha in &cfg.settings.alpha {
        let r = a.expansion(alpha);
        let oracle = distortion_oracle(cfg, model, alpha)?;
        rows.push(vec![
            Some(alpha),
            Some(r.zeroth.value),
            Some(r.correction.value),
            Some(r.total),
            oracle,
            oracle.map(|o| r.total - o),
            Some(r.zeroth.se),
            Some(r.correction.se),
        ]);
        let mv = a.mean_variance(alpha);
        mean_variance.push(json!({ "alpha": alpha, "correction": mv.correction, "total": mv.total }));
    }
    Ok(Outcome {
        table: Table { columns: PRICE_COLUMNS.to_vec(), rows },
        diagnostics: json!({ "kw": a.kw, "mean_variance_form": mean_variance, "metadata": a.expansion(cfg.settings.alpha[0]).metadata }),
    })
}

/// Closed-form control value for the raw linear and quadratic claims.
fn closed_form(cfg: &ExperimentConfig, claim: &dyn ClaimFunctional, eps: f64) -> Option<f64> {
    let t = cfg.settings.horizon;
    match cfg.claim.as_ref()?.label.as_str() {
        "quadratic" => quadratic_control_value(eps, t).ok(),
        "linear" => {
            let c = match cfg.claim.as_ref()?.params.get("c") {
                Some(Value::Array(a)) => a.iter().filter_map(Value::as_f64).collect(),
                Some(v) => vec![v.as_f64()?; claim.brownian_dim()],
                None => vec![1.0; claim.brownian_dim()],
            };
            Some(linear_control_value(&c, eps, t))
        }
        "constant" => cfg.claim.as_ref()?.params.get("value").and_then(Value::as_f64).or(Some(1.0)),
        _ => None,
    }
}

fn scaling(cfg: &ExperimentConfig, model: &Built, claim: &dyn ClaimFunctional) -> Result<Outcome, Issue> {
    let ens = ensemble(cfg, model.dim())?;
    let opts = options(cfg)?;
    let est = core(clark_integrand(claim, &ens, &opts.clark))?;
    let reports = control_value_from(claim, &ens, &est, &cfg.settings.eps, &opts);
    let mut rows = Vec::new();
    for r in &reports {
        let eps = r.order_parameter;
        let (oracle, se) = match closed_form(cfg, claim, eps) {
            Some(v) => (v, 0.0),
            None => {
                let v = core(exponential_formula_value(claim, eps, &ens))?;
                (v.value, v.se)
            }
        };
        rows.push(vec![
            Some(eps),
            Some(r.zeroth.value),
            Some(r.correction.value),
            Some(r.total),
            Some(oracle),
            Some(r.total - oracle),
            Some(r.zeroth.se),
            Some(r.correction.se),
            Some(se),
        ]);
    }
    Ok(Outcome {
        table: Table { columns: SCALING_COLUMNS.to_vec(), rows },
        diagnostics: json!({ "energy": est.energy, "energy_regression": est.energy_regression, "orthogonality": est.orthogonality, "metadata": reports[0].metadata }),
    })
}

fn lemma(cfg: &ExperimentConfig, model: &Built, claim: &dyn ClaimFunctional) -> Result<Outcome, Issue> {
    let ens = ensemble(cfg, model.dim())?;
    // market claims only accept shifts with sigma phi = 0
    let ones = vec![1.0; model.dim()];
    let dir = match model {
        Built::Market(m) => core(m.project_admissible(0.0, &m.s0, &m.y0, &ones))?,
        Built::Brownian { .. } => ones,
    };
    let phi = ControlProcess::constant(dir);
    let eps = &cfg.settings.eps;
    let d = core(verify_directional_derivative(claim, &phi, &ens, eps))?;
    let l2 = core(verify_l2_convergence(&phi, &ens, eps))?;
    let rows = d
        .rows
        .iter()
        .zip(&l2.rows)
        .map(|(r, l)| {
            let ratio = d.ratios.iter().find(|x| x.eps == r.eps).map(|x| x.ratio);
            let l2_ratio = l2.ratios.iter().find(|x| x.eps == r.eps).map(|x| x.ratio);
            vec![
                Some(r.eps),
                Some(r.finite_difference.value),
                Some(r.finite_difference.se),
                Some(r.integration_by_parts.value),
                Some(r.integration_by_parts.se),
                Some(r.difference.value),
                Some(r.difference.se),
                Some(r.residual.value),
                Some(r.residual.se),
                r.residual_pathwise.map(|x| x.value),
                r.residual_pathwise.map(|x| x.se),
                ratio,
                Some(l.distance.value),
                Some(l.distance.se),
                l2_ratio,
            ]
        })
        .collect();
    Ok(Outcome {
        table: Table { columns: LEMMA_COLUMNS.to_vec(), rows },
        diagnostics: json!({ "eps2_coefficient": d.eps2_coefficient, "residual_ratios": d.ratios, "l2_ratios": l2.ratios }),
    })
}

fn compare(cfg: &ExperimentConfig, model: &Built, claim: &dyn ClaimFunctional) -> Result<Outcome, Issue> {
    let ens = ensemble(cfg, model.dim())?;
    let opts = options(cfg)?;
    let est = core(clark_integrand(claim, &ens, &opts.clark))?;
    let reports = control_value_from(claim, &ens, &est, &cfg.settings.eps, &opts);
    let inst = DpInstance::new(cfg.settings.horizon, cfg.settings.dp_steps);
    let mut rows = Vec::new();
    let mut dp_meta = Vec::new();
    for r in &reports {
        let eps = r.order_parameter;
        let ef = core(exponential_formula_value(claim, eps, &ens))?;
        let dp = core(dp_control_value(claim, eps, &inst))?;
        let exact = closed_form(cfg, claim, eps);
        rows.push(vec![
            Some(eps),
            Some(r.total),
            Some(r.zeroth.se.hypot(r.correction.se)),
            Some(ef.value),
            Some(ef.se),
            Some(dp.value),
            exact,
            exact.map(|x| dp.value - x),
        ]);
        dp_meta.push(dp);
    }
    Ok(Outcome { table: Table { columns: COMPARE_COLUMNS.to_vec(), rows }, diagnostics: json!({ "dp": dp_meta, "metadata": reports[0].metadata }) })
}

fn entropy(cfg: &ExperimentConfig, model: &Built) -> Result<Outcome, Issue> {
    let Built::Market(m) = model else { return Err(Issue::incompatible("entropy needs a market model")) };
    let ens = ensemble(cfg, m.m)?;
    let r = core(memm_entropy_expansion_with(Arc::clone(m), &ens, &options(cfg)?))?;
    // the DP tree only reaches a few steps; compare when the grids coincide
    let dp = if cfg.settings.n_steps <= 4 {
        Some(core(entropy_minimum_dp(Arc::clone(m), &DpInstance::new(cfg.settings.horizon, cfg.settings.n_steps)))?)
    } else {
        None
    };
    let oracle = dp.as_ref().map(|d| d.value);
    let row = vec![
        Some(r.order_parameter),
        Some(r.zeroth.value),
        Some(r.correction.value),
        Some(r.total),
        oracle,
        oracle.map(|o| r.total - o),
        Some(r.zeroth.se),
        Some(r.correction.se),
    ];
    Ok(Outcome { table: Table { columns: ENTROPY_COLUMNS.to_vec(), rows: vec![row] }, diagnostics: json!({ "dp": dp, "metadata": r.metadata }) })
}
