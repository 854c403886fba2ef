//! Models and claims reachable from a config file, by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;

use dualexp::functionals::{asset_terminal, linear_terminal, quadratic_terminal, ConstantClaim};
use dualexp::models::{
    multi_asset_basis_risk, stochastic_correlation_model, sv_ou, MultiAssetParams, OuVolParams, StochasticCorrelationParams,
};
use dualexp::{basis_risk_2d, lookback_put_on_factor, mv_tradeoff_functional, vanilla_on_factor, BasisRiskParams};
use dualexp::{ClaimFunctional, Error, ItoMarketModel, MeasureSpec, OptionKind};

use crate::config::{kind_name, ClaimSection, Kind, Named};
use crate::Issue;

pub enum ParamDefault {
    Num(f64),
    List(&'static [f64]),
}

pub struct ModelEntry {
    pub name: &'static str,
    pub about: &'static str,
    pub params: &'static [(&'static str, ParamDefault)],
}

use ParamDefault::{List, Num};

pub const MODELS: &[ModelEntry] = &[
    ModelEntry { name: "brownian", about: "raw m-dimensional Brownian motion, for path functionals", params: &[("dim", Num(1.0))] },
    ModelEntry {
        name: "basis_risk_2d",
        about: "lognormal traded S and non-traded Y with correlation rho",
        params: &[
            ("mu_s", Num(0.12)),
            ("sigma_s", Num(0.3)),
            ("mu_y", Num(0.1)),
            ("sigma_y", Num(0.3)),
            ("rho", Num(0.75)),
            ("s0", Num(100.0)),
            ("y0", Num(100.0)),
        ],
    },
    ModelEntry {
        name: "multi_asset_basis_risk",
        about: "d lognormal traded assets and lognormal factors, constant coefficients",
        params: &[
            ("mu_s", List(&[0.02, 0.06])),
            ("sigma_s", List(&[0.2, 0.0, 0.05, 0.3])),
            ("mu_y", List(&[0.01])),
            ("beta", List(&[0.1, 0.1, 0.2])),
            ("s0", List(&[1.0, 1.0])),
            ("y0", List(&[1.0])),
        ],
    },
    ModelEntry {
        name: "stochastic_correlation",
        about: "basis risk with a mean-reverting correlation factor",
        params: &[
            ("lambda_s", Num(0.3)),
            ("sigma_s", Num(0.25)),
            ("mu_y", Num(0.05)),
            ("sigma_y", Num(0.3)),
            ("rho0", Num(0.4)),
            ("kappa", Num(2.0)),
            ("theta", Num(0.5)),
            ("nu", Num(0.5)),
            ("delta", Num(0.5)),
            ("eta", Num(0.0)),
            ("s0", Num(1.0)),
            ("y0", Num(1.0)),
        ],
    },
    ModelEntry {
        name: "sv_ou",
        about: "stochastic volatility with an OU factor and lambda(y) = lambda0 + c y",
        params: &[
            ("kappa", Num(1.0)),
            ("theta", Num(1.0)),
            ("beta", Num(1.0)),
            ("lambda0", Num(0.0)),
            ("c", Num(3.0)),
            ("sigma", Num(0.2)),
            ("rho", Num(0.95)),
            ("s0", Num(1.0)),
            ("y0", Num(1.0)),
        ],
    },
];

pub struct ClaimEntry {
    pub label: &'static str,
    pub about: &'static str,
    pub needs_market: bool,
    pub params: &'static [(&'static str, ParamDefault)],
}

pub const CLAIMS: &[ClaimEntry] = &[
    ClaimEntry { label: "linear", about: "c . W(T)", needs_market: false, params: &[("c", List(&[1.0]))] },
    ClaimEntry { label: "quadratic", about: "W(T)^2, one dimension", needs_market: false, params: &[] },
    ClaimEntry { label: "constant", about: "a constant payoff", needs_market: false, params: &[("value", Num(1.0))] },
    ClaimEntry { label: "put", about: "(K - Y(T))^+ on a factor", needs_market: true, params: &[("strike", Num(100.0)), ("factor", Num(0.0))] },
    ClaimEntry { label: "call", about: "(Y(T) - K)^+ on a factor", needs_market: true, params: &[("strike", Num(100.0)), ("factor", Num(0.0))] },
    ClaimEntry { label: "lookback_put", about: "max Y - Y(T) on a positive factor", needs_market: true, params: &[("factor", Num(0.0))] },
    ClaimEntry { label: "mv_tradeoff", about: "half the integrated squared market price of risk", needs_market: true, params: &[] },
    ClaimEntry { label: "asset_terminal", about: "S_i(T)", needs_market: true, params: &[("asset", Num(0.0))] },
];

pub enum Built {
    Brownian { dim: usize },
    Market(Arc<ItoMarketModel>),
}

impl Built {
    pub fn dim(&self) -> usize {
        match self {
            Built::Brownian { dim } => *dim,
            Built::Market(m) => m.m,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Built::Brownian { .. } => "brownian".into(),
            Built::Market(m) => m.label.clone(),
        }
    }
}

/// Parameter values with defaults filled in; unknown keys and non-numeric
/// values are reported.
struct Params {
    nums: BTreeMap<&'static str, f64>,
    lists: BTreeMap<&'static str, Vec<f64>>,
}

impl Params {
    fn num(&self, k: &str) -> f64 {
        self.nums[k]
    }
    fn list(&self, k: &str) -> Vec<f64> {
        self.lists[k].clone()
    }
}

fn read_params(owner: &str, schema: &'static [(&'static str, ParamDefault)], given: &BTreeMap<String, Value>) -> Result<Params, Vec<Issue>> {
    let mut issues = Vec::new();
    for k in given.keys() {
        if !schema.iter().any(|(n, _)| n == k) {
            let known: Vec<&str> = schema.iter().map(|(n, _)| *n).collect();
            issues.push(Issue::config(format!("unknown parameter '{k}' for {owner}; known: [{}]", known.join(", "))));
        }
    }
    let mut p = Params { nums: BTreeMap::new(), lists: BTreeMap::new() };
    for (name, default) in schema {
        let v = given.get(*name);
        match default {
            Num(d) => match v {
                None => {
                    p.nums.insert(name, *d);
                }
                Some(Value::Number(x)) => {
                    p.nums.insert(name, x.as_f64().unwrap_or(f64::NAN));
                }
                Some(_) => issues.push(Issue::config(format!("parameter '{name}' of {owner} must be a number"))),
            },
            List(d) => match v {
                None => {
                    p.lists.insert(name, d.to_vec());
                }
                Some(Value::Number(x)) => {
                    p.lists.insert(name, vec![x.as_f64().unwrap_or(f64::NAN)]);
                }
                Some(Value::Array(a)) if a.iter().all(Value::is_number) => {
                    p.lists.insert(name, a.iter().map(|x| x.as_f64().unwrap_or(f64::NAN)).collect());
                }
                Some(_) => issues.push(Issue::config(format!("parameter '{name}' of {owner} must be a number or a list of numbers"))),
            },
        }
    }
    if issues.is_empty() {
        Ok(p)
    } else {
        Err(issues)
    }
}

fn index(p: &Params, k: &str) -> Result<usize, Vec<Issue>> {
    let x = p.num(k);
    if x >= 0.0 && x.fract() == 0.0 && x < 1e6 {
        Ok(x as usize)
    } else {
        Err(vec![Issue::config(format!("{k} must be a nonnegative integer, got {x}"))])
    }
}

/// Core errors from constructors: invalid arguments are configuration
/// problems, the rest are incompatibilities.
fn from_core(e: Error) -> Vec<Issue> {
    vec![Issue::from_core(&e)]
}

pub fn build_model(m: &Named) -> Result<Built, Vec<Issue>> {
    let Some(entry) = MODELS.iter().find(|e| e.name == m.name) else {
        let known: Vec<&str> = MODELS.iter().map(|e| e.name).collect();
        return Err(vec![Issue::config(format!("unknown model '{}'; available: [{}]", m.name, known.join(", ")))]);
    };
    let p = read_params(&format!("model {}", entry.name), entry.params, &m.params)?;
    let model = match entry.name {
        "brownian" => {
            let dim = index(&p, "dim")?;
            if !(1..=16).contains(&dim) {
                return Err(vec![Issue::config(format!("dim must be in 1..=16, got {dim}"))]);
            }
            return Ok(Built::Brownian { dim });
        }
        "basis_risk_2d" => basis_risk_2d(BasisRiskParams {
            mu_s: p.num("mu_s"),
            sigma_s: p.num("sigma_s"),
            mu_y: p.num("mu_y"),
            sigma_y: p.num("sigma_y"),
            rho: p.num("rho"),
            s0: p.num("s0"),
            y0: p.num("y0"),
        }),
        "multi_asset_basis_risk" => multi_asset_basis_risk(MultiAssetParams {
            mu_s: p.list("mu_s"),
            sigma_s: p.list("sigma_s"),
            mu_y: p.list("mu_y"),
            beta: p.list("beta"),
            s0: p.list("s0"),
            y0: p.list("y0"),
        }),
        "stochastic_correlation" => stochastic_correlation_model(StochasticCorrelationParams {
            lambda_s: p.num("lambda_s"),
            sigma_s: p.num("sigma_s"),
            mu_y: p.num("mu_y"),
            sigma_y: p.num("sigma_y"),
            rho0: p.num("rho0"),
            kappa: p.num("kappa"),
            theta: p.num("theta"),
            nu: p.num("nu"),
            delta: p.num("delta"),
            eta: p.num("eta"),
            s0: p.num("s0"),
            y0: p.num("y0"),
        }),
        "sv_ou" => sv_ou(OuVolParams {
            kappa: p.num("kappa"),
            theta: p.num("theta"),
            beta: p.num("beta"),
            lambda0: p.num("lambda0"),
            c: p.num("c"),
            sigma: p.num("sigma"),
            rho: p.num("rho"),
            s0: p.num("s0"),
            y0: p.num("y0"),
        }),
        _ => unreachable!("catalog entry without a constructor"),
    };
    model.map(|m| Built::Market(Arc::new(m))).map_err(from_core)
}

pub fn unknown_claim(label: &str) -> Issue {
    let known: Vec<&str> = CLAIMS.iter().map(|e| e.label).collect();
    Issue::config(format!("unknown claim '{label}'; available: [{}]", known.join(", ")))
}

pub fn build_claim(c: &ClaimSection, model: &Built) -> Result<Box<dyn ClaimFunctional>, Vec<Issue>> {
    let Some(entry) = CLAIMS.iter().find(|e| e.label == c.label) else {
        return Err(vec![unknown_claim(&c.label)]);
    };
    let p = read_params(&format!("claim {}", entry.label), entry.params, &c.params)?;
    match (model, entry.needs_market) {
        (Built::Brownian { .. }, true) => {
            return Err(vec![Issue::incompatible(format!("claim {} needs a market model, not brownian", entry.label))]);
        }
        (Built::Market(m), false) => {
            return Err(vec![Issue::incompatible(format!("claim {} is a raw Brownian functional; use model brownian, not {}", entry.label, m.label))]);
        }
        _ => {}
    }
    let claim: Box<dyn ClaimFunctional> = match (entry.label, model) {
        ("linear", Built::Brownian { dim }) => {
            let mut coef = p.list("c");
            if coef.len() == 1 && *dim > 1 {
                coef = vec![coef[0]; *dim];
            }
            if coef.len() != *dim {
                return Err(vec![Issue::incompatible(format!("linear claim has {} coefficients for dimension {dim}", coef.len()))]);
            }
            Box::new(linear_terminal(coef).map_err(from_core)?)
        }
        ("quadratic", Built::Brownian { dim }) => Box::new(quadratic_terminal(*dim).map_err(|e| vec![Issue::incompatible(e.to_string())])?),
        ("constant", Built::Brownian { dim }) => Box::new(ConstantClaim { value: p.num("value"), dim: *dim }),
        ("put" | "call", Built::Market(m)) => {
            let kind = if entry.label == "put" { OptionKind::Put } else { OptionKind::Call };
            Box::new(vanilla_on_factor(m.clone(), MeasureSpec::Minimal, index(&p, "factor")?, p.num("strike"), kind).map_err(from_core)?)
        }
        ("lookback_put", Built::Market(m)) => Box::new(lookback_put_on_factor(m.clone(), MeasureSpec::Minimal, index(&p, "factor")?).map_err(from_core)?),
        ("mv_tradeoff", Built::Market(m)) => Box::new(mv_tradeoff_functional(m.clone(), MeasureSpec::Minimal).map_err(from_core)?),
        ("asset_terminal", Built::Market(m)) => Box::new(asset_terminal(m.clone(), MeasureSpec::Minimal, index(&p, "asset")?).map_err(from_core)?),
        _ => unreachable!("claim/model pairing checked above"),
    };
    Ok(claim)
}

/// Pairings an experiment kind cannot run.
pub fn kind_compatibility(kind: Kind, model: &Built, claim: Option<&ClaimSection>) -> Vec<Issue> {
    let mut v = Vec::new();
    let name = kind_name(kind);
    match kind {
        Kind::Price => {
            if let Built::Market(m) = model {
                if let Err(e) = m.entropy_minimal_measure() {
                    v.push(Issue::incompatible(format!("{name}: {e}")));
                }
            } else {
                v.push(Issue::incompatible(format!("{name} needs a market model and a claim on it")));
            }
        }
        Kind::Entropy => {
            if !matches!(model, Built::Market(m) if matches!(m.family, dualexp::models::Family::StochasticVol { .. })) {
                v.push(Issue::incompatible(format!("{name} needs a scalar stochastic volatility model (sv_ou), got {}", model.label())));
            }
            if claim.is_some() {
                v.push(Issue::config(format!("{name} takes no claim section")));
            }
        }
        Kind::ExpansionScaling | Kind::VerifyLemma | Kind::OracleCompare => {}
    }
    v
}
