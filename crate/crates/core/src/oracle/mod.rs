//! Ground truth for the expansions: the exponential formula for the value of
//! the control problem, the distortion price of basis-risk claims, a
//! brute-force DP solver on small trees, and direct checks of the
//! directional-derivative and Doléans-exponential limits.
//!
//! Exponential formula. For the problem sup_v E[G(W + V) - 1/2 int |v|^2]
//! the value is log E exp(G(W)). Put v = eps phi and G = eps^2 F: the
//! objective becomes eps^2 E[F(W + eps Phi) - 1/2 int |phi|^2], so the value
//! of the problem in eps is eps^-2 log E exp(eps^2 F(W)).

mod dp;
pub mod quadrature;

use std::sync::Arc;

use serde::Serialize;

pub use dp::{dp_control_value, dp_refinement, DpInstance, DpRefinement, DpResult, Sense, MAX_TREE_EVALUATIONS};

use crate::error::{invalid, Error, Result};
use crate::functionals::{mv_tradeoff_functional, norm_cdf, BoundClaim, ClaimFunctional, OptionKind, StatePayoff, Want};
use crate::models::{BasisRiskParams, Family, ItoMarketModel, MeasureSpec};
use crate::stats::{reduce_paths, Estimate, Moments};
use crate::wiener::{BrownianEnsemble, ControlProcess};

const N_BLOCKS: usize = 32;

/// 1/2 eps^2 |c|^2 T: value of the problem for F = c . W(T).
pub fn linear_control_value(c: &[f64], eps: f64, horizon: f64) -> f64 {
    0.5 * eps * eps * c.iter().map(|x| x * x).sum::<f64>() * horizon
}

/// -ln(1 - 2 eps^2 T) / (2 eps^2): value of the problem for F = W(T)^2.
pub fn quadratic_control_value(eps: f64, horizon: f64) -> Result<f64> {
    let a = 2.0 * eps * eps * horizon;
    if a >= 1.0 {
        return Err(Error::Overflow(format!("E exp(eps^2 W_T^2) is infinite for 2 eps^2 T = {a}")));
    }
    if eps == 0.0 {
        return Ok(horizon);
    }
    Ok(-(-a).ln_1p() / (2.0 * eps * eps))
}

/// eps^-2 log of the sample mean of exp(eps^2 F), with delta-method error.
pub fn exponential_formula_value(claim: &dyn ClaimFunctional, eps: f64, ens: &BrownianEnsemble) -> Result<Estimate> {
    if !eps.is_finite() {
        return invalid("eps must be finite");
    }
    let a = eps * eps;
    let n = ens.n_paths();
    let grid = ens.grid();
    let block = n.div_ceil(N_BLOCKS);
    // payoff moments, then moments of exp(a F) per block
    let acc = reduce_paths(
        n,
        || (Moments::default(), vec![Moments::default(); N_BLOCKS]),
        || (ens.new_path(), claim.new_observation(grid)),
        |acc, (path, obs), i| {
            ens.fill(i, path)?;
            claim.observe(path, Want::PAYOFF, obs)?;
            acc.0.push(obs.payoff);
            let e = (a * obs.payoff).exp();
            if !e.is_finite() {
                return Err(Error::Overflow(format!("exp(eps^2 F) overflows on path {i} (F = {})", obs.payoff)));
            }
            acc.1[i / block].push(e);
            Ok(())
        },
    )?;
    if a == 0.0 {
        return Ok(acc.0.estimate());
    }
    let mut all = Moments::default();
    for b in &acc.1 {
        all.merge(b);
    }
    // a finite, stable second moment: no block carries most of it
    let second: Vec<f64> = acc.1.iter().filter(|b| b.n > 0).map(|b| b.n as f64 * (b.variance() + b.mean * b.mean)).collect();
    let total: f64 = second.iter().sum();
    let largest = second.iter().cloned().fold(0.0, f64::max);
    if second.len() >= 8 && largest > 0.5 * total {
        return Err(Error::Overflow(format!(
            "exp(eps^2 F) has an unstable second moment ({:.0}% of it in one block of {})",
            100.0 * largest / total,
            second.len()
        )));
    }
    let value = all.mean.ln() / a;
    let se = all.se() / (all.mean * a);
    Ok(Estimate::new(value, se))
}

fn basis_params(model: &ItoMarketModel) -> Result<BasisRiskParams> {
    match &model.family {
        Family::BasisRisk2d(p) => Ok(*p),
        _ => Err(Error::Incompatible {
            claim: "distortion_price".into(),
            reason: format!("the distortion formula needs the constant-parameter 2D basis-risk model, not {}", model.label),
        }),
    }
}

/// Checks that `claim` is a payoff on the non-traded factor of a 2D
/// basis-risk model simulated under the minimal martingale measure.
fn distortion_setup(claim: &BoundClaim) -> Result<BasisRiskParams> {
    let p = basis_params(&claim.model)?;
    if !matches!(claim.measure, MeasureSpec::Minimal) {
        return Err(Error::Incompatible { claim: claim.label.clone(), reason: "simulate the claim under the minimal martingale measure".into() });
    }
    match claim.payoff {
        StatePayoff::Vanilla { .. } | StatePayoff::LookbackPut { .. } => Ok(p),
        _ => Err(Error::Incompatible { claim: claim.label.clone(), reason: "the distortion formula covers claims on the non-traded factor only".into() }),
    }
}

/// (a)^-1 log E^{Q_M} exp(a F) with a = alpha (1 - rho^2), on the sample.
pub fn distortion_price(claim: &BoundClaim, alpha: f64, ens: &BrownianEnsemble) -> Result<Estimate> {
    let p = distortion_setup(claim)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid("alpha must be positive");
    }
    let a = alpha * (1.0 - p.rho * p.rho);
    let grid = ens.grid();
    let (f, e) = reduce_paths(
        ens.n_paths(),
        || (Moments::default(), Moments::default()),
        || (ens.new_path(), claim.new_observation(grid)),
        |acc, (path, obs), i| {
            ens.fill(i, path)?;
            claim.observe(path, Want::PAYOFF, obs)?;
            acc.0.push(obs.payoff);
            let x = (a * obs.payoff).exp();
            if !x.is_finite() {
                return Err(Error::Overflow(format!("exp(alpha (1 - rho^2) F) overflows on path {i}")));
            }
            acc.1.push(x);
            Ok(())
        },
    )?;
    if a < 1e-12 {
        return Ok(f.estimate());
    }
    Ok(Estimate::new(e.mean.ln() / a, e.se() / (e.mean * a)))
}

/// The distortion price of a vanilla option on the factor of the 2D model,
/// by quadrature over the lognormal terminal law under Q_M.
pub fn distortion_price_quadrature(p: &BasisRiskParams, strike: f64, kind: OptionKind, alpha: f64, horizon: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(strike > 0.0) || !(horizon > 0.0) {
        return invalid("alpha, strike and horizon must be positive");
    }
    let a = alpha * (1.0 - p.rho * p.rho);
    let sd = p.sigma_y * horizon.sqrt();
    let drift = (p.nu() - 0.5 * p.sigma_y * p.sigma_y) * horizon;
    let y = |z: f64| p.y0 * (drift + sd * z).exp();
    let payoff = |z: f64| match kind {
        OptionKind::Call => (y(z) - strike).max(0.0),
        OptionKind::Put => (strike - y(z)).max(0.0),
    };
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let zk = ((strike / p.y0).ln() - drift) / sd;
    let (lo, hi) = (-12.0f64, 12.0f64);
    let zk = zk.clamp(lo, hi);
    if a < 1e-12 {
        let m = quadrature::integrate(|z| payoff(z) * phi(z), lo, zk, 200, 20)? + quadrature::integrate(|z| payoff(z) * phi(z), zk, hi, 200, 20)?;
        return Ok(m);
    }
    // the exponent vanishes on the out-of-the-money side
    let (itm, otm) = match kind {
        OptionKind::Put => (quadrature::integrate(|z| (a * payoff(z)).exp() * phi(z), lo, zk, 400, 20)?, norm_cdf(-zk)),
        OptionKind::Call => (quadrature::integrate(|z| (a * payoff(z)).exp() * phi(z), zk, hi, 400, 20)?, norm_cdf(zk)),
    };
    let m = itm + otm;
    if !m.is_finite() {
        return Err(Error::Overflow("distortion moment overflows".into()));
    }
    Ok(m.ln() / a)
}

/// Brute-force minimal entropy of an equivalent martingale measure in a
/// scalar stochastic volatility model: the DP minimum of
/// E^{Q_M}[1/2 K_T(W + eps Phi) + 1/2 int phi^2] with eps^2 = 1 - rho^2 and
/// the control acting along the factor's Brownian direction.
pub fn entropy_minimum_dp(model: Arc<ItoMarketModel>, inst: &DpInstance) -> Result<DpResult> {
    let rho = match &model.family {
        Family::StochasticVol { rho, .. } => *rho,
        _ => return Err(Error::Incompatible { claim: "entropy_minimum_dp".into(), reason: format!("{} is not a scalar stochastic volatility model", model.label) }),
    };
    let rb = (1.0 - rho * rho).max(0.0).sqrt();
    let claim = mv_tradeoff_functional(model, MeasureSpec::Minimal)?;
    let mut inst = inst.clone();
    inst.sense = Sense::Minimise;
    inst.directions = Some(vec![vec![rho, rb]]);
    dp_control_value(&claim, rb, &inst)
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionalRow {
    pub eps: f64,
    /// (E F(W + eps Phi) - E F(W - eps Phi)) / (2 eps).
    pub finite_difference: Estimate,
    /// E[F(W) (phi . W)_T].
    pub integration_by_parts: Estimate,
    /// Paired difference of the two, per path.
    pub difference: Estimate,
    /// E[F(W + eps Phi) - F(W) - eps F(W) (phi . W)_T].
    pub residual: Estimate,
    /// The same expectation with eps (F(W) (phi . W)_T - sum kernel . phi dt)
    /// added as a zero-mean control variate; `None` without a kernel. Its
    /// per-path spread is O(eps^2) instead of O(eps).
    pub residual_pathwise: Option<Estimate>,
}

impl DirectionalRow {
    /// The lower-variance residual estimate available.
    pub fn second_order(&self) -> Estimate {
        self.residual_pathwise.unwrap_or(self.residual)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualRatio {
    pub eps: f64,
    /// residual(eps) / residual(eps / 2).
    pub ratio: f64,
    /// Both residuals are more than 4 standard errors (and 1e-12) from zero.
    pub significant: bool,
    /// Computed from `residual_pathwise`.
    pub pathwise: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionalReport {
    pub rows: Vec<DirectionalRow>,
    pub ratios: Vec<ResidualRatio>,
    /// Least-squares c in residual(eps) = c eps^2.
    pub eps2_coefficient: Estimate,
}

fn check_eps_list(eps: &[f64]) -> Result<()> {
    if eps.is_empty() || eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return invalid("eps list must be nonempty and positive");
    }
    Ok(())
}

/// Compares the directional derivative of E F along Phi with its
/// integration-by-parts form, on common random numbers.
pub fn verify_directional_derivative(claim: &dyn ClaimFunctional, phi: &ControlProcess, ens: &BrownianEnsemble, eps: &[f64]) -> Result<DirectionalReport> {
    check_eps_list(eps)?;
    if phi.dim() != ens.dim() || claim.brownian_dim() != ens.dim() {
        return Err(Error::ShapeMismatch("claim, control and ensemble dimensions differ".into()));
    }
    if ens.is_shifted() {
        return invalid("verification needs an unshifted ensemble");
    }
    let plus: Vec<BrownianEnsemble> = eps.iter().map(|&e| ens.shifted(phi, e)).collect::<Result<_>>()?;
    let minus: Vec<BrownianEnsemble> = eps.iter().map(|&e| ens.shifted(phi, -e)).collect::<Result<_>>()?;
    let grid = ens.grid();
    let ne = eps.len();
    let n = grid.n_steps();
    let m = ens.dim();
    let dt = grid.dt();
    let kernel = claim.has_kernel();
    let acc = reduce_paths(
        ens.n_paths(),
        || vec![Moments::default(); 5 * ne],
        || (ens.new_path(), ens.new_path(), claim.new_observation(grid), vec![0.0; n * m]),
        |acc, (base, shifted, obs, ctl), i| {
            ens.fill(i, base)?;
            claim.observe(base, if kernel { Want::KERNEL } else { Want::PAYOFF }, obs)?;
            let f0 = obs.payoff;
            phi.evaluate(base, ctl)?;
            let ito: f64 = ctl.iter().zip(&base.increments).map(|(a, b)| a * b).sum();
            let pathwise = if kernel { ctl.iter().zip(&obs.kernel).map(|(a, b)| a * b).sum::<f64>() * dt } else { 0.0 };
            for (j, &e) in eps.iter().enumerate() {
                plus[j].fill(i, shifted)?;
                claim.observe(shifted, Want::PAYOFF, obs)?;
                let fp = obs.payoff;
                minus[j].fill(i, shifted)?;
                claim.observe(shifted, Want::PAYOFF, obs)?;
                let fm = obs.payoff;
                let fd = (fp - fm) / (2.0 * e);
                let ibp = f0 * ito;
                acc[5 * j].push(fd);
                acc[5 * j + 1].push(ibp);
                acc[5 * j + 2].push(fd - ibp);
                acc[5 * j + 3].push(fp - f0 - e * ibp);
                acc[5 * j + 4].push(fp - f0 - e * pathwise);
            }
            Ok(())
        },
    )?;
    let rows: Vec<DirectionalRow> = eps
        .iter()
        .enumerate()
        .map(|(j, &e)| DirectionalRow {
            eps: e,
            finite_difference: acc[5 * j].estimate(),
            integration_by_parts: acc[5 * j + 1].estimate(),
            difference: acc[5 * j + 2].estimate(),
            residual: acc[5 * j + 3].estimate(),
            residual_pathwise: kernel.then(|| acc[5 * j + 4].estimate()),
        })
        .collect();
    let mut ratios = Vec::new();
    for a in &rows {
        if let Some(b) = rows.iter().find(|b| (b.eps - 2.0 * a.eps).abs() <= 1e-12 * a.eps) {
            // rounding floor: exact cancellations leave ~1e-16 with an even smaller se
            let sig = |r: &Estimate| r.value.abs() > 4.0 * r.se + 1e-12;
            let (ra, rb) = (a.second_order(), b.second_order());
            ratios.push(ResidualRatio { eps: b.eps, ratio: rb.value / ra.value, significant: sig(&ra) && sig(&rb), pathwise: kernel });
        }
    }
    let s4: f64 = rows.iter().map(|r| r.eps.powi(4)).sum();
    let c = rows.iter().map(|r| r.eps.powi(2) * r.second_order().value).sum::<f64>() / s4;
    let se = rows.iter().map(|r| (r.eps.powi(2) * r.second_order().se).powi(2)).sum::<f64>().sqrt() / s4;
    Ok(DirectionalReport { rows, ratios, eps2_coefficient: Estimate::new(c, se) })
}

#[derive(Debug, Clone, Serialize)]
pub struct L2Row {
    pub eps: f64,
    /// Sample L2 norm of (1 - M_eps(T)) / eps - (phi . W)_T.
    pub distance: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct L2Ratio {
    pub eps: f64,
    /// distance(eps) / distance(eps / 2).
    pub ratio: f64,
    pub in_band: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct L2Report {
    pub rows: Vec<L2Row>,
    pub ratios: Vec<L2Ratio>,
}

/// L2 distance between the scaled Doléans defect and the stochastic
/// integral, and how it shrinks when eps is halved.
pub fn verify_l2_convergence(phi: &ControlProcess, ens: &BrownianEnsemble, eps: &[f64]) -> Result<L2Report> {
    check_eps_list(eps)?;
    if phi.dim() != ens.dim() {
        return Err(Error::ShapeMismatch("control and ensemble dimensions differ".into()));
    }
    let grid = ens.grid();
    let (n, m, dt) = (grid.n_steps(), ens.dim(), grid.dt());
    let acc = reduce_paths(
        ens.n_paths(),
        || vec![Moments::default(); eps.len()],
        || (ens.new_path(), vec![0.0; n * m]),
        |acc, (path, ctl), i| {
            ens.fill(i, path)?;
            phi.evaluate(path, ctl)?;
            let ito: f64 = ctl.iter().zip(&path.increments).map(|(a, b)| a * b).sum();
            let energy: f64 = ctl.iter().map(|a| a * a).sum::<f64>() * dt;
            for (j, &e) in eps.iter().enumerate() {
                let m_t = (-e * ito - 0.5 * e * e * energy).exp();
                let d = (1.0 - m_t) / e - ito;
                acc[j].push(d * d);
            }
            Ok(())
        },
    )?;
    let rows: Vec<L2Row> = eps
        .iter()
        .zip(&acc)
        .map(|(&e, mo)| {
            let l = mo.mean.max(0.0).sqrt();
            let se = if l > 0.0 { mo.se() / (2.0 * l) } else { 0.0 };
            L2Row { eps: e, distance: Estimate::new(l, se) }
        })
        .collect();
    let mut ratios = Vec::new();
    for a in &rows {
        if let Some(b) = rows.iter().find(|b| (2.0 * b.eps - a.eps).abs() <= 1e-12 * a.eps) {
            let ratio = a.distance.value / b.distance.value;
            ratios.push(L2Ratio { eps: a.eps, ratio, in_band: (1.5..=2.5).contains(&ratio) });
        }
    }
    Ok(L2Report { rows, ratios })
}
