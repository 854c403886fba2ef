//! Small-parameter expansions: the value of the entropy-penalised control
//! problem, indifference prices under exponential utility, the first-order
//! optimal control, relative entropies between Girsanov measures and the
//! entropy of the minimal entropy martingale measure in scalar stochastic
//! volatility models.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clark::{clark_integrand, evaluate_integrand, fit_integrand, fit_shifted_kernel, ClarkEstimate, ClarkOptions, IntegrandFit, KWDecomposition};
use crate::error::{invalid, Error, Result};
use crate::functionals::{mv_tradeoff_functional, ClaimFunctional, SummaryCursor, Want};
use crate::linalg;
use crate::models::{CoefValues, Family, ItoMarketModel, MeasureSpec, StateStepper};
use crate::stats::{reduce_paths, Estimate, Moments};
use crate::wiener::{BrownianEnsemble, ControlCursor, ControlLaw, ControlProcess, PathPrefix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZerothEstimator {
    /// Sample mean of the payoff.
    #[default]
    Plain,
    /// Payoff minus the fitted stochastic integral and second-order Hermite
    /// terms of each increment; same expectation, far smaller variance.
    ClarkControlVariate,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExpansionOptions {
    pub clark: ClarkOptions,
    pub zeroth: ZerothEstimator,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMetadata {
    pub claim: String,
    pub model: Option<String>,
    pub measure: Option<String>,
    pub basis_degree: usize,
    pub route: Option<String>,
    pub zeroth_estimator: ZerothEstimator,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport {
    pub zeroth: Estimate,
    pub correction: Estimate,
    pub total: f64,
    pub order_parameter: f64,
    /// Power of the order parameter in the neglected term.
    pub remainder_exponent: u32,
    pub metadata: ReportMetadata,
}

impl ExpansionReport {
    fn new(zeroth: Estimate, correction: Estimate, order_parameter: f64, remainder_exponent: u32, metadata: ReportMetadata) -> Self {
        Self { zeroth, correction, total: zeroth.value + correction.value, order_parameter, remainder_exponent, metadata }
    }
}

fn metadata(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble, opts: &ExpansionOptions, est: Option<&ClarkEstimate>) -> ReportMetadata {
    let binding = claim.binding();
    ReportMetadata {
        claim: claim.label(),
        model: binding.map(|(m, _)| m.label.clone()),
        measure: binding.map(|(_, q)| q.label()),
        basis_degree: opts.clark.basis.degree,
        route: est.map(|e| format!("{:?}", e.route())),
        zeroth_estimator: opts.zeroth,
        seed: ens.seed(),
        n_paths: ens.n_paths(),
        n_steps: ens.grid().n_steps(),
    }
}

fn zeroth_of(est: &ClarkEstimate, which: ZerothEstimator) -> Estimate {
    match which {
        ZerothEstimator::Plain => est.payoff.estimate(),
        ZerothEstimator::ClarkControlVariate => est.zeroth_cv,
    }
}

fn scaled(e: Estimate, c: f64) -> Estimate {
    Estimate::new(c * e.value, c.abs() * e.se)
}

/// E F + eps^2/2 E int |psi|^2 for several eps, sharing one integrand
/// estimate (common random numbers).
pub fn control_value_expansions(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble, eps: &[f64], opts: &ExpansionOptions) -> Result<Vec<ExpansionReport>> {
    if eps.iter().any(|e| !e.is_finite()) {
        return invalid("eps must be finite");
    }
    let est = clark_integrand(claim, ens, &opts.clark)?;
    Ok(control_value_from(claim, ens, &est, eps, opts))
}

/// Reports for several eps from an existing estimate.
pub fn control_value_from(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble, est: &ClarkEstimate, eps: &[f64], opts: &ExpansionOptions) -> Vec<ExpansionReport> {
    let meta = metadata(claim, ens, opts, Some(est));
    eps.iter()
        .map(|&e| {
            let zeroth = if e == 0.0 { est.payoff.estimate() } else { zeroth_of(est, opts.zeroth) };
            let correction = if e == 0.0 { Estimate::exact(0.0) } else { scaled(est.energy, 0.5 * e * e) };
            ExpansionReport::new(zeroth, correction, e, 4, meta.clone())
        })
        .collect()
}

pub fn control_value_expansion(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble, eps: f64, opts: &ExpansionOptions) -> Result<ExpansionReport> {
    Ok(control_value_expansions(claim, ens, &[eps], opts)?.remove(0))
}

/// The control eps * psi (abstract problem, a function of the unshifted
/// path) or eps * (null-space part of psi) at the controlled state (market
/// problem). Meant to be applied as `ensemble.shifted(&c.process(), c.eps)`.
#[derive(Clone)]
pub struct FirstOrderControl {
    pub fit: Arc<IntegrandFit>,
    pub claim: Arc<dyn ClaimFunctional>,
    pub eps: f64,
    market: Option<Arc<ItoMarketModel>>,
}

impl std::fmt::Debug for FirstOrderControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FirstOrderControl({}, eps={}, market={})", self.claim.label(), self.eps, self.market.is_some())
    }
}

impl FirstOrderControl {
    pub fn process(&self) -> ControlProcess {
        ControlProcess::from_law(Arc::new(self.clone()))
    }

    pub fn is_market(&self) -> bool {
        self.market.is_some()
    }
}

struct FirstOrderCursor<'a> {
    law: &'a FirstOrderControl,
    summary: Option<Box<dyn SummaryCursor + 'a>>,
    row: Vec<f64>,
    psi: Vec<f64>,
    last: Vec<f64>,
    dw: Vec<f64>,
    work: crate::clark::BasisWork,
}

impl ControlCursor for FirstOrderCursor<'_> {
    fn control(&mut self, prefix: &PathPrefix, out: &mut [f64]) -> Result<()> {
        let law = self.law;
        let m = law.fit.m;
        let k = prefix.k;
        if k == 0 || self.summary.is_none() {
            let mut c = law.claim.summary_cursor(law.fit.grid)?;
            c.reset();
            for j in 0..k {
                c.advance(prefix.increment(j))?;
            }
            self.summary = Some(c);
        } else {
            let c = self.summary.as_mut().expect("cursor initialised");
            let inc = prefix.increment(k - 1);
            if law.market.is_some() {
                for l in 0..m {
                    self.dw[l] = inc[l] + law.eps * self.last[l] * prefix.dt;
                }
                c.advance(&self.dw)?;
            } else {
                c.advance(inc)?;
            }
        }
        let c = self.summary.as_mut().expect("cursor initialised");
        c.write(&mut self.row);
        law.fit.psi(k, &self.row, &mut self.work, &mut self.psi);
        match &law.market {
            None => {
                for l in 0..m {
                    out[l] = law.eps * self.psi[l];
                }
            }
            Some(model) => {
                let sigma = c.sigma()?.ok_or_else(|| Error::Incompatible { claim: law.claim.label(), reason: "no volatility along the path".into() })?;
                linalg::project_null(sigma, model.d, m, &self.psi, prefix.t, out)?;
                for x in out.iter_mut() {
                    *x *= law.eps;
                }
            }
        }
        self.last.copy_from_slice(&out[..m]);
        Ok(())
    }
}

impl ControlLaw for FirstOrderControl {
    fn dim(&self) -> usize {
        self.fit.m
    }
    fn cursor(&self) -> Box<dyn ControlCursor + '_> {
        let m = self.fit.m;
        Box::new(FirstOrderCursor {
            law: self,
            summary: None,
            row: vec![0.0; self.fit.summary_dim],
            psi: vec![0.0; m],
            last: vec![0.0; m],
            dw: vec![0.0; m],
            work: self.fit.work(),
        })
    }
    fn label(&self) -> String {
        format!("first_order({})", self.claim.label())
    }
}

/// eps * psi for the abstract problem, fitted on the sample of `ens`.
pub fn first_order_control(claim: Arc<dyn ClaimFunctional>, ens: &BrownianEnsemble, eps: f64, opts: &ClarkOptions) -> Result<FirstOrderControl> {
    let fit = Arc::new(fit_integrand(claim.as_ref(), ens, opts)?);
    Ok(FirstOrderControl { fit, claim, eps, market: None })
}

/// eps times the orthogonal part of psi, projected at the controlled state so
/// that sigma phi = 0 on every shifted path.
pub fn first_order_market_control(claim: Arc<dyn ClaimFunctional>, ens: &BrownianEnsemble, eps: f64, opts: &ClarkOptions) -> Result<FirstOrderControl> {
    let model = claim
        .binding()
        .map(|(m, _)| m.clone())
        .ok_or_else(|| Error::Incompatible { claim: claim.label(), reason: "market control needs a claim bound to a model".into() })?;
    let fit = Arc::new(fit_integrand(claim.as_ref(), ens, opts)?);
    Ok(FirstOrderControl { fit, claim, eps, market: Some(model) })
}

/// Plug-in objective E[F(W + eps Phi) - 1/2 int |phi|^2 dt] of a control.
pub fn evaluate_objective(claim: &dyn ClaimFunctional, control: &ControlProcess, eps: f64, ens: &BrownianEnsemble) -> Result<Estimate> {
    if ens.is_shifted() {
        return invalid("objective is evaluated on an unshifted ensemble");
    }
    let shifted = ens.shifted(control, eps)?;
    let grid = ens.grid();
    let m = reduce_paths(
        ens.n_paths(),
        Moments::default,
        || (shifted.new_path(), claim.new_observation(grid)),
        |acc, (path, obs), i| {
            shifted.fill(i, path)?;
            claim.observe(path, Want::PAYOFF, obs)?;
            acc.push(obs.payoff - 0.5 * path.shift_energy[0]);
            Ok(())
        },
    )?;
    Ok(m.estimate())
}

/// Size of one fixed-point refinement of the first-order control.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RefinementReport {
    /// Sample L2 norm of (refined - first order) control.
    pub l2_change: Estimate,
    /// Sample L2 norm of the first-order control.
    pub l2_control: f64,
}

/// Re-projects the kernel read on the shifted paths W + eps Phi onto the
/// state of W, and measures how far eps * E[kernel(W + eps Phi) | state]
/// moves from the first-order control.
pub fn refine_first_order(control: &FirstOrderControl, ens: &BrownianEnsemble, opts: &ClarkOptions) -> Result<RefinementReport> {
    if control.market.is_some() {
        return invalid("refinement is defined for the abstract problem");
    }
    let claim = control.claim.as_ref();
    let refined = fit_shifted_kernel(claim, ens, opts, &control.process(), control.eps)?;
    let fit = &control.fit;
    let grid = ens.grid();
    let (n, m, s) = (grid.n_steps(), fit.m, fit.summary_dim);
    let dt = grid.dt();
    let eps = control.eps;
    let (d2, c2) = reduce_paths(
        ens.n_paths(),
        || (Moments::default(), Moments::default()),
        || (ens.new_path(), claim.new_observation(grid), fit.work(), vec![0.0; m], vec![0.0; m]),
        |acc, (path, obs, w, a, b), i| {
            ens.fill(i, path)?;
            claim.observe(path, Want::SUMMARY, obs)?;
            let (mut dd, mut cc) = (0.0, 0.0);
            for k in 0..n {
                let x = &obs.summary[k * s..(k + 1) * s];
                fit.psi(k, x, w, a);
                refined.psi(k, x, w, b);
                for l in 0..m {
                    dd += (eps * (b[l] - a[l])).powi(2) * dt;
                    cc += (eps * a[l]).powi(2) * dt;
                }
            }
            acc.0.push(dd);
            acc.1.push(cc);
            Ok(())
        },
    )?;
    let l2 = d2.mean.max(0.0).sqrt();
    let se = if l2 > 0.0 { d2.se() / (2.0 * l2) } else { 0.0 };
    Ok(RefinementReport { l2_change: Estimate::new(l2, se), l2_control: c2.mean.max(0.0).sqrt() })
}

/// Integrand split under the entropy-minimal measure, reusable across risk
/// aversions.
#[derive(Debug, Clone)]
pub struct IndifferenceAnalysis {
    pub clark: ClarkEstimate,
    pub kw: KWDecomposition,
    meta: ReportMetadata,
    zeroth: ZerothEstimator,
}

impl IndifferenceAnalysis {
    /// Marginal price plus alpha/2 times the orthogonal energy.
    pub fn expansion(&self, alpha: f64) -> ExpansionReport {
        let zeroth = zeroth_of(&self.clark, self.zeroth);
        ExpansionReport::new(zeroth, scaled(self.kw.energy_xi, 0.5 * alpha), alpha, 2, self.meta.clone())
    }

    /// Marginal price plus alpha/2 (variance - traded energy).
    pub fn mean_variance(&self, alpha: f64) -> ExpansionReport {
        let zeroth = zeroth_of(&self.clark, self.zeroth);
        ExpansionReport::new(zeroth, scaled(self.kw.variance_minus_theta, 0.5 * alpha), alpha, 2, self.meta.clone())
    }
}

/// Checks that the claim is simulated under the entropy-minimal measure and
/// that this measure is the minimal martingale measure.
fn check_indifference_binding(claim: &dyn ClaimFunctional) -> Result<()> {
    let (model, measure) = claim
        .binding()
        .ok_or_else(|| Error::Incompatible { claim: claim.label(), reason: "indifference prices need a claim bound to a market model".into() })?;
    model.entropy_minimal_measure()?;
    if !matches!(measure, MeasureSpec::Minimal) {
        return Err(Error::Incompatible {
            claim: claim.label(),
            reason: format!("the claim must be simulated under the minimal martingale measure, not {}", measure.label()),
        });
    }
    Ok(())
}

pub fn indifference_analysis(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble, opts: &ExpansionOptions) -> Result<IndifferenceAnalysis> {
    check_indifference_binding(claim)?;
    let clark = clark_integrand(claim, ens, &opts.clark)?;
    let kw = clark.kw.ok_or_else(|| Error::Incompatible { claim: claim.label(), reason: "no traded/orthogonal split".into() })?;
    let meta = metadata(claim, ens, opts, Some(&clark));
    Ok(IndifferenceAnalysis { clark, kw, meta, zeroth: opts.zeroth })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid("alpha must be positive");
    }
    Ok(())
}

pub fn indifference_price_expansion(claim: &dyn ClaimFunctional, alpha: f64, ens: &BrownianEnsemble, opts: &ExpansionOptions) -> Result<ExpansionReport> {
    check_alpha(alpha)?;
    Ok(indifference_analysis(claim, ens, opts)?.expansion(alpha))
}

pub fn mean_variance_form(claim: &dyn ClaimFunctional, alpha: f64, ens: &BrownianEnsemble, opts: &ExpansionOptions) -> Result<ExpansionReport> {
    check_alpha(alpha)?;
    Ok(indifference_analysis(claim, ens, opts)?.mean_variance(alpha))
}

/// Reuses a fitted integrand on a different evaluation ensemble.
pub fn indifference_analysis_with_fit(claim: &dyn ClaimFunctional, fit: Arc<IntegrandFit>, ens: &BrownianEnsemble, opts: &ExpansionOptions) -> Result<IndifferenceAnalysis> {
    check_indifference_binding(claim)?;
    let clark = evaluate_integrand(claim, fit, ens, &opts.clark)?;
    let kw = clark.kw.ok_or_else(|| Error::Incompatible { claim: claim.label(), reason: "no traded/orthogonal split".into() })?;
    let meta = metadata(claim, ens, opts, Some(&clark));
    Ok(IndifferenceAnalysis { clark, kw, meta, zeroth: opts.zeroth })
}

/// E^{Q_a}[1/2 sum |q_a - q_b|^2 dt], simulating the model under Q_a.
pub fn relative_entropy_mc(model: &ItoMarketModel, measure_a: &MeasureSpec, measure_b: &MeasureSpec, ens: &BrownianEnsemble) -> Result<Estimate> {
    if ens.dim() != model.m {
        return Err(Error::ShapeMismatch(format!("ensemble dim {} vs model m {}", ens.dim(), model.m)));
    }
    let grid = ens.grid();
    let (d, m) = (model.d, model.m);
    let dt = grid.dt();
    let mo = reduce_paths(
        ens.n_paths(),
        Moments::default,
        || (ens.new_path(), CoefValues::new(d, m), vec![0.0; m]),
        |acc, (path, coef, qb), i| {
            ens.fill(i, path)?;
            let mut st = StateStepper::new(model, measure_a, grid)?;
            let mut total = 0.0;
            for k in 0..grid.n_steps() {
                let t = st.t();
                model.coefficients(t, &st.s, &st.y, coef)?;
                model.girsanov_integrand(measure_b, t, &st.s, &st.y, coef, qb)?;
                let qa = st.q()?;
                total += 0.5 * qa.iter().zip(qb.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * dt;
                st.step(path.increment(k))?;
            }
            acc.push(total);
            Ok(())
        },
    )?;
    Ok(mo.estimate())
}

/// Entropy of the minimal entropy martingale measure relative to P, expanded
/// in 1 - rho^2 around the minimal martingale measure.
pub fn memm_entropy_expansion(model: Arc<ItoMarketModel>, ens: &BrownianEnsemble) -> Result<ExpansionReport> {
    memm_entropy_expansion_with(model, ens, &ExpansionOptions::default())
}

/// As `memm_entropy_expansion`, with a choice of estimator for the
/// minimal-measure entropy.
pub fn memm_entropy_expansion_with(model: Arc<ItoMarketModel>, ens: &BrownianEnsemble, opts: &ExpansionOptions) -> Result<ExpansionReport> {
    let rho = match &model.family {
        Family::StochasticVol { rho, .. } => *rho,
        _ => {
            return Err(Error::Incompatible { claim: "memm_entropy_expansion".into(), reason: format!("{} is not a scalar stochastic volatility model", model.label) })
        }
    };
    let claim = mv_tradeoff_functional(model.clone(), MeasureSpec::Minimal)?;
    let grid = ens.grid();
    let pilot_n = ens.n_paths().min(4096);
    let pilot = ens.with_paths(pilot_n)?.moments(|p| claim.evaluate(p))?;
    let mu0 = pilot.mean;
    // half the trade-off, and its square about the pilot mean
    let (f, f2) = reduce_paths(
        ens.n_paths(),
        || (Moments::default(), Moments::default()),
        || (ens.new_path(), claim.new_observation(grid)),
        |acc, (path, obs), i| {
            ens.fill(i, path)?;
            claim.observe(path, Want::PAYOFF, obs)?;
            acc.0.push(obs.payoff);
            acc.1.push((obs.payoff - mu0).powi(2));
            Ok(())
        },
    )?;
    let c = 1.0 - rho * rho;
    let var = f.variance();
    let correction = Estimate::new(-0.5 * c * var, 0.5 * c * f2.se());
    let (zeroth, route) = match opts.zeroth {
        ZerothEstimator::Plain => (f.estimate(), None),
        ZerothEstimator::ClarkControlVariate if var > 0.0 => {
            let est = clark_integrand(&claim, ens, &opts.clark)?;
            (est.zeroth_cv, Some(format!("{:?}", est.route())))
        }
        ZerothEstimator::ClarkControlVariate => (f.estimate(), None),
    };
    let meta = ReportMetadata {
        claim: claim.label.clone(),
        model: Some(model.label.clone()),
        measure: Some(MeasureSpec::Minimal.label()),
        basis_degree: if route.is_some() { opts.clark.basis.degree } else { 0 },
        route,
        zeroth_estimator: opts.zeroth,
        seed: ens.seed(),
        n_paths: ens.n_paths(),
        n_steps: grid.n_steps(),
    };
    Ok(ExpansionReport::new(zeroth, correction, c, 2, meta))
}
