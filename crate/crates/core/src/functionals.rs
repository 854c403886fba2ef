//! Claim functionals on Wiener space: payoff, derivative kernel with
//! respect to each Brownian increment, and the per-step state summary used
//! to regress conditional expectations.

// rational-approximation coefficients are kept exactly as published
#![allow(clippy::excessive_precision)]

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::models::{Dynamics, FactorScale, Family, ItoMarketModel, MeasureSpec, StatePath, StateStepper};
use crate::wiener::{Path, TimeGrid};

/// What `observe` should compute besides the payoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Want {
    pub kernel: bool,
    pub summary: bool,
}

impl Want {
    pub const PAYOFF: Want = Want { kernel: false, summary: false };
    pub const ALL: Want = Want { kernel: true, summary: true };
    pub const KERNEL: Want = Want { kernel: true, summary: false };
    pub const SUMMARY: Want = Want { kernel: false, summary: true };
}

/// Per-path output of a claim.
#[derive(Debug, Clone)]
pub struct Observation {
    pub payoff: f64,
    /// Row k (m entries) is dF/d(dW_k): the kernel paired with phi(t_k) dt.
    pub kernel: Vec<f64>,
    /// Row k (summary_dim entries) is the state summary at t_k, k = 0..=n.
    pub summary: Vec<f64>,
    /// Simulated levels when the claim is bound to a model.
    pub states: Option<StatePath>,
}

/// Incremental state summary along one path, fed one increment at a time.
pub trait SummaryCursor {
    fn reset(&mut self);
    fn advance(&mut self, dw: &[f64]) -> Result<()>;
    fn write(&self, out: &mut [f64]);
    /// Model levels (S then Y) at the current step, when bound.
    fn levels(&self) -> Option<(&[f64], &[f64])> {
        None
    }
    /// Stock volatility at the current step, when bound.
    fn sigma(&mut self) -> Result<Option<&[f64]>> {
        Ok(None)
    }
}

/// A square-integrable path functional with an optional derivative kernel.
pub trait ClaimFunctional: Send + Sync {
    fn label(&self) -> String;
    fn brownian_dim(&self) -> usize;
    fn has_kernel(&self) -> bool;
    fn summary_dim(&self) -> usize;
    fn observe(&self, path: &Path, want: Want, obs: &mut Observation) -> Result<()>;
    fn summary_cursor(&self, grid: TimeGrid) -> Result<Box<dyn SummaryCursor + '_>>;

    /// Model and measure the claim is simulated under, if any.
    fn binding(&self) -> Option<(&Arc<ItoMarketModel>, &MeasureSpec)> {
        None
    }

    fn new_observation(&self, grid: TimeGrid) -> Observation {
        let n = grid.n_steps();
        let states = self.binding().map(|(m, _)| StatePath::new(m, grid));
        Observation {
            payoff: 0.0,
            kernel: vec![0.0; n * self.brownian_dim()],
            summary: vec![0.0; (n + 1) * self.summary_dim()],
            states,
        }
    }

    fn evaluate(&self, path: &Path) -> Result<f64> {
        let mut o = self.new_observation(path.grid);
        self.observe(path, Want::PAYOFF, &mut o)?;
        Ok(o.payoff)
    }
}

fn check_dim(path: &Path, m: usize) -> Result<()> {
    if path.dim != m {
        return Err(Error::ShapeMismatch(format!("path dim {} vs claim dim {m}", path.dim)));
    }
    Ok(())
}

/// Summary cursor for raw Brownian claims: the current level of W.
struct LevelCursor {
    w: Vec<f64>,
}

impl SummaryCursor for LevelCursor {
    fn reset(&mut self) {
        self.w.fill(0.0);
    }
    fn advance(&mut self, dw: &[f64]) -> Result<()> {
        for (w, d) in self.w.iter_mut().zip(dw) {
            *w += d;
        }
        Ok(())
    }
    fn write(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.w);
    }
}

fn write_levels(path: &Path, obs: &mut Observation) {
    obs.summary.copy_from_slice(&path.levels);
}

/// F(W) = c . W(T).
#[derive(Debug, Clone)]
pub struct LinearTerminal {
    pub c: Vec<f64>,
}

pub fn linear_terminal(c: Vec<f64>) -> Result<LinearTerminal> {
    if c.is_empty() {
        return invalid("coefficient vector must be nonempty");
    }
    Ok(LinearTerminal { c })
}

impl ClaimFunctional for LinearTerminal {
    fn label(&self) -> String {
        "linear_terminal".into()
    }
    fn brownian_dim(&self) -> usize {
        self.c.len()
    }
    fn has_kernel(&self) -> bool {
        true
    }
    fn summary_dim(&self) -> usize {
        self.c.len()
    }
    fn observe(&self, path: &Path, want: Want, obs: &mut Observation) -> Result<()> {
        check_dim(path, self.c.len())?;
        obs.payoff = self.c.iter().zip(path.terminal()).map(|(a, b)| a * b).sum();
        if want.kernel {
            for row in obs.kernel.chunks_mut(self.c.len()) {
                row.copy_from_slice(&self.c);
            }
        }
        if want.summary {
            write_levels(path, obs);
        }
        Ok(())
    }
    fn summary_cursor(&self, _: TimeGrid) -> Result<Box<dyn SummaryCursor + '_>> {
        Ok(Box::new(LevelCursor { w: vec![0.0; self.c.len()] }))
    }
}

/// F(W) = W(T)^2 in one dimension.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticTerminal;

pub fn quadratic_terminal(m: usize) -> Result<QuadraticTerminal> {
    if m != 1 {
        return invalid(format!("quadratic_terminal needs m = 1, got {m}"));
    }
    Ok(QuadraticTerminal)
}

impl ClaimFunctional for QuadraticTerminal {
    fn label(&self) -> String {
        "quadratic_terminal".into()
    }
    fn brownian_dim(&self) -> usize {
        1
    }
    fn has_kernel(&self) -> bool {
        true
    }
    fn summary_dim(&self) -> usize {
        1
    }
    fn observe(&self, path: &Path, want: Want, obs: &mut Observation) -> Result<()> {
        check_dim(path, 1)?;
        let w = path.terminal()[0];
        obs.payoff = w * w;
        if want.kernel {
            obs.kernel.fill(2.0 * w);
        }
        if want.summary {
            write_levels(path, obs);
        }
        Ok(())
    }
    fn summary_cursor(&self, _: TimeGrid) -> Result<Box<dyn SummaryCursor + '_>> {
        Ok(Box::new(LevelCursor { w: vec![0.0] }))
    }
}

/// F(W) = c.
#[derive(Debug, Clone, Copy)]
pub struct ConstantClaim {
    pub value: f64,
    pub dim: usize,
}

impl ClaimFunctional for ConstantClaim {
    fn label(&self) -> String {
        "constant".into()
    }
    fn brownian_dim(&self) -> usize {
        self.dim
    }
    fn has_kernel(&self) -> bool {
        true
    }
    fn summary_dim(&self) -> usize {
        self.dim
    }
    fn observe(&self, path: &Path, want: Want, obs: &mut Observation) -> Result<()> {
        check_dim(path, self.dim)?;
        obs.payoff = self.value;
        if want.kernel {
            obs.kernel.fill(0.0);
        }
        if want.summary {
            write_levels(path, obs);
        }
        Ok(())
    }
    fn summary_cursor(&self, _: TimeGrid) -> Result<Box<dyn SummaryCursor + '_>> {
        Ok(Box::new(LevelCursor { w: vec![0.0; self.dim] }))
    }
}

type PayoffFn = dyn Fn(&Path) -> f64 + Send + Sync;
type KernelFn = dyn Fn(&Path, &mut [f64]) + Send + Sync;

/// A raw Brownian functional given by closures; the kernel is optional.
#[derive(Clone)]
pub struct PathFunctional {
    pub label: String,
    pub dim: usize,
    pub payoff: Arc<PayoffFn>,
    pub kernel: Option<Arc<KernelFn>>,
}

impl ClaimFunctional for PathFunctional {
    fn label(&self) -> String {
        self.label.clone()
    }
    fn brownian_dim(&self) -> usize {
        self.dim
    }
    fn has_kernel(&self) -> bool {
        self.kernel.is_some()
    }
    fn summary_dim(&self) -> usize {
        self.dim
    }
    fn observe(&self, path: &Path, want: Want, obs: &mut Observation) -> Result<()> {
        check_dim(path, self.dim)?;
        obs.payoff = (self.payoff)(path);
        if want.kernel {
            match &self.kernel {
                Some(k) => k(path, &mut obs.kernel),
                None => return Err(Error::Incompatible { claim: self.label.clone(), reason: "no derivative kernel".into() }),
            }
        }
        if want.summary {
            write_levels(path, obs);
        }
        Ok(())
    }
    fn summary_cursor(&self, _: TimeGrid) -> Result<Box<dyn SummaryCursor + '_>> {
        Ok(Box::new(LevelCursor { w: vec![0.0; self.dim] }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

/// Payoffs of model-bound claims.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StatePayoff {
    /// (Y(T) - K)^+ or (K - Y(T))^+ on one factor.
    Vanilla { factor: usize, strike: f64, kind: OptionKind },
    /// max_k Y(t_k) - Y(T) on one factor.
    LookbackPut { factor: usize },
    /// Half the left-point sum of |lambda|^2 dt.
    MvTradeoff,
    /// S_i(T).
    AssetTerminal { asset: usize },
}

/// A payoff on simulated model states; the Brownian input is read as the
/// driving noise of `measure`.
#[derive(Clone)]
pub struct BoundClaim {
    pub label: String,
    pub model: Arc<ItoMarketModel>,
    pub measure: MeasureSpec,
    pub payoff: StatePayoff,
}

impl std::fmt::Debug for BoundClaim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BoundClaim({} on {:?} under {:?})", self.label, self.model, self.measure)
    }
}

fn check_factor(model: &ItoMarketModel, factor: usize, claim: &str) -> Result<()> {
    if factor >= model.n_factors() {
        return Err(Error::Incompatible {
            claim: claim.into(),
            reason: format!("model {} has {} factors, asked for factor {factor}", model.label, model.n_factors()),
        });
    }
    Ok(())
}

/// Call or put on the terminal value of a non-traded factor.
pub fn vanilla_on_factor(model: Arc<ItoMarketModel>, measure: MeasureSpec, factor: usize, strike: f64, kind: OptionKind) -> Result<BoundClaim> {
    if !(strike > 0.0) {
        return invalid("strike must be positive");
    }
    let label = match kind {
        OptionKind::Call => "call_on_factor",
        OptionKind::Put => "put_on_factor",
    };
    check_factor(&model, factor, label)?;
    Ok(BoundClaim { label: label.into(), model, measure, payoff: StatePayoff::Vanilla { factor, strike, kind } })
}

/// Floating-strike lookback put on a positive (relative-scale) factor,
/// maximum over grid points.
pub fn lookback_put_on_factor(model: Arc<ItoMarketModel>, measure: MeasureSpec, factor: usize) -> Result<BoundClaim> {
    check_factor(&model, factor, "lookback_put_on_factor")?;
    if model.scales[factor] != FactorScale::Relative {
        return Err(Error::Incompatible {
            claim: "lookback_put_on_factor".into(),
            reason: "the factor must be a positive (relative-scale) process".into(),
        });
    }
    Ok(BoundClaim { label: "lookback_put_on_factor".into(), model, measure, payoff: StatePayoff::LookbackPut { factor } })
}

/// Half the mean-variance trade-off, 0.5 * sum_k |lambda(t_k)|^2 dt.
pub fn mv_tradeoff_functional(model: Arc<ItoMarketModel>, measure: MeasureSpec) -> Result<BoundClaim> {
    Ok(BoundClaim { label: "mv_tradeoff".into(), model, measure, payoff: StatePayoff::MvTradeoff })
}

/// Terminal value of a traded asset.
pub fn asset_terminal(model: Arc<ItoMarketModel>, measure: MeasureSpec, asset: usize) -> Result<BoundClaim> {
    if asset >= model.d {
        return Err(Error::Incompatible { claim: "asset_terminal".into(), reason: format!("model has {} assets", model.d) });
    }
    Ok(BoundClaim { label: "asset_terminal".into(), model, measure, payoff: StatePayoff::AssetTerminal { asset } })
}

/// |lambda|^2 at one state, with a closed path for scalar stochastic
/// volatility models.
pub(crate) fn lambda_sq(model: &ItoMarketModel, t: f64, s: &[f64], y: &[f64]) -> Result<f64> {
    if let Family::StochasticVol { lambda, .. } = &model.family {
        let l = lambda(y[0]);
        return Ok(l * l);
    }
    Ok(model.market_price_of_risk(t, s, y)?.iter().map(|x| x * x).sum())
}

impl BoundClaim {
    fn extra_summary(&self) -> usize {
        match self.payoff {
            StatePayoff::LookbackPut { .. } | StatePayoff::MvTradeoff => 1,
            _ => 0,
        }
    }

    /// Gradient of the payoff with respect to the internal coordinates at
    /// every grid point, written into `grad` ((n+1) x m).
    fn payoff_and_gradient(&self, states: &StatePath, grid: TimeGrid, want_grad: bool, grad: &mut [f64]) -> Result<f64> {
        let model = &*self.model;
        let (d, m) = (model.d, model.m);
        let n = grid.n_steps();
        if want_grad {
            grad.fill(0.0);
        }
        // d(level)/d(internal coordinate)
        let jac = |k: usize, i: usize| -> f64 {
            if i < d {
                states.x[k * m + i]
            } else {
                match model.scales[i - d] {
                    FactorScale::Relative => states.x[k * m + i],
                    FactorScale::Absolute => 1.0,
                }
            }
        };
        match self.payoff {
            StatePayoff::Vanilla { factor, strike, kind } => {
                let y = states.y(n, factor);
                let (v, dv) = match kind {
                    OptionKind::Call => ((y - strike).max(0.0), if y > strike { 1.0 } else { 0.0 }),
                    OptionKind::Put => ((strike - y).max(0.0), if y < strike { -1.0 } else { 0.0 }),
                };
                if want_grad {
                    let i = d + factor;
                    grad[n * m + i] = dv * jac(n, i);
                }
                Ok(v)
            }
            StatePayoff::LookbackPut { factor } => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for k in 0..=n {
                    let y = states.y(k, factor);
                    if y > best {
                        best = y;
                        arg = k;
                    }
                }
                let i = d + factor;
                if want_grad {
                    grad[arg * m + i] += jac(arg, i);
                    grad[n * m + i] -= jac(n, i);
                }
                Ok(best - states.y(n, factor))
            }
            StatePayoff::AssetTerminal { asset } => {
                if want_grad {
                    grad[n * m + asset] = jac(n, asset);
                }
                Ok(states.s(n, asset))
            }
            StatePayoff::MvTradeoff => {
                let dt = grid.dt();
                let mut total = 0.0;
                let mut zp = vec![0.0; m];
                let mut sp = vec![0.0; d];
                let mut yp = vec![0.0; m - d];
                for k in 0..n {
                    let t = grid.t(k);
                    let st = states.state(k);
                    let l2 = lambda_sq(model, t, &st[..d], &st[d..])?;
                    total += 0.5 * l2 * dt;
                    if want_grad && !model.lambda_independent_of_factors {
                        for i in 0..m {
                            if i < d && matches!(model.family, Family::StochasticVol { .. }) {
                                continue;
                            }
                            let z = &states.z[k * m..(k + 1) * m];
                            let h = 1e-5 * z[i].abs().max(1.0);
                            let mut eval = |sign: f64| -> Result<f64> {
                                zp.copy_from_slice(z);
                                zp[i] += sign * h;
                                levels_from_z(model, &zp, &mut sp, &mut yp);
                                lambda_sq(model, t, &sp, &yp)
                            };
                            let up = eval(1.0)?;
                            let dn = eval(-1.0)?;
                            grad[k * m + i] = 0.5 * dt * (up - dn) / (2.0 * h);
                        }
                    }
                }
                Ok(total)
            }
        }
    }
}

fn levels_from_z(model: &ItoMarketModel, z: &[f64], s: &mut [f64], y: &mut [f64]) {
    for i in 0..model.d {
        s[i] = z[i].exp();
    }
    for j in 0..model.n_factors() {
        y[j] = match model.scales[j] {
            FactorScale::Relative => z[model.d + j].exp(),
            FactorScale::Absolute => z[model.d + j],
        };
    }
}

/// Pathwise adjoint of the Euler scheme: given dF/dz_k at every grid point,
/// returns dF/d(dW_k) for every step.
pub fn adjoint_kernel(
    model: &ItoMarketModel,
    measure: &MeasureSpec,
    path: &Path,
    states: &StatePath,
    grad: &[f64],
    kernel: &mut [f64],
) -> Result<()> {
    let m = model.m;
    let n = path.n_steps();
    let dt = path.grid.dt();
    let mut dy = Dynamics::new(model, measure);
    let constant = dy.is_constant();
    let mut drift = vec![0.0; m];
    let mut vol = vec![0.0; m * m];
    let mut d_up = vec![0.0; m];
    let mut v_up = vec![0.0; m * m];
    let mut d_dn = vec![0.0; m];
    let mut v_dn = vec![0.0; m * m];
    let mut zp = vec![0.0; m];
    let mut mu: Vec<f64> = grad[n * m..(n + 1) * m].to_vec();
    let mut next = vec![0.0; m];
    if constant {
        dy.at_levels(0.0, &model.s0, &model.y0, &mut drift, &mut vol)?;
    }
    for k in (0..n).rev() {
        let t = path.grid.t(k);
        let z = &states.z[k * m..(k + 1) * m];
        if !constant {
            dy.at_z(t, z, &mut drift, &mut vol)?;
        }
        // kernel_k = B_k^T mu_{k+1}
        for j in 0..m {
            kernel[k * m + j] = (0..m).map(|i| vol[i * m + j] * mu[i]).sum();
        }
        for l in 0..m {
            next[l] = grad[k * m + l] + mu[l];
        }
        if !constant {
            let dw = path.increment(k);
            for l in 0..m {
                let h = 1e-6 * z[l].abs().max(1.0);
                zp.copy_from_slice(z);
                zp[l] += h;
                dy.at_z(t, &zp, &mut d_up, &mut v_up)?;
                zp[l] -= 2.0 * h;
                dy.at_z(t, &zp, &mut d_dn, &mut v_dn)?;
                let mut acc = 0.0;
                for i in 0..m {
                    let mut dzi = (d_up[i] - d_dn[i]) * dt;
                    for j in 0..m {
                        dzi += (v_up[i * m + j] - v_dn[i * m + j]) * dw[j];
                    }
                    acc += mu[i] * dzi / (2.0 * h);
                }
                next[l] += acc;
            }
        }
        mu.copy_from_slice(&next);
    }
    Ok(())
}

/// Summary cursor of a bound claim: model state plus running quantities.
struct StateCursor<'a> {
    claim: &'a BoundClaim,
    stepper: StateStepper<'a>,
    running: f64,
}

impl StateCursor<'_> {
    fn init_running(&mut self) {
        self.running = match self.claim.payoff {
            StatePayoff::LookbackPut { factor } => self.stepper.y[factor],
            _ => 0.0,
        };
    }
}

impl SummaryCursor for StateCursor<'_> {
    fn reset(&mut self) {
        self.stepper.reset();
        self.init_running();
    }
    fn advance(&mut self, dw: &[f64]) -> Result<()> {
        if let StatePayoff::MvTradeoff = self.claim.payoff {
            let t = self.stepper.t();
            let l2 = lambda_sq(&self.claim.model, t, &self.stepper.s, &self.stepper.y)?;
            self.running += 0.5 * l2 * self.stepper.grid.dt();
        }
        self.stepper.step(dw)?;
        if let StatePayoff::LookbackPut { factor } = self.claim.payoff {
            self.running = self.running.max(self.stepper.y[factor]);
        }
        Ok(())
    }
    fn write(&self, out: &mut [f64]) {
        self.claim.write_summary(&self.stepper.s, &self.stepper.y, self.running, out);
    }
    fn levels(&self) -> Option<(&[f64], &[f64])> {
        Some((&self.stepper.s, &self.stepper.y))
    }
    fn sigma(&mut self) -> Result<Option<&[f64]>> {
        Ok(Some(self.stepper.sigma()?))
    }
}

impl BoundClaim {
    /// Standardisable state summary: log-levels of stocks and relative
    /// factors, levels of absolute factors, then the running maximum (log) or
    /// the running trade-off integral.
    fn write_summary(&self, s: &[f64], y: &[f64], running: f64, out: &mut [f64]) {
        let model = &*self.model;
        for i in 0..model.d {
            out[i] = (s[i] / model.s0[i]).ln();
        }
        for j in 0..model.n_factors() {
            out[model.d + j] = match model.scales[j] {
                FactorScale::Relative => (y[j] / model.y0[j]).ln(),
                FactorScale::Absolute => y[j] - model.y0[j],
            };
        }
        match self.payoff {
            StatePayoff::LookbackPut { factor } => out[model.m] = (running / model.y0[factor]).ln(),
            StatePayoff::MvTradeoff => out[model.m] = running,
            _ => {}
        }
    }
}

impl ClaimFunctional for BoundClaim {
    fn label(&self) -> String {
        self.label.clone()
    }
    fn brownian_dim(&self) -> usize {
        self.model.m
    }
    fn has_kernel(&self) -> bool {
        true
    }
    fn summary_dim(&self) -> usize {
        self.model.m + self.extra_summary()
    }
    fn binding(&self) -> Option<(&Arc<ItoMarketModel>, &MeasureSpec)> {
        Some((&self.model, &self.measure))
    }

    fn observe(&self, path: &Path, want: Want, obs: &mut Observation) -> Result<()> {
        let model = &*self.model;
        check_dim(path, model.m)?;
        let m = model.m;
        let n = path.n_steps();
        let mut states = obs.states.take().unwrap_or_else(|| StatePath::new(model, path.grid));
        let r = (|| {
            crate::models::simulate_path(model, &self.measure, path, true, &mut states)?;
            let mut grad = if want.kernel { vec![0.0; (n + 1) * m] } else { Vec::new() };
            obs.payoff = self.payoff_and_gradient(&states, path.grid, want.kernel, &mut grad)?;
            if want.kernel {
                adjoint_kernel(model, &self.measure, path, &states, &grad, &mut obs.kernel)?;
            }
            if want.summary {
                let sd = self.summary_dim();
                let d = model.d;
                let mut running = match self.payoff {
                    StatePayoff::LookbackPut { factor } => states.y(0, factor),
                    _ => 0.0,
                };
                for k in 0..=n {
                    if k > 0 {
                        match self.payoff {
                            StatePayoff::LookbackPut { factor } => running = running.max(states.y(k, factor)),
                            StatePayoff::MvTradeoff => {
                                let st = states.state(k - 1);
                                running += 0.5 * lambda_sq(model, path.grid.t(k - 1), &st[..d], &st[d..])? * path.grid.dt();
                            }
                            _ => {}
                        }
                    }
                    let st = states.state(k);
                    self.write_summary(&st[..d], &st[d..], running, &mut obs.summary[k * sd..(k + 1) * sd]);
                }
            }
            Ok(())
        })();
        obs.states = Some(states);
        r
    }

    fn summary_cursor(&self, grid: TimeGrid) -> Result<Box<dyn SummaryCursor + '_>> {
        let stepper = StateStepper::new(&self.model, &self.measure, grid)?;
        let mut c = StateCursor { claim: self, stepper, running: 0.0 };
        c.init_running();
        Ok(Box::new(c))
    }
}

/// Lognormal closed form for vanilla options on a factor whose log has drift
/// `nu - sigma^2/2` and volatility `sigma` (relative drift nu).
pub fn lognormal_vanilla_mean(y0: f64, nu: f64, sigma: f64, t: f64, strike: f64, kind: OptionKind) -> f64 {
    let fwd = y0 * (nu * t).exp();
    if sigma * t.sqrt() < 1e-14 {
        return match kind {
            OptionKind::Call => (fwd - strike).max(0.0),
            OptionKind::Put => (strike - fwd).max(0.0),
        };
    }
    let sd = sigma * t.sqrt();
    let d1 = ((fwd / strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    match kind {
        OptionKind::Call => fwd * norm_cdf(d1) - strike * norm_cdf(d2),
        OptionKind::Put => strike * norm_cdf(-d2) - fwd * norm_cdf(-d1),
    }
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function, relative accuracy about 1e-15 (W. J. Cody).
pub fn erfc(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 0.5 {
        1.0 - erf_small(x)
    } else if ax < 4.0 {
        let p = [
            3.004592610201616005e2,
            4.519189537118729422e2,
            3.393208167343436870e2,
            1.529892850469404039e2,
            4.316222722205673530e1,
            7.211758250883093659e0,
            5.641955174789739711e-1,
            -1.368648573827167067e-7,
        ];
        let q = [
            3.004592609569832933e2,
            7.909509253278980272e2,
            9.313540948506096211e2,
            6.389802644656311665e2,
            2.775854447439876434e2,
            7.700015293522947295e1,
            1.278272731962942351e1,
            1.0,
        ];
        let num = p.iter().rev().fold(0.0, |acc, c| acc * ax + c);
        let den = q.iter().rev().fold(0.0, |acc, c| acc * ax + c);
        let v = (-ax * ax).exp() * num / den;
        if x < 0.0 {
            2.0 - v
        } else {
            v
        }
    } else {
        let p = [-2.99610707703542174e-3, -4.94730910623250734e-2, -2.26956593539686930e-1, -2.78661308609647788e-1, -2.23192459734184686e-2];
        let q = [1.06209230528467918e-2, 1.91308926107829841e-1, 1.05167510706793207e0, 1.98733201817135256e0, 1.0];
        let z = 1.0 / (ax * ax);
        let num = p.iter().rev().fold(0.0, |acc, c| acc * z + c);
        let den = q.iter().rev().fold(0.0, |acc, c| acc * z + c);
        let v = (-ax * ax).exp() / ax * (1.0 / std::f64::consts::PI.sqrt() + z * num / den);
        if x < 0.0 {
            2.0 - v
        } else {
            v
        }
    }
}

fn erf_small(x: f64) -> f64 {
    let p = [3.209377589138469472562e3, 3.774852376853020208137e2, 1.138641541510501556495e2, 3.161123743870565596947e0, 1.857777061846031526730e-1];
    let q = [2.844236833439170622273e3, 1.282616526077372275645e3, 2.440246379344441733056e2, 2.360129095234412093499e1, 1.0];
    let z = x * x;
    let num = p.iter().rev().fold(0.0, |acc, c| acc * z + c);
    let den = q.iter().rev().fold(0.0, |acc, c| acc * z + c);
    x * num / den
}
