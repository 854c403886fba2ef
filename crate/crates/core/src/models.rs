//! Itô market models: traded assets S, non-traded factors Y, measure
//! parameterisation and Euler simulation under a chosen measure.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::stats::{reduce_paths, Moments};
use crate::wiener::{BrownianEnsemble, ControlProcess, Path, TimeGrid};

/// How a factor is stepped: `Relative` factors are positive with relative
/// coefficients (dY = Y (mu dt + beta dW)) and are simulated in log space;
/// `Absolute` factors use level coefficients and level Euler steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FactorScale {
    Relative,
    Absolute,
}

/// Coefficient maps of the market. Stocks always follow
/// dS_i = S_i (mu_i dt + sigma_i . dW).
pub trait Coefficients: Send + Sync {
    /// d-vector of stock drifts.
    fn stock_drift(&self, t: f64, s: &[f64], y: &[f64], out: &mut [f64]);
    /// d x m stock volatility, row-major.
    fn stock_vol(&self, t: f64, s: &[f64], y: &[f64], out: &mut [f64]);
    /// (m-d)-vector of factor drifts (relative or absolute per factor scale).
    fn factor_drift(&self, t: f64, s: &[f64], y: &[f64], out: &mut [f64]);
    /// (m-d) x m factor volatility, row-major.
    fn factor_vol(&self, t: f64, s: &[f64], y: &[f64], out: &mut [f64]);
}

type CoefFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Coefficients given by four closures.
#[derive(Clone)]
pub struct CoefficientMaps {
    pub stock_drift: Arc<CoefFn>,
    pub stock_vol: Arc<CoefFn>,
    pub factor_drift: Arc<CoefFn>,
    pub factor_vol: Arc<CoefFn>,
}

impl Coefficients for CoefficientMaps {
    fn stock_drift(&self, t: f64, s: &[f64], y: &[f64], out: &mut [f64]) {
        (self.stock_drift)(t, s, y, out)
    }
    fn stock_vol(&self, t: f64, s: &[f64], y: &[f64], out: &mut [f64]) {
        (self.stock_vol)(t, s, y, out)
    }
    fn factor_drift(&self, t: f64, s: &[f64], y: &[f64], out: &mut [f64]) {
        (self.factor_drift)(t, s, y, out)
    }
    fn factor_vol(&self, t: f64, s: &[f64], y: &[f64], out: &mut [f64]) {
        (self.factor_vol)(t, s, y, out)
    }
}

/// Constant-parameter 2D basis risk inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BasisRiskParams {
    pub mu_s: f64,
    pub sigma_s: f64,
    pub mu_y: f64,
    pub sigma_y: f64,
    pub rho: f64,
    pub s0: f64,
    pub y0: f64,
}

impl BasisRiskParams {
    pub fn lambda_s(&self) -> f64 {
        self.mu_s / self.sigma_s
    }

    /// Relative drift of Y under the minimal martingale measure.
    pub fn nu(&self) -> f64 {
        self.mu_y - self.rho * self.lambda_s() * self.sigma_y
    }
}

type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Scalar stochastic volatility inputs: dS = sigma(Y) S (lambda(Y) dt + dW^S),
/// dY = a(Y) dt + b(Y) dW^Y, corr(W^S, W^Y) = rho.
#[derive(Clone)]
pub struct StochasticVolParams {
    pub sigma: Arc<ScalarFn>,
    pub lambda: Arc<ScalarFn>,
    pub a: Arc<ScalarFn>,
    pub b: Arc<ScalarFn>,
    pub rho: f64,
    pub s0: f64,
    pub y0: f64,
    /// Set when lambda does not depend on y.
    pub constant_lambda: bool,
}

/// Ornstein-Uhlenbeck factor with affine market price of risk
/// lambda(y) = lambda0 + c y and constant stock volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuVolParams {
    pub kappa: f64,
    pub theta: f64,
    pub beta: f64,
    pub lambda0: f64,
    pub c: f64,
    pub sigma: f64,
    pub rho: f64,
    pub s0: f64,
    pub y0: f64,
}

/// Which family built a model; oracles use it to recover closed forms.
#[derive(Clone)]
pub enum Family {
    BasisRisk2d(BasisRiskParams),
    MultiAssetBasisRisk,
    StochasticCorrelation,
    StochasticVol { rho: f64, lambda: Arc<ScalarFn>, ou: Option<OuVolParams> },
    Custom,
}

/// An Itô market with d traded assets and m-d non-traded factors driven by
/// an m-dimensional Brownian motion.
#[derive(Clone)]
pub struct ItoMarketModel {
    pub label: String,
    pub d: usize,
    pub m: usize,
    pub s0: Vec<f64>,
    pub y0: Vec<f64>,
    pub scales: Vec<FactorScale>,
    coeffs: Arc<dyn Coefficients>,
    /// No dependence on time or state.
    pub constant_coefficients: bool,
    /// The stocks' market price of risk does not depend on the factors, so
    /// the minimal martingale measure is also entropy-minimal.
    pub lambda_independent_of_factors: bool,
    pub family: Family,
}

impl std::fmt::Debug for ItoMarketModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ItoMarketModel({}, d={}, m={})", self.label, self.d, self.m)
    }
}

type GammaFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Girsanov integrand q = lambda + N gamma, with N an orthonormal null-space
/// basis of sigma. `Physical` is q = 0 (the reference measure itself).
#[derive(Clone)]
pub enum MeasureSpec {
    Physical,
    Minimal,
    ConstantGamma(Vec<f64>),
    Gamma { label: String, f: Arc<GammaFn> },
}

impl std::fmt::Debug for MeasureSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl MeasureSpec {
    pub fn label(&self) -> String {
        match self {
            MeasureSpec::Physical => "physical".into(),
            MeasureSpec::Minimal => "minimal".into(),
            MeasureSpec::ConstantGamma(g) => format!("gamma={g:?}"),
            MeasureSpec::Gamma { label, .. } => label.clone(),
        }
    }

    pub fn gamma_fn<F>(label: &str, f: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        MeasureSpec::Gamma { label: label.into(), f: Arc::new(f) }
    }

    pub fn is_state_independent(&self) -> bool {
        !matches!(self, MeasureSpec::Gamma { .. })
    }

    pub fn is_martingale_measure(&self) -> bool {
        !matches!(self, MeasureSpec::Physical)
    }
}

/// Coefficient values at one (t, state).
#[derive(Debug, Clone)]
pub struct CoefValues {
    pub mu_s: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub beta: Vec<f64>,
}

impl CoefValues {
    pub fn new(d: usize, m: usize) -> Self {
        Self { mu_s: vec![0.0; d], sigma: vec![0.0; d * m], mu_y: vec![0.0; m - d], beta: vec![0.0; (m - d) * m] }
    }
}

/// Reusable buffers for per-step linear algebra.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    gram: Vec<f64>,
    h: Vec<f64>,
    nb: Vec<f64>,
    gamma: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(d: usize, m: usize) -> Self {
        Self { gram: vec![0.0; d * d], h: vec![0.0; d], nb: vec![0.0; m * (m - d)], gamma: vec![0.0; m - d] }
    }
}

impl ItoMarketModel {
    pub fn new(
        label: &str,
        d: usize,
        m: usize,
        s0: Vec<f64>,
        y0: Vec<f64>,
        scales: Vec<FactorScale>,
        coeffs: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if d == 0 || d >= m {
            return invalid(format!("need 0 < d < m, got d={d}, m={m}"));
        }
        if s0.len() != d || y0.len() != m - d || scales.len() != m - d {
            return Err(Error::ShapeMismatch("initial state or factor scales".into()));
        }
        if s0.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return invalid("initial stock prices must be positive");
        }
        for (y, sc) in y0.iter().zip(&scales) {
            if *sc == FactorScale::Relative && !(*y > 0.0) {
                return invalid("relative factors need a positive initial value");
            }
            if !y.is_finite() {
                return invalid("initial factor value must be finite");
            }
        }
        let model = Self {
            label: label.into(),
            d,
            m,
            s0,
            y0,
            scales,
            coeffs,
            constant_coefficients: false,
            lambda_independent_of_factors: false,
            family: Family::Custom,
        };
        model.check_initial()?;
        Ok(model)
    }

    fn check_initial(&self) -> Result<()> {
        let mut c = CoefValues::new(self.d, self.m);
        self.coefficients(0.0, &self.s0, &self.y0, &mut c)?;
        let mut g = vec![0.0; self.d * self.d];
        linalg::factor_gram(&c.sigma, self.d, self.m, 0.0, &mut g)
    }

    pub fn coefficients(&self, t: f64, s: &[f64], y: &[f64], out: &mut CoefValues) -> Result<()> {
        self.coeffs.stock_drift(t, s, y, &mut out.mu_s);
        self.coeffs.stock_vol(t, s, y, &mut out.sigma);
        self.coeffs.factor_drift(t, s, y, &mut out.mu_y);
        self.coeffs.factor_vol(t, s, y, &mut out.beta);
        let all = out.mu_s.iter().chain(&out.sigma).chain(&out.mu_y).chain(&out.beta);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("coefficients of {} at t={t}, s={s:?}, y={y:?}", self.label)));
        }
        Ok(())
    }

    pub fn n_factors(&self) -> usize {
        self.m - self.d
    }

    /// lambda = sigma^T (sigma sigma^T)^{-1} mu^S.
    pub fn market_price_of_risk(&self, t: f64, s: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut c = CoefValues::new(self.d, self.m);
        self.coefficients(t, s, y, &mut c)?;
        let mut out = vec![0.0; self.m];
        linalg::min_norm_solve(&c.sigma, self.d, self.m, &c.mu_s, t, &mut out)?;
        Ok(out)
    }

    /// Orthogonal projection of `raw` onto the null space of sigma(t, state).
    pub fn project_admissible(&self, t: f64, s: &[f64], y: &[f64], raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.m {
            return Err(Error::ShapeMismatch("raw control length".into()));
        }
        let mut c = CoefValues::new(self.d, self.m);
        self.coefficients(t, s, y, &mut c)?;
        let mut out = vec![0.0; self.m];
        linalg::project_null(&c.sigma, self.d, self.m, raw, t, &mut out)?;
        Ok(out)
    }

    /// Orthonormal null-space basis of sigma(t, state), columns concatenated.
    pub fn null_basis(&self, t: f64, s: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut c = CoefValues::new(self.d, self.m);
        self.coefficients(t, s, y, &mut c)?;
        let mut out = vec![0.0; self.m * (self.m - self.d)];
        linalg::null_basis(&c.sigma, self.d, self.m, t, &mut out)?;
        Ok(out)
    }

    /// Girsanov integrand of a measure at (t, state), given coefficients.
    pub fn girsanov_integrand(&self, measure: &MeasureSpec, t: f64, s: &[f64], y: &[f64], c: &CoefValues, out: &mut [f64]) -> Result<()> {
        let mut ws = Scratch::new(self.d, self.m);
        self.girsanov_integrand_with(measure, t, s, y, c, out, &mut ws)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn girsanov_integrand_with(
        &self,
        measure: &MeasureSpec,
        t: f64,
        s: &[f64],
        y: &[f64],
        c: &CoefValues,
        out: &mut [f64],
        ws: &mut Scratch,
    ) -> Result<()> {
        let (d, m) = (self.d, self.m);
        if let MeasureSpec::Physical = measure {
            out.fill(0.0);
            return Ok(());
        }
        linalg::min_norm_solve_with(&c.sigma, d, m, &c.mu_s, t, out, &mut ws.gram, &mut ws.h)?;
        match measure {
            MeasureSpec::Minimal | MeasureSpec::Physical => return Ok(()),
            MeasureSpec::ConstantGamma(g) => {
                if g.len() != m - d {
                    return Err(Error::ShapeMismatch(format!("gamma has {} entries, expected {}", g.len(), m - d)));
                }
                ws.gamma.copy_from_slice(g);
            }
            MeasureSpec::Gamma { f, .. } => f(t, s, y, &mut ws.gamma),
        }
        linalg::null_basis(&c.sigma, d, m, t, &mut ws.nb)?;
        for j in 0..m - d {
            let g = ws.gamma[j];
            for k in 0..m {
                out[k] += g * ws.nb[j * m + k];
            }
        }
        Ok(())
    }

    pub fn q_at(&self, measure: &MeasureSpec, t: f64, s: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut c = CoefValues::new(self.d, self.m);
        self.coefficients(t, s, y, &mut c)?;
        let mut q = vec![0.0; self.m];
        self.girsanov_integrand(measure, t, s, y, &c, &mut q)?;
        Ok(q)
    }

    /// The entropy-minimal measure when it is known to coincide with the
    /// minimal martingale measure.
    pub fn entropy_minimal_measure(&self) -> Result<MeasureSpec> {
        if self.lambda_independent_of_factors {
            Ok(MeasureSpec::Minimal)
        } else {
            Err(Error::Incompatible {
                claim: self.label.clone(),
                reason: "the stocks' market price of risk depends on the factors; the entropy-minimal measure is not the minimal martingale measure".into(),
            })
        }
    }
}

/// Internal coordinates: log S, then log Y (relative) or Y (absolute).
fn to_levels(model: &ItoMarketModel, z: &[f64], s: &mut [f64], y: &mut [f64]) {
    for i in 0..model.d {
        s[i] = z[i].exp();
    }
    for j in 0..model.m - model.d {
        y[j] = match model.scales[j] {
            FactorScale::Relative => z[model.d + j].exp(),
            FactorScale::Absolute => z[model.d + j],
        };
    }
}

/// Drift and volatility of the internal coordinates under a measure, with
/// reusable buffers.
pub struct Dynamics<'a> {
    pub model: &'a ItoMarketModel,
    pub measure: &'a MeasureSpec,
    pub coef: CoefValues,
    pub q: Vec<f64>,
    ws: Scratch,
    s: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> Dynamics<'a> {
    pub fn new(model: &'a ItoMarketModel, measure: &'a MeasureSpec) -> Self {
        let (d, m) = (model.d, model.m);
        Self {
            model,
            measure,
            coef: CoefValues::new(d, m),
            q: vec![0.0; m],
            ws: Scratch::new(d, m),
            s: vec![0.0; d],
            y: vec![0.0; m - d],
        }
    }

    /// True when drift and volatility of the internal coordinates do not
    /// depend on time or state.
    pub fn is_constant(&self) -> bool {
        self.model.constant_coefficients && self.measure.is_state_independent()
    }

    pub fn at_levels(&mut self, t: f64, s: &[f64], y: &[f64], drift: &mut [f64], vol: &mut [f64]) -> Result<()> {
        let (d, m) = (self.model.d, self.model.m);
        self.model.coefficients(t, s, y, &mut self.coef)?;
        self.model.girsanov_integrand_with(self.measure, t, s, y, &self.coef, &mut self.q, &mut self.ws)?;
        let c = &self.coef;
        let q = &self.q;
        for i in 0..d {
            let row = &c.sigma[i * m..(i + 1) * m];
            let sq: f64 = row.iter().map(|x| x * x).sum();
            let sq_dot: f64 = row.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            drift[i] = c.mu_s[i] - sq_dot - 0.5 * sq;
            vol[i * m..(i + 1) * m].copy_from_slice(row);
        }
        for j in 0..m - d {
            let row = &c.beta[j * m..(j + 1) * m];
            let bq: f64 = row.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            drift[d + j] = c.mu_y[j] - bq;
            if self.model.scales[j] == FactorScale::Relative {
                drift[d + j] -= 0.5 * row.iter().map(|x| x * x).sum::<f64>();
            }
            vol[(d + j) * m..(d + j + 1) * m].copy_from_slice(row);
        }
        Ok(())
    }

    pub fn at_z(&mut self, t: f64, z: &[f64], drift: &mut [f64], vol: &mut [f64]) -> Result<()> {
        let mut s = std::mem::take(&mut self.s);
        let mut y = std::mem::take(&mut self.y);
        to_levels(self.model, z, &mut s, &mut y);
        let r = self.at_levels(t, &s, &y, drift, vol);
        self.s = s;
        self.y = y;
        r
    }
}

/// Step-by-step Euler simulation of the internal coordinates under a measure,
/// driven by increments of that measure's Brownian motion.
pub struct StateStepper<'a> {
    pub dynamics: Dynamics<'a>,
    pub grid: TimeGrid,
    pub k: usize,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    drift: Vec<f64>,
    vol: Vec<f64>,
    fresh: bool,
    cached: bool,
}

impl<'a> StateStepper<'a> {
    pub fn new(model: &'a ItoMarketModel, measure: &'a MeasureSpec, grid: TimeGrid) -> Result<Self> {
        let m = model.m;
        let dynamics = Dynamics::new(model, measure);
        let cached = dynamics.is_constant();
        let mut st = Self {
            dynamics,
            grid,
            k: 0,
            z: vec![0.0; m],
            s: model.s0.clone(),
            y: model.y0.clone(),
            drift: vec![0.0; m],
            vol: vec![0.0; m * m],
            fresh: false,
            cached,
        };
        st.reset();
        if cached {
            st.fresh = false;
            st.refresh()?;
        }
        Ok(st)
    }

    pub fn model(&self) -> &'a ItoMarketModel {
        self.dynamics.model
    }

    pub fn reset(&mut self) {
        let model = self.dynamics.model;
        self.k = 0;
        for i in 0..model.d {
            self.z[i] = model.s0[i].ln();
        }
        for j in 0..model.n_factors() {
            self.z[model.d + j] = match model.scales[j] {
                FactorScale::Relative => model.y0[j].ln(),
                FactorScale::Absolute => model.y0[j],
            };
        }
        self.s.copy_from_slice(&model.s0);
        self.y.copy_from_slice(&model.y0);
        self.fresh = self.cached;
    }

    pub fn t(&self) -> f64 {
        self.grid.t(self.k)
    }

    fn refresh(&mut self) -> Result<()> {
        if !self.fresh {
            let t = self.t();
            self.dynamics.at_levels(t, &self.s, &self.y, &mut self.drift, &mut self.vol)?;
            self.fresh = true;
        }
        Ok(())
    }

    /// Drift and volatility (m x m) of the internal coordinates at the
    /// current state.
    pub fn current_drift_vol(&mut self) -> Result<(&[f64], &[f64])> {
        self.refresh()?;
        Ok((&self.drift, &self.vol))
    }

    /// Stock volatility at the current state.
    pub fn sigma(&mut self) -> Result<&[f64]> {
        self.refresh()?;
        Ok(&self.dynamics.coef.sigma)
    }

    /// Girsanov integrand at the current state.
    pub fn q(&mut self) -> Result<&[f64]> {
        self.refresh()?;
        Ok(&self.dynamics.q)
    }

    pub fn step(&mut self, dw: &[f64]) -> Result<()> {
        let model = self.dynamics.model;
        let m = model.m;
        self.refresh()?;
        let dt = self.grid.dt();
        for i in 0..m {
            let mut x = self.z[i] + self.drift[i] * dt;
            for j in 0..m {
                x += self.vol[i * m + j] * dw[j];
            }
            self.z[i] = x;
        }
        self.k += 1;
        self.fresh = self.cached;
        to_levels(model, &self.z, &mut self.s, &mut self.y);
        if self.z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("state of {} at step {}", model.label, self.k)));
        }
        Ok(())
    }
}

/// Simulated trajectory of one path: internal coordinates and levels
/// (S then Y) on every grid point.
#[derive(Debug, Clone)]
pub struct StatePath {
    pub d: usize,
    pub m: usize,
    pub z: Vec<f64>,
    pub x: Vec<f64>,
}

impl StatePath {
    pub fn new(model: &ItoMarketModel, grid: TimeGrid) -> Self {
        let n = grid.n_steps() + 1;
        Self { d: model.d, m: model.m, z: vec![0.0; n * model.m], x: vec![0.0; n * model.m] }
    }

    pub fn n_points(&self) -> usize {
        self.x.len() / self.m
    }

    pub fn s(&self, k: usize, i: usize) -> f64 {
        self.x[k * self.m + i]
    }

    pub fn y(&self, k: usize, j: usize) -> f64 {
        self.x[k * self.m + self.d + j]
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.x[k * self.m..(k + 1) * self.m]
    }
}

/// Simulates the model along the increments of `path`, read as increments of
/// the measure's Brownian motion. When `check` is set and the path carries a
/// shift, every shift step must satisfy |sigma phi| <= 1e-8.
pub fn simulate_path(model: &ItoMarketModel, measure: &MeasureSpec, path: &Path, check: bool, out: &mut StatePath) -> Result<()> {
    let m = model.m;
    if path.dim != m {
        return Err(Error::ShapeMismatch(format!("path dim {} vs model m {}", path.dim, m)));
    }
    let mut st = StateStepper::new(model, measure, path.grid)?;
    let check = check && !path.last_control.is_empty();
    let d = model.d;
    for k in 0..=path.n_steps() {
        out.z[k * m..(k + 1) * m].copy_from_slice(&st.z);
        out.x[k * m..k * m + d].copy_from_slice(&st.s);
        out.x[k * m + d..(k + 1) * m].copy_from_slice(&st.y);
        if k == path.n_steps() {
            break;
        }
        if check {
            let phi = &path.last_control[k * m..(k + 1) * m];
            let sigma = st.sigma()?;
            let mut r = vec![0.0; d];
            linalg::mat_vec(sigma, d, m, phi, &mut r);
            let res = linalg::norm(&r);
            if res > 1e-8 {
                return Err(Error::NotAdmissible { step: k, residual: res });
            }
        }
        st.step(path.increment(k))?;
    }
    Ok(())
}

/// A Brownian ensemble (possibly shifted) paired with a model and measure.
#[derive(Clone, Debug)]
pub struct StateEnsemble {
    pub ensemble: BrownianEnsemble,
    pub model: Arc<ItoMarketModel>,
    pub measure: MeasureSpec,
}

impl StateEnsemble {
    pub fn new_buffers(&self) -> (Path, StatePath) {
        (self.ensemble.new_path(), StatePath::new(&self.model, self.ensemble.grid()))
    }

    pub fn fill(&self, i: usize, buf: &mut (Path, StatePath)) -> Result<()> {
        self.ensemble.fill(i, &mut buf.0)?;
        simulate_path(&self.model, &self.measure, &buf.0, true, &mut buf.1)
    }

    pub fn n_paths(&self) -> usize {
        self.ensemble.n_paths()
    }

    pub fn moments<F>(&self, f: F) -> Result<Moments>
    where
        F: Fn(&Path, &StatePath) -> Result<f64> + Sync,
    {
        reduce_paths(self.n_paths(), Moments::default, || self.new_buffers(), |acc, buf, i| {
            self.fill(i, buf)?;
            acc.push(f(&buf.0, &buf.1)?);
            Ok(())
        })
    }
}

/// Simulates (S, Y) under `measure`, with the factor drift shifted by
/// eps * phi when a perturbation is given. The perturbation must be
/// admissible; this is checked on every path.
pub fn simulate_state(
    model: Arc<ItoMarketModel>,
    measure: MeasureSpec,
    perturbation: Option<(&ControlProcess, f64)>,
    ensemble: &BrownianEnsemble,
) -> Result<StateEnsemble> {
    if ensemble.dim() != model.m {
        return Err(Error::ShapeMismatch(format!("ensemble dim {} vs model m {}", ensemble.dim(), model.m)));
    }
    let ensemble = match perturbation {
        Some((phi, eps)) => ensemble.shifted(phi, eps)?,
        None => ensemble.clone(),
    };
    Ok(StateEnsemble { ensemble, model, measure })
}

/// Terminal density dQ/dP on a path simulated under the physical measure.
pub fn density_terminal(model: &ItoMarketModel, measure: &MeasureSpec, path: &Path, states: &StatePath) -> Result<f64> {
    let m = model.m;
    let dt = path.grid.dt();
    let mut dy = Dynamics::new(model, measure);
    let mut drift = vec![0.0; m];
    let mut vol = vec![0.0; m * m];
    let mut log_z = 0.0;
    for k in 0..path.n_steps() {
        let st = states.state(k);
        dy.at_levels(path.grid.t(k), &st[..model.d], &st[model.d..], &mut drift, &mut vol)?;
        let q = &dy.q;
        let dot: f64 = q.iter().zip(path.increment(k)).map(|(a, b)| a * b).sum();
        let sq: f64 = q.iter().map(|x| x * x).sum();
        log_z += -dot - 0.5 * sq * dt;
    }
    Ok(log_z.exp())
}

fn check_rho_open(rho: f64) -> Result<()> {
    if !(rho.abs() < 1.0) {
        return invalid(format!("correlation must satisfy |rho| < 1, got {rho}"));
    }
    Ok(())
}

/// Correlated lognormal traded asset S and non-traded asset Y.
pub fn basis_risk_2d(p: BasisRiskParams) -> Result<ItoMarketModel> {
    if !(p.sigma_s > 0.0) {
        return invalid("sigma_s must be positive");
    }
    if !(p.sigma_y >= 0.0) {
        return invalid("sigma_y must be nonnegative");
    }
    check_rho_open(p.rho)?;
    let rb = (1.0 - p.rho * p.rho).sqrt();
    let maps = CoefficientMaps {
        stock_drift: Arc::new(move |_, _, _, o| o[0] = p.mu_s),
        stock_vol: Arc::new(move |_, _, _, o| {
            o[0] = p.sigma_s;
            o[1] = 0.0
        }),
        factor_drift: Arc::new(move |_, _, _, o| o[0] = p.mu_y),
        factor_vol: Arc::new(move |_, _, _, o| {
            o[0] = p.sigma_y * p.rho;
            o[1] = p.sigma_y * rb
        }),
    };
    let mut model = ItoMarketModel::new("basis_risk_2d", 1, 2, vec![p.s0], vec![p.y0], vec![FactorScale::Relative], Arc::new(maps))?;
    model.constant_coefficients = true;
    model.lambda_independent_of_factors = true;
    model.family = Family::BasisRisk2d(p);
    Ok(model)
}

/// Constant-parameter multi-asset basis risk: sigma = (sigma_s, 0) with an
/// invertible d x d block, non-traded factors with relative coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiAssetParams {
    pub mu_s: Vec<f64>,
    /// d x d, row-major.
    pub sigma_s: Vec<f64>,
    pub mu_y: Vec<f64>,
    /// (m-d) x m, row-major.
    pub beta: Vec<f64>,
    pub s0: Vec<f64>,
    pub y0: Vec<f64>,
}

pub fn multi_asset_basis_risk(p: MultiAssetParams) -> Result<ItoMarketModel> {
    let d = p.mu_s.len();
    let f = p.mu_y.len();
    let m = d + f;
    if p.sigma_s.len() != d * d || p.beta.len() != f * m {
        return Err(Error::ShapeMismatch("sigma_s must be d x d and beta (m-d) x m".into()));
    }
    let mut sigma = vec![0.0; d * m];
    for i in 0..d {
        sigma[i * m..i * m + d].copy_from_slice(&p.sigma_s[i * d..(i + 1) * d]);
    }
    let pc = p.clone();
    let maps = CoefficientMaps {
        stock_drift: Arc::new(move |_, _, _, o| o.copy_from_slice(&pc.mu_s)),
        stock_vol: Arc::new(move |_, _, _, o| o.copy_from_slice(&sigma)),
        factor_drift: {
            let mu_y = p.mu_y.clone();
            Arc::new(move |_, _, _, o| o.copy_from_slice(&mu_y))
        },
        factor_vol: {
            let beta = p.beta.clone();
            Arc::new(move |_, _, _, o| o.copy_from_slice(&beta))
        },
    };
    let mut model = ItoMarketModel::new("multi_asset_basis_risk", d, m, p.s0, p.y0, vec![FactorScale::Relative; f], Arc::new(maps))?;
    model.constant_coefficients = true;
    model.lambda_independent_of_factors = true;
    model.family = Family::MultiAssetBasisRisk;
    Ok(model)
}

/// Basis risk with a mean-reverting stochastic correlation factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StochasticCorrelationParams {
    pub lambda_s: f64,
    pub sigma_s: f64,
    pub mu_y: f64,
    pub sigma_y: f64,
    pub rho0: f64,
    /// Mean reversion speed and level of rho.
    pub kappa: f64,
    pub theta: f64,
    /// Volatility scale of rho; the diffusion is nu (1 - rho^2).
    pub nu: f64,
    pub delta: f64,
    pub eta: f64,
    pub s0: f64,
    pub y0: f64,
}

/// Clamp applied to the correlation state before it enters any coefficient.
pub const RHO_CLAMP: f64 = 1.0 - 1e-6;

pub fn clamp_rho(r: f64) -> f64 {
    r.clamp(-RHO_CLAMP, RHO_CLAMP)
}

pub fn stochastic_correlation_model(p: StochasticCorrelationParams) -> Result<ItoMarketModel> {
    if !(p.sigma_s > 0.0 && p.sigma_y >= 0.0) {
        return invalid("volatilities must be positive");
    }
    check_rho_open(p.rho0)?;
    if p.delta * p.delta + p.eta * p.eta > 1.0 {
        return invalid("delta^2 + eta^2 must not exceed 1");
    }
    let rest = (1.0 - p.delta * p.delta - p.eta * p.eta).max(0.0).sqrt();
    let maps = CoefficientMaps {
        stock_drift: Arc::new(move |_, _, _, o| o[0] = p.sigma_s * p.lambda_s),
        stock_vol: Arc::new(move |_, _, _, o| {
            o[0] = p.sigma_s;
            o[1] = 0.0;
            o[2] = 0.0;
        }),
        factor_drift: Arc::new(move |_, _, y, o| {
            o[0] = p.mu_y;
            o[1] = p.kappa * (p.theta - clamp_rho(y[1]));
        }),
        factor_vol: Arc::new(move |_, _, y, o| {
            let r = clamp_rho(y[1]);
            let rb = (1.0 - r * r).sqrt();
            o[0] = p.sigma_y * r;
            o[1] = p.sigma_y * rb;
            o[2] = 0.0;
            let h = p.nu * (1.0 - r * r);
            o[3] = h * p.delta;
            o[4] = h * p.eta;
            o[5] = h * rest;
        }),
    };
    let mut model = ItoMarketModel::new(
        "stochastic_correlation",
        1,
        3,
        vec![p.s0],
        vec![p.y0, p.rho0],
        vec![FactorScale::Relative, FactorScale::Absolute],
        Arc::new(maps),
    )?;
    model.lambda_independent_of_factors = true;
    model.family = Family::StochasticCorrelation;
    Ok(model)
}

/// Scalar stochastic volatility model with a level-stepped factor Y.
pub fn stochastic_vol_model(p: StochasticVolParams) -> Result<ItoMarketModel> {
    if !(p.rho.abs() <= 1.0) {
        return invalid(format!("correlation must satisfy |rho| <= 1, got {}", p.rho));
    }
    let rb = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let rho = p.rho;
    let (sig, lam, a, b) = (p.sigma.clone(), p.lambda.clone(), p.a.clone(), p.b.clone());
    let sig2 = p.sigma.clone();
    let maps = CoefficientMaps {
        stock_drift: Arc::new(move |_, _, y, o| o[0] = sig(y[0]) * lam(y[0])),
        stock_vol: Arc::new(move |_, _, y, o| {
            o[0] = sig2(y[0]);
            o[1] = 0.0
        }),
        factor_drift: Arc::new(move |_, _, y, o| o[0] = a(y[0])),
        factor_vol: Arc::new(move |_, _, y, o| {
            let by = b(y[0]);
            o[0] = by * rho;
            o[1] = by * rb;
        }),
    };
    let mut model = ItoMarketModel::new("stochastic_vol", 1, 2, vec![p.s0], vec![p.y0], vec![FactorScale::Absolute], Arc::new(maps))?;
    model.lambda_independent_of_factors = p.constant_lambda;
    model.family = Family::StochasticVol { rho: p.rho, lambda: p.lambda.clone(), ou: None };
    Ok(model)
}

/// Ornstein-Uhlenbeck factor: a(y) = kappa (theta - y), b = beta,
/// lambda(y) = lambda0 + c y, sigma constant.
pub fn sv_ou(p: OuVolParams) -> Result<ItoMarketModel> {
    if !(p.sigma > 0.0) {
        return invalid("sigma must be positive");
    }
    let sp = StochasticVolParams {
        sigma: Arc::new(move |_| p.sigma),
        lambda: Arc::new(move |y| p.lambda0 + p.c * y),
        a: Arc::new(move |y| p.kappa * (p.theta - y)),
        b: Arc::new(move |_| p.beta),
        rho: p.rho,
        s0: p.s0,
        y0: p.y0,
        constant_lambda: p.c == 0.0,
    };
    let mut model = stochastic_vol_model(sp)?;
    model.label = "sv_ou".into();
    model.constant_coefficients = p.c == 0.0;
    if let Family::StochasticVol { ou, .. } = &mut model.family {
        *ou = Some(p);
    }
    Ok(model)
}

/// Mean and second moment of an OU factor under drift
/// dY = (k theta - k' y) dt + beta dB, from Y(0) = y0, at time t.
pub fn ou_moments(kappa: f64, theta_kappa: f64, beta: f64, y0: f64, t: f64) -> (f64, f64) {
    if kappa.abs() < 1e-14 {
        let mean = y0 + theta_kappa * t;
        return (mean, mean * mean + beta * beta * t);
    }
    let e = (-kappa * t).exp();
    let lvl = theta_kappa / kappa;
    let mean = lvl + (y0 - lvl) * e;
    let var = beta * beta * (1.0 - e * e) / (2.0 * kappa);
    (mean, mean * mean + var)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn default_basis(rho: f64) -> BasisRiskParams {
        BasisRiskParams { mu_s: 0.12, sigma_s: 0.3, mu_y: 0.1, sigma_y: 0.3, rho, s0: 100.0, y0: 100.0 }
    }

    #[test]
    fn mpr_basis_risk() {
        let m = basis_risk_2d(default_basis(0.5)).unwrap();
        let l = m.market_price_of_risk(0.0, &[100.0], &[100.0]).unwrap();
        assert!((l[0] - 0.4).abs() < 1e-14 && l[1].abs() < 1e-14);
        let mut p = default_basis(0.5);
        p.mu_s = 0.0;
        let m = basis_risk_2d(p).unwrap();
        let l = m.market_price_of_risk(0.0, &[100.0], &[100.0]).unwrap();
        assert!(l.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn mpr_diagonal_two_assets() {
        let p = MultiAssetParams {
            mu_s: vec![0.02, 0.06],
            sigma_s: vec![0.2, 0.0, 0.0, 0.3],
            mu_y: vec![0.0],
            beta: vec![0.1, 0.1, 0.1],
            s0: vec![1.0, 1.0],
            y0: vec![1.0],
        };
        let m = multi_asset_basis_risk(p).unwrap();
        let l = m.market_price_of_risk(0.0, &[1.0, 1.0], &[1.0]).unwrap();
        assert!((l[0] - 0.1).abs() < 1e-14 && (l[1] - 0.2).abs() < 1e-14 && l[2].abs() < 1e-14);
    }

    #[test]
    fn projection_examples() {
        let m = basis_risk_2d(default_basis(0.3)).unwrap();
        let p = m.project_admissible(0.0, &[100.0], &[100.0], &[1.0, 1.0]).unwrap();
        assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
        let p2 = m.project_admissible(0.0, &[100.0], &[100.0], &p).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(basis_risk_2d(default_basis(1.0)).is_err());
        assert!(basis_risk_2d(default_basis(-1.0)).is_err());
        let mut p = default_basis(0.2);
        p.sigma_s = 0.0;
        assert!(basis_risk_2d(p).is_err());
    }

    #[test]
    fn minimal_measure_solves_martingale_condition() {
        let m = basis_risk_2d(default_basis(0.6)).unwrap();
        let q = m.q_at(&MeasureSpec::ConstantGamma(vec![0.7]), 0.0, &[100.0], &[100.0]).unwrap();
        assert!((0.3 * q[0] - 0.12).abs() < 1e-10);
        assert!((q[1] - 0.7).abs() < 1e-14);
        assert!(m.q_at(&MeasureSpec::Physical, 0.0, &[100.0], &[100.0]).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn ou_moment_formula_limits() {
        let (m, s) = ou_moments(0.0, 0.0, 0.3, 1.0, 2.0);
        assert!((m - 1.0).abs() < 1e-15 && (s - 1.18).abs() < 1e-12);
        let (m, _) = ou_moments(50.0, 50.0 * 0.2, 0.1, 1.0, 10.0);
        assert!((m - 0.2).abs() < 1e-12);
    }
}
