//! Martingale-representation integrands by least-squares projection of the
//! derivative kernel (or of value increments) on Hermite polynomials of a
//! per-step state summary, and the split of the integrand into a traded part
//! and a part orthogonal to the stocks.
//!
//! Two passes: regression coefficients are fitted on an independent sample
//! (separate RNG streams), then every statistic is evaluated on the caller's
//! ensemble. Nothing per path is stored.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::functionals::{ClaimFunctional, Observation, Want};
use crate::linalg;
use crate::models::{CoefValues, ItoMarketModel};
use crate::rng::{PathRng, BRANCH_STREAM, FIT_STREAM};
use crate::stats::{reduce_paths, CoMoments, Estimate, Merge, Moments};
use crate::wiener::{BrownianEnsemble, ControlProcess, Path, TimeGrid};

pub const MAX_DEGREE: usize = 6;
const DEFAULT_FIT_PATHS: usize = 1 << 18;
const N_BATCHES: usize = 32;

/// Polynomials of total degree at most `degree` in the standardised summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 3 }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree > MAX_DEGREE {
            return invalid(format!("basis degree must be at most {MAX_DEGREE}, got {degree}"));
        }
        Ok(Self { degree })
    }

    pub fn n_functions(&self, dim: usize) -> usize {
        self.exponents(dim).len() / dim.max(1)
    }

    /// Exponent tuples, graded by total degree, flattened.
    fn exponents(&self, dim: usize) -> Vec<u8> {
        let mut out = Vec::new();
        let mut cur = vec![0u8; dim];
        for total in 0..=self.degree {
            push_with_total(&mut cur, 0, total, &mut out);
        }
        out
    }
}

fn push_with_total(cur: &mut [u8], pos: usize, left: usize, out: &mut Vec<u8>) {
    if pos == cur.len() {
        if left == 0 {
            out.extend_from_slice(cur);
        }
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e as u8;
        push_with_total(cur, pos + 1, left - e, out);
    }
    cur[pos] = 0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClarkRoute {
    /// Kernel projection when the claim has a kernel, otherwise increments.
    Auto,
    /// Regress the derivative kernel at each step.
    Kernel,
    /// Regress value-function increments times the Brownian increment.
    IncrementRegression,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClarkOptions {
    pub basis: RegressionBasis,
    pub route: ClarkRoute,
    /// Ridge penalty relative to the mean diagonal of the design Gram matrix.
    pub ridge: f64,
    /// Size of the independent fitting sample; defaults to min(n_paths, 2^18).
    pub fit_paths: Option<usize>,
    /// Paths used to standardise the summary.
    pub pilot_paths: usize,
    /// Unbiased energy from branched continuations (kernel route only).
    pub branch_energy: bool,
    /// Least-squares orthogonality diagnostics.
    pub orthogonality: bool,
}

impl Default for ClarkOptions {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            route: ClarkRoute::Auto,
            ridge: 1e-8,
            fit_paths: None,
            pilot_paths: 8192,
            branch_energy: true,
            orthogonality: true,
        }
    }
}

impl ClarkOptions {
    pub fn with_degree(degree: usize) -> Result<Self> {
        Ok(Self { basis: RegressionBasis::new(degree)?, ..Self::default() })
    }
}

/// Fitted regression: psi_k(x) = coef_k^T b(x_k) at every step.
#[derive(Debug, Clone)]
pub struct IntegrandFit {
    pub grid: TimeGrid,
    pub m: usize,
    pub summary_dim: usize,
    pub basis: RegressionBasis,
    pub route: ClarkRoute,
    pub n_fit: usize,
    /// Mean payoff on the fitting sample.
    pub fit_mean: f64,
    /// Per step, coefficients of the second-order Hermite products
    /// dW_l dW_j - 1{l=j} dt (l <= j, row-major) in the payoff.
    pub h2: Vec<f64>,
    exps: Vec<u8>,
    p: usize,
    mean: Vec<f64>,
    inv_sd: Vec<f64>,
    active: Vec<bool>,
    coef: Vec<f64>,
}

/// Scratch for basis evaluation.
pub struct BasisWork {
    herm: Vec<f64>,
    b: Vec<f64>,
}

impl IntegrandFit {
    pub fn n_functions(&self) -> usize {
        self.p
    }

    pub fn work(&self) -> BasisWork {
        new_work(self.summary_dim, self.basis.degree, self.p)
    }

    /// Basis values at step k (inactive functions are zero).
    pub fn basis_at(&self, k: usize, x: &[f64], w: &mut BasisWork, out: &mut [f64]) {
        let s = self.summary_dim;
        let deg = self.basis.degree;
        let stride = deg + 1;
        let mean = &self.mean[k * s..(k + 1) * s];
        let inv_sd = &self.inv_sd[k * s..(k + 1) * s];
        let herm = &mut w.herm[..s * stride];
        for (c, h) in herm.chunks_exact_mut(stride).enumerate() {
            let z = (x[c] - mean[c]) * inv_sd[c];
            h[0] = 1.0;
            if deg >= 1 {
                h[1] = z;
            }
            for j in 1..deg {
                h[j + 1] = z * h[j] - j as f64 * h[j - 1];
            }
        }
        let active = &self.active[k * self.p..(k + 1) * self.p];
        for ((o, e), &on) in out[..self.p].iter_mut().zip(self.exps.chunks_exact(s)).zip(active) {
            let mut v = 0.0;
            if on {
                v = 1.0;
                for (c, &ec) in e.iter().enumerate() {
                    v *= herm[c * stride + ec as usize];
                }
            }
            *o = v;
        }
    }

    /// Integrand estimate at step k from the summary row at t_k.
    pub fn psi(&self, k: usize, x: &[f64], w: &mut BasisWork, out: &mut [f64]) {
        let mut b = std::mem::take(&mut w.b);
        self.basis_at(k, x, w, &mut b);
        self.psi_from_basis(k, &b, out);
        w.b = b;
    }

    fn psi_from_basis(&self, k: usize, b: &[f64], out: &mut [f64]) {
        let m = self.m;
        let out = &mut out[..m];
        out.fill(0.0);
        let c = &self.coef[k * self.p * m..(k + 1) * self.p * m];
        for (&bf, row) in b[..self.p].iter().zip(c.chunks_exact(m)) {
            if bf != 0.0 {
                for (o, &r) in out.iter_mut().zip(row) {
                    *o += r * bf;
                }
            }
        }
    }

    /// Integrand on every step of a summary trajectory ((n+1) x s), into
    /// `out` (n x m).
    pub fn psi_path(&self, summary: &[f64], w: &mut BasisWork, out: &mut [f64]) {
        let s = self.summary_dim;
        for k in 0..self.grid.n_steps() {
            self.psi(k, &summary[k * s..(k + 1) * s], w, &mut out[k * self.m..(k + 1) * self.m]);
        }
    }
}

fn new_work(s: usize, degree: usize, p: usize) -> BasisWork {
    BasisWork { herm: vec![0.0; s * (degree + 1)], b: vec![0.0; p] }
}

fn resolve_route(claim: &dyn ClaimFunctional, route: ClarkRoute) -> Result<ClarkRoute> {
    match route {
        ClarkRoute::Auto if claim.has_kernel() => Ok(ClarkRoute::Kernel),
        ClarkRoute::Auto => Ok(ClarkRoute::IncrementRegression),
        ClarkRoute::Kernel if !claim.has_kernel() => Err(Error::Incompatible {
            claim: claim.label(),
            reason: "kernel route requested but the claim has no derivative kernel".into(),
        }),
        r => Ok(r),
    }
}

fn check_inputs(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble) -> Result<()> {
    if ens.dim() != claim.brownian_dim() {
        return Err(Error::ShapeMismatch(format!("ensemble dim {} vs claim dim {}", ens.dim(), claim.brownian_dim())));
    }
    if ens.is_shifted() {
        return invalid("the integrand is estimated on an unshifted Brownian ensemble");
    }
    Ok(())
}

/// Normal-equation accumulator for one pass.
struct FitAcc {
    xtx: Vec<f64>,
    xty: Vec<f64>,
    f: Moments,
}

impl Merge for FitAcc {
    fn merge_from(&mut self, o: Self) {
        self.xtx.merge_from(o.xtx);
        self.xty.merge_from(o.xty);
        self.f.merge(&o.f);
    }
}

struct FitScratch {
    base: Path,
    shifted: Path,
    obs: Observation,
    obs_shift: Observation,
    work: BasisWork,
    b: Vec<f64>,
    b_next: Vec<f64>,
    y: Vec<f64>,
}

/// Fits the integrand regression on an independent sample drawn from the
/// same seed as `ens`.
pub fn fit_integrand(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble, opts: &ClarkOptions) -> Result<IntegrandFit> {
    fit_integrand_impl(claim, ens, opts, None)
}

/// Fit of E[kernel(W + eps Phi) | state of W]: the kernel is read on the
/// shifted path, the regressors on the unshifted one.
pub fn fit_shifted_kernel(
    claim: &dyn ClaimFunctional,
    ens: &BrownianEnsemble,
    opts: &ClarkOptions,
    control: &ControlProcess,
    eps: f64,
) -> Result<IntegrandFit> {
    fit_integrand_impl(claim, ens, opts, Some((control, eps)))
}

fn fit_integrand_impl(
    claim: &dyn ClaimFunctional,
    ens: &BrownianEnsemble,
    opts: &ClarkOptions,
    shift: Option<(&ControlProcess, f64)>,
) -> Result<IntegrandFit> {
    check_inputs(claim, ens)?;
    if !(opts.ridge >= 0.0) {
        return invalid("ridge must be nonnegative");
    }
    let route = resolve_route(claim, opts.route)?;
    if shift.is_some() && route != ClarkRoute::Kernel {
        return Err(Error::Incompatible { claim: claim.label(), reason: "shifted-kernel fits need a derivative kernel".into() });
    }
    let grid = ens.grid();
    let n = grid.n_steps();
    let m = ens.dim();
    let s = claim.summary_dim();
    let exps = opts.basis.exponents(s);
    let p = exps.len() / s;
    let n_fit = opts.fit_paths.unwrap_or(ens.n_paths().min(DEFAULT_FIT_PATHS));
    if n_fit < 50 * p {
        return Err(Error::Regression(format!("{n_fit} fitting paths for {p} basis functions; need at least {}", 50 * p)));
    }
    let fe = ens.unshifted().with_paths(n_fit)?.with_stream_offset(ens.stream(0) ^ FIT_STREAM);
    let fe_shift = match shift {
        Some((c, eps)) => Some(fe.shifted(c, eps)?),
        None => None,
    };

    // standardisation from a pilot
    let n_pilot = opts.pilot_paths.clamp(2, n_fit);
    let pilot = reduce_paths(
        n_pilot,
        || vec![Moments::default(); (n + 1) * s],
        || (fe.new_path(), claim.new_observation(grid)),
        |acc, (path, obs), i| {
            fe.fill(i, path)?;
            claim.observe(path, Want::SUMMARY, obs)?;
            for (a, x) in acc.iter_mut().zip(&obs.summary) {
                a.push(*x);
            }
            Ok(())
        },
    )?;
    let mut mean = vec![0.0; (n + 1) * s];
    let mut inv_sd = vec![0.0; (n + 1) * s];
    for (idx, mo) in pilot.iter().enumerate() {
        mean[idx] = mo.mean;
        let sd = mo.std();
        inv_sd[idx] = if sd > 1e-10 * (1.0 + mo.mean.abs()) { 1.0 / sd } else { 0.0 };
    }
    let mut active = vec![true; n * p];
    for k in 0..n {
        for f in 0..p {
            let e = &exps[f * s..(f + 1) * s];
            active[k * p + f] = (0..s).all(|c| e[c] == 0 || inv_sd[k * s + c] != 0.0);
        }
    }
    let mut fit = IntegrandFit {
        grid,
        m,
        summary_dim: s,
        basis: opts.basis,
        route,
        n_fit,
        fit_mean: 0.0,
        h2: vec![0.0; n * n_pairs(m)],
        exps,
        p,
        mean,
        inv_sd,
        active,
        coef: vec![0.0; n * p * m],
    };

    let dt = grid.dt();
    let scratch = || FitScratch {
        base: fe.new_path(),
        shifted: fe.new_path(),
        obs: claim.new_observation(grid),
        obs_shift: claim.new_observation(grid),
        work: new_work(s, opts.basis.degree, p),
        b: vec![0.0; p],
        b_next: vec![0.0; p],
        y: vec![0.0; m],
    };
    let accumulate = |acc: &mut FitAcc, k: usize, b: &[f64], y: &[f64], ny: usize| {
        let xtx = &mut acc.xtx[k * p * p..(k + 1) * p * p];
        for a in 0..p {
            let ba = b[a];
            if ba == 0.0 {
                continue;
            }
            for c in a..p {
                xtx[a * p + c] += ba * b[c];
            }
            let xty = &mut acc.xty[(k * p + a) * ny..(k * p + a + 1) * ny];
            for l in 0..ny {
                xty[l] += ba * y[l];
            }
        }
    };
    let q = n_pairs(m);

    match route {
        ClarkRoute::Kernel => {
            let want = Want { kernel: shift.is_none(), summary: true };
            let acc = reduce_paths(
                n_fit,
                || FitAcc { xtx: vec![0.0; n * p * p], xty: vec![0.0; n * p * m], f: Moments::default() },
                scratch,
                |acc, sc, i| {
                    fe.fill(i, &mut sc.base)?;
                    claim.observe(&sc.base, want, &mut sc.obs)?;
                    let kernel = match &fe_shift {
                        Some(fs) => {
                            fs.fill(i, &mut sc.shifted)?;
                            claim.observe(&sc.shifted, Want::KERNEL, &mut sc.obs_shift)?;
                            &sc.obs_shift.kernel
                        }
                        None => &sc.obs.kernel,
                    };
                    acc.f.push(sc.obs.payoff);
                    for k in 0..n {
                        fit.basis_at(k, &sc.obs.summary[k * s..(k + 1) * s], &mut sc.work, &mut sc.b);
                        accumulate(acc, k, &sc.b, &kernel[k * m..(k + 1) * m], m);
                    }
                    Ok(())
                },
            )?;
            fit.fit_mean = acc.f.mean;
            solve_all(&mut fit, &acc.xtx, &acc.xty, m, opts.ridge, n_fit, &mut |f, coef| f.coef = coef)?;
        }
        ClarkRoute::IncrementRegression | ClarkRoute::Auto => {
            // value regression V_k(x_k) ~ E[F | x_k]
            let acc = reduce_paths(
                n_fit,
                || FitAcc { xtx: vec![0.0; n * p * p], xty: vec![0.0; n * p], f: Moments::default() },
                scratch,
                |acc, sc, i| {
                    fe.fill(i, &mut sc.base)?;
                    claim.observe(&sc.base, Want::SUMMARY, &mut sc.obs)?;
                    acc.f.push(sc.obs.payoff);
                    for k in 0..n {
                        fit.basis_at(k, &sc.obs.summary[k * s..(k + 1) * s], &mut sc.work, &mut sc.b);
                        accumulate(acc, k, &sc.b, &[sc.obs.payoff], 1);
                    }
                    Ok(())
                },
            )?;
            fit.fit_mean = acc.f.mean;
            let mut vcoef = Vec::new();
            solve_all(&mut fit, &acc.xtx, &acc.xty, 1, opts.ridge, n_fit, &mut |_, c| vcoef = c)?;
            let value = |k: usize, b: &[f64]| -> f64 { (0..p).map(|f| vcoef[k * p + f] * b[f]).sum() };
            // increments (V_{k+1} - V_k) dW_k / dt with V_n = F
            let acc2 = reduce_paths(
                n_fit,
                || FitAcc { xtx: Vec::new(), xty: vec![0.0; n * p * m], f: Moments::default() },
                scratch,
                |acc, sc, i| {
                    fe.fill(i, &mut sc.base)?;
                    claim.observe(&sc.base, Want::SUMMARY, &mut sc.obs)?;
                    fit.basis_at(0, &sc.obs.summary[..s], &mut sc.work, &mut sc.b);
                    for k in 0..n {
                        let v_next = if k + 1 == n {
                            sc.obs.payoff
                        } else {
                            fit.basis_at(k + 1, &sc.obs.summary[(k + 1) * s..(k + 2) * s], &mut sc.work, &mut sc.b_next);
                            value(k + 1, &sc.b_next)
                        };
                        let dv = v_next - value(k, &sc.b);
                        for l in 0..m {
                            sc.y[l] = dv * sc.base.increments[k * m + l] / dt;
                        }
                        let b = &sc.b;
                        for a in 0..p {
                            if b[a] != 0.0 {
                                for l in 0..m {
                                    acc.xty[(k * p + a) * m + l] += b[a] * sc.y[l];
                                }
                            }
                        }
                        std::mem::swap(&mut sc.b, &mut sc.b_next);
                    }
                    Ok(())
                },
            )?;
            solve_all(&mut fit, &acc.xtx, &acc2.xty, m, opts.ridge, n_fit, &mut |f, coef| f.coef = coef)?;
        }
    }

    // second-order chaos coefficients, regressed on what the first-order
    // integral leaves over
    let h2 = reduce_paths(
        n_fit,
        || vec![CoMoments::default(); n * q],
        || (fe.new_path(), claim.new_observation(grid), fit.work(), vec![0.0; p], vec![0.0; m]),
        |acc, (path, obs, work, b, psi), i| {
            fe.fill(i, path)?;
            claim.observe(path, Want::SUMMARY, obs)?;
            let mut r = obs.payoff;
            for k in 0..n {
                fit.basis_at(k, &obs.summary[k * s..(k + 1) * s], work, b);
                fit.psi_from_basis(k, b, psi);
                r -= dot(psi, path.increment(k));
            }
            for k in 0..n {
                let dw = path.increment(k);
                let mut idx = k * q;
                for l in 0..m {
                    for j in l..m {
                        acc[idx].push(r, hermite2(dw, l, j, dt));
                        idx += 1;
                    }
                }
            }
            Ok(())
        },
    )?;
    set_h2(&mut fit, &h2);
    Ok(fit)
}

fn n_pairs(m: usize) -> usize {
    m * (m + 1) / 2
}

fn hermite2(dw: &[f64], l: usize, j: usize, dt: f64) -> f64 {
    if l == j {
        dw[l] * dw[l] - dt
    } else {
        dw[l] * dw[j]
    }
}

fn set_h2(fit: &mut IntegrandFit, h2: &[CoMoments]) {
    for (c, cm) in fit.h2.iter_mut().zip(h2) {
        *c = if cm.m2_y > 0.0 { cm.c_xy / cm.m2_y } else { 0.0 };
    }
}

/// Ridge-regularised normal equations at every step, on the active columns.
fn solve_all(
    fit: &mut IntegrandFit,
    xtx: &[f64],
    xty: &[f64],
    ny: usize,
    ridge: f64,
    n_fit: usize,
    store: &mut dyn FnMut(&mut IntegrandFit, Vec<f64>),
) -> Result<()> {
    let n = fit.grid.n_steps();
    let p = fit.p;
    let scale = 1.0 / n_fit as f64;
    let mut coef = vec![0.0; n * p * ny];
    for k in 0..n {
        let idx: Vec<usize> = (0..p).filter(|&f| fit.active[k * p + f]).collect();
        let q = idx.len();
        let mut a = vec![0.0; q * q];
        for (r, &fr) in idx.iter().enumerate() {
            for (c, &fc) in idx.iter().enumerate() {
                let (lo, hi) = if fr <= fc { (fr, fc) } else { (fc, fr) };
                a[r * q + c] = xtx[k * p * p + lo * p + hi] * scale;
            }
        }
        let tr: f64 = (0..q).map(|r| a[r * q + r]).sum::<f64>() / q as f64;
        for r in 0..q {
            a[r * q + r] += ridge * tr;
        }
        if !linalg::cholesky(&mut a, q, 1e-14 * tr.max(f64::MIN_POSITIVE)) {
            return Err(Error::Regression(format!("design matrix is rank deficient at t={}", fit.grid.t(k))));
        }
        for l in 0..ny {
            let mut rhs: Vec<f64> = idx.iter().map(|&f| xty[(k * p + f) * ny + l] * scale).collect();
            linalg::cholesky_solve(&a, q, &mut rhs);
            for (r, &f) in idx.iter().enumerate() {
                coef[(k * p + f) * ny + l] = rhs[r];
            }
        }
    }
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("regression coefficients".into()));
    }
    store(fit, coef);
    Ok(())
}

/// Projection onto the row space of the stock volatility at a state.
pub struct RowProjector<'a> {
    model: &'a ItoMarketModel,
    coef: CoefValues,
    gram: Vec<f64>,
    h: Vec<f64>,
    cached: bool,
}

impl<'a> RowProjector<'a> {
    pub fn new(model: &'a ItoMarketModel) -> Self {
        Self { model, coef: CoefValues::new(model.d, model.m), gram: vec![0.0; model.d * model.d], h: vec![0.0; model.d], cached: false }
    }

    /// Prepares sigma(t, s, y).
    pub fn at(&mut self, t: f64, s: &[f64], y: &[f64]) -> Result<()> {
        if self.cached && self.model.constant_coefficients {
            return Ok(());
        }
        self.model.coefficients(t, s, y, &mut self.coef)?;
        linalg::factor_gram(&self.coef.sigma, self.model.d, self.model.m, t, &mut self.gram)?;
        self.cached = true;
        Ok(())
    }

    pub fn sigma(&self) -> &[f64] {
        &self.coef.sigma
    }

    /// Row-space part of v, and the coordinates h with sigma^T h = that part.
    pub fn project(&mut self, v: &[f64], out: &mut [f64]) -> &[f64] {
        let (d, m) = (self.model.d, self.model.m);
        linalg::row_coords(&self.coef.sigma, &self.gram, d, m, v, &mut self.h);
        linalg::lift_rows(&self.coef.sigma, d, m, &self.h, out);
        &self.h
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Traded and orthogonal parts of the integrand along one path, at the
/// model states of `obs`: theta (n x d) with theta_i = h_i / S_i, and xi
/// (n x (m-d)) in the orthonormal null-space coordinates.
pub fn kw_split_path(model: &ItoMarketModel, grid: TimeGrid, obs: &Observation, psi: &[f64], theta: &mut [f64], xi: &mut [f64]) -> Result<()> {
    let (d, m) = (model.d, model.m);
    let states = obs.states.as_ref().ok_or_else(|| Error::Incompatible { claim: "kw split".into(), reason: "claim is not bound to a model".into() })?;
    let mut proj = RowProjector::new(model);
    let mut row = vec![0.0; m];
    for k in 0..grid.n_steps() {
        let st = states.state(k);
        let t = grid.t(k);
        proj.at(t, &st[..d], &st[d..])?;
        let v = &psi[k * m..(k + 1) * m];
        let h = proj.project(v, &mut row);
        for i in 0..d {
            theta[k * d + i] = h[i] / st[i];
        }
        let nb = model.null_basis(t, &st[..d], &st[d..])?;
        for j in 0..m - d {
            xi[k * (m - d) + j] = dot(&nb[j * m..(j + 1) * m], v);
        }
    }
    Ok(())
}

/// Split of the claim into its mean, a stock-hedgeable part and an
/// orthogonal part.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KWDecomposition {
    pub mean_term: Estimate,
    pub energy_theta: Estimate,
    pub energy_xi: Estimate,
    pub variance: Estimate,
    /// var(F) - (E_theta + E_xi).
    pub pythagoras_gap: Estimate,
    /// var(F) - E_theta, the mean-variance form of the orthogonal energy.
    pub variance_minus_theta: Estimate,
    /// Mean of sum_k (theta part . dW_k)(xi part . dW_k).
    pub cross_moment: Estimate,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OrthogonalityReport {
    pub max_abs_z: f64,
    pub n_tests: usize,
    pub n_exceeding_4: usize,
}

/// Integrand fit evaluated on an ensemble.
#[derive(Debug, Clone)]
pub struct ClarkEstimate {
    pub fit: Arc<IntegrandFit>,
    pub n_paths: usize,
    pub payoff: Moments,
    /// Mean of F - sum psi.dW - sum c (dW^2 - dt): same expectation as F.
    pub zeroth_cv: Estimate,
    /// Best available estimate of E sum |psi|^2 dt.
    pub energy: Estimate,
    /// Plug-in energy of the fitted integrand.
    pub energy_regression: Estimate,
    /// Branched-continuation energy, unbiased for var(F) (kernel route).
    pub energy_branch: Option<Estimate>,
    /// var(F) - energy.
    pub variance_gap: Estimate,
    pub orthogonality: Option<OrthogonalityReport>,
    pub kw: Option<KWDecomposition>,
    residual: Moments,
    batches: Vec<f64>,
}

impl ClarkEstimate {
    pub fn route(&self) -> ClarkRoute {
        self.fit.route
    }
}

/// var(F - mean - sum psi.dW) / var(F), with a batch-means standard error.
pub fn residual_variance(est: &ClarkEstimate) -> Result<Estimate> {
    let vf = est.payoff.variance();
    if !(vf > 0.0) {
        return Err(Error::Degenerate("the claim has zero variance; the residual ratio is 0/0".into()));
    }
    let ratio = est.residual.variance() / vf;
    let mut r = Moments::default();
    for b in est.batches.chunks(5) {
        let n = b[0];
        if n < 2.0 {
            continue;
        }
        let v = |s: f64, s2: f64| (s2 - s * s / n) / (n - 1.0);
        let vfb = v(b[1], b[2]);
        if vfb > 0.0 {
            r.push(v(b[3], b[4]) / vfb);
        }
    }
    Ok(Estimate::new(ratio, r.se()))
}

struct EvalAcc {
    f: Moments,
    cv: Moments,
    resid: Moments,
    e: Moments,
    e_reg: Moments,
    e_theta: Moments,
    e_xi: Moments,
    gap: Moments,
    gap_kw: Moments,
    mv: Moments,
    f2: Moments,
    cross: Moments,
    batches: Vec<f64>,
    ortho: Vec<f64>,
}

impl Merge for EvalAcc {
    fn merge_from(&mut self, o: Self) {
        for (a, b) in [
            (&mut self.f, &o.f),
            (&mut self.cv, &o.cv),
            (&mut self.resid, &o.resid),
            (&mut self.e, &o.e),
            (&mut self.e_reg, &o.e_reg),
            (&mut self.e_theta, &o.e_theta),
            (&mut self.e_xi, &o.e_xi),
            (&mut self.gap, &o.gap),
            (&mut self.gap_kw, &o.gap_kw),
            (&mut self.mv, &o.mv),
            (&mut self.f2, &o.f2),
            (&mut self.cross, &o.cross),
        ] {
            a.merge(b);
        }
        self.batches.merge_from(o.batches);
        self.ortho.merge_from(o.ortho);
    }
}

struct EvalScratch {
    path: Path,
    branch: Path,
    obs: Observation,
    obs_b: Observation,
    work: BasisWork,
    b_all: Vec<f64>,
    psi: Vec<f64>,
    row: Vec<f64>,
    row_b: Vec<f64>,
}

/// Fits the integrand on an independent sample and evaluates it on `ens`.
pub fn clark_integrand(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble, opts: &ClarkOptions) -> Result<ClarkEstimate> {
    let fit = Arc::new(fit_integrand(claim, ens, opts)?);
    evaluate_integrand(claim, fit, ens, opts)
}

/// Clark estimate plus the traded/orthogonal split for a claim bound to a
/// market model (paths are Brownian increments of the claim's measure).
pub fn kw_decompose(claim: &dyn ClaimFunctional, ens: &BrownianEnsemble, opts: &ClarkOptions) -> Result<(ClarkEstimate, KWDecomposition)> {
    if claim.binding().is_none() {
        return Err(Error::Incompatible { claim: claim.label(), reason: "the split needs a claim bound to a market model".into() });
    }
    let est = clark_integrand(claim, ens, opts)?;
    let kw = est.kw.ok_or_else(|| Error::Incompatible { claim: claim.label(), reason: "no split available".into() })?;
    Ok((est, kw))
}

/// Statistics of a fitted integrand on the paths of `ens`.
pub fn evaluate_integrand(claim: &dyn ClaimFunctional, fit: Arc<IntegrandFit>, ens: &BrownianEnsemble, opts: &ClarkOptions) -> Result<ClarkEstimate> {
    check_inputs(claim, ens)?;
    let grid = ens.grid();
    if grid != fit.grid || ens.dim() != fit.m || claim.summary_dim() != fit.summary_dim {
        return Err(Error::ShapeMismatch("fit and ensemble disagree".into()));
    }
    let n = grid.n_steps();
    let m = fit.m;
    let s = fit.summary_dim;
    let p = fit.p;
    let dt = grid.dt();
    let n_paths = ens.n_paths();
    let branch = opts.branch_energy && fit.route == ClarkRoute::Kernel && n_paths >= n;
    let model = claim.binding().map(|(mdl, _)| mdl.clone()).filter(|mdl| mdl.d >= 1);
    let mu0 = fit.fit_mean;
    let ortho_len = if opts.orthogonality { 2 * n * p * m } else { 0 };
    let want = Want { kernel: branch, summary: true };

    let acc = reduce_paths(
        n_paths,
        || EvalAcc {
            f: Moments::default(),
            cv: Moments::default(),
            resid: Moments::default(),
            e: Moments::default(),
            e_reg: Moments::default(),
            e_theta: Moments::default(),
            e_xi: Moments::default(),
            gap: Moments::default(),
            gap_kw: Moments::default(),
            mv: Moments::default(),
            f2: Moments::default(),
            cross: Moments::default(),
            batches: vec![0.0; 5 * N_BATCHES],
            ortho: vec![0.0; ortho_len],
        },
        || EvalScratch {
            path: ens.new_path(),
            branch: ens.new_path(),
            obs: claim.new_observation(grid),
            obs_b: claim.new_observation(grid),
            work: fit.work(),
            b_all: vec![0.0; n * p],
            psi: vec![0.0; n * m],
            row: vec![0.0; m],
            row_b: vec![0.0; m],
        },
        |acc, sc, i| {
            ens.fill(i, &mut sc.path)?;
            claim.observe(&sc.path, want, &mut sc.obs)?;
            let f = sc.obs.payoff;
            let mut mart = 0.0;
            let mut h2 = 0.0;
            let mut e_reg = 0.0;
            for k in 0..n {
                let b = &mut sc.b_all[k * p..(k + 1) * p];
                fit.basis_at(k, &sc.obs.summary[k * s..(k + 1) * s], &mut sc.work, b);
                let psi = &mut sc.psi[k * m..(k + 1) * m];
                fit.psi_from_basis(k, b, psi);
                let dw = sc.path.increment(k);
                mart += dot(psi, dw);
                e_reg += dot(psi, psi) * dt;
                let mut idx = k * n_pairs(m);
                for l in 0..m {
                    for j in l..m {
                        h2 += fit.h2[idx] * hermite2(dw, l, j, dt);
                        idx += 1;
                    }
                }
            }
            let r = f - mart;
            acc.f.push(f);
            acc.cv.push(r - h2);
            acc.resid.push(r);
            acc.e_reg.push(e_reg);
            let bi = i * N_BATCHES / n_paths;
            let (fc, rc) = (f - mu0, r - mu0);
            let bt = &mut acc.batches[5 * bi..5 * bi + 5];
            bt[0] += 1.0;
            bt[1] += fc;
            bt[2] += fc * fc;
            bt[3] += rc;
            bt[4] += rc * rc;
            if opts.orthogonality {
                for k in 0..n {
                    let dw = sc.path.increment(k);
                    let b = &sc.b_all[k * p..(k + 1) * p];
                    for f_ in 0..p {
                        if b[f_] == 0.0 {
                            continue;
                        }
                        let base = 2 * ((k * p + f_) * m);
                        for l in 0..m {
                            let x = r * dw[l] * b[f_];
                            acc.ortho[base + 2 * l] += x;
                            acc.ortho[base + 2 * l + 1] += x * x;
                        }
                    }
                }
            }

            // branch at a stratified step
            let mut e_total = e_reg;
            let mut branch_terms = None;
            if branch {
                let k = i % n;
                let n_k = (n_paths / n + usize::from(k < n_paths % n)) as f64;
                let w = dt * n_paths as f64 / n_k;
                let mut rng = PathRng::new(ens.seed(), BRANCH_STREAM ^ ens.stream(i));
                let v = rng.uniform();
                let sd = dt.sqrt();
                sc.branch.increments[..k * m].copy_from_slice(&sc.path.increments[..k * m]);
                for l in 0..m {
                    let d = sc.path.increments[k * m + l];
                    let bridge = v * d + (v * (1.0 - v) * dt).sqrt() * rng.normal();
                    sc.branch.increments[k * m + l] = bridge + ((1.0 - v) * dt).sqrt() * rng.normal();
                }
                for x in sc.branch.increments[(k + 1) * m..].iter_mut() {
                    *x = sd * rng.normal();
                }
                sc.branch.rebuild_levels();
                claim.observe(&sc.branch, Want::KERNEL, &mut sc.obs_b)?;
                let ka = &sc.obs.kernel[k * m..(k + 1) * m];
                let kb = &sc.obs_b.kernel[k * m..(k + 1) * m];
                let psi = &sc.psi[k * m..(k + 1) * m];
                let term = w * (dot(ka, kb) - dot(psi, psi));
                e_total += term;
                branch_terms = Some((k, w));
            }
            acc.e.push(e_total);
            acc.gap.push(fc * fc - e_total);
            acc.f2.push(fc * fc);

            if let Some(mdl) = &model {
                let d = mdl.d;
                let states = sc.obs.states.as_ref().expect("bound claims carry states");
                let mut proj = RowProjector::new(mdl);
                let mut e_th = 0.0;
                let mut cross = 0.0;
                for k in 0..n {
                    let st = states.state(k);
                    proj.at(grid.t(k), &st[..d], &st[d..])?;
                    let psi = &sc.psi[k * m..(k + 1) * m];
                    proj.project(psi, &mut sc.row);
                    e_th += dot(&sc.row, &sc.row) * dt;
                    let dw = sc.path.increment(k);
                    let a = dot(&sc.row, dw);
                    cross += a * (dot(psi, dw) - a);
                    if let Some((kb, w)) = branch_terms {
                        if kb == k {
                            let ka = &sc.obs.kernel[k * m..(k + 1) * m];
                            let kbv = &sc.obs_b.kernel[k * m..(k + 1) * m];
                            proj.project(kbv, &mut sc.row_b);
                            let rr = dot(&sc.row, &sc.row);
                            e_th += w * (dot(ka, &sc.row_b) - rr);
                        }
                    }
                }
                let e_xi = e_total - e_th;
                acc.e_theta.push(e_th);
                acc.e_xi.push(e_xi);
                acc.mv.push(fc * fc - e_th);
                acc.gap_kw.push(fc * fc - e_th - e_xi);
                acc.cross.push(cross);
            }
            Ok(())
        },
    )?;

    let shift = (acc.f.mean - mu0).powi(2);
    let energy_regression = acc.e_reg.estimate();
    let energy = acc.e.estimate();
    let orthogonality = if opts.orthogonality {
        let nn = n_paths as f64;
        let mut max_z: f64 = 0.0;
        let mut tests = 0;
        let mut over = 0;
        for c in acc.ortho.chunks(2) {
            let mean = c[0] / nn;
            let var = (c[1] / nn - mean * mean).max(0.0);
            if var == 0.0 {
                continue;
            }
            let z = mean / (var / nn).sqrt();
            tests += 1;
            if z.abs() > 4.0 {
                over += 1;
            }
            max_z = max_z.max(z.abs());
        }
        Some(OrthogonalityReport { max_abs_z: max_z, n_tests: tests, n_exceeding_4: over })
    } else {
        None
    };
    let variance = Estimate::new(acc.f.variance(), acc.f2.se());
    let kw = model.as_ref().map(|_| KWDecomposition {
        mean_term: acc.f.estimate(),
        energy_theta: acc.e_theta.estimate(),
        energy_xi: acc.e_xi.estimate(),
        variance,
        pythagoras_gap: Estimate::new(acc.gap_kw.mean - shift, acc.gap_kw.se()),
        variance_minus_theta: Estimate::new(acc.mv.mean - shift, acc.mv.se()),
        cross_moment: acc.cross.estimate(),
    });
    Ok(ClarkEstimate {
        fit,
        n_paths,
        payoff: acc.f,
        zeroth_cv: acc.cv.estimate(),
        energy,
        energy_regression,
        energy_branch: branch.then_some(energy),
        variance_gap: Estimate::new(acc.gap.mean - shift, acc.gap.se()),
        orthogonality,
        kw,
        residual: acc.resid,
        batches: acc.batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{asset_terminal, linear_terminal, quadratic_terminal, vanilla_on_factor, ConstantClaim, OptionKind, PathFunctional};
    use crate::models::{basis_risk_2d, BasisRiskParams, MeasureSpec};

    fn ens(m: usize, n: usize, paths: usize, seed: u64) -> BrownianEnsemble {
        BrownianEnsemble::generate(m, TimeGrid::new(1.0, n).unwrap(), paths, seed).unwrap()
    }

    fn opts(fit: usize) -> ClarkOptions {
        ClarkOptions { fit_paths: Some(fit), pilot_paths: 4096, ..ClarkOptions::default() }
    }

    fn basis_model(rho: f64) -> Arc<ItoMarketModel> {
        let p = BasisRiskParams { mu_s: 0.12, sigma_s: 0.3, mu_y: 0.1, sigma_y: 0.3, rho, s0: 100.0, y0: 100.0 };
        Arc::new(basis_risk_2d(p).unwrap())
    }

    #[test]
    fn exponents_are_graded() {
        let b = RegressionBasis::new(2).unwrap();
        assert_eq!(b.exponents(2), vec![0, 0, 1, 0, 0, 1, 2, 0, 1, 1, 0, 2]);
        assert_eq!(RegressionBasis::new(3).unwrap().n_functions(3), 20);
        assert!(RegressionBasis::new(7).is_err());
    }

    #[test]
    fn linear_claim_has_constant_integrand() {
        let c = linear_terminal(vec![1.0, -0.5]).unwrap();
        let e = ens(2, 16, 20_000, 1);
        let est = clark_integrand(&c, &e, &opts(20_000)).unwrap();
        let path = e.path(3).unwrap();
        let mut obs = c.new_observation(path.grid);
        c.observe(&path, Want::SUMMARY, &mut obs).unwrap();
        let mut psi = vec![0.0; 32];
        est.fit.psi_path(&obs.summary, &mut est.fit.work(), &mut psi);
        for k in 0..16 {
            assert!((psi[2 * k] - 1.0).abs() < 1e-2 && (psi[2 * k + 1] + 0.5).abs() < 1e-2);
        }
        assert!(residual_variance(&est).unwrap().value <= 1e-4);
        assert!(est.energy.within(1.25, 4.0), "{:?}", est.energy);
    }

    #[test]
    fn quadratic_claim_integrand_and_energy() {
        let c = quadratic_terminal(1).unwrap();
        let n = 32;
        let e = ens(1, n, 50_000, 2);
        let est = clark_integrand(&c, &e, &opts(50_000)).unwrap();
        // psi_k = 2 W(t_k)
        let mut w = est.fit.work();
        let mut out = [0.0];
        for x in [-1.0, -0.3, 0.0, 0.7, 1.5] {
            est.fit.psi(n / 2, &[x], &mut w, &mut out);
            assert!((out[0] - 2.0 * x).abs() < 0.02, "{x}: {}", out[0]);
        }
        let branch = est.energy_branch.unwrap();
        assert!(branch.within(2.0, 4.0), "{branch:?}");
        let reg = 2.0 * (1.0 - 1.0 / n as f64);
        assert!(est.energy_regression.within(reg, 4.0), "{:?}", est.energy_regression);
        assert!(est.variance_gap.within(0.0, 4.0), "{:?}", est.variance_gap);
        // F - sum psi dW - sum (dW^2 - dt) = T exactly for this claim
        assert!((est.zeroth_cv.value - 1.0).abs() < 1e-3 && est.zeroth_cv.se < 1e-3, "{:?}", est.zeroth_cv);
        let o = est.orthogonality.unwrap();
        assert!(o.n_exceeding_4 <= o.n_tests / 50 + 1, "{o:?}");
    }

    #[test]
    fn constant_claim_is_degenerate() {
        let c = ConstantClaim { value: 2.0, dim: 1 };
        let e = ens(1, 8, 5_000, 3);
        let est = clark_integrand(&c, &e, &opts(5_000)).unwrap();
        assert!(est.energy.value.abs() < 1e-20);
        assert!(est.residual.variance() < 1e-25);
        assert!(matches!(residual_variance(&est), Err(Error::Degenerate(_))));
    }

    #[test]
    fn increment_route_recovers_quadratic_integrand() {
        let c = PathFunctional {
            label: "w2".into(),
            dim: 1,
            payoff: Arc::new(|p: &Path| p.terminal()[0].powi(2)),
            kernel: None,
        };
        let n = 16;
        let e = ens(1, n, 40_000, 4);
        let est = clark_integrand(&c, &e, &opts(40_000)).unwrap();
        assert_eq!(est.route(), ClarkRoute::IncrementRegression);
        assert!(est.energy_branch.is_none());
        let mut w = est.fit.work();
        let mut out = [0.0];
        for x in [-1.0, 0.0, 0.8] {
            est.fit.psi(n / 2, &[x], &mut w, &mut out);
            assert!((out[0] - 2.0 * x).abs() < 0.05, "{x}: {}", out[0]);
        }
        let kopts = ClarkOptions { route: ClarkRoute::Kernel, ..opts(1000) };
        assert!(matches!(clark_integrand(&c, &e, &kopts), Err(Error::Incompatible { .. })));
    }

    #[test]
    fn too_few_fitting_paths() {
        let c = quadratic_terminal(1).unwrap();
        let e = ens(1, 4, 100, 5);
        assert!(matches!(clark_integrand(&c, &e, &opts(100)), Err(Error::Regression(_))));
    }

    #[test]
    fn basis_risk_split_matches_correlation() {
        let rho = 0.75;
        let model = basis_model(rho);
        let c = vanilla_on_factor(model.clone(), MeasureSpec::Minimal, 0, 100.0, OptionKind::Put).unwrap();
        let n = 12;
        let e = ens(2, n, 20_000, 6);
        let (est, kw) = kw_decompose(&c, &e, &opts(20_000)).unwrap();
        assert!(kw.pythagoras_gap.within(0.0, 4.0), "{kw:?}");
        assert!(kw.cross_moment.within(0.0, 4.0), "{kw:?}");
        assert!(kw.energy_xi.value > 0.0 && kw.energy_theta.value > 0.0);
        let ratio = kw.energy_theta.value / (kw.energy_theta.value + kw.energy_xi.value);
        assert!((ratio - rho * rho).abs() < 1e-9, "{ratio}");
        // theta sigma S = rho psi_Y and xi = sqrt(1 - rho^2) psi_Y per path
        let path = e.path(1).unwrap();
        let mut obs = c.new_observation(path.grid);
        c.observe(&path, Want::SUMMARY, &mut obs).unwrap();
        let mut psi = vec![0.0; 2 * n];
        est.fit.psi_path(&obs.summary, &mut est.fit.work(), &mut psi);
        let (mut theta, mut xi) = (vec![0.0; n], vec![0.0; n]);
        kw_split_path(&model, path.grid, &obs, &psi, &mut theta, &mut xi).unwrap();
        let rb = (1.0 - rho * rho).sqrt();
        for k in 0..n {
            let psi_y = rho * psi[2 * k] + rb * psi[2 * k + 1];
            let s = obs.states.as_ref().unwrap().s(k, 0);
            assert!((theta[k] * 0.3 * s - rho * psi_y).abs() <= 1e-9 * psi_y.abs().max(1e-12));
            assert!((xi[k] - rb * psi_y).abs() <= 1e-9 * psi_y.abs().max(1e-12));
        }
    }

    #[test]
    fn independent_factor_is_unhedgeable() {
        let model = basis_model(0.0);
        let c = vanilla_on_factor(model, MeasureSpec::Minimal, 0, 100.0, OptionKind::Put).unwrap();
        let e = ens(2, 8, 10_000, 7);
        let (_, kw) = kw_decompose(&c, &e, &opts(10_000)).unwrap();
        assert!(kw.energy_theta.value.abs() < 1e-12);
        assert!(kw.variance_minus_theta.within(kw.energy_xi.value, 4.0), "{kw:?}");
    }

    #[test]
    fn stock_claim_is_replicable() {
        let c = asset_terminal(basis_model(0.5), MeasureSpec::Minimal, 0).unwrap();
        let e = ens(2, 8, 10_000, 8);
        let (_, kw) = kw_decompose(&c, &e, &opts(10_000)).unwrap();
        assert!(kw.energy_xi.value.abs() < 1e-10, "{kw:?}");
        assert!(kw.variance_minus_theta.within(0.0, 4.0), "{kw:?}");
    }

    #[test]
    fn residual_decreases_with_degree() {
        let c = vanilla_on_factor(basis_model(0.5), MeasureSpec::Minimal, 0, 100.0, OptionKind::Put).unwrap();
        let e = ens(2, 10, 20_000, 9);
        let mut last = f64::INFINITY;
        for deg in 1..=3 {
            let o = ClarkOptions { basis: RegressionBasis::new(deg).unwrap(), ..opts(20_000) };
            let r = residual_variance(&clark_integrand(&c, &e, &o).unwrap()).unwrap();
            assert!(r.value < last + 2.0 * r.se, "degree {deg}: {r:?} after {last}");
            last = r.value;
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let c = quadratic_terminal(1).unwrap();
        let e = ens(1, 8, 4096, 10);
        let a = clark_integrand(&c, &e, &opts(4096)).unwrap();
        let b = clark_integrand(&c, &e, &opts(4096)).unwrap();
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.zeroth_cv, b.zeroth_cv);
    }
}
