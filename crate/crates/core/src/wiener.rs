//! Discretized Brownian ensembles, drift shifts, stochastic integrals and
//! Doléans exponentials.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::rng::PathRng;
use crate::stats::{map_paths, reduce_paths, Estimate, Moments};

/// Uniform grid on [0, T].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if n_steps == 0 {
            return invalid("n_steps must be at least 1");
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }
}

/// Read-only view of a path up to grid index `k`: increments `0..k` and
/// levels `0..=k`.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    pub k: usize,
    pub t: f64,
    pub dt: f64,
    pub dim: usize,
    pub increments: &'a [f64],
    pub levels: &'a [f64],
}

impl PathPrefix<'_> {
    pub fn level(&self, j: usize) -> &[f64] {
        &self.levels[j * self.dim..(j + 1) * self.dim]
    }

    pub fn current(&self) -> &[f64] {
        self.level(self.k)
    }

    pub fn increment(&self, j: usize) -> &[f64] {
        &self.increments[j * self.dim..(j + 1) * self.dim]
    }
}

/// Per-path evaluation state of a control. Called once per step in order, so
/// it may carry running quantities, but it only ever sees the prefix.
pub trait ControlCursor {
    fn control(&mut self, prefix: &PathPrefix, out: &mut [f64]) -> Result<()>;
}

/// A rule that produces an adapted control on every path.
pub trait ControlLaw: Send + Sync {
    fn dim(&self) -> usize;
    fn cursor(&self) -> Box<dyn ControlCursor + '_>;
    fn label(&self) -> String {
        "control".into()
    }
    /// True when the control does not depend on the path at all.
    fn is_deterministic(&self) -> bool {
        false
    }
}

type PrefixFn = dyn Fn(&PathPrefix, &mut [f64]) + Send + Sync;

struct FnLaw {
    dim: usize,
    f: Arc<PrefixFn>,
    deterministic: bool,
    label: String,
}

struct FnCursor<'a>(&'a PrefixFn);

impl ControlCursor for FnCursor<'_> {
    fn control(&mut self, prefix: &PathPrefix, out: &mut [f64]) -> Result<()> {
        (self.0)(prefix, out);
        Ok(())
    }
}

impl ControlLaw for FnLaw {
    fn dim(&self) -> usize {
        self.dim
    }
    fn cursor(&self) -> Box<dyn ControlCursor + '_> {
        Box::new(FnCursor(self.f.as_ref()))
    }
    fn label(&self) -> String {
        self.label.clone()
    }
    fn is_deterministic(&self) -> bool {
        self.deterministic
    }
}

/// An adapted m-vector drift perturbation.
#[derive(Clone)]
pub struct ControlProcess {
    law: Arc<dyn ControlLaw>,
}

impl std::fmt::Debug for ControlProcess {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ControlProcess({}, dim={})", self.law.label(), self.law.dim())
    }
}

impl ControlProcess {
    pub fn from_law(law: Arc<dyn ControlLaw>) -> Self {
        Self { law }
    }

    /// Control computed from the path prefix by a closure.
    pub fn from_fn<F>(dim: usize, label: &str, f: F) -> Self
    where
        F: Fn(&PathPrefix, &mut [f64]) + Send + Sync + 'static,
    {
        Self::from_law(Arc::new(FnLaw { dim, f: Arc::new(f), deterministic: false, label: label.into() }))
    }

    /// Deterministic function of time.
    pub fn deterministic<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self::from_law(Arc::new(FnLaw {
            dim,
            f: Arc::new(move |p: &PathPrefix, out: &mut [f64]| f(p.t, out)),
            deterministic: true,
            label: "deterministic".into(),
        }))
    }

    pub fn constant(c: Vec<f64>) -> Self {
        let dim = c.len();
        Self::from_law(Arc::new(FnLaw {
            dim,
            f: Arc::new(move |_: &PathPrefix, out: &mut [f64]| out.copy_from_slice(&c)),
            deterministic: true,
            label: "constant".into(),
        }))
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.law.dim()
    }

    pub fn label(&self) -> String {
        self.law.label()
    }

    pub fn is_deterministic(&self) -> bool {
        self.law.is_deterministic()
    }

    /// Evaluates the control along a whole path into `out` (n_steps * dim).
    pub fn evaluate(&self, path: &Path, out: &mut [f64]) -> Result<()> {
        let m = self.dim();
        if m != path.dim {
            return Err(Error::ShapeMismatch(format!("control dim {m} vs path dim {}", path.dim)));
        }
        let mut cur = self.law.cursor();
        for k in 0..path.grid.n_steps() {
            cur.control(&path.prefix(k), &mut out[k * m..(k + 1) * m])?;
        }
        Ok(())
    }
}

/// One realized path: increments and levels, plus the energy of each shift
/// that was applied to produce it.
#[derive(Debug, Clone)]
pub struct Path {
    pub grid: TimeGrid,
    pub dim: usize,
    pub increments: Vec<f64>,
    pub levels: Vec<f64>,
    /// Sum of |phi|^2 dt for every shift, in application order.
    pub shift_energy: Vec<f64>,
    /// Control values of the last shift (empty when unshifted).
    pub last_control: Vec<f64>,
}

impl Path {
    pub fn new(grid: TimeGrid, dim: usize) -> Self {
        let n = grid.n_steps();
        Self {
            grid,
            dim,
            increments: vec![0.0; n * dim],
            levels: vec![0.0; (n + 1) * dim],
            shift_energy: Vec::new(),
            last_control: Vec::new(),
        }
    }

    /// A path with the given increments.
    pub fn from_increments(grid: TimeGrid, dim: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.n_steps() * dim {
            return Err(Error::ShapeMismatch("increment count".into()));
        }
        let mut p = Self::new(grid, dim);
        p.increments = increments;
        p.rebuild_levels();
        Ok(p)
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.level(self.n_steps())
    }

    pub fn prefix(&self, k: usize) -> PathPrefix<'_> {
        PathPrefix {
            k,
            t: self.grid.t(k),
            dt: self.grid.dt(),
            dim: self.dim,
            increments: &self.increments[..k * self.dim],
            levels: &self.levels[..(k + 1) * self.dim],
        }
    }

    pub fn rebuild_levels(&mut self) {
        let m = self.dim;
        self.levels[..m].fill(0.0);
        for (k, inc) in self.increments.chunks_exact(m).enumerate() {
            let (prev, next) = self.levels[k * m..(k + 2) * m].split_at_mut(m);
            for ((x, p), d) in next.iter_mut().zip(prev.iter()).zip(inc) {
                *x = p + d;
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Shift {
    control: ControlProcess,
    eps: f64,
}

/// A lazily generated ensemble of discretized m-dimensional Brownian paths,
/// optionally shifted by drift perturbations. Path `i` is regenerated on
/// demand from `(seed, i)`.
#[derive(Clone, Debug)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: u64,
    stream_offset: u64,
    shifts: Vec<Shift>,
}

impl BrownianEnsemble {
    pub fn generate(dim: usize, grid: TimeGrid, n_paths: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be at least 1");
        }
        if n_paths == 0 {
            return invalid("n_paths must be at least 1");
        }
        Ok(Self { grid, dim, n_paths, seed, stream_offset: 0, shifts: Vec::new() })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream of path `i`.
    pub fn stream(&self, i: usize) -> u64 {
        self.stream_offset.wrapping_add(i as u64)
    }

    /// An independent sample from the same seed: path `i` reads stream
    /// `offset + i`.
    pub fn with_stream_offset(&self, offset: u64) -> Self {
        Self { stream_offset: offset, ..self.clone() }
    }

    pub fn is_shifted(&self) -> bool {
        !self.shifts.is_empty()
    }

    /// The same sample without any shifts.
    pub fn unshifted(&self) -> Self {
        Self { shifts: Vec::new(), ..self.clone() }
    }

    /// Same sample, different path count (prefix or extension of the sample).
    pub fn with_paths(&self, n_paths: usize) -> Result<Self> {
        if n_paths == 0 {
            return invalid("n_paths must be at least 1");
        }
        Ok(Self { n_paths, ..self.clone() })
    }

    /// Paths `W + eps * Phi`; the control is evaluated on the path as it
    /// stands before this shift. The receiver is left untouched.
    pub fn shifted(&self, control: &ControlProcess, eps: f64) -> Result<Self> {
        if control.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "control dim {} vs ensemble dim {}",
                control.dim(),
                self.dim
            )));
        }
        if !eps.is_finite() {
            return invalid("eps must be finite");
        }
        let mut out = self.clone();
        out.shifts.push(Shift { control: control.clone(), eps });
        Ok(out)
    }

    /// Raw standard Brownian increments of path `i`.
    pub fn base_increments(&self, i: usize, out: &mut [f64]) {
        let mut rng = PathRng::new(self.seed, self.stream(i));
        let s = self.grid.dt().sqrt();
        for x in out.iter_mut() {
            *x = s * rng.normal();
        }
    }

    pub fn new_path(&self) -> Path {
        Path::new(self.grid, self.dim)
    }

    /// Fills `path` with path `i`, applying every shift in order.
    pub fn fill(&self, i: usize, path: &mut Path) -> Result<()> {
        debug_assert_eq!(path.dim, self.dim);
        self.base_increments(i, &mut path.increments);
        path.rebuild_levels();
        path.shift_energy.clear();
        self.apply_shifts(path)
    }

    /// Applies this ensemble's shifts to an already filled base path.
    pub fn apply_shifts(&self, path: &mut Path) -> Result<()> {
        let dt = self.grid.dt();
        for sh in &self.shifts {
            if path.last_control.len() != path.increments.len() {
                path.last_control.resize(path.increments.len(), 0.0);
            }
            let mut phi = std::mem::take(&mut path.last_control);
            sh.control.evaluate(path, &mut phi)?;
            let mut energy = 0.0;
            for (x, p) in path.increments.iter_mut().zip(phi.iter()) {
                *x += sh.eps * p * dt;
                energy += p * p * dt;
            }
            path.last_control = phi;
            path.shift_energy.push(energy);
            path.rebuild_levels();
        }
        Ok(())
    }

    pub fn path(&self, i: usize) -> Result<Path> {
        let mut p = self.new_path();
        self.fill(i, &mut p)?;
        Ok(p)
    }

    /// Per-path map in path order.
    pub fn map<T: Send, F>(&self, f: F) -> Result<Vec<T>>
    where
        F: Fn(&Path) -> Result<T> + Sync,
    {
        map_paths(self.n_paths, || self.new_path(), |p, i| {
            self.fill(i, p)?;
            f(p)
        })
    }

    /// Moments of a per-path statistic.
    pub fn moments<F>(&self, f: F) -> Result<Moments>
    where
        F: Fn(&Path) -> Result<f64> + Sync,
    {
        reduce_paths(self.n_paths, Moments::default, || self.new_path(), |m, p, i| {
            self.fill(i, p)?;
            m.push(f(p)?);
            Ok(())
        })
    }
}

/// Left-point sum of integrand(t_k) . dW_k along one path.
pub fn ito_integral_path(integrand: &ControlProcess, path: &Path, scratch: &mut Vec<f64>) -> Result<f64> {
    scratch.resize(path.increments.len(), 0.0);
    integrand.evaluate(path, scratch)?;
    Ok(scratch.iter().zip(&path.increments).map(|(a, b)| a * b).sum())
}

/// Left-point Itô integral of an adapted integrand over every path.
pub fn ito_integral(integrand: &ControlProcess, ensemble: &BrownianEnsemble) -> Result<Vec<f64>> {
    if integrand.dim() != ensemble.dim() {
        return Err(Error::ShapeMismatch("integrand and ensemble dimensions differ".into()));
    }
    map_paths(
        ensemble.n_paths(),
        || (ensemble.new_path(), Vec::new()),
        |(p, s), i| {
            ensemble.fill(i, p)?;
            ito_integral_path(integrand, p, s)
        },
    )
}

/// Doléans exponential exp(-eps (phi.W) - eps^2/2 int |phi|^2) on the grid.
pub fn doleans_path(control: &ControlProcess, eps: f64, path: &Path) -> Result<Vec<f64>> {
    let n = path.n_steps();
    let m = path.dim;
    let dt = path.grid.dt();
    let mut phi = vec![0.0; n * m];
    control.evaluate(path, &mut phi)?;
    let mut out = Vec::with_capacity(n + 1);
    let mut log_m = 0.0;
    out.push(1.0);
    for k in 0..n {
        let mut dot = 0.0;
        let mut sq = 0.0;
        for j in 0..m {
            let p = phi[k * m + j];
            dot += p * path.increments[k * m + j];
            sq += p * p;
        }
        log_m += -eps * dot - 0.5 * eps * eps * sq * dt;
        out.push(log_m.exp());
    }
    Ok(out)
}

/// Terminal Doléans exponential on every path.
pub fn doleans_exponential(control: &ControlProcess, eps: f64, ensemble: &BrownianEnsemble) -> Result<Vec<f64>> {
    if control.dim() != ensemble.dim() {
        return Err(Error::ShapeMismatch("control and ensemble dimensions differ".into()));
    }
    ensemble.map(|p| Ok(*doleans_path(control, eps, p)?.last().unwrap()))
}

/// Sample means of F(W) and of M(T) F(W + eps Phi) on the same paths.
#[derive(Debug, Clone, Copy)]
pub struct GirsanovReport {
    pub plain: Estimate,
    pub weighted: Estimate,
    pub mean_density: Estimate,
}

impl GirsanovReport {
    pub fn z_score(&self) -> f64 {
        self.plain.z_score(&self.weighted)
    }
}

/// Evaluates both sides of the invariance E[F(W)] = E[M(T) F(W + eps Phi)].
pub fn girsanov_identity_check<F>(f: F, control: &ControlProcess, eps: f64, ensemble: &BrownianEnsemble) -> Result<GirsanovReport>
where
    F: Fn(&Path) -> Result<f64> + Sync,
{
    if control.dim() != ensemble.dim() {
        return Err(Error::ShapeMismatch("control and ensemble dimensions differ".into()));
    }
    // Shift only by this control, on top of whatever the ensemble already carries.
    let one = BrownianEnsemble { shifts: Vec::new(), ..ensemble.clone() }.shifted(control, eps)?;
    let init = || (Moments::default(), (Moments::default(), Moments::default()));
    let (plain, (weighted, dens)) = reduce_paths(
        ensemble.n_paths(),
        init,
        || (ensemble.new_path(), ensemble.new_path()),
        |acc, (p, q), i| {
            ensemble.fill(i, p)?;
            let fp = f(p)?;
            let mt = if eps == 0.0 { 1.0 } else { *doleans_path(control, eps, p)?.last().unwrap() };
            let fq = if eps == 0.0 {
                fp
            } else {
                q.increments.copy_from_slice(&p.increments);
                q.rebuild_levels();
                q.shift_energy.clear();
                one.apply_shifts(q)?;
                f(q)?
            };
            acc.0.push(fp);
            acc.1 .0.push(mt * fq);
            acc.1 .1.push(mt);
            Ok(())
        },
    )?;
    Ok(GirsanovReport { plain: plain.estimate(), weighted: weighted.estimate(), mean_density: dens.estimate() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn rejects_empty() {
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(BrownianEnsemble::generate(1, grid(4), 0, 1).is_err());
        assert!(BrownianEnsemble::generate(0, grid(4), 10, 1).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = TimeGrid::new(2.0, 7).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(7), 2.0);
        assert!((g.dt() - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn terminal_variance() {
        let e = BrownianEnsemble::generate(1, grid(1), 1_000_000, 42).unwrap();
        let m = e.moments(|p| Ok(p.terminal()[0])).unwrap();
        let v = m.variance();
        assert!((0.994..=1.006).contains(&v), "{v}");
        assert!(m.estimate().within(0.0, 4.0));
    }

    #[test]
    fn increments_have_grid_variance() {
        let g = grid(8);
        let e = BrownianEnsemble::generate(1, g, 200_000, 3).unwrap();
        for k in [0, 3, 7] {
            let m = e.moments(|p| Ok(p.increment(k)[0])).unwrap();
            assert!(m.estimate().within(0.0, 5.0));
            // var of sample variance for normal: 2 dt^2 / n
            let se = (2.0f64 / 200_000.0).sqrt() * g.dt();
            assert!((m.variance() - g.dt()).abs() < 5.0 * se);
        }
    }

    #[test]
    fn components_uncorrelated() {
        let e = BrownianEnsemble::generate(2, grid(4), 200_000, 9).unwrap();
        let m = e.moments(|p| Ok(p.terminal()[0] * p.terminal()[1])).unwrap();
        assert!(m.estimate().within(0.0, 4.0));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let e = BrownianEnsemble::generate(2, grid(16), 10, 5).unwrap();
        let a = e.path(7).unwrap();
        let b = e.path(7).unwrap();
        assert_eq!(a.increments, b.increments);
        assert_eq!(a.levels[0], 0.0);
        let c = e.path(6).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn zero_shift_is_identity() {
        let e = BrownianEnsemble::generate(1, grid(16), 4, 5).unwrap();
        let s = e.shifted(&ControlProcess::constant(vec![3.0]), 0.0).unwrap();
        for i in 0..4 {
            assert_eq!(e.path(i).unwrap().levels, s.path(i).unwrap().levels);
        }
    }

    #[test]
    fn constant_drift_one_step() {
        let e = BrownianEnsemble::generate(1, TimeGrid::new(2.0, 1).unwrap(), 3, 5).unwrap();
        let s = e.shifted(&ControlProcess::constant(vec![1.5]), 0.1).unwrap();
        for i in 0..3 {
            let a = e.path(i).unwrap().terminal()[0];
            let b = s.path(i).unwrap().terminal()[0];
            assert!((b - a - 0.1 * 1.5 * 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn shift_then_unshift() {
        let e = BrownianEnsemble::generate(2, grid(32), 5, 1).unwrap();
        let phi = ControlProcess::deterministic(2, |t, out| {
            out[0] = t.sin();
            out[1] = 1.0 - t;
        });
        let s = e.shifted(&phi, 0.3).unwrap().shifted(&phi, -0.3).unwrap();
        assert!(!e.is_shifted());
        for i in 0..5 {
            let a = e.path(i).unwrap();
            let b = s.path(i).unwrap();
            for (x, y) in a.levels.iter().zip(&b.levels) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn shift_control_sees_pre_shift_path() {
        let e = BrownianEnsemble::generate(1, grid(8), 2, 1).unwrap();
        let phi = ControlProcess::from_fn(1, "level", |p, out| out[0] = p.current()[0]);
        let s = e.shifted(&phi, 0.5).unwrap();
        let base = e.path(1).unwrap();
        let sh = s.path(1).unwrap();
        let dt = base.grid.dt();
        for k in 0..8 {
            let want = base.increment(k)[0] + 0.5 * base.level(k)[0] * dt;
            assert!((sh.increment(k)[0] - want).abs() < 1e-15);
        }
        assert!((sh.shift_energy[0] - (0..8).map(|k| base.level(k)[0].powi(2) * dt).sum::<f64>()).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch() {
        let e = BrownianEnsemble::generate(2, grid(8), 2, 1).unwrap();
        assert!(e.shifted(&ControlProcess::zero(1), 0.1).is_err());
        assert!(ito_integral(&ControlProcess::zero(3), &e).is_err());
        assert!(doleans_exponential(&ControlProcess::zero(1), 0.1, &e).is_err());
    }

    #[test]
    fn integral_of_one_telescopes() {
        let e = BrownianEnsemble::generate(1, grid(64), 20, 1).unwrap();
        let v = ito_integral(&ControlProcess::constant(vec![1.0]), &e).unwrap();
        let z = ito_integral(&ControlProcess::zero(1), &e).unwrap();
        for i in 0..20 {
            let p = e.path(i).unwrap();
            assert!((v[i] - p.terminal()[0]).abs() < 1e-12);
            assert_eq!(z[i], 0.0);
        }
    }

    #[test]
    fn integral_of_w_matches_ito_formula() {
        let w = ControlProcess::from_fn(1, "W", |p, out| out[0] = p.current()[0]);
        for n in [64, 256] {
            let e = BrownianEnsemble::generate(1, grid(n), 100_000, 11).unwrap();
            let m = e
                .moments(|p| {
                    let mut s = Vec::new();
                    ito_integral_path(&w, p, &mut s)
                })
                .unwrap();
            assert!(m.estimate().within(0.0, 4.0));
            let d = e
                .moments(|p| {
                    let mut s = Vec::new();
                    let wt = p.terminal()[0];
                    Ok(ito_integral_path(&w, p, &mut s)? - 0.5 * (wt * wt - 1.0))
                })
                .unwrap();
            assert!(d.estimate().within(0.0, 4.0), "n={n} {:?}", d.estimate());
        }
    }

    #[test]
    fn doleans_basic() {
        let e = BrownianEnsemble::generate(1, grid(32), 100, 2).unwrap();
        let p = e.path(0).unwrap();
        let m = doleans_path(&ControlProcess::zero(1), 0.7, &p).unwrap();
        assert!(m.iter().all(|&x| x == 1.0));
        let m = doleans_path(&ControlProcess::constant(vec![2.0]), 0.5, &p).unwrap();
        assert_eq!(m[0], 1.0);
        assert!(m.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn doleans_martingale_normalization() {
        let e = BrownianEnsemble::generate(1, grid(32), 200_000, 2).unwrap();
        let phi = ControlProcess::from_fn(1, "bounded", |p, out| out[0] = p.current()[0].tanh());
        let mt = doleans_exponential(&phi, 0.5, &e).unwrap();
        let m = crate::stats::moments_of(&mt);
        assert!(m.estimate().within(1.0, 4.0), "{:?}", m.estimate());
    }

    #[test]
    fn girsanov_linear_claim() {
        for seed in [1, 2] {
            let e = BrownianEnsemble::generate(1, grid(16), 200_000, seed).unwrap();
            let r = girsanov_identity_check(|p| Ok(p.terminal()[0]), &ControlProcess::constant(vec![1.0]), 0.1, &e).unwrap();
            assert!(r.plain.within(0.0, 4.0));
            assert!(r.weighted.within(0.0, 4.0));
            assert!(r.z_score() < 4.0);
        }
    }

    #[test]
    fn girsanov_zero_eps_and_constant() {
        let e = BrownianEnsemble::generate(1, grid(8), 1000, 1).unwrap();
        let phi = ControlProcess::constant(vec![1.0]);
        let r = girsanov_identity_check(|p| Ok(p.terminal()[0].powi(2)), &phi, 0.0, &e).unwrap();
        assert_eq!(r.plain.value, r.weighted.value);
        let r = girsanov_identity_check(|_| Ok(2.5), &phi, 0.2, &e).unwrap();
        assert_eq!(r.plain.value, 2.5);
        assert!((r.weighted.value - 2.5 * r.mean_density.value).abs() < 1e-12);
    }
}
