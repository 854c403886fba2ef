//! Brute-force backward induction for the control problem on a small
//! Gauss-Hermite tree.
//!
//! Each step the controller picks, per free direction, a drift phi and a log
//! variance factor l for the Brownian increment: the increment becomes
//! eps phi dt + exp(l/2) sqrt(dt) Z. A drift alone costs 1/2 phi^2 dt; the
//! cheapest drift process that reshapes the step's Gaussian to variance
//! exp(l) costs a further (exp(l) - 1 - l) / (2 eps^2), the Gaussian relative
//! entropy rescaled by eps^-2. With both knobs the tree optimum is exact for
//! claims whose value function is quadratic in the path.

use rayon::prelude::*;
use serde::Serialize;

use super::quadrature::{gauss_hermite, Rule};
use crate::error::{invalid, Error, Result};
use crate::functionals::{ClaimFunctional, Observation, Want};
use crate::linalg;
use crate::wiener::{Path, TimeGrid};

/// Upper bound on leaf evaluations of one solve.
pub const MAX_TREE_EVALUATIONS: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    /// sup E[F(W + eps Phi) - 1/2 int |phi|^2]
    Maximise,
    /// inf E[F(W + eps Phi) + 1/2 int |phi|^2]
    Minimise,
}

#[derive(Debug, Clone, Serialize)]
pub struct DpInstance {
    pub horizon: f64,
    pub n_steps: usize,
    /// Gauss-Hermite nodes per free direction and step.
    pub nodes: usize,
    /// Drift grid points per free direction (odd, so zero is on the grid).
    pub control_points: usize,
    /// Log-variance grid points per free direction (odd); 1 disables the
    /// variance knob.
    pub variance_points: usize,
    /// Newton polish of the best grid point.
    pub polish: bool,
    pub polish_iters: usize,
    /// Orthonormal directions in R^m the control and the quadrature act on;
    /// None means every coordinate.
    pub directions: Option<Vec<Vec<f64>>>,
    pub sense: Sense,
    /// Drift bound is bound_scale * eps * sd(F); log-variance bound is
    /// bound_scale * eps^2 * sd(F), capped at 2.
    pub bound_scale: f64,
}

impl DpInstance {
    pub fn new(horizon: f64, n_steps: usize) -> Self {
        Self {
            horizon,
            n_steps,
            nodes: 7,
            control_points: 21,
            variance_points: 5,
            polish: true,
            polish_iters: 4,
            directions: None,
            sense: Sense::Maximise,
            bound_scale: 4.0,
        }
    }

    fn n_free(&self, m: usize) -> usize {
        self.directions.as_ref().map_or(m, |d| d.len())
    }

    fn polish_dim(&self, f: usize) -> usize {
        if self.variance_points > 1 {
            2 * f
        } else {
            f
        }
    }

    /// Control evaluations per tree node.
    fn evaluations_per_node(&self, f: usize) -> f64 {
        let mut g = (self.control_points as f64).powi(f as i32);
        if self.variance_points > 1 {
            g += (self.variance_points as f64).powi(f as i32);
        }
        if self.polish {
            let d = self.polish_dim(f) as f64;
            g += self.polish_iters as f64 * (2.0 * d + 2.0 * d * (d - 1.0) + 1.0);
        }
        g
    }

    /// Leaf evaluations of one solve with `f` free directions.
    pub fn tree_size(&self, f: usize) -> f64 {
        ((self.nodes as f64).powi(f as i32) * self.evaluations_per_node(f)).powi(self.n_steps as i32)
    }

    fn validate(&self, m: usize) -> Result<()> {
        if !(1..=4).contains(&self.n_steps) {
            return invalid(format!("DP steps must be in 1..=4, got {}", self.n_steps));
        }
        if !(7..=15).contains(&self.nodes) {
            return invalid(format!("quadrature nodes must be in 7..=15, got {}", self.nodes));
        }
        for (name, v) in [("control_points", self.control_points), ("variance_points", self.variance_points)] {
            if v == 0 || v > 41 || v % 2 == 0 {
                return invalid(format!("{name} must be odd and at most 41, got {v}"));
            }
        }
        if !(self.bound_scale > 0.0) {
            return invalid("bound_scale must be positive");
        }
        if let Some(dirs) = &self.directions {
            if dirs.is_empty() {
                return invalid("at least one free direction is required");
            }
            for (i, a) in dirs.iter().enumerate() {
                if a.len() != m {
                    return Err(Error::ShapeMismatch(format!("direction {i} has length {} but the claim has dimension {m}", a.len())));
                }
                for (j, b) in dirs.iter().enumerate() {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    if (dot - want).abs() > 1e-10 {
                        return invalid("free directions must be orthonormal");
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DpResult {
    pub value: f64,
    /// Optimal drift per free direction at time zero.
    pub root_control: Vec<f64>,
    /// Optimal log-variance factor per free direction at time zero.
    pub root_log_variance: Vec<f64>,
    /// Quadrature mean and standard deviation of F without control.
    pub mean_payoff: f64,
    pub sd_payoff: f64,
    pub drift_bound: f64,
    pub tree_size: f64,
}

struct Solver<'a> {
    claim: &'a dyn ClaimFunctional,
    n: usize,
    m: usize,
    f: usize,
    dirs: Vec<Vec<f64>>,
    rule: Rule,
    eps: f64,
    sign: f64,
    dt: f64,
    sqdt: f64,
    control_points: usize,
    variance_points: usize,
    bound_scale: f64,
    polish: bool,
    iters: usize,
}

/// Control box at one tree node.
struct LocalBox {
    phi_grid: Vec<f64>,
    ell_grid: Vec<f64>,
    bounds: Vec<f64>,
    steps: Vec<f64>,
}

fn uniform_grid(points: usize, bound: f64) -> Vec<f64> {
    if points == 1 || bound == 0.0 {
        return vec![0.0];
    }
    let h = 2.0 * bound / (points - 1) as f64;
    (0..points).map(|i| if 2 * i + 1 == points { 0.0 } else { -bound + i as f64 * h }).collect()
}

impl Solver<'_> {
    fn n_children(&self) -> usize {
        self.rule.nodes.len().pow(self.f as u32)
    }

    /// Writes the increment of child `j` under control `c` into slot k.
    fn set_child(&self, k: usize, c: &[f64], j: usize, path: &mut Path) -> f64 {
        let nodes = self.rule.nodes.len();
        let inc = &mut path.increments[k * self.m..(k + 1) * self.m];
        inc.fill(0.0);
        let mut w = 1.0;
        let mut jj = j;
        for a in 0..self.f {
            let q = jj % nodes;
            jj /= nodes;
            w *= self.rule.weights[q];
            let ell = if c.len() > self.f { c[self.f + a] } else { 0.0 };
            let x = self.eps * c[a] * self.dt + (0.5 * ell).exp() * self.sqdt * self.rule.nodes[q];
            for (v, d) in inc.iter_mut().zip(&self.dirs[a]) {
                *v += x * d;
            }
        }
        w
    }

    fn cost(&self, c: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in 0..self.f {
            s += 0.5 * c[a] * c[a] * self.dt;
            if c.len() > self.f {
                let l = c[self.f + a];
                s += (l.exp() - 1.0 - l) / (2.0 * self.eps * self.eps);
            }
        }
        s
    }

    fn leaf(&self, path: &mut Path, obs: &mut Observation) -> Result<f64> {
        path.rebuild_levels();
        self.claim.observe(path, Want::PAYOFF, obs)?;
        Ok(self.sign * obs.payoff)
    }

    /// Expected continuation value minus running cost under control c.
    fn objective(&self, k: usize, c: &[f64], path: &mut Path, obs: &mut Observation) -> Result<f64> {
        let nc = self.n_children();
        let total = if k == 0 && nc > 1 {
            let parts: Result<Vec<f64>> = (0..nc)
                .into_par_iter()
                .map_init(
                    || (path.clone(), obs.clone()),
                    |(p, o), j| {
                        let w = self.set_child(k, c, j, p);
                        Ok(w * self.value(k + 1, p, o)?)
                    },
                )
                .collect();
            parts?.iter().sum()
        } else {
            let mut s = 0.0;
            for j in 0..nc {
                let w = self.set_child(k, c, j, path);
                s += w * self.value(k + 1, path, obs)?;
            }
            s
        };
        Ok(total - self.cost(c))
    }

    fn value(&self, k: usize, path: &mut Path, obs: &mut Observation) -> Result<f64> {
        if k == self.n {
            return self.leaf(path, obs);
        }
        Ok(self.optimise(k, path, obs)?.0)
    }

    fn grid_search(&self, k: usize, c: &mut [f64], offset: usize, grid: &[f64], path: &mut Path, obs: &mut Observation) -> Result<f64> {
        let g = grid.len();
        let total = g.pow(self.f as u32);
        let mut best = (f64::NEG_INFINITY, 0usize);
        let mut trial = c.to_vec();
        for idx in 0..total {
            let mut r = idx;
            for a in 0..self.f {
                trial[offset + a] = grid[r % g];
                r /= g;
            }
            let v = self.objective(k, &trial, path, obs)?;
            if v > best.0 {
                best = (v, idx);
            }
        }
        let mut r = best.1;
        for a in 0..self.f {
            let i = r % g;
            r /= g;
            if g > 1 && (i == 0 || i == g - 1) {
                return Err(Error::BoundaryOptimum(format!("step {k}: optimum at the edge of the control grid ({})", grid[i])));
            }
            c[offset + a] = grid[i];
        }
        Ok(best.0)
    }

    /// The box scales with the conditional spread of F below this node.
    fn local_box(&self, k: usize, path: &mut Path, obs: &mut Observation) -> Result<LocalBox> {
        let (_, sd) = subtree_moments(self.claim, k, self.n, &self.dirs, &self.rule, self.sqdt, path, obs)?;
        let b_phi = self.bound_scale * self.eps * sd;
        let b_ell = (self.bound_scale * self.eps * self.eps * sd).min(2.0);
        let variance = self.variance_points > 1 && b_phi > 0.0;
        let mut bounds = vec![b_phi; self.f];
        let mut steps = vec![1e-3 * b_phi; self.f];
        if variance {
            bounds.extend(std::iter::repeat_n(b_ell, self.f));
            steps.extend(std::iter::repeat_n(1e-3 * b_ell, self.f));
        }
        Ok(LocalBox {
            phi_grid: uniform_grid(self.control_points, b_phi),
            ell_grid: if variance { uniform_grid(self.variance_points, b_ell) } else { vec![0.0] },
            bounds,
            steps,
        })
    }

    fn optimise(&self, k: usize, path: &mut Path, obs: &mut Observation) -> Result<(f64, Vec<f64>)> {
        let lb = self.local_box(k, path, obs)?;
        let dim = lb.bounds.len();
        let mut c = vec![0.0; dim];
        let mut best = self.grid_search(k, &mut c, 0, &lb.phi_grid, path, obs)?;
        if dim > self.f {
            best = self.grid_search(k, &mut c, self.f, &lb.ell_grid, path, obs)?;
        }
        if self.polish && lb.bounds[0] > 0.0 {
            best = self.newton(k, &mut c, best, &lb, path, obs)?;
        }
        Ok((best, c))
    }

    /// Newton iterations on finite-difference derivatives, kept inside the
    /// box and accepted only when they improve the objective.
    fn newton(&self, k: usize, c: &mut [f64], mut best: f64, lb: &LocalBox, path: &mut Path, obs: &mut Observation) -> Result<f64> {
        let d = c.len();
        let active: Vec<usize> = (0..d).filter(|&i| lb.bounds[i] > 0.0).collect();
        let na = active.len();
        if na == 0 {
            return Ok(best);
        }
        let mut g = vec![0.0; na];
        let mut h = vec![0.0; na * na];
        let mut x = c.to_vec();
        for _ in 0..self.iters {
            let f0 = best;
            for (p, &i) in active.iter().enumerate() {
                let s = lb.steps[i];
                x[i] = c[i] + s;
                let fp = self.objective(k, &x, path, obs)?;
                x[i] = c[i] - s;
                let fm = self.objective(k, &x, path, obs)?;
                x[i] = c[i];
                g[p] = (fp - fm) / (2.0 * s);
                h[p * na + p] = (fp - 2.0 * f0 + fm) / (s * s);
            }
            for p in 0..na {
                for q in p + 1..na {
                    let (i, j) = (active[p], active[q]);
                    let (si, sj) = (lb.steps[i], lb.steps[j]);
                    let mut corner = |a: f64, b: f64| -> Result<f64> {
                        x[i] = c[i] + a * si;
                        x[j] = c[j] + b * sj;
                        let v = self.objective(k, &x, path, obs);
                        x[i] = c[i];
                        x[j] = c[j];
                        v
                    };
                    let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * si * sj);
                    h[p * na + q] = v;
                    h[q * na + p] = v;
                }
            }
            // maximise: solve (-H) s = g
            let mut neg: Vec<f64> = h.iter().map(|v| -v).collect();
            if !linalg::cholesky(&mut neg, na, 0.0) {
                break;
            }
            let mut s = g.clone();
            linalg::cholesky_solve(&neg, na, &mut s);
            let mut inside = true;
            for (p, &i) in active.iter().enumerate() {
                x[i] = c[i] + s[p];
                inside &= x[i].abs() <= lb.bounds[i];
            }
            if !inside {
                x.copy_from_slice(c);
                break;
            }
            let v = self.objective(k, &x, path, obs)?;
            if v > best {
                best = v;
                c.copy_from_slice(&x);
            } else {
                x.copy_from_slice(c);
                break;
            }
            let size = active.iter().enumerate().map(|(p, &i)| (s[p] / lb.bounds[i]).abs()).fold(0.0, f64::max);
            if size < 1e-10 {
                break;
            }
        }
        Ok(best)
    }
}

/// Quadrature mean and standard deviation of F over the uncontrolled
/// subtree below step k (increments before k taken from `path`).
#[allow(clippy::too_many_arguments)]
fn subtree_moments(claim: &dyn ClaimFunctional, k: usize, n: usize, dirs: &[Vec<f64>], rule: &Rule, sqdt: f64, path: &mut Path, obs: &mut Observation) -> Result<(f64, f64)> {
    // moments about the first leaf value, so a constant subtree has sd 0
    #[allow(clippy::too_many_arguments)]
    fn rec(claim: &dyn ClaimFunctional, k: usize, n: usize, dirs: &[Vec<f64>], rule: &Rule, sqdt: f64, path: &mut Path, obs: &mut Observation, r: &mut Option<f64>) -> Result<(f64, f64)> {
        if k == n {
            path.rebuild_levels();
            claim.observe(path, Want::PAYOFF, obs)?;
            let x = obs.payoff - *r.get_or_insert(obs.payoff);
            return Ok((x, x * x));
        }
        let (f, nodes, m) = (dirs.len(), rule.nodes.len(), path.dim);
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..nodes.pow(f as u32) {
            let inc = &mut path.increments[k * m..(k + 1) * m];
            inc.fill(0.0);
            let (mut w, mut jj) = (1.0, j);
            for dir in dirs {
                let q = jj % nodes;
                jj /= nodes;
                w *= rule.weights[q];
                for (v, d) in inc.iter_mut().zip(dir) {
                    *v += sqdt * rule.nodes[q] * d;
                }
            }
            let (a, b) = rec(claim, k + 1, n, dirs, rule, sqdt, path, obs, r)?;
            s1 += w * a;
            s2 += w * b;
        }
        Ok((s1, s2))
    }
    let mut r = None;
    let (s1, s2) = rec(claim, k, n, dirs, rule, sqdt, path, obs, &mut r)?;
    Ok((r.unwrap_or(0.0) + s1, (s2 - s1 * s1).max(0.0).sqrt()))
}

/// Backward-induction optimum of the control problem on the quadrature tree.
pub fn dp_control_value(claim: &dyn ClaimFunctional, eps: f64, inst: &DpInstance) -> Result<DpResult> {
    let m = claim.brownian_dim();
    inst.validate(m)?;
    if !eps.is_finite() || eps < 0.0 {
        return invalid("eps must be finite and nonnegative");
    }
    let f = inst.n_free(m);
    let size = inst.tree_size(f);
    if size >= MAX_TREE_EVALUATIONS {
        return Err(Error::TreeTooLarge(size));
    }
    let grid = TimeGrid::new(inst.horizon, inst.n_steps)?;
    let dirs: Vec<Vec<f64>> = inst.directions.clone().unwrap_or_else(|| {
        (0..m)
            .map(|i| {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                e
            })
            .collect()
    });
    let rule = gauss_hermite(inst.nodes)?;
    let mut path = Path::new(grid, m);
    let mut obs = claim.new_observation(grid);
    let (mean, sd) = subtree_moments(claim, 0, inst.n_steps, &dirs, &rule, grid.dt().sqrt(), &mut path, &mut obs)?;
    let sign = match inst.sense {
        Sense::Maximise => 1.0,
        Sense::Minimise => -1.0,
    };
    let b_phi = inst.bound_scale * eps * sd;
    if b_phi == 0.0 {
        return Ok(DpResult { value: mean, root_control: vec![0.0; f], root_log_variance: vec![0.0; f], mean_payoff: mean, sd_payoff: sd, drift_bound: 0.0, tree_size: size });
    }
    let solver = Solver {
        claim,
        n: inst.n_steps,
        m,
        f,
        dirs,
        rule,
        eps,
        sign,
        dt: grid.dt(),
        sqdt: grid.dt().sqrt(),
        control_points: inst.control_points,
        variance_points: inst.variance_points,
        bound_scale: inst.bound_scale,
        polish: inst.polish,
        iters: inst.polish_iters,
    };
    let (v, c) = solver.optimise(0, &mut path, &mut obs)?;
    let variance = c.len() > f;
    let root_log_variance = if variance { c[f..].to_vec() } else { vec![0.0; f] };
    Ok(DpResult {
        value: sign * v,
        root_control: c[..f].to_vec(),
        root_log_variance,
        mean_payoff: mean,
        sd_payoff: sd,
        drift_bound: b_phi,
        tree_size: size,
    })
}

/// Values under successively doubled grid resolution, polish off.
#[derive(Debug, Clone, Serialize)]
pub struct DpRefinement {
    pub control_points: Vec<usize>,
    pub values: Vec<f64>,
    pub changes: Vec<f64>,
    /// Every change is no larger than the one before (up to 1e-12).
    pub cauchy: bool,
}

pub fn dp_refinement(claim: &dyn ClaimFunctional, eps: f64, inst: &DpInstance, control_points: &[usize]) -> Result<DpRefinement> {
    let mut values = Vec::new();
    for &p in control_points {
        let mut i = inst.clone();
        i.control_points = p;
        if i.variance_points > 1 {
            i.variance_points = p;
        }
        i.polish = false;
        values.push(dp_control_value(claim, eps, &i)?.value);
    }
    let changes: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let cauchy = changes.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(DpRefinement { control_points: control_points.to_vec(), values, changes, cauchy })
}
