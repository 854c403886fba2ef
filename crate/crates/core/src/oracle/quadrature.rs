//! Gaussian quadrature rules from the Golub-Welsch eigenproblem.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Result};

/// Nodes and weights, sorted by node.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(off: &[f64], mass: f64) -> Rule {
    let n = off.len() + 1;
    let mut j = DMatrix::<f64>::zeros(n, n);
    for (k, b) in off.iter().enumerate() {
        j[(k, k + 1)] = *b;
        j[(k + 1, k)] = *b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n).map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
}

/// Expectation rule for a standard normal variable (probabilists' Hermite),
/// weights summing to one.
pub fn gauss_hermite(n: usize) -> Result<Rule> {
    if !(1..=64).contains(&n) {
        return invalid(format!("Gauss-Hermite order must be in 1..=64, got {n}"));
    }
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let mut r = golub_welsch(&off, 1.0);
    // symmetrise away the last bits of eigen-solver asymmetry
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (r.nodes[j] - r.nodes[i]);
        let w = 0.5 * (r.weights[i] + r.weights[j]);
        r.nodes[i] = -x;
        r.nodes[j] = x;
        r.weights[i] = w;
        r.weights[j] = w;
    }
    if n % 2 == 1 {
        r.nodes[n / 2] = 0.0;
    }
    Ok(r)
}

/// Gauss-Legendre rule on [a, b].
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<Rule> {
    if !(1..=128).contains(&n) {
        return invalid(format!("Gauss-Legendre order must be in 1..=128, got {n}"));
    }
    let off: Vec<f64> = (1..n).map(|k| k as f64 / ((4 * k * k - 1) as f64).sqrt()).collect();
    let r = golub_welsch(&off, 2.0);
    let (h, c) = (0.5 * (b - a), 0.5 * (b + a));
    Ok(Rule { nodes: r.nodes.iter().map(|x| c + h * x).collect(), weights: r.weights.iter().map(|w| h * w).collect() })
}

/// Composite Gauss-Legendre integral of f over [a, b].
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, order: usize) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let base = gauss_legendre(order, -1.0, 1.0)?;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        let mut s = 0.0;
        for (x, w) in base.nodes.iter().zip(&base.weights) {
            s += w * f(c + 0.5 * h * x);
        }
        total += 0.5 * h * s;
    }
    Ok(total)
}
