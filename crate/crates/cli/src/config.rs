use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use dualexp::ZerothEstimator;

use crate::{catalog, Issue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Price,
    ExpansionScaling,
    VerifyLemma,
    Entropy,
    OracleCompare,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Named {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimSection {
    pub label: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Risk aversions (price).
    #[serde(default)]
    pub alpha: Vec<f64>,
    /// Order parameters (expansion-scaling, verify-lemma, oracle-compare).
    #[serde(default)]
    pub eps: Vec<f64>,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub zeroth: ZerothEstimator,
    /// Steps of the brute-force DP oracle.
    #[serde(default = "default_dp_steps")]
    pub dp_steps: usize,
}

fn default_degree() -> usize {
    3
}

fn default_horizon() -> f64 {
    1.0
}

fn default_dp_steps() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub model: Named,
    #[serde(default)]
    pub claim: Option<ClaimSection>,
    pub settings: Settings,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<String>,
}

pub fn load(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Every violated constraint; never simulates.
pub fn violations(cfg: &ExperimentConfig) -> Vec<Issue> {
    let mut v = Vec::new();
    let s = &cfg.settings;
    if s.n_paths < 1000 {
        v.push(Issue::config(format!("n_paths must be at least 1000, got {}", s.n_paths)));
    }
    if s.n_steps == 0 {
        v.push(Issue::config("n_steps must be positive"));
    }
    if s.basis_degree > 6 {
        v.push(Issue::config(format!("basis_degree must be in 0..=6, got {}", s.basis_degree)));
    }
    if !(s.horizon > 0.0 && s.horizon.is_finite()) {
        v.push(Issue::config("horizon must be positive"));
    }
    if s.alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
        v.push(Issue::config("alpha must be positive"));
    }
    if s.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        v.push(Issue::config("eps must be positive"));
    }
    match cfg.kind {
        Kind::Price if s.alpha.is_empty() => v.push(Issue::config("price needs a nonempty alpha list")),
        Kind::ExpansionScaling | Kind::VerifyLemma | Kind::OracleCompare if s.eps.is_empty() => {
            v.push(Issue::config(format!("{} needs a nonempty eps list", kind_name(cfg.kind))))
        }
        _ => {}
    }
    if cfg.kind == Kind::OracleCompare && !(1..=4).contains(&s.dp_steps) {
        v.push(Issue::config(format!("dp_steps must be in 1..=4, got {}", s.dp_steps)));
    }
    let model = match catalog::build_model(&cfg.model) {
        Ok(m) => Some(m),
        Err(e) => {
            v.extend(e);
            None
        }
    };
    match (&cfg.claim, cfg.kind) {
        (None, Kind::Entropy) => {}
        (None, _) => v.push(Issue::config(format!("{} needs a claim section", kind_name(cfg.kind)))),
        (Some(c), _) => {
            if let Some(m) = &model {
                if let Err(e) = catalog::build_claim(c, m) {
                    v.extend(e);
                }
            } else if !catalog::CLAIMS.iter().any(|e| e.label == c.label) {
                v.push(catalog::unknown_claim(&c.label));
            }
        }
    }
    if let Some(m) = &model {
        v.extend(catalog::kind_compatibility(cfg.kind, m, cfg.claim.as_ref()));
    }
    v
}

pub fn kind_name(k: Kind) -> &'static str {
    match k {
        Kind::Price => "price",
        Kind::ExpansionScaling => "expansion-scaling",
        Kind::VerifyLemma => "verify-lemma",
        Kind::Entropy => "entropy",
        Kind::OracleCompare => "oracle-compare",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> ExperimentConfig {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn defaults_fill_optional_settings() {
        let c = parse(r#"{"kind":"oracle-compare","model":{"name":"brownian"},"claim":{"label":"quadratic"},"settings":{"eps":[0.1],"n_paths":2000,"n_steps":4,"seed":0}}"#);
        assert_eq!(c.settings.basis_degree, 3);
        assert_eq!(c.settings.dp_steps, 3);
        assert_eq!(c.settings.horizon, 1.0);
        assert!(violations(&c).is_empty());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"kind":"price","model":{"name":"brownian"},"settings":{"n_paths":2000,"n_steps":4,"seed":0,"paths":1}}"#);
        assert!(r.is_err());
    }

    #[test]
    fn small_ensembles_and_missing_lists_are_flagged() {
        let c = parse(r#"{"kind":"expansion-scaling","model":{"name":"brownian"},"claim":{"label":"linear"},"settings":{"n_paths":10,"n_steps":0,"seed":0}}"#);
        let msgs: Vec<String> = violations(&c).into_iter().map(|i| i.message).collect();
        assert!(msgs.iter().any(|m| m.contains("n_paths")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("n_steps")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("eps list")), "{msgs:?}");
    }
}
