//! Run configuration: a TOML file with one table per module, overridden by
//! command-line flags.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sparse_chaos::experiments::FunctionalSpec;
use sparse_chaos::model::{
    altruism_preset, dawson_greven_preset, default_mutation_profile, polynomial_bundle, AltruismParams,
    DawsonGrevenParams, Polynomial, PolynomialBundleSpec,
};
use sparse_chaos::{CoefficientBundle, SparseInitialCondition};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub init: InitConfig,
    pub numerics: NumericsConfig,
    pub functional: FunctionalConfig,
    pub excursion: ExcursionConfig,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `altruism`, `dawson_greven` or `polynomial`.
    pub preset: String,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub a: f64,
    pub mu_inf: f64,
    pub c: f64,
    pub d: f64,
    pub m: f64,
    pub s: f64,
    pub polynomial: Option<PolynomialConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: "altruism".into(),
            alpha: 1.5,
            beta: 1.0,
            kappa: 1.0,
            a: 2.0,
            mu_inf: 0.0,
            c: 1.0,
            d: 1.0,
            m: 0.0,
            s: 0.5,
            polynomial: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialConfig {
    pub f_coeffs: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub sigma2: Vec<f64>,
    #[serde(default = "one_poly")]
    pub immigration: Vec<f64>,
    #[serde(default)]
    pub mu: f64,
}

fn one_poly() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// `[[deme, frequency], ...]`, demes labelled from 1.
    pub demes: Vec<(usize, f64)>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { demes: vec![(1, 0.3)] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NumericsConfig {
    pub dt: Option<f64>,
    pub delta: f64,
    pub k_max: usize,
    pub horizon: f64,
    pub n_reps: usize,
    pub d_ladder: Vec<usize>,
    pub tol: f64,
    pub node_cap: usize,
    pub grid_n: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            dt: None,
            delta: 0.02,
            k_max: 8,
            horizon: 1.0,
            n_reps: 1000,
            d_ladder: vec![25, 100, 400],
            tol: 1e-10,
            node_cap: 1_000_000,
            grid_n: 201,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionalConfig {
    /// Names from `x`, `x^2`, `x(1-x)`, one per time.
    pub phi: Vec<String>,
    pub times: Vec<f64>,
}

impl Default for FunctionalConfig {
    fn default() -> Self {
        Self {
            phi: vec!["x".into()],
            times: vec![1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcursionConfig {
    pub deltas: Vec<f64>,
    pub q_reps: usize,
    pub c: f64,
    pub s: f64,
    pub t: f64,
    pub d_ladder: Vec<u64>,
}

impl Default for ExcursionConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.05, 0.02, 0.01],
            q_reps: 100_000,
            c: 1.0,
            s: 0.0,
            t: 1.0,
            d_ladder: vec![50, 200, 800],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub master_seed: u64,
    pub output_dir: Option<String>,
}

/// One documented key of the reference page.
pub struct KeyDoc {
    pub section: &'static str,
    pub key: &'static str,
    pub doc: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc { section: "model", key: "preset", doc: "`altruism`, `dawson_greven` or `polynomial`" },
    KeyDoc { section: "model", key: "alpha", doc: "altruism: parasite selection against altruists" },
    KeyDoc { section: "model", key: "beta", doc: "altruism: resampling variance" },
    KeyDoc { section: "model", key: "kappa", doc: "altruism: migration rate" },
    KeyDoc { section: "model", key: "a", doc: "altruism: host-parasite constant, > 1" },
    KeyDoc { section: "model", key: "mu_inf", doc: "altruism: limiting immigration D h_D(0)" },
    KeyDoc { section: "model", key: "c", doc: "dawson_greven: migration rate" },
    KeyDoc { section: "model", key: "d", doc: "dawson_greven: resampling rate" },
    KeyDoc { section: "model", key: "m", doc: "dawson_greven: mutation mass, scaled by 1/D" },
    KeyDoc { section: "model", key: "s", doc: "dawson_greven: selection" },
    KeyDoc { section: "model.polynomial", key: "f_coeffs", doc: "`f(y,x) = sum f_coeffs[p][q] y^p x^q`" },
    KeyDoc { section: "model.polynomial", key: "h", doc: "coefficients of h, increasing degree" },
    KeyDoc { section: "model.polynomial", key: "sigma2", doc: "coefficients of sigma^2" },
    KeyDoc { section: "model.polynomial", key: "immigration", doc: "immigration profile, value 1 at 0 (default `[1.0]`)" },
    KeyDoc { section: "model.polynomial", key: "mu", doc: "immigration mass (default 0)" },
    KeyDoc { section: "init", key: "demes", doc: "initial `[deme, frequency]` pairs" },
    KeyDoc { section: "numerics", key: "dt", doc: "time step; unset uses the bundle's default" },
    KeyDoc { section: "numerics", key: "delta", doc: "excursion sampler level" },
    KeyDoc { section: "numerics", key: "k_max", doc: "top migration level" },
    KeyDoc { section: "numerics", key: "horizon", doc: "simulation and forest horizon" },
    KeyDoc { section: "numerics", key: "n_reps", doc: "Monte Carlo replicates" },
    KeyDoc { section: "numerics", key: "d_ladder", doc: "strictly increasing deme counts" },
    KeyDoc { section: "numerics", key: "tol", doc: "quadrature tolerance" },
    KeyDoc { section: "numerics", key: "node_cap", doc: "forest node cap" },
    KeyDoc { section: "numerics", key: "grid_n", doc: "assumption-check grid size" },
    KeyDoc { section: "functional", key: "phi", doc: "test functions `x`, `x^2`, `x(1-x)`, one per time" },
    KeyDoc { section: "functional", key: "times", doc: "increasing evaluation times" },
    KeyDoc { section: "excursion", key: "deltas", doc: "levels of the per-delta summary" },
    KeyDoc { section: "excursion", key: "q_reps", doc: "excursions drawn per Q-integral" },
    KeyDoc { section: "excursion", key: "c", doc: "Poisson limit: immigration constant" },
    KeyDoc { section: "excursion", key: "s", doc: "Poisson limit: start time" },
    KeyDoc { section: "excursion", key: "t", doc: "Poisson limit: evaluation time" },
    KeyDoc { section: "excursion", key: "d_ladder", doc: "Poisson limit: deme counts" },
    KeyDoc { section: "run", key: "master_seed", doc: "seed of every random stream" },
    KeyDoc { section: "run", key: "output_dir", doc: "output directory (else `SPARSE_CHAOS_OUT`, else `sparse-chaos-out`)" },
];

impl RunConfig {
    /// Parses a config, rejecting every key it does not know.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let mut unknown = BTreeSet::new();
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| {
            unknown.insert(path.to_string());
        })
        .map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if !unknown.is_empty() {
            let list: Vec<String> = unknown.into_iter().collect();
            return Err(CliError::Validation(format!("unknown config keys: {}", list.join(", "))));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn check(&self) -> Result<(), CliError> {
        let n = &self.numerics;
        let bad = |what: &str| Err(CliError::Validation(what.to_string()));
        if let Some(dt) = n.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad("numerics.dt must be positive");
            }
        }
        if !(n.delta > 0.0 && n.delta < 1.0) {
            return bad("numerics.delta must lie in (0,1)");
        }
        if n.k_max == 0 || n.n_reps == 0 || n.node_cap == 0 || n.grid_n < 2 {
            return bad("numerics.k_max, n_reps and node_cap must be positive and grid_n at least 2");
        }
        if !(n.horizon > 0.0 && n.tol > 0.0) {
            return bad("numerics.horizon and tol must be positive");
        }
        if n.d_ladder.is_empty() || n.d_ladder[0] == 0 || n.d_ladder.windows(2).any(|w| w[1] <= w[0]) {
            return bad("numerics.d_ladder must be strictly increasing positive integers");
        }
        let e = &self.excursion;
        if e.deltas.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            return bad("excursion.deltas must lie in (0,1)");
        }
        if e.d_ladder.is_empty() || e.d_ladder[0] == 0 || e.d_ladder.windows(2).any(|w| w[1] <= w[0]) {
            return bad("excursion.d_ladder must be strictly increasing positive integers");
        }
        if e.q_reps == 0 || e.c < 0.0 || e.t < e.s {
            return bad("excursion.q_reps must be positive, c nonnegative and t >= s");
        }
        if self.functional.phi.len() != self.functional.times.len() {
            return bad("functional.phi and functional.times must have the same length");
        }
        Ok(())
    }

    pub fn bundle(&self) -> Result<CoefficientBundle, CliError> {
        let m = &self.model;
        let b = match m.preset.as_str() {
            "altruism" => altruism_preset(
                AltruismParams {
                    alpha: m.alpha,
                    beta: m.beta,
                    kappa: m.kappa,
                    a: m.a,
                    mu_inf: m.mu_inf,
                },
                default_mutation_profile(),
            ),
            "dawson_greven" => dawson_greven_preset(DawsonGrevenParams {
                c: m.c,
                d: m.d,
                m: m.m,
                s: m.s,
            }),
            "polynomial" => {
                let p = m
                    .polynomial
                    .as_ref()
                    .ok_or_else(|| CliError::Validation("preset polynomial needs [model.polynomial]".into()))?;
                polynomial_bundle(&PolynomialBundleSpec {
                    f_coeffs: p.f_coeffs.clone(),
                    h: Polynomial(p.h.clone()),
                    sigma2: Polynomial(p.sigma2.clone()),
                    immigration: Polynomial(p.immigration.clone()),
                    mu: p.mu,
                })
            }
            other => return Err(CliError::Validation(format!("unknown preset `{other}`"))),
        };
        Ok(b?)
    }

    pub fn init(&self) -> Result<SparseInitialCondition, CliError> {
        Ok(SparseInitialCondition::new(self.init.demes.clone())?)
    }

    pub fn functional(&self) -> Result<FunctionalSpec, CliError> {
        let phis = self
            .functional
            .phi
            .iter()
            .map(|name| phi_by_name(name))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FunctionalSpec::new(phis, self.functional.times.clone())?.with_labels(self.functional.phi.clone()))
    }
}

fn phi_by_name(name: &str) -> Result<sparse_chaos::model::Fn1, CliError> {
    let f: sparse_chaos::model::Fn1 = match name {
        "x" => Arc::new(|x| x),
        "x^2" => Arc::new(|x| x * x),
        "x(1-x)" => Arc::new(|x| x * (1.0 - x)),
        other => return Err(CliError::Validation(format!("unknown test function `{other}`"))),
    };
    Ok(f)
}

/// Markdown page listing every key with its default.
pub fn reference_page() -> String {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut out = String::from("# Configuration reference\n\n");
    out.push_str("Generated by `sparse-chaos reference`. Unknown keys are rejected.\n");
    let mut current = "";
    for k in KEYS {
        if k.section != current {
            current = k.section;
            out.push_str(&format!("\n## [{current}]\n\n| key | default | meaning |\n|---|---|---|\n"));
        }
        let mut v = Some(&defaults);
        for part in k.section.split('.') {
            v = v.and_then(|t| t.get(part));
        }
        let default = v
            .and_then(|t| t.get(k.key))
            .map_or_else(|| "unset".to_string(), |d| d.to_string());
        out.push_str(&format!("| `{}` | `{}` | {} |\n", k.key, default, k.doc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_listed() {
        let e = RunConfig::from_toml("[model]\nalpha = 1.0\nalhpa = 2.0\n[bogus]\nx = 1\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("model.alhpa"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn defaults_roundtrip() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
        RunConfig::default().check().unwrap();
    }

    #[test]
    fn every_field_is_documented() {
        let v = toml::Value::try_from(RunConfig::default()).unwrap();
        for (section, table) in v.as_table().unwrap() {
            for key in table.as_table().unwrap().keys() {
                assert!(
                    KEYS.iter().any(|k| k.section == section && k.key == key),
                    "{section}.{key} undocumented"
                );
            }
        }
    }

    #[test]
    fn ladder_must_increase() {
        let mut c = RunConfig::default();
        c.numerics.d_ladder = vec![100, 25];
        assert!(c.check().is_err());
    }
}
