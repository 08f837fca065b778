//! Excursions from zero and the excursion measure restricted to paths that
//! reach a level `delta`.
//!
//! By the hitting identity `P_eps(hit delta) = S(eps)/S(delta)`, the limit
//! `(1/S(eps)) P_eps` restricted to excursions reaching `delta` has mass
//! `1/S(delta)`, and after the first passage at `delta` the path is `Y`
//! started at `delta`. Sampling uses exactly that: weight `1/S(delta)` and a
//! path of `Y` from `delta` run to absorption. Only the ascent from 0 to
//! `delta` is dropped, which is invisible to functionals that vanish below
//! `delta`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{ConvergenceReport, FunctionalSpec};
use crate::forest::sample_immigrants;
use crate::model::{CoefficientBundle, SparseInitialCondition};
use crate::paths::{
    simulate_independent, simulate_y_timedep, simulate_y_to_absorption, Immigration, Record, SamplePath,
    SimOptions, TimeGrid,
};
use crate::quadrature::{gauss_legendre, ScaleTable};
use crate::rng::RngStream;
use crate::stats::{Estimate, Welford};

/// Tolerance for the sampler's scale-function evaluations.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Censoring horizon in units of the mean absorption time from `delta`.
pub const HORIZON_FACTOR: f64 = 50.0;
/// Censor rates above this are reported as a warning.
pub const CENSOR_WARN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excursion {
    pub birth_time: f64,
    /// Path by age (time since birth); `path.t0` is 0.
    pub path: SamplePath,
    /// Absorption age, or the censoring age when `censored`.
    pub t0: f64,
    pub censored: bool,
}

impl Excursion {
    /// Value at age `u`; zero before birth and after absorption. A censored
    /// excursion holds its last simulated value.
    pub fn value(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        if self.censored && u >= self.t0 {
            return self.path.values.last().copied().unwrap_or(0.0);
        }
        self.path.at_time(u)
    }

    /// Value at absolute time `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        self.value(t - self.birth_time)
    }

    pub fn sup(&self) -> f64 {
        self.path.peak()
    }

    /// Trapezoidal `int_0^{T0} g(eta_u) du` along the stored path.
    pub fn time_integral<G: Fn(f64) -> f64>(&self, g: G) -> f64 {
        let v = &self.path.values;
        if v.len() < 2 {
            return 0.0;
        }
        let inner: f64 = v[1..v.len() - 1].iter().map(|&x| g(x)).sum();
        self.path.dt * (inner + 0.5 * (g(v[0]) + g(v[v.len() - 1])))
    }
}

/// The excursion measure restricted to `{sup >= delta}`.
#[derive(Clone, Debug)]
pub struct QSampler {
    table: Arc<ScaleTable>,
    pub delta: f64,
    /// `1 / S(delta)`.
    pub rate_mass: f64,
    pub rate_mass_error: f64,
    /// Maximum simulated excursion length.
    pub horizon: f64,
    pub dt: f64,
    opts: SimOptions,
}

impl QSampler {
    pub fn new(bundle: &CoefficientBundle, delta: f64) -> Result<Self> {
        let table = Arc::new(ScaleTable::build(bundle, DEFAULT_TOL)?);
        Self::from_table(table, delta)
    }

    pub fn from_table(table: Arc<ScaleTable>, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::param("delta", "must lie in (0,1)"));
        }
        let hc = table.hitting_condition(0.5, DEFAULT_TOL)?;
        if !hc.holds() {
            return Err(Error::HittingConditionViolated {
                endpoint: if hc.below.is_finite() { 1.0 } else { 0.0 },
            });
        }
        let s = table.scale_function(delta);
        let rate_mass = 1.0 / s.value;
        let dt = table.bundle().default_dt();
        let mean_t0 = table.green_integral(delta, |_| 1.0, 1e-8).value;
        let horizon = (HORIZON_FACTOR * mean_t0).max(100.0 * dt);
        Ok(Self {
            rate_mass,
            rate_mass_error: s.abs_error * rate_mass * rate_mass,
            table,
            delta,
            horizon,
            dt,
            opts: SimOptions::default(),
        })
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        self.dt = dt;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("horizon", "must be positive"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    /// Same bundle and scale table at another level.
    pub fn at_delta(&self, delta: f64) -> Result<Self> {
        let s = Self::from_table(self.table.clone(), delta)?;
        s.with_dt(self.dt)
    }

    pub fn bundle(&self) -> &CoefficientBundle {
        self.table.bundle()
    }

    pub fn table(&self) -> &Arc<ScaleTable> {
        &self.table
    }

    /// `E_delta[T0]` from the Green function.
    pub fn mean_absorption_time(&self) -> f64 {
        self.table.green_integral(self.delta, |_| 1.0, 1e-8).value
    }

    fn max_steps(&self, span: f64) -> usize {
        (span.min(self.horizon) / self.dt).ceil().max(1.0) as usize
    }

    /// One excursion from `delta`, born at time 0.
    pub fn sample(&self, stream: &RngStream) -> Result<Excursion> {
        self.sample_within(f64::INFINITY, stream)
    }

    /// Excursion simulated for at most `span` (not censored if it is cut at
    /// `span < horizon`; the caller does not look past it).
    pub fn sample_within(&self, span: f64, stream: &RngStream) -> Result<Excursion> {
        let steps = self.max_steps(span);
        let path = simulate_y_to_absorption(self.bundle(), self.delta, 0.0, self.dt, steps, stream, &self.opts)?;
        Ok(finish_excursion(path, self.horizon <= span))
    }

    /// Path of `Y` from an arbitrary start value, with the sampler's step and
    /// horizon handling.
    pub fn sample_from(&self, x: f64, span: f64, stream: &RngStream) -> Result<Excursion> {
        let steps = self.max_steps(span);
        let path = simulate_y_to_absorption(self.bundle(), x, 0.0, self.dt, steps, stream, &self.opts)?;
        Ok(finish_excursion(path, self.horizon <= span))
    }
}

fn finish_excursion(mut path: SamplePath, horizon_binding: bool) -> Excursion {
    let censored = path.censored && horizon_binding;
    path.censored = censored;
    let t0 = match path.absorbed_at {
        Some(k) => k as f64 * path.dt,
        None => (path.values.len() - 1) as f64 * path.dt,
    };
    Excursion {
        birth_time: 0.0,
        path,
        t0,
        censored,
    }
}

/// Draws one sampler excursion per replicate from `stream.child(r)`.
pub fn sample_q_excursion(sampler: &QSampler, stream: &RngStream) -> Result<Excursion> {
    sampler.sample(stream)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEstimate {
    pub estimate: Estimate,
    pub censored: usize,
    pub n: usize,
}

impl QEstimate {
    pub fn censor_rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.censored as f64 / self.n as f64
        }
    }

    pub fn censor_warning(&self) -> bool {
        self.censor_rate() > CENSOR_WARN
    }
}

/// Monte Carlo `int F dQ = (1/S(delta)) E_delta[F]`.
pub fn q_integral<F>(sampler: &QSampler, functional: F, n_reps: usize, stream: &RngStream) -> Result<QEstimate>
where
    F: Fn(&Excursion) -> f64 + Sync,
{
    let draws: Result<Vec<(f64, bool)>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let e = sampler.sample(&stream.child(r))?;
            let v = functional(&e);
            if !v.is_finite() {
                return Err(Error::InvalidFunctional(format!("non-finite value {v} on replicate {r}")));
            }
            Ok((v, e.censored))
        })
        .collect();
    let draws = draws?;
    let mut w = Welford::default();
    let mut censored = 0;
    for (v, c) in &draws {
        w.push(*v);
        censored += *c as usize;
    }
    Ok(QEstimate {
        estimate: w.estimate().scale(sampler.rate_mass),
        censored,
        n: n_reps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub delta: f64,
    pub mass: f64,
    pub mean_area: Estimate,
    pub censor_rate: f64,
}

/// `(delta, 1/S(delta), (1/S(delta)) E[int eta], censor rate)`.
pub fn delta_summary(sampler: &QSampler, n_reps: usize, stream: &RngStream) -> Result<DeltaSummary> {
    let q = q_integral(sampler, |e| e.time_integral(|x| x), n_reps, stream)?;
    Ok(DeltaSummary {
        delta: sampler.delta,
        mass: sampler.rate_mass,
        mean_area: q.estimate,
        censor_rate: q.censor_rate(),
    })
}

/// Settings of the Poisson-limit harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonConfig {
    /// Level of the Q sampler used for the target.
    pub delta: f64,
    /// Excursions drawn for the target.
    pub q_reps: usize,
    /// Step of the finite-D paths (defaults to the bundle's).
    pub dt: Option<f64>,
    /// Gauss-Legendre nodes for the time integral.
    pub nodes: usize,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            delta: 0.005,
            q_reps: 100_000,
            dt: None,
            nodes: 64,
        }
    }
}

/// `c int_0^{t-s} q(v) dv` with `q(v) = int phi(eta_v) Q(d eta)`, all nodes
/// evaluated on one shared excursion sample.
pub fn poisson_target(
    sampler: &QSampler,
    c: f64,
    span: f64,
    phi: &(dyn Fn(f64) -> f64 + Sync),
    nodes: usize,
    n_reps: usize,
    stream: &RngStream,
) -> Result<QEstimate> {
    if c == 0.0 || span <= 0.0 {
        return Ok(QEstimate {
            estimate: Estimate::exact(0.0),
            censored: 0,
            n: 0,
        });
    }
    let (x, w) = gauss_legendre(nodes);
    let v: Vec<f64> = x.iter().map(|&xi| 0.5 * span * (xi + 1.0)).collect();
    let w: Vec<f64> = w.iter().map(|&wi| 0.5 * span * wi).collect();
    let q = q_integral(
        sampler,
        |e| v.iter().zip(&w).map(|(&vk, &wk)| wk * phi(e.value(vk))).sum(),
        n_reps,
        stream,
    )?;
    Ok(QEstimate {
        estimate: q.estimate.scale(c),
        ..q
    })
}

/// Finite-D side of the Poisson limit: `D E[phi(Y^{D,c}_t)]` with `Y` started
/// at 0 at time `s`.
#[allow(clippy::too_many_arguments)]
pub fn scaled_immigration_mean(
    bundle: &CoefficientBundle,
    d: u64,
    c: f64,
    s: f64,
    t: f64,
    phi: &(dyn Fn(f64) -> f64 + Sync),
    dt: f64,
    n_reps: usize,
    stream: &RngStream,
) -> Result<Estimate> {
    if c == 0.0 || t <= s {
        return Ok(Estimate::exact(0.0));
    }
    let grid = TimeGrid::covering(s, t - s, dt)?;
    let g = Immigration::Constant(c);
    let opts = SimOptions::default();
    let vals: Result<Vec<f64>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let p = simulate_y_timedep(bundle, d, &g, 0.0, &grid, &stream.child(r), &opts)?;
            Ok(d as f64 * phi(p.value(grid.n_steps)))
        })
        .collect();
    Ok(Estimate::from_samples(&vals?))
}

/// Poisson limit for constant immigration `g = c`.
#[allow(clippy::too_many_arguments)]
pub fn poisson_limit_constant(
    bundle: &CoefficientBundle,
    c: f64,
    s: f64,
    t: f64,
    phi: &(dyn Fn(f64) -> f64 + Sync),
    d_ladder: &[u64],
    n_reps: usize,
    stream: &RngStream,
    cfg: &PoissonConfig,
) -> Result<ConvergenceReport> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::param("c", "must be nonnegative"));
    }
    if t < s {
        return Err(Error::param("t", "must be at least s"));
    }
    if phi(0.0).abs() > 1e-12 {
        return Err(Error::InvalidFunctional("phi(0) must be 0".into()));
    }
    let dt = cfg.dt.unwrap_or_else(|| bundle.default_dt());
    let mut notes = Vec::new();
    let target = if c == 0.0 || t == s {
        Estimate::exact(0.0)
    } else {
        let sampler = QSampler::new(bundle, cfg.delta)?.with_dt(dt)?;
        let q = poisson_target(&sampler, c, t - s, phi, cfg.nodes, cfg.q_reps, &stream.fork(1))?;
        if q.censor_warning() {
            notes.push(format!("target sample censor rate {:.4}", q.censor_rate()));
        }
        q.estimate
    };
    let mut rows = Vec::new();
    for &d in d_ladder {
        let top = c / d as f64 + bundle.h_tilde(d, 1.0);
        if top > 1e-12 {
            notes.push(format!("D = {d} dropped: c/D + h_tilde_D(1) = {top} > 0"));
            continue;
        }
        let est = scaled_immigration_mean(bundle, d, c, s, t, phi, dt, n_reps, &stream.fork(2).child(d))?;
        rows.push((d as usize, est));
    }
    Ok(ConvergenceReport::build("poisson_limit_constant", rows, target, notes))
}

/// Settings for the vanishing-immigration comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanishingConfig {
    pub delta: f64,
    pub dt: Option<f64>,
}

impl Default for VanishingConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            dt: None,
        }
    }
}

/// Laplace functional of `D` independent diffusions with immigration
/// `g_D / D` against the Poisson-integral form with immigrant rate `g(u, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn vanishing_immigration_measure(
    bundle: &CoefficientBundle,
    g_d: &(dyn Fn(u64) -> Immigration + Sync),
    g: &Immigration,
    s: f64,
    spec: &FunctionalSpec,
    d_ladder: &[u64],
    n_reps: usize,
    stream: &RngStream,
    cfg: &VanishingConfig,
) -> Result<ConvergenceReport> {
    let t_end = *spec.times.last().expect("spec has times");
    if spec.times[0] < s {
        return Err(Error::param("times", "must not precede s"));
    }
    let dt = cfg.dt.unwrap_or_else(|| bundle.default_dt());
    let span = t_end - s;
    let mut notes = Vec::new();

    let sampler = QSampler::new(bundle, cfg.delta)?.with_dt(dt)?;
    let rhs: Result<Vec<f64>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let imm = sample_immigrants(&sampler, &|u| g.eval(u, 0.0), s, t_end, &stream.fork(3).child(r))?;
            let sums: Vec<f64> = spec
                .times
                .iter()
                .enumerate()
                .map(|(j, &t)| imm.iter().map(|e| spec.phi(j, e.value_at(t))).sum())
                .collect();
            Ok(spec.combine(&sums))
        })
        .collect();
    let target = Estimate::from_samples(&rhs?);

    let mut rows = Vec::new();
    for &d in d_ladder {
        let gd = g_d(d);
        let grid = if span > 0.0 {
            TimeGrid::covering(s, span, dt)?
        } else {
            TimeGrid::new(s, dt, 1)?
        };
        if let Err(e) = crate::paths::check_immigration(bundle, d, &gd, &grid) {
            notes.push(format!("D = {d} dropped: {e}"));
            continue;
        }
        let probes: Vec<usize> = spec.times.iter().map(|&t| grid.step_of(t)).collect();
        let opts = SimOptions {
            record: Record::Steps(probes.clone()),
            ..SimOptions::default()
        };
        let init = SparseInitialCondition::empty();
        let vals: Result<Vec<f64>> = (0..n_reps as u64)
            .into_par_iter()
            .map(|r| {
                let p = simulate_independent(bundle, d as usize, &gd, &init, &grid, &stream.fork(4).child(d).child(r), &opts)?;
                let sums: Vec<f64> = probes
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| p.frame(k).expect("probe recorded").iter().map(|&x| spec.phi(j, x)).sum())
                    .collect();
                Ok(spec.combine(&sums))
            })
            .collect();
        rows.push((d as usize, Estimate::from_samples(&vals?)));
    }
    Ok(ConvergenceReport::build("vanishing_immigration", rows, target, notes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{altruism_preset, default_mutation_profile, AltruismParams};

    fn sampler(delta: f64) -> QSampler {
        let b = altruism_preset(AltruismParams::new(1.0, 1.0, 1.0, 2.0), default_mutation_profile()).unwrap();
        QSampler::new(&b, delta).unwrap()
    }

    #[test]
    fn excursions_start_at_delta_and_end_at_zero() {
        let q = sampler(0.05);
        for r in 0..50 {
            let e = q.sample(&RngStream::new(2, r)).unwrap();
            assert_eq!(e.path.values[0], 0.05);
            assert!(e.censored || *e.path.values.last().unwrap() == 0.0);
            assert!(e.path.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mass_decreases_in_delta() {
        let q = sampler(0.01);
        let mut last = f64::INFINITY;
        for d in [0.01, 0.02, 0.05, 0.1, 0.5] {
            let m = q.at_delta(d).unwrap().rate_mass;
            assert!(m < last);
            last = m;
        }
    }

    #[test]
    fn zero_functional() {
        let q = sampler(0.05);
        let r = q_integral(&q, |_| 0.0, 10, &RngStream::new(1, 0)).unwrap();
        assert_eq!(r.estimate.mean, 0.0);
        assert_eq!(r.estimate.std_error, 0.0);
    }
}
