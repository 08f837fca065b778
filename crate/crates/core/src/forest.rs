//! The forest of excursions, sampled generation by generation.
//!
//! Generation 0 holds the paths of the initially occupied demes (full `Y`
//! dynamics from their starting values) and the immigrant excursions. Each
//! node `(s, chi)` seeds excursions of the next generation at rate
//! `a_tilde(chi_{t-s}) / S(delta)` while it is alive.
//!
//! Node ids are assigned generation by generation, parents before their
//! children and children of one parent by birth time, and every node draws
//! from its own lane. Truncating the generation count therefore only removes
//! nodes; the surviving ones are bitwise unchanged.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excursions::{Excursion, QSampler};
use crate::model::{CoefficientBundle, SparseInitialCondition};
use crate::quadrature::gk15;
use crate::rng::{reserved, RngStream};
use crate::stats::{Estimate, Welford};

pub const DEFAULT_NODE_CAP: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub horizon: f64,
    /// Last generation sampled (inclusive).
    pub n_max_gen: usize,
    pub node_cap: usize,
    /// Keep full node paths; otherwise only values at `probe_times`.
    pub keep_paths: bool,
    pub probe_times: Vec<f64>,
}

impl ForestParams {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            n_max_gen: usize::MAX,
            node_cap: DEFAULT_NODE_CAP,
            keep_paths: true,
            probe_times: Vec::new(),
        }
    }

    pub fn probes_only(mut self, times: Vec<f64>) -> Self {
        self.keep_paths = false;
        self.probe_times = times;
        self
    }

    pub fn with_generations(mut self, n_max_gen: usize) -> Self {
        self.n_max_gen = n_max_gen;
        self
    }

    pub fn with_node_cap(mut self, cap: usize) -> Self {
        self.node_cap = cap;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestNode {
    pub id: usize,
    pub generation: usize,
    pub birth_time: f64,
    pub parent: Option<usize>,
    /// Absorption age (or last simulated age).
    pub length: f64,
    pub peak: f64,
    pub censored: bool,
    pub excursion: Option<Excursion>,
    /// Values at the forest's probe times when paths are not kept.
    pub probes: Vec<f64>,
}

impl ForestNode {
    /// Value at absolute time `t`. Without a stored path only probe times are
    /// available; other times give NaN.
    pub fn value_at(&self, t: f64, probe_times: &[f64]) -> f64 {
        if let Some(e) = &self.excursion {
            return e.value_at(t);
        }
        match probe_times.iter().position(|&p| (p - t).abs() <= 1e-12) {
            Some(k) => self.probes[k],
            None => f64::NAN,
        }
    }

    /// Time after which the node is zero; infinite for censored nodes.
    pub fn death_time(&self) -> f64 {
        if self.censored {
            f64::INFINITY
        } else {
            self.birth_time + self.length
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub nodes: Vec<ForestNode>,
    pub params: ForestParams,
    pub delta: f64,
    /// Sampling stopped at the node cap; later generations are incomplete.
    pub capped: bool,
    pub n_roots: usize,
}

impl Forest {
    pub fn total_mass(&self, t: f64) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.birth_time <= t)
            .map(|n| n.value_at(t, &self.params.probe_times))
            .sum()
    }

    pub fn weighted_atomic_measure(&self, t: f64) -> AtomicMeasure {
        let atoms = self
            .nodes
            .iter()
            .filter(|n| n.birth_time <= t)
            .map(|n| n.value_at(t, &self.params.probe_times))
            .filter(|&x| x > 0.0)
            .map(|x| (x, x))
            .collect();
        AtomicMeasure { atoms }
    }

    pub fn generations(&self) -> usize {
        self.nodes.iter().map(|n| n.generation + 1).max().unwrap_or(0)
    }

    pub fn death_time(&self) -> f64 {
        self.nodes.iter().map(ForestNode::death_time).fold(0.0, f64::max)
    }

    pub fn censor_rate(&self) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        self.nodes.iter().filter(|n| n.censored).count() as f64 / self.nodes.len() as f64
    }
}

pub fn total_mass(forest: &Forest, t: f64) -> f64 {
    forest.total_mass(t)
}

pub fn weighted_atomic_measure(forest: &Forest, t: f64) -> AtomicMeasure {
    forest.weighted_atomic_measure(t)
}

/// `sum_i w_i delta_{x_i}` with `w_i = x_i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    pub atoms: Vec<(f64, f64)>,
}

impl AtomicMeasure {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    /// `int g d(measure) = sum w g(x)`.
    pub fn integrate<G: Fn(f64) -> f64>(&self, g: G) -> f64 {
        self.atoms.iter().map(|&(x, w)| w * g(x)).sum()
    }

    /// `sum phi(x)` for a mass-weighted test function `phi(x) = x g(x)`.
    pub fn sum_weighted<G: Fn(f64) -> f64>(&self, phi: G) -> f64 {
        self.atoms.iter().map(|&(x, _)| phi(x)).sum()
    }
}

/// Lipschitz constant of `a_tilde` on `[0,1]` by difference quotients.
fn a_tilde_lipschitz(bundle: &CoefficientBundle) -> f64 {
    let n = 1000;
    let mut l: f64 = 0.0;
    let mut prev = bundle.a_tilde(0.0);
    for k in 1..=n {
        let x = k as f64 / n as f64;
        let v = bundle.a_tilde(x);
        l = l.max((v - prev).abs() * n as f64);
        prev = v;
    }
    1.05 * l
}

/// Birth ages of the children of `parent` within `[0, window]`, by thinning
/// a homogeneous stream at the path's intensity bound.
pub fn offspring_births(sampler: &QSampler, parent: &Excursion, window: f64, l_at: f64, stream: &RngStream) -> Vec<f64> {
    let window = if parent.censored { window } else { window.min(parent.t0) };
    if window <= 0.0 {
        return Vec::new();
    }
    let b = sampler.bundle();
    let v = &parent.path.values;
    let last = ((window / parent.path.dt).ceil() as usize + 1).min(v.len());
    let max_at = v[..last].iter().map(|&x| b.a_tilde(x)).fold(0.0, f64::max);
    let max_jump = v[..last].windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let bound = sampler.rate_mass * (max_at + l_at * max_jump);
    if !(bound > 0.0) {
        return Vec::new();
    }
    let mut rng = stream.cell(reserved::THINNING, 0, 0);
    let n = Poisson::new(bound * window).map(|d| d.sample(&mut rng)).unwrap_or(0.0) as usize;
    let mut ages: Vec<f64> = (0..n).map(|_| window * rng.random::<f64>()).collect();
    ages.sort_by(|a, b| a.total_cmp(b));
    ages.retain(|&u| {
        let keep = sampler.rate_mass * b.a_tilde(parent.value(u)) / bound;
        rng.random::<f64>() < keep
    });
    ages
}

/// `(1/S(delta)) int_0^window a_tilde(chi_u) du` along the linearly
/// interpolated path, one Gauss-Kronrod panel per step.
pub fn offspring_mean(sampler: &QSampler, parent: &Excursion, window: f64) -> f64 {
    let window = if parent.censored { window } else { window.min(parent.t0) };
    if window <= 0.0 {
        return 0.0;
    }
    let b = sampler.bundle();
    let dt = parent.path.dt;
    let n = (window / dt).ceil() as usize;
    let mut acc = 0.0;
    for k in 0..n {
        let lo = k as f64 * dt;
        let hi = ((k + 1) as f64 * dt).min(window);
        if hi <= lo {
            break;
        }
        let f = |u: f64| b.a_tilde(parent.value(u));
        acc += gk15(&f, lo, hi).map_or(0.0, |r| r.0);
    }
    sampler.rate_mass * acc
}

/// Child counts of one frozen parent over `n` independent thinning streams.
pub fn offspring_replay(sampler: &QSampler, parent: &Excursion, window: f64, n: usize, stream: &RngStream) -> Vec<u64> {
    let l_at = a_tilde_lipschitz(sampler.bundle());
    (0..n as u64)
        .into_par_iter()
        .map(|r| offspring_births(sampler, parent, window, l_at, &stream.child(r)).len() as u64)
        .collect()
}

/// Arrival times on `[s, t]` of a Poisson stream with intensity
/// `rate(u) / S(delta)`, by thinning against the maximum over a fine grid.
fn immigrant_times(sampler: &QSampler, rate: &dyn Fn(f64) -> f64, s: f64, t: f64, stream: &RngStream) -> Result<Vec<f64>> {
    if t <= s {
        return Ok(Vec::new());
    }
    let m = 1024;
    let peak = (0..=m)
        .map(|k| rate(s + (t - s) * k as f64 / m as f64))
        .fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Ok(Vec::new());
    }
    let bound = 1.1 * peak * sampler.rate_mass;
    let mut rng = stream.cell(reserved::IMMIGRANTS, 0, 0);
    let n = Poisson::new(bound * (t - s)).map(|d| d.sample(&mut rng)).unwrap_or(0.0) as usize;
    let mut times: Vec<f64> = (0..n).map(|_| s + (t - s) * rng.random::<f64>()).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    let mut out = Vec::with_capacity(times.len());
    for u in times {
        let r = rate(u) * sampler.rate_mass;
        if r > bound {
            return Err(Error::Precondition {
                t: u,
                reason: "immigration rate exceeds its sampled bound".into(),
            });
        }
        if rng.random::<f64>() < r / bound {
            out.push(u);
        }
    }
    Ok(out)
}

/// Immigrant excursions on `[s, t]` with intensity `rate(u) / S(delta)`.
pub fn sample_immigrants(
    sampler: &QSampler,
    rate: &dyn Fn(f64) -> f64,
    s: f64,
    t: f64,
    stream: &RngStream,
) -> Result<Vec<Excursion>> {
    let times = immigrant_times(sampler, rate, s, t, stream)?;
    times
        .iter()
        .enumerate()
        .map(|(k, &u)| {
            let mut e = sampler.sample_within(t - u, &stream.with_lane(k as u64))?;
            e.birth_time = u;
            Ok(e)
        })
        .collect()
}

enum Seed {
    Root(f64),
    Delta,
}

struct Pending {
    birth: f64,
    parent: Option<usize>,
    seed: Seed,
}

/// Samples the forest up to `params.horizon`.
pub fn sample_forest(
    sampler: &QSampler,
    init: &SparseInitialCondition,
    params: &ForestParams,
    stream: &RngStream,
) -> Result<Forest> {
    let t_end = params.horizon;
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(Error::param("horizon", "must be nonnegative"));
    }
    if params.probe_times.iter().any(|&p| p > t_end) {
        return Err(Error::param("probe_times", "must not exceed the horizon"));
    }
    let bundle = sampler.bundle();
    let l_at = a_tilde_lipschitz(bundle);
    let mut pending: Vec<Pending> = init
        .entries()
        .iter()
        .map(|&(_, x)| Pending {
            birth: 0.0,
            parent: None,
            seed: Seed::Root(x),
        })
        .collect();
    let n_roots = pending.len();
    let mu = bundle.mu();
    if mu > 0.0 && t_end > 0.0 {
        for u in immigrant_times(sampler, &|_| mu, 0.0, t_end, stream)? {
            pending.push(Pending {
                birth: u,
                parent: None,
                seed: Seed::Delta,
            });
        }
    }
    let mut nodes: Vec<ForestNode> = Vec::new();
    let mut capped = false;
    let mut generation = 0usize;
    while !pending.is_empty() {
        if nodes.len() + pending.len() > params.node_cap {
            let room = params.node_cap.saturating_sub(nodes.len());
            pending.truncate(room);
            capped = true;
        }
        let spawn = generation < params.n_max_gen && !capped;
        let mut next = Vec::new();
        for p in pending.drain(..) {
            let id = nodes.len();
            let lane = stream.with_lane(id as u64);
            let span = t_end - p.birth;
            let mut e = match p.seed {
                Seed::Root(x) => sampler.sample_from(x, span, &lane)?,
                Seed::Delta => sampler.sample_within(span, &lane)?,
            };
            e.birth_time = p.birth;
            // also invariant: every child is born while its parent lives
            if let Some(pid) = p.parent {
                let parent: &ForestNode = &nodes[pid];
                assert!(parent.censored || (p.birth >= parent.birth_time && p.birth - parent.birth_time <= parent.length + 1e-12));
            }
            if spawn {
                for age in offspring_births(sampler, &e, span, l_at, &lane) {
                    next.push(Pending {
                        birth: p.birth + age,
                        parent: Some(id),
                        seed: Seed::Delta,
                    });
                }
            }
            let probes = if params.keep_paths {
                Vec::new()
            } else {
                params.probe_times.iter().map(|&t| e.value_at(t)).collect()
            };
            nodes.push(ForestNode {
                id,
                generation,
                birth_time: p.birth,
                parent: p.parent,
                length: e.t0,
                peak: e.sup(),
                censored: e.censored,
                excursion: params.keep_paths.then_some(e),
                probes,
            });
        }
        pending = next;
        generation += 1;
    }
    Ok(Forest {
        nodes,
        params: params.clone(),
        delta: sampler.delta,
        capped,
        n_roots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtinctionCurve {
    pub probes: Vec<f64>,
    /// Fraction of forests with no mass at each probe time.
    pub extinct: Vec<Estimate>,
    /// Forests stopped at the node cap (counted as surviving).
    pub capped: usize,
    pub n_reps: usize,
}

/// Extinction probabilities of the forest rooted at a single deme of mass `x`.
pub fn extinction_mc(
    sampler: &QSampler,
    x: f64,
    t_probes: &[f64],
    n_reps: usize,
    node_cap: usize,
    stream: &RngStream,
) -> Result<ExtinctionCurve> {
    if sampler.bundle().mu() != 0.0 {
        return Err(Error::param("mu", "extinction needs no immigration"));
    }
    if t_probes.windows(2).any(|w| w[1] < w[0]) || t_probes.is_empty() {
        return Err(Error::param("t_probes", "must be nonempty and sorted"));
    }
    let horizon = *t_probes.last().unwrap();
    let init = if x > 0.0 {
        SparseInitialCondition::single(x)?
    } else {
        SparseInitialCondition::empty()
    };
    let params = ForestParams::new(horizon)
        .with_node_cap(node_cap)
        .probes_only(t_probes.to_vec());
    let runs: Result<Vec<(f64, bool)>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let f = sample_forest(sampler, &init, &params, &stream.child(r))?;
            Ok((f.death_time(), f.capped))
        })
        .collect();
    let runs = runs?;
    let extinct = t_probes
        .iter()
        .map(|&t| {
            let mut w = Welford::default();
            for &(death, capped) in &runs {
                w.push(if !capped && death <= t { 1.0 } else { 0.0 });
            }
            w.estimate()
        })
        .collect();
    Ok(ExtinctionCurve {
        probes: t_probes.to_vec(),
        extinct,
        capped: runs.iter().filter(|r| r.1).count(),
        n_reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{altruism_preset, default_mutation_profile, AltruismParams};

    fn sampler() -> QSampler {
        let b = altruism_preset(AltruismParams::new(1.5, 1.0, 1.0, 2.0), default_mutation_profile()).unwrap();
        QSampler::new(&b, 0.02).unwrap()
    }

    #[test]
    fn empty_forest() {
        let f = sample_forest(&sampler(), &SparseInitialCondition::empty(), &ForestParams::new(2.0), &RngStream::new(1, 0)).unwrap();
        assert!(f.nodes.is_empty());
        assert_eq!(f.total_mass(1.0), 0.0);
        assert!(f.weighted_atomic_measure(1.0).atoms.is_empty());
    }

    #[test]
    fn root_only_generation_zero() {
        let q = sampler();
        let init = SparseInitialCondition::single(0.3).unwrap();
        let f = sample_forest(&q, &init, &ForestParams::new(2.0).with_generations(0), &RngStream::new(1, 0)).unwrap();
        assert_eq!(f.nodes.len(), 1);
        assert_eq!(f.total_mass(0.0), 0.3);
    }

    #[test]
    fn truncation_only_removes_nodes() {
        let q = sampler();
        let init = SparseInitialCondition::single(0.3).unwrap();
        for r in 0..20 {
            let s = RngStream::new(4, r);
            let full = sample_forest(&q, &init, &ForestParams::new(1.0), &s).unwrap();
            let cut = sample_forest(&q, &init, &ForestParams::new(1.0).with_generations(1), &s).unwrap();
            assert!(cut.nodes.len() <= full.nodes.len());
            for (a, b) in cut.nodes.iter().zip(&full.nodes) {
                assert_eq!(a, b);
            }
            for t in [0.25, 0.5, 1.0] {
                assert!(cut.total_mass(t) <= full.total_mass(t) + 1e-15);
            }
        }
    }

    #[test]
    fn measure_mass_equals_total_mass() {
        let q = sampler();
        let init = SparseInitialCondition::single(0.3).unwrap();
        let f = sample_forest(&q, &init, &ForestParams::new(1.0), &RngStream::new(8, 0)).unwrap();
        let m = f.weighted_atomic_measure(0.5);
        assert!((m.total_mass() - f.total_mass(0.5)).abs() < 1e-14);
    }
}
