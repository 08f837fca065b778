//! Time discretization of the single-deme, D-deme, migration-level and
//! loop-free systems with a trap at zero.
//!
//! The default scheme freezes coefficients over one step and writes the drift
//! as `b + lambda x` and the variance as `c x`; the step is then the exact
//! transition of that square-root diffusion (Poisson mixture of gamma laws).
//! This keeps values in `[0, inf)`, makes absorption at zero exact when
//! `b = 0`, and reproduces the O(dt) inflow into empty demes, which a clamped
//! Euler step swamps with O(sqrt(dt)) clamp bias. A clamped Euler-Maruyama
//! scheme is kept for pathwise coupling experiments.
//!
//! Empty cells of a system are exchangeable, so a step over all of them is a
//! single binomial draw for the number that leave zero plus conditional gamma
//! draws for their values.

use std::sync::Arc;

use rand::seq::index;
use rand_distr::{Binomial, Distribution, Gamma, Geometric, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefficientBundle, SparseInitialCondition};
use crate::rng::{reserved, CounterRng, RngStream};
use crate::special::{gamma_q, truncated_gamma};

/// Values at or below this are set to exactly zero after every step.
pub const ABSORB_EPS: f64 = 1e-9;
/// Level-truncation warning threshold (fraction of total mass in the top level).
pub const DEFAULT_TAIL_TOL: f64 = 1e-3;
/// Above this Poisson mean the exact step is replaced by its Gaussian limit.
const GAUSSIAN_SWITCH: f64 = 1e8;
const SLOPE_PROBE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        if n_steps == 0 {
            return Err(Error::param("n_steps", "must be at least 1"));
        }
        if !t0.is_finite() {
            return Err(Error::param("t0", "must be finite"));
        }
        Ok(Self { t0, dt, n_steps })
    }

    /// Grid on `[t0, t0 + span]` with step at most `dt`.
    pub fn covering(t0: f64, span: f64, dt: f64) -> Result<Self> {
        if !(span.is_finite() && span > 0.0) {
            return Err(Error::param("span", "must be positive"));
        }
        let n = (span / dt).ceil().max(1.0) as usize;
        Self::new(t0, span / n as f64, n)
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps)
    }

    /// Nearest step to time `t`, clamped to the grid.
    pub fn step_of(&self, t: f64) -> usize {
        (((t - self.t0) / self.dt).round().max(0.0) as usize).min(self.n_steps)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[default]
    LocalCir,
    EulerMaruyama,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum Record {
    #[default]
    All,
    /// Only these steps (sorted, deduplicated on use).
    Steps(Vec<usize>),
    /// Totals only.
    Nothing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub scheme: Scheme,
    pub absorb_eps: f64,
    pub record: Record,
    pub tail_tol: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::LocalCir,
            absorb_eps: ABSORB_EPS,
            record: Record::All,
            tail_tol: DEFAULT_TAIL_TOL,
        }
    }
}

impl SimOptions {
    pub fn probes(steps: Vec<usize>) -> Self {
        Self {
            record: Record::Steps(steps),
            ..Self::default()
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }
}

/// One-dimensional path. Values past `values.len()` are zero (the path was
/// stopped after absorption).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
    pub absorbed_at: Option<usize>,
    pub censored: bool,
}

impl SamplePath {
    pub fn value(&self, step: usize) -> f64 {
        self.values.get(step).copied().unwrap_or(0.0)
    }

    /// Linear interpolation at time `t` (absolute).
    pub fn at_time(&self, t: f64) -> f64 {
        let u = (t - self.t0) / self.dt;
        if u < 0.0 {
            return 0.0;
        }
        let k = u.floor() as usize;
        let w = u - k as f64;
        let a = self.value(k);
        if w == 0.0 {
            return a;
        }
        a + w * (self.value(k + 1) - a)
    }

    /// Time from `t0` to absorption, or to the end of the stored path.
    pub fn length(&self) -> f64 {
        let steps = self.absorbed_at.unwrap_or(self.values.len().saturating_sub(1));
        steps as f64 * self.dt
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemKind {
    Demes,
    MigrationLevels,
    LoopFree,
    Independent,
}

/// Recorded path of a many-cell system; cells are `(deme, level)` with the
/// level index fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemeSystemPath {
    pub kind: SystemKind,
    pub grid: TimeGrid,
    pub demes: usize,
    pub levels: usize,
    pub scheme: Scheme,
    pub stream: RngStream,
    pub recorded_steps: Vec<usize>,
    values: Vec<f64>,
    /// Sum over all cells at every step.
    pub totals: Vec<f64>,
    /// Per cell: the step from which the cell is zero through the end.
    pub absorbed: Vec<Option<usize>>,
    /// Top-level mass exceeded the tail tolerance at some step.
    pub tail_flag: bool,
    pub max_tail_fraction: f64,
    /// First Gaussian draw of cell `(0, 0, 0)`, checked on reconstruction.
    pub first_increment: Option<f64>,
}

impl DemeSystemPath {
    pub fn width(&self) -> usize {
        self.demes * self.levels
    }

    /// Full state at a recorded step.
    pub fn frame(&self, step: usize) -> Option<&[f64]> {
        let r = self.recorded_steps.binary_search(&step).ok()?;
        let w = self.width();
        Some(&self.values[r * w..(r + 1) * w])
    }

    pub fn value(&self, step: usize, deme: usize, level: usize) -> Option<f64> {
        self.frame(step).map(|f| f[deme * self.levels + level])
    }

    /// Per-deme totals over levels at a recorded step.
    pub fn deme_totals(&self, step: usize) -> Option<Vec<f64>> {
        let f = self.frame(step)?;
        Some(f.chunks(self.levels).map(|c| c.iter().sum()).collect())
    }

    pub fn all_values(&self) -> &[f64] {
        &self.values
    }

    pub fn total_at(&self, step: usize) -> f64 {
        self.totals[step]
    }

    pub fn sup_total(&self) -> f64 {
        self.totals.iter().copied().fold(0.0, f64::max)
    }
}

/// Immigration profile `g(t, y)` of the time-dependent system.
#[derive(Clone)]
pub enum Immigration {
    Constant(f64),
    TimeDependent(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Immigration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Immigration::Constant(c) => write!(f, "Constant({c})"),
            Immigration::TimeDependent(_) => write!(f, "TimeDependent(..)"),
        }
    }
}

impl Immigration {
    #[inline]
    pub fn eval(&self, t: f64, y: f64) -> f64 {
        match self {
            Immigration::Constant(c) => *c,
            Immigration::TimeDependent(g) => g(t, y),
        }
    }
}

// ---------------------------------------------------------------------------
// One-step kernels

/// Frozen coefficients: drift `b + lambda x`, variance `c x`.
#[derive(Clone, Copy, Debug)]
struct Cir {
    b: f64,
    lambda: f64,
    c: f64,
}

#[inline]
fn growth(lambda: f64, dt: f64) -> (f64, f64) {
    let ld = lambda * dt;
    let e = ld.exp();
    let g = if ld.abs() < 1e-8 {
        dt * (1.0 + 0.5 * ld)
    } else {
        ld.exp_m1() / lambda
    };
    (e, g)
}

fn cir_step(x: f64, p: Cir, dt: f64, rng: &mut CounterRng) -> f64 {
    let (e, g) = growth(p.lambda, dt);
    let b = p.b.max(0.0);
    if !(p.c > 1e-300) {
        return e * x + g * b;
    }
    let theta = 0.5 * p.c * g;
    let half_zeta = e * x / theta;
    if half_zeta > GAUSSIAN_SWITCH {
        let mean = e * x + g * b;
        let var = x * p.c * e * g + 0.5 * b * p.c * g * g;
        let z: f64 = StandardNormal.sample(rng);
        return mean + var.sqrt() * z;
    }
    let n = if half_zeta > 0.0 {
        Poisson::new(half_zeta).map(|d| d.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    };
    let shape = 2.0 * b / p.c + n;
    if shape <= 0.0 {
        return 0.0;
    }
    match Gamma::new(shape, theta) {
        Ok(d) => d.sample(rng),
        Err(_) => 0.0,
    }
}

fn em_step(x: f64, drift: f64, var: f64, dt: f64, rng: &mut CounterRng) -> (f64, f64) {
    let z: f64 = StandardNormal.sample(rng);
    (x + drift * dt + var.max(0.0).sqrt() * dt.sqrt() * z, z)
}

#[inline]
fn finish(x: f64, eps: f64) -> f64 {
    if x <= eps {
        0.0
    } else {
        x.min(1.0)
    }
}

fn ensure_finite(v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { step, value: v })
    }
}

/// Result of stepping a pool of empty cells: `Some` lists `(position, value)`
/// pairs for cells that left zero; `None` asks for per-cell stepping.
fn pool_step(n_empty: usize, p: Cir, dt: f64, eps: f64, rng: &mut CounterRng) -> Option<Vec<(usize, f64)>> {
    if n_empty == 0 || p.b <= 0.0 {
        return Some(Vec::new());
    }
    if !(p.c > 1e-300) {
        return None;
    }
    let (_, g) = growth(p.lambda, dt);
    let theta = 0.5 * p.c * g;
    let a = 2.0 * p.b / p.c;
    let tau = eps / theta;
    if a >= 1.0 || tau >= 1.0 {
        return None;
    }
    let q = gamma_q(a, tau).clamp(0.0, 1.0);
    let n = Binomial::new(n_empty as u64, q).map(|d| d.sample(rng)).unwrap_or(0) as usize;
    if n == 0 {
        return Some(Vec::new());
    }
    let picks = index::sample(rng, n_empty, n);
    let mut out: Vec<(usize, f64)> = picks.into_iter().map(|k| (k, 0.0)).collect();
    out.sort_unstable_by_key(|e| e.0);
    for e in out.iter_mut() {
        e.1 = (theta * truncated_gamma(a, tau, rng)).min(1.0);
    }
    Some(out)
}

/// Slope of `h_tilde_D` at zero, used for cells resting at zero.
fn lambda_at_zero(bundle: &CoefficientBundle, d: u64) -> f64 {
    bundle.h_tilde(d, SLOPE_PROBE) / SLOPE_PROBE
}

// ---------------------------------------------------------------------------
// Bookkeeping

/// Permutation of `0..n` split into an occupied prefix and an empty suffix.
#[derive(Clone, Debug)]
struct Partition {
    items: Vec<u32>,
    pos: Vec<u32>,
    n_occ: usize,
}

impl Partition {
    fn new(n: usize) -> Self {
        Self {
            items: (0..n as u32).collect(),
            pos: (0..n as u32).collect(),
            n_occ: 0,
        }
    }

    fn is_occupied(&self, i: usize) -> bool {
        (self.pos[i] as usize) < self.n_occ
    }

    fn swap(&mut self, a: usize, b: usize) {
        let (ia, ib) = (self.items[a], self.items[b]);
        self.items.swap(a, b);
        self.pos[ia as usize] = b as u32;
        self.pos[ib as usize] = a as u32;
    }

    fn occupy(&mut self, i: usize) {
        if !self.is_occupied(i) {
            let p = self.pos[i] as usize;
            self.swap(p, self.n_occ);
            self.n_occ += 1;
        }
    }

    fn vacate(&mut self, i: usize) {
        if self.is_occupied(i) {
            let p = self.pos[i] as usize;
            self.n_occ -= 1;
            self.swap(p, self.n_occ);
        }
    }

    fn occupied(&self) -> &[u32] {
        &self.items[..self.n_occ]
    }

    fn empty(&self) -> &[u32] {
        &self.items[self.n_occ..]
    }
}

struct Recorder {
    steps: Vec<usize>,
    all: bool,
    values: Vec<f64>,
    totals: Vec<f64>,
    last_nonzero: Vec<u32>,
}

const NEVER: u32 = u32::MAX;

impl Recorder {
    fn new(record: &Record, n_steps: usize, width: usize) -> Self {
        let (steps, all) = match record {
            Record::All => ((0..=n_steps).collect(), true),
            Record::Steps(s) => {
                let mut s: Vec<usize> = s.iter().copied().filter(|&k| k <= n_steps).collect();
                s.sort_unstable();
                s.dedup();
                (s, false)
            }
            Record::Nothing => (Vec::new(), false),
        };
        Self {
            values: Vec::with_capacity(steps.len() * width),
            steps,
            all,
            totals: Vec::with_capacity(n_steps + 1),
            last_nonzero: vec![NEVER; width],
        }
    }

    fn wants(&self, step: usize) -> bool {
        self.all || self.steps.binary_search(&step).is_ok()
    }

    fn push(&mut self, step: usize, state: &[f64], total: f64) {
        self.totals.push(total);
        if self.wants(step) {
            self.values.extend_from_slice(state);
        }
    }

    fn touch(&mut self, cell: usize, step: usize, v: f64) {
        if v > 0.0 {
            self.last_nonzero[cell] = step as u32;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        self,
        kind: SystemKind,
        grid: TimeGrid,
        demes: usize,
        levels: usize,
        scheme: Scheme,
        stream: RngStream,
        final_state: &[f64],
        tail: (bool, f64),
        first_increment: Option<f64>,
    ) -> DemeSystemPath {
        let absorbed = final_state
            .iter()
            .zip(&self.last_nonzero)
            .map(|(&v, &l)| {
                if v > 0.0 {
                    None
                } else if l == NEVER {
                    Some(0)
                } else {
                    Some(l as usize + 1)
                }
            })
            .collect();
        DemeSystemPath {
            kind,
            grid,
            demes,
            levels,
            scheme,
            stream,
            recorded_steps: self.steps,
            values: self.values,
            totals: self.totals,
            absorbed,
            tail_flag: tail.0,
            max_tail_fraction: tail.1,
            first_increment,
        }
    }
}

fn check_init(init: &SparseInitialCondition, d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::param("D", "must be positive"));
    }
    if init.max_deme() > d {
        return Err(Error::param(
            "init",
            format!("deme {} exceeds D = {d}", init.max_deme()),
        ));
    }
    Ok(())
}

fn check_opts(opts: &SimOptions) -> Result<()> {
    if !(opts.absorb_eps >= 0.0 && opts.absorb_eps < 1.0) {
        return Err(Error::param("absorb_eps", "must lie in [0,1)"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Single paths

#[derive(Clone, Copy)]
enum SingleDrift<'a> {
    /// Limit drift `h`.
    Limit,
    /// `g(t, y)/D + h_tilde_D(y)`.
    TimeDep { d: u64, g: &'a Immigration },
}

struct SingleRun {
    values: Vec<f64>,
    absorbed_at: Option<usize>,
    censored: bool,
}

fn run_single(
    bundle: &CoefficientBundle,
    drift: SingleDrift<'_>,
    y0: f64,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
    stop_when_absorbed: bool,
) -> Result<SingleRun> {
    let eps = opts.absorb_eps;
    let dt = grid.dt;
    let n = grid.n_steps;
    let mut values = Vec::with_capacity(if stop_when_absorbed { 64 } else { n + 1 });
    let mut y = finish(y0, eps);
    values.push(y);
    let c0 = bundle.sigma2_over_x(0.0);
    let (lambda0, d_of) = match drift {
        SingleDrift::Limit => (bundle.h(SLOPE_PROBE) / SLOPE_PROBE, 1u64),
        SingleDrift::TimeDep { d, .. } => (lambda_at_zero(bundle, d), d),
    };
    let _ = d_of;
    let mut s = 0usize;
    while s < n {
        let t = grid.time(s);
        let (b0, slope_part) = match drift {
            SingleDrift::Limit => (bundle.h(0.0), None),
            SingleDrift::TimeDep { d, g } => (g.eval(t, 0.0) / d as f64, Some((d, g))),
        };
        if y == 0.0 && b0 <= 0.0 {
            // trap
            if stop_when_absorbed {
                return Ok(SingleRun {
                    absorbed_at: Some(s),
                    values,
                    censored: false,
                });
            }
            values.resize(n + 1, 0.0);
            return Ok(SingleRun {
                absorbed_at: Some(s),
                values,
                censored: false,
            });
        }
        if y == 0.0 && opts.scheme == Scheme::LocalCir {
            if let (Some((_, Immigration::Constant(_))), true) = (slope_part, b0 > 0.0) {
                // Geometric skip over steps spent at zero.
                let p = Cir {
                    b: b0,
                    lambda: lambda0,
                    c: c0,
                };
                let (_, g) = growth(p.lambda, dt);
                let theta = 0.5 * p.c * g;
                let a = 2.0 * p.b / p.c;
                let tau = eps / theta;
                if a < 1.0 && tau < 1.0 && p.c > 1e-300 {
                    let q = gamma_q(a, tau);
                    let mut rng = stream.cell(reserved::SKIP, 0, s as u64);
                    let wait = if q >= 1.0 {
                        0
                    } else if q <= 0.0 {
                        u64::MAX
                    } else {
                        Geometric::new(q).map(|d| d.sample(&mut rng)).unwrap_or(u64::MAX)
                    };
                    let jump = (wait as u128).min((n - s) as u128) as usize;
                    values.resize(values.len() + jump, 0.0);
                    s += jump;
                    if s >= n {
                        break;
                    }
                    y = (theta * truncated_gamma(a, tau, &mut rng)).min(1.0);
                    s += 1;
                    values.push(y);
                    continue;
                }
            }
        }
        let mut rng = stream.cell(0, 0, s as u64);
        let next = match opts.scheme {
            Scheme::LocalCir => {
                let p = if y == 0.0 {
                    Cir {
                        b: b0,
                        lambda: lambda0,
                        c: c0,
                    }
                } else {
                    let rest = match slope_part {
                        None => bundle.h(y) - b0,
                        Some((d, g)) => (g.eval(t, y) - g.eval(t, 0.0)) / d as f64 + bundle.h_tilde(d, y),
                    };
                    Cir {
                        b: b0,
                        lambda: rest / y,
                        c: bundle.sigma2_over_x(y),
                    }
                };
                ensure_finite(p.lambda + p.c + p.b, s)?;
                cir_step(y, p, dt, &mut rng)
            }
            Scheme::EulerMaruyama => {
                let dr = match slope_part {
                    None => bundle.h(y),
                    Some((d, g)) => g.eval(t, y) / d as f64 + bundle.h_tilde(d, y),
                };
                let var = bundle.sigma2(y);
                ensure_finite(dr + var, s)?;
                em_step(y, dr, var, dt, &mut rng).0.max(0.0)
            }
        };
        y = finish(ensure_finite(next, s)?, eps);
        s += 1;
        values.push(y);
    }
    let absorbed_at = if values.last() == Some(&0.0) {
        let last_nz = values.iter().rposition(|&v| v > 0.0);
        Some(last_nz.map_or(0, |k| k + 1))
    } else {
        None
    };
    Ok(SingleRun {
        censored: stop_when_absorbed && absorbed_at.is_none(),
        values,
        absorbed_at,
    })
}

/// Path of the limit diffusion `dY = h(Y) dt + sqrt(sigma2(Y)) dW`.
pub fn simulate_y(
    bundle: &CoefficientBundle,
    y0: f64,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<SamplePath> {
    if !(0.0..=1.0).contains(&y0) {
        return Err(Error::param("y0", "must lie in [0,1]"));
    }
    check_opts(opts)?;
    let r = run_single(bundle, SingleDrift::Limit, y0, grid, stream, opts, false)?;
    Ok(SamplePath {
        t0: grid.t0,
        dt: grid.dt,
        values: r.values,
        absorbed_at: r.absorbed_at,
        censored: false,
    })
}

/// Runs the limit diffusion from `y0` until absorption or `max_steps`.
pub fn simulate_y_to_absorption(
    bundle: &CoefficientBundle,
    y0: f64,
    t0: f64,
    dt: f64,
    max_steps: usize,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<SamplePath> {
    if !(0.0..=1.0).contains(&y0) {
        return Err(Error::param("y0", "must lie in [0,1]"));
    }
    let grid = TimeGrid::new(t0, dt, max_steps.max(1))?;
    let r = run_single(bundle, SingleDrift::Limit, y0, &grid, stream, opts, true)?;
    Ok(SamplePath {
        t0,
        dt,
        values: r.values,
        absorbed_at: r.absorbed_at,
        censored: r.censored,
    })
}

/// Path of `dY = g(t,Y)/D dt + h_tilde_D(Y) dt + sqrt(sigma2(Y)) dW` from
/// time `grid.t0` (the start time `s`).
pub fn simulate_y_timedep(
    bundle: &CoefficientBundle,
    d: u64,
    g: &Immigration,
    y0: f64,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<SamplePath> {
    if d == 0 {
        return Err(Error::param("D", "must be positive"));
    }
    if !(0.0..=1.0).contains(&y0) {
        return Err(Error::param("y0", "must lie in [0,1]"));
    }
    check_opts(opts)?;
    check_immigration(bundle, d, g, grid)?;
    let r = run_single(bundle, SingleDrift::TimeDep { d, g }, y0, grid, stream, opts, false)?;
    Ok(SamplePath {
        t0: grid.t0,
        dt: grid.dt,
        values: r.values,
        absorbed_at: r.absorbed_at,
        censored: false,
    })
}

/// `g(t,0) >= 0` and `g(t,1)/D + h_tilde_D(1) <= 0` at every grid time.
pub fn check_immigration(bundle: &CoefficientBundle, d: u64, g: &Immigration, grid: &TimeGrid) -> Result<()> {
    let ht1 = bundle.h_tilde(d, 1.0);
    let times: Box<dyn Iterator<Item = usize>> = match g {
        Immigration::Constant(_) => Box::new(std::iter::once(0)),
        Immigration::TimeDependent(_) => Box::new(0..=grid.n_steps),
    };
    for s in times {
        let t = grid.time(s);
        let g0 = g.eval(t, 0.0);
        if !(g0 >= 0.0) {
            return Err(Error::Precondition {
                t,
                reason: format!("g(t, 0) = {g0} is negative"),
            });
        }
        let top = g.eval(t, 1.0) / d as f64 + ht1;
        if top > 1e-12 {
            return Err(Error::Precondition {
                t,
                reason: format!("g(t, 1)/D + h_tilde_D(1) = {top} is positive"),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// D-deme system and independent copies

enum DemeDrift<'a> {
    /// Mean-field migration plus `h_D`.
    Bundle,
    /// No migration; source `g(t, y)/D` plus `h_tilde_D`.
    Independent(&'a Immigration),
}

#[allow(clippy::too_many_arguments)]
fn run_demes_cir(
    bundle: &CoefficientBundle,
    d: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
    drift: DemeDrift<'_>,
    kind: SystemKind,
) -> Result<DemeSystemPath> {
    let eps = opts.absorb_eps;
    let dt = grid.dt;
    let du = d as u64;
    let inv_d = 1.0 / d as f64;
    let mut x = vec![0.0; d];
    let mut part = Partition::new(d);
    let mut rec = Recorder::new(&opts.record, grid.n_steps, d);
    for &(i, v) in init.entries() {
        let v = finish(v, eps);
        if v > 0.0 {
            x[i - 1] = v;
            part.occupy(i - 1);
            rec.touch(i - 1, 0, v);
        }
    }
    let total: f64 = part.occupied().iter().map(|&i| x[i as usize]).sum();
    rec.push(0, &x, total);
    let c0 = bundle.sigma2_over_x(0.0);
    let lambda0 = lambda_at_zero(bundle, du);
    let hd0 = bundle.h_d(du, 0.0);
    let mut occ: Vec<u32> = Vec::new();
    let mut updates: Vec<(usize, f64)> = Vec::new();
    for s in 0..grid.n_steps {
        let t = grid.time(s);
        occ.clear();
        occ.extend_from_slice(part.occupied());
        updates.clear();
        let source0 = match &drift {
            DemeDrift::Bundle => {
                let m0: f64 = occ.iter().map(|&j| x[j as usize] * bundle.f(x[j as usize], 0.0)).sum::<f64>() * inv_d;
                m0 + hd0
            }
            DemeDrift::Independent(g) => g.eval(t, 0.0) * inv_d,
        };
        for &i in &occ {
            let i = i as usize;
            let xi = x[i];
            let (b, rest) = match &drift {
                DemeDrift::Bundle => {
                    let m: f64 = occ
                        .iter()
                        .map(|&j| x[j as usize] * bundle.f(x[j as usize], xi))
                        .sum::<f64>()
                        * inv_d;
                    (m + hd0, bundle.h_tilde(du, xi))
                }
                DemeDrift::Independent(g) => (
                    source0,
                    (g.eval(t, xi) - g.eval(t, 0.0)) * inv_d + bundle.h_tilde(du, xi),
                ),
            };
            let p = Cir {
                b,
                lambda: rest / xi,
                c: bundle.sigma2_over_x(xi),
            };
            ensure_finite(p.b + p.lambda + p.c, s)?;
            let mut rng = stream.cell(i as u64, 0, s as u64);
            let v = finish(ensure_finite(cir_step(xi, p, dt, &mut rng), s)?, eps);
            updates.push((i, v));
        }
        let pool = Cir {
            b: source0,
            lambda: lambda0,
            c: c0,
        };
        ensure_finite(source0, s)?;
        let n_empty = d - occ.len();
        let mut pool_rng = stream.cell(reserved::POOL, 0, s as u64);
        match pool_step(n_empty, pool, dt, eps, &mut pool_rng) {
            Some(hits) => {
                let empty = part.empty();
                for (k, v) in hits {
                    updates.push((empty[k] as usize, finish(v, eps)));
                }
            }
            None => {
                for &i in part.empty() {
                    let mut rng = stream.cell(i as u64, 0, s as u64);
                    let v = finish(cir_step(0.0, pool, dt, &mut rng), eps);
                    if v > 0.0 {
                        updates.push((i as usize, v));
                    }
                }
            }
        }
        for &(i, v) in &updates {
            x[i] = v;
            if v > 0.0 {
                part.occupy(i);
                rec.touch(i, s + 1, v);
            } else {
                part.vacate(i);
            }
        }
        let total: f64 = part.occupied().iter().map(|&i| x[i as usize]).sum();
        rec.push(s + 1, &x, total);
    }
    Ok(rec.finish(kind, *grid, d, 1, Scheme::LocalCir, *stream, &x, (false, 0.0), None))
}

fn run_demes_em(
    bundle: &CoefficientBundle,
    d: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    let eps = opts.absorb_eps;
    let du = d as u64;
    let inv_d = 1.0 / d as f64;
    let mut x = vec![0.0; d];
    for &(i, v) in init.entries() {
        x[i - 1] = finish(v, eps);
    }
    let mut rec = Recorder::new(&opts.record, grid.n_steps, d);
    for (i, &v) in x.iter().enumerate() {
        rec.touch(i, 0, v);
    }
    rec.push(0, &x, x.iter().sum());
    let mut next = vec![0.0; d];
    let mut first = None;
    for s in 0..grid.n_steps {
        let nz: Vec<usize> = (0..d).filter(|&j| x[j] > 0.0).collect();
        for i in 0..d {
            let xi = x[i];
            let m: f64 = nz.iter().map(|&j| x[j] * bundle.f(x[j], xi)).sum::<f64>() * inv_d;
            let dr = m + bundle.h_d(du, xi);
            let var = bundle.sigma2(xi);
            ensure_finite(dr + var, s)?;
            let mut rng = stream.cell(i as u64, 0, s as u64);
            let (v, z) = em_step(xi, dr, var, grid.dt, &mut rng);
            if s == 0 && i == 0 {
                first = Some(z);
            }
            next[i] = finish(ensure_finite(v, s)?.max(0.0), eps);
        }
        std::mem::swap(&mut x, &mut next);
        for (i, &v) in x.iter().enumerate() {
            rec.touch(i, s + 1, v);
        }
        rec.push(s + 1, &x, x.iter().sum());
    }
    Ok(rec.finish(
        SystemKind::Demes,
        *grid,
        d,
        1,
        Scheme::EulerMaruyama,
        *stream,
        &x,
        (false, 0.0),
        first,
    ))
}

/// The D-deme system with mean-field migration.
pub fn simulate_xd(
    bundle: &CoefficientBundle,
    d: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    check_init(init, d)?;
    check_opts(opts)?;
    match opts.scheme {
        Scheme::LocalCir => run_demes_cir(bundle, d, init, grid, stream, opts, DemeDrift::Bundle, SystemKind::Demes),
        Scheme::EulerMaruyama => run_demes_em(bundle, d, init, grid, stream, opts),
    }
}

/// `D` independent copies of the time-dependent single-deme system, all
/// started from `init`.
pub fn simulate_independent(
    bundle: &CoefficientBundle,
    d: usize,
    g: &Immigration,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    check_init(init, d)?;
    check_opts(opts)?;
    check_immigration(bundle, d as u64, g, grid)?;
    if opts.scheme != Scheme::LocalCir {
        return Err(Error::Unsupported(
            "independent systems use the local square-root scheme".into(),
        ));
    }
    run_demes_cir(
        bundle,
        d,
        init,
        grid,
        stream,
        opts,
        DemeDrift::Independent(g),
        SystemKind::Independent,
    )
}

// ---------------------------------------------------------------------------
// Migration levels

fn level_init(init: &SparseInitialCondition, d: usize, levels: usize, eps: f64) -> Vec<f64> {
    let mut x = vec![0.0; d * levels];
    for &(i, v) in init.entries() {
        x[(i - 1) * levels] = finish(v, eps);
    }
    x
}

/// Donor mass feeding level `k`: level `k-1`, plus the top level itself when
/// `k` is the aggregated top level.
#[inline]
fn donor(cells: &[f64], k: usize, top: usize) -> f64 {
    match k {
        0 => 0.0,
        _ if k == top => cells[k - 1] + cells[k],
        _ => cells[k - 1],
    }
}

fn rescale_if_over(cells: &mut [f64], eps: f64) {
    let t: f64 = cells.iter().sum();
    if t > 1.0 {
        for v in cells.iter_mut() {
            *v = finish(*v / t, eps);
        }
        // Dividing can leave the sum a few ulp above 1; take the excess off
        // the largest cell.
        for _ in 0..4 {
            let s: f64 = cells.iter().sum();
            if s <= 1.0 {
                break;
            }
            let big = cells
                .iter_mut()
                .max_by(|a, b| a.total_cmp(b))
                .unwrap();
            *big = (*big - (s - 1.0).max(f64::EPSILON)).max(0.0);
        }
    }
}

fn tail_update(levels_mass: &[f64], tail: &mut (bool, f64), tol: f64) {
    let total: f64 = levels_mass.iter().sum();
    if total > 0.0 {
        let fr = levels_mass[levels_mass.len() - 1] / total;
        if levels_mass.len() > 1 || fr < 1.0 {
            tail.1 = tail.1.max(fr);
            if fr > tol {
                tail.0 = true;
            }
        }
    }
}

fn run_levels_cir(
    bundle: &CoefficientBundle,
    d: usize,
    k_max: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    let eps = opts.absorb_eps;
    let dt = grid.dt;
    let du = d as u64;
    let l = k_max + 1;
    let top = k_max;
    let inv_d = 1.0 / d as f64;
    let mut x = level_init(init, d, l, eps);
    let mut tot = vec![0.0; d];
    let mut part = Partition::new(d);
    let mut rec = Recorder::new(&opts.record, grid.n_steps, d * l);
    for i in 0..d {
        tot[i] = x[i * l..(i + 1) * l].iter().sum();
        if tot[i] > 0.0 {
            part.occupy(i);
            for k in 0..l {
                rec.touch(i * l + k, 0, x[i * l + k]);
            }
        }
    }
    let mut level_mass = vec![0.0; l];
    let c0 = bundle.sigma2_over_x(0.0);
    let lambda0 = lambda_at_zero(bundle, du);
    let hd0 = bundle.h_d(du, 0.0);
    let mut tail = (false, 0.0);
    let mass_of = |x: &[f64], part: &Partition, lm: &mut [f64]| -> f64 {
        lm.iter_mut().for_each(|v| *v = 0.0);
        for &i in part.occupied() {
            for k in 0..l {
                lm[k] += x[i as usize * l + k];
            }
        }
        lm.iter().sum()
    };
    let total = mass_of(&x, &part, &mut level_mass);
    tail_update(&level_mass, &mut tail, opts.tail_tol);
    rec.push(0, &x, total);
    let mut occ: Vec<u32> = Vec::new();
    let mut updates: Vec<(usize, usize, f64)> = Vec::new();
    let mut bk = vec![0.0; l];
    for s in 0..grid.n_steps {
        occ.clear();
        occ.extend_from_slice(part.occupied());
        updates.clear();
        for &i in &occ {
            let i = i as usize;
            let ti = tot[i];
            bk.iter_mut().for_each(|v| *v = 0.0);
            for &j in &occ {
                let j = j as usize;
                let fj = bundle.f(tot[j], ti);
                let cells = &x[j * l..(j + 1) * l];
                for k in 1..l {
                    bk[k] += donor(cells, k, top) * fj;
                }
            }
            let lambda = bundle.h_tilde(du, ti) / ti;
            let c = bundle.sigma2(ti) / ti;
            ensure_finite(lambda + c, s)?;
            for k in 0..l {
                let b = bk[k] * inv_d + if k == 0 { hd0 } else { 0.0 };
                let mut rng = stream.cell(i as u64, k as u64, s as u64);
                let v = finish(ensure_finite(cir_step(x[i * l + k], Cir { b, lambda, c }, dt, &mut rng), s)?, eps);
                updates.push((i, k, v));
            }
        }
        // pools over empty demes, one per level
        bk.iter_mut().for_each(|v| *v = 0.0);
        for &j in &occ {
            let j = j as usize;
            let fj = bundle.f(tot[j], 0.0);
            let cells = &x[j * l..(j + 1) * l];
            for k in 1..l {
                bk[k] += donor(cells, k, top) * fj;
            }
        }
        let n_empty = d - occ.len();
        for k in 0..l {
            let b = bk[k] * inv_d + if k == 0 { hd0 } else { 0.0 };
            ensure_finite(b, s)?;
            let pool = Cir {
                b,
                lambda: lambda0,
                c: c0,
            };
            let mut pool_rng = stream.cell(reserved::POOL, k as u64, s as u64);
            match pool_step(n_empty, pool, dt, eps, &mut pool_rng) {
                Some(hits) => {
                    let empty = part.empty();
                    for (pos, v) in hits {
                        updates.push((empty[pos] as usize, k, finish(v, eps)));
                    }
                }
                None => {
                    for &i in part.empty() {
                        let mut rng = stream.cell(i as u64, k as u64, s as u64);
                        let v = finish(cir_step(0.0, pool, dt, &mut rng), eps);
                        if v > 0.0 {
                            updates.push((i as usize, k, v));
                        }
                    }
                }
            }
        }
        let mut touched: Vec<usize> = Vec::with_capacity(updates.len());
        for &(i, k, v) in &updates {
            x[i * l + k] = v;
            touched.push(i);
        }
        touched.sort_unstable();
        touched.dedup();
        for &i in &touched {
            let cells = &mut x[i * l..(i + 1) * l];
            rescale_if_over(cells, eps);
            tot[i] = cells.iter().sum();
            if tot[i] > 0.0 {
                part.occupy(i);
                for k in 0..l {
                    rec.touch(i * l + k, s + 1, x[i * l + k]);
                }
            } else {
                part.vacate(i);
            }
        }
        let total = mass_of(&x, &part, &mut level_mass);
        tail_update(&level_mass, &mut tail, opts.tail_tol);
        rec.push(s + 1, &x, total);
    }
    Ok(rec.finish(
        SystemKind::MigrationLevels,
        *grid,
        d,
        l,
        Scheme::LocalCir,
        *stream,
        &x,
        tail,
        None,
    ))
}

fn run_levels_em(
    bundle: &CoefficientBundle,
    d: usize,
    k_max: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    let eps = opts.absorb_eps;
    let du = d as u64;
    let l = k_max + 1;
    let top = k_max;
    let inv_d = 1.0 / d as f64;
    let mut x = level_init(init, d, l, eps);
    let mut rec = Recorder::new(&opts.record, grid.n_steps, d * l);
    for (c, &v) in x.iter().enumerate() {
        rec.touch(c, 0, v);
    }
    let mut tail = (false, 0.0);
    let level_mass = |x: &[f64]| -> Vec<f64> { (0..l).map(|k| (0..d).map(|i| x[i * l + k]).sum()).collect() };
    tail_update(&level_mass(&x), &mut tail, opts.tail_tol);
    rec.push(0, &x, x.iter().sum());
    let hd0 = bundle.h_d(du, 0.0);
    let mut next = vec![0.0; d * l];
    let mut first = None;
    for s in 0..grid.n_steps {
        let tot: Vec<f64> = (0..d).map(|i| x[i * l..(i + 1) * l].iter().sum()).collect();
        let nz: Vec<usize> = (0..d).filter(|&j| tot[j] > 0.0).collect();
        for i in 0..d {
            let ti = tot[i];
            let mut bk = vec![0.0; l];
            for &j in &nz {
                let fj = bundle.f(tot[j], ti);
                for k in 1..l {
                    bk[k] += donor(&x[j * l..(j + 1) * l], k, top) * fj;
                }
            }
            let (ht, s2) = if ti > eps {
                (bundle.h_tilde(du, ti), bundle.sigma2(ti))
            } else {
                (0.0, 0.0)
            };
            for k in 0..l {
                let xk = x[i * l + k];
                let w = if ti > eps { xk / ti } else { 0.0 };
                let dr = bk[k] * inv_d + w * ht + if k == 0 { hd0 } else { 0.0 };
                let var = w * s2;
                ensure_finite(dr + var, s)?;
                let mut rng = stream.cell(i as u64, k as u64, s as u64);
                let (v, z) = em_step(xk, dr, var, grid.dt, &mut rng);
                if s == 0 && i == 0 && k == 0 {
                    first = Some(z);
                }
                next[i * l + k] = finish(ensure_finite(v, s)?.max(0.0), eps);
            }
            rescale_if_over(&mut next[i * l..(i + 1) * l], eps);
        }
        std::mem::swap(&mut x, &mut next);
        for (c, &v) in x.iter().enumerate() {
            rec.touch(c, s + 1, v);
        }
        tail_update(&level_mass(&x), &mut tail, opts.tail_tol);
        rec.push(s + 1, &x, x.iter().sum());
    }
    Ok(rec.finish(
        SystemKind::MigrationLevels,
        *grid,
        d,
        l,
        Scheme::EulerMaruyama,
        *stream,
        &x,
        tail,
        first,
    ))
}

/// Migration-level decomposition truncated at `k_max`; the top level
/// collects all levels `>= k_max` so that levels sum to the D-deme system.
pub fn simulate_xd_levels(
    bundle: &CoefficientBundle,
    d: usize,
    k_max: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    check_init(init, d)?;
    check_opts(opts)?;
    match opts.scheme {
        Scheme::LocalCir => run_levels_cir(bundle, d, k_max, init, grid, stream, opts),
        Scheme::EulerMaruyama => run_levels_em(bundle, d, k_max, init, grid, stream, opts),
    }
}

// ---------------------------------------------------------------------------
// Loop-free system

fn run_loopfree_cir(
    bundle: &CoefficientBundle,
    d: usize,
    k_max: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    let eps = opts.absorb_eps;
    let dt = grid.dt;
    let du = d as u64;
    let l = k_max + 1;
    let inv_d = 1.0 / d as f64;
    let mut z = level_init(init, d, l, eps);
    let mut parts: Vec<Partition> = (0..l).map(|_| Partition::new(d)).collect();
    let mut rec = Recorder::new(&opts.record, grid.n_steps, d * l);
    for i in 0..d {
        for k in 0..l {
            if z[i * l + k] > 0.0 {
                parts[k].occupy(i);
                rec.touch(i * l + k, 0, z[i * l + k]);
            }
        }
    }
    let c0 = bundle.sigma2_over_x(0.0);
    let lambda0 = lambda_at_zero(bundle, du);
    let hd0 = bundle.h_d(du, 0.0);
    let mut tail = (false, 0.0);
    let masses = |z: &[f64], parts: &[Partition]| -> Vec<f64> {
        (0..l)
            .map(|k| parts[k].occupied().iter().map(|&i| z[i as usize * l + k]).sum())
            .collect()
    };
    let lm = masses(&z, &parts);
    tail_update(&lm, &mut tail, opts.tail_tol);
    rec.push(0, &z, lm.iter().sum());
    let mut updates: Vec<(usize, usize, f64)> = Vec::new();
    for s in 0..grid.n_steps {
        updates.clear();
        for k in 0..l {
            let donors: Vec<(f64, f64)> = if k == 0 {
                Vec::new()
            } else {
                parts[k - 1]
                    .occupied()
                    .iter()
                    .map(|&j| z[j as usize * l + k - 1])
                    .map(|v| (v, v))
                    .collect()
            };
            let src = if k == 0 { hd0 } else { 0.0 };
            for &i in parts[k].occupied() {
                let i = i as usize;
                let zi = z[i * l + k];
                let m: f64 = donors.iter().map(|&(v, y)| v * bundle.f(y, zi)).sum::<f64>() * inv_d;
                let p = Cir {
                    b: m + src,
                    lambda: bundle.h_tilde(du, zi) / zi,
                    c: bundle.sigma2_over_x(zi),
                };
                ensure_finite(p.b + p.lambda + p.c, s)?;
                let mut rng = stream.cell(i as u64, k as u64, s as u64);
                let v = finish(ensure_finite(cir_step(zi, p, dt, &mut rng), s)?, eps);
                updates.push((i, k, v));
            }
            let m0: f64 = donors.iter().map(|&(v, y)| v * bundle.f(y, 0.0)).sum::<f64>() * inv_d;
            let pool = Cir {
                b: m0 + src,
                lambda: lambda0,
                c: c0,
            };
            ensure_finite(pool.b, s)?;
            let n_empty = d - parts[k].n_occ;
            let mut pool_rng = stream.cell(reserved::POOL, k as u64, s as u64);
            match pool_step(n_empty, pool, dt, eps, &mut pool_rng) {
                Some(hits) => {
                    let empty = parts[k].empty();
                    for (pos, v) in hits {
                        updates.push((empty[pos] as usize, k, finish(v, eps)));
                    }
                }
                None => {
                    for &i in parts[k].empty() {
                        let mut rng = stream.cell(i as u64, k as u64, s as u64);
                        let v = finish(cir_step(0.0, pool, dt, &mut rng), eps);
                        if v > 0.0 {
                            updates.push((i as usize, k, v));
                        }
                    }
                }
            }
        }
        for &(i, k, v) in &updates {
            z[i * l + k] = v;
            if v > 0.0 {
                parts[k].occupy(i);
                rec.touch(i * l + k, s + 1, v);
            } else {
                parts[k].vacate(i);
            }
        }
        let lm = masses(&z, &parts);
        tail_update(&lm, &mut tail, opts.tail_tol);
        rec.push(s + 1, &z, lm.iter().sum());
    }
    Ok(rec.finish(SystemKind::LoopFree, *grid, d, l, Scheme::LocalCir, *stream, &z, tail, None))
}

fn run_loopfree_em(
    bundle: &CoefficientBundle,
    d: usize,
    k_max: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    let eps = opts.absorb_eps;
    let du = d as u64;
    let l = k_max + 1;
    let inv_d = 1.0 / d as f64;
    let mut z = level_init(init, d, l, eps);
    let mut rec = Recorder::new(&opts.record, grid.n_steps, d * l);
    for (c, &v) in z.iter().enumerate() {
        rec.touch(c, 0, v);
    }
    let level_mass = |x: &[f64]| -> Vec<f64> { (0..l).map(|k| (0..d).map(|i| x[i * l + k]).sum()).collect() };
    let mut tail = (false, 0.0);
    tail_update(&level_mass(&z), &mut tail, opts.tail_tol);
    rec.push(0, &z, z.iter().sum());
    let hd0 = bundle.h_d(du, 0.0);
    let mut next = vec![0.0; d * l];
    let mut first = None;
    for s in 0..grid.n_steps {
        for k in 0..l {
            for i in 0..d {
                let zi = z[i * l + k];
                let m: f64 = if k == 0 {
                    0.0
                } else {
                    (0..d)
                        .map(|j| z[j * l + k - 1])
                        .filter(|&v| v > 0.0)
                        .map(|v| v * bundle.f(v, zi))
                        .sum::<f64>()
                        * inv_d
                };
                let dr = m + bundle.h_tilde(du, zi) + if k == 0 { hd0 } else { 0.0 };
                let var = bundle.sigma2(zi);
                ensure_finite(dr + var, s)?;
                let mut rng = stream.cell(i as u64, k as u64, s as u64);
                let (v, zz) = em_step(zi, dr, var, grid.dt, &mut rng);
                if s == 0 && i == 0 && k == 0 {
                    first = Some(zz);
                }
                next[i * l + k] = finish(ensure_finite(v, s)?.max(0.0), eps);
            }
        }
        std::mem::swap(&mut z, &mut next);
        for (c, &v) in z.iter().enumerate() {
            rec.touch(c, s + 1, v);
        }
        tail_update(&level_mass(&z), &mut tail, opts.tail_tol);
        rec.push(s + 1, &z, z.iter().sum());
    }
    Ok(rec.finish(
        SystemKind::LoopFree,
        *grid,
        d,
        l,
        Scheme::EulerMaruyama,
        *stream,
        &z,
        tail,
        first,
    ))
}

/// Loop-free system: each level evolves with full noise and with immigration
/// from the level below only.
pub fn simulate_zd_levels(
    bundle: &CoefficientBundle,
    d: usize,
    k_max: usize,
    init: &SparseInitialCondition,
    grid: &TimeGrid,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<DemeSystemPath> {
    check_init(init, d)?;
    check_opts(opts)?;
    match opts.scheme {
        Scheme::LocalCir => run_loopfree_cir(bundle, d, k_max, init, grid, stream, opts),
        Scheme::EulerMaruyama => run_loopfree_em(bundle, d, k_max, init, grid, stream, opts),
    }
}

// ---------------------------------------------------------------------------
// Recombination

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recombined {
    /// `sum_k X^{D,k}` from the level path.
    pub level_sum: DemeSystemPath,
    /// The D-deme system driven by the combined Brownian increments.
    pub coupled: DemeSystemPath,
}

impl Recombined {
    /// `sup` over steps and demes of the absolute difference.
    pub fn sup_difference(&self) -> f64 {
        self.level_sum
            .all_values()
            .iter()
            .zip(self.coupled.all_values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Rebuilds the per-deme increments `dW(i) = sum_k sqrt(X^k/X) dW^k(i)`
/// (falling back to `dW^0(i)` when the deme is empty) from the level path's
/// streams and advances the D-deme system with them.
pub fn recombine_levels(bundle: &CoefficientBundle, level_path: &DemeSystemPath) -> Result<Recombined> {
    if level_path.kind != SystemKind::MigrationLevels {
        return Err(Error::StreamMismatch("input is not a migration-level path".into()));
    }
    if level_path.scheme != Scheme::EulerMaruyama {
        return Err(Error::StreamMismatch(
            "recombination needs Gaussian level increments (Euler-Maruyama scheme)".into(),
        ));
    }
    let grid = level_path.grid;
    if level_path.recorded_steps.len() != grid.n_steps + 1 {
        return Err(Error::StreamMismatch("level path must record every step".into()));
    }
    let stream = level_path.stream;
    let check: f64 = StandardNormal.sample(&mut stream.cell(0, 0, 0));
    if level_path.first_increment.map(f64::to_bits) != Some(check.to_bits()) {
        return Err(Error::StreamMismatch("first level increment does not match its stream".into()));
    }
    let d = level_path.demes;
    let l = level_path.levels;
    let du = d as u64;
    let inv_d = 1.0 / d as f64;
    let eps = ABSORB_EPS;
    let mut sums = Vec::with_capacity((grid.n_steps + 1) * d);
    let mut y: Vec<f64> = level_path.deme_totals(0).expect("step 0 recorded");
    let mut coupled = Vec::with_capacity((grid.n_steps + 1) * d);
    let mut totals_sum = Vec::with_capacity(grid.n_steps + 1);
    let mut totals_cpl = Vec::with_capacity(grid.n_steps + 1);
    let sq_dt = grid.dt.sqrt();
    for s in 0..=grid.n_steps {
        let lv = level_path.frame(s).expect("every step recorded");
        let tot: Vec<f64> = lv.chunks(l).map(|c| c.iter().sum()).collect();
        totals_sum.push(tot.iter().sum());
        sums.extend_from_slice(&tot);
        totals_cpl.push(y.iter().sum());
        coupled.extend_from_slice(&y);
        if s == grid.n_steps {
            break;
        }
        let nz: Vec<usize> = (0..d).filter(|&j| y[j] > 0.0).collect();
        let mut next = vec![0.0; d];
        for i in 0..d {
            let dw = if tot[i] > eps {
                (0..l)
                    .map(|k| {
                        let w = lv[i * l + k] / tot[i];
                        let z: f64 = StandardNormal.sample(&mut stream.cell(i as u64, k as u64, s as u64));
                        w.sqrt() * z
                    })
                    .sum::<f64>()
            } else {
                StandardNormal.sample(&mut stream.cell(i as u64, 0, s as u64))
            };
            let yi = y[i];
            let m: f64 = nz.iter().map(|&j| y[j] * bundle.f(y[j], yi)).sum::<f64>() * inv_d;
            let dr = m + bundle.h_d(du, yi);
            let v = yi + dr * grid.dt + bundle.sigma2(yi).max(0.0).sqrt() * sq_dt * dw;
            next[i] = finish(ensure_finite(v, s)?.max(0.0), eps);
        }
        y = next;
    }
    let steps: Vec<usize> = (0..=grid.n_steps).collect();
    let absorbed = |vals: &[f64]| -> Vec<Option<usize>> {
        (0..d)
            .map(|i| {
                let last = vals[grid.n_steps * d + i];
                if last > 0.0 {
                    return None;
                }
                let nz = (0..=grid.n_steps).rev().find(|&s| vals[s * d + i] > 0.0);
                Some(nz.map_or(0, |s| s + 1))
            })
            .collect()
    };
    let mk = |vals: Vec<f64>, totals: Vec<f64>, kind| DemeSystemPath {
        kind,
        grid,
        demes: d,
        levels: 1,
        scheme: Scheme::EulerMaruyama,
        stream,
        recorded_steps: steps.clone(),
        absorbed: absorbed(&vals),
        values: vals,
        totals,
        tail_flag: level_path.tail_flag,
        max_tail_fraction: level_path.max_tail_fraction,
        first_increment: level_path.first_increment,
    };
    Ok(Recombined {
        level_sum: mk(sums, totals_sum, SystemKind::MigrationLevels),
        coupled: mk(coupled, totals_cpl, SystemKind::Demes),
    })
}
