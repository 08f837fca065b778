//! Coefficient bundles for the deme system, the sparse initial condition and
//! the standing-assumption checks.
//!
//! A bundle carries the migration kernel `f(y, x)`, the local drift `h`, the
//! family `h_D` with weak immigration, the infinitesimal variance `sigma2` and
//! the limit immigration rate `mu = lim D h_D(0)`, together with the Lipschitz
//! constants used by the moment bounds.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature;

pub type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type FnD = Arc<dyn Fn(u64, f64) -> f64 + Send + Sync>;

/// Tolerance on every assumption margin.
pub const ASSUMPTION_TOL: f64 = 1e-12;

/// Default grid size for assumption checks.
pub const DEFAULT_GRID: usize = 1001;

const SLOPE_PROBE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Lipschitz {
    pub f: f64,
    pub h: f64,
    pub sigma: f64,
}

/// The model `(f, h, h_D, sigma2, mu)`. Immutable after construction.
#[derive(Clone)]
pub struct CoefficientBundle {
    name: String,
    f: Fn2,
    h: Fn1,
    h_d: FnD,
    sigma2: Fn1,
    mu: f64,
    lipschitz: Lipschitz,
    sigma2_slope0: f64,
}

impl fmt::Debug for CoefficientBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientBundle")
            .field("name", &self.name)
            .field("mu", &self.mu)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl CoefficientBundle {
    /// Builds a bundle from raw evaluators. When `lipschitz` is `None` the
    /// constants are estimated by maximal difference quotients on a uniform
    /// grid and over the D ladder `{1, 10, 100, 1000}`.
    pub fn custom(
        name: impl Into<String>,
        f: Fn2,
        h: Fn1,
        h_d: FnD,
        sigma2: Fn1,
        mu: f64,
        lipschitz: Option<Lipschitz>,
    ) -> Result<Self> {
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(Error::param("mu", "must be finite and nonnegative"));
        }
        let lipschitz = match lipschitz {
            Some(l) => l,
            None => estimate_lipschitz(&f, &h, &h_d, &sigma2, DEFAULT_GRID)?,
        };
        let sigma2_slope0 = sigma2(SLOPE_PROBE) / SLOPE_PROBE;
        if !sigma2_slope0.is_finite() {
            return Err(Error::EvaluatorFailure {
                what: "sigma2",
                x: SLOPE_PROBE,
            });
        }
        Ok(Self {
            name: name.into(),
            f,
            h,
            h_d,
            sigma2,
            mu,
            lipschitz,
            sigma2_slope0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn f(&self, y: f64, x: f64) -> f64 {
        (self.f)(y, x)
    }

    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        (self.h)(x)
    }

    #[inline]
    pub fn h_d(&self, d: u64, x: f64) -> f64 {
        (self.h_d)(d, x)
    }

    #[inline]
    pub fn sigma2(&self, x: f64) -> f64 {
        (self.sigma2)(x)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lipschitz(&self) -> Lipschitz {
        self.lipschitz
    }

    /// `h_D(x) - h_D(0)`; exactly zero at `x = 0`.
    #[inline]
    pub fn h_tilde(&self, d: u64, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        self.h_d(d, x) - self.h_d(d, 0.0)
    }

    /// Emigration intensity `y f(y, 0)`.
    #[inline]
    pub fn a_tilde(&self, y: f64) -> f64 {
        y * self.f(y, 0.0)
    }

    /// `sigma2(x) / x`, continued by the slope at zero.
    #[inline]
    pub fn sigma2_over_x(&self, x: f64) -> f64 {
        if x <= SLOPE_PROBE {
            self.sigma2_slope0
        } else {
            self.sigma2(x) / x
        }
    }

    /// Natural time scale `1 / max(L_f + L_h, L_sigma)`.
    pub fn time_scale(&self) -> f64 {
        let l = self.lipschitz;
        let rate = (l.f + l.h).max(l.sigma);
        if rate > 0.0 {
            1.0 / rate
        } else {
            1.0
        }
    }

    /// Default step: `1e-3` natural time units.
    pub fn default_dt(&self) -> f64 {
        1e-3 * self.time_scale()
    }
}

pub fn h_tilde(bundle: &CoefficientBundle, d: u64, x: f64) -> f64 {
    bundle.h_tilde(d, x)
}

/// Parameters of the host-parasite altruism model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AltruismParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub a: f64,
    pub mu_inf: f64,
}

impl AltruismParams {
    pub fn new(alpha: f64, beta: f64, kappa: f64, a: f64) -> Self {
        Self {
            alpha,
            beta,
            kappa,
            a,
            mu_inf: 0.0,
        }
    }
}

/// Relative frequency of altruists in a Lotka-Volterra host-parasite model:
/// `f(y,x) = kappa (a-x)^2 / (a (a-y))`, `h(x) = -kappa x (a-x)/a - alpha x (1-x)`,
/// `h_D = h + mu_D b` with `mu_D = min(mu_inf / D, 1)`, and
/// `sigma2(x) = beta (a-x) x (1-x)`.
pub fn altruism_preset(p: AltruismParams, b: Fn1) -> Result<CoefficientBundle> {
    let AltruismParams {
        alpha,
        beta,
        kappa,
        a,
        mu_inf,
    } = p;
    for (name, v) in [("alpha", alpha), ("beta", beta), ("kappa", kappa)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::param(name, "must be positive"));
        }
    }
    if !(a.is_finite() && a > 1.0) {
        return Err(Error::param("a", "must satisfy a > 1"));
    }
    if !(mu_inf.is_finite() && mu_inf >= 0.0) {
        return Err(Error::param("mu_inf", "must be nonnegative"));
    }
    let (b0, b1) = (b(0.0), b(1.0));
    if !(b0.is_finite() && b1.is_finite()) {
        return Err(Error::EvaluatorFailure { what: "b", x: 0.0 });
    }
    if b1.abs() > ASSUMPTION_TOL || b0 < 0.0 {
        return Err(Error::param("b", "requires b(1) = 0 <= b(0)"));
    }

    let f: Fn2 = Arc::new(move |y, x| kappa * (a - x) * (a - x) / (a * (a - y)));
    let h: Fn1 = Arc::new(move |x| -kappa * x * (a - x) / a - alpha * x * (1.0 - x));
    let hb = b.clone();
    let h_d: FnD = Arc::new(move |d, x| {
        let mu_d = (mu_inf / d as f64).min(1.0);
        -kappa * x * (a - x) / a - alpha * x * (1.0 - x) + mu_d * hb(x)
    });
    let sigma2: Fn1 = Arc::new(move |x| (beta * (a - x) * x * (1.0 - x)).max(0.0));

    let l_f = (kappa * a / (a - 1.0))
        .max(kappa * a / ((a - 1.0) * (a - 1.0)))
        .max(2.0 * kappa / (a - 1.0));
    let l_b = difference_quotient_1d(&b, DEFAULT_GRID, "b")?;
    let l_h = (kappa + alpha).max((alpha - kappa * (a - 2.0) / a).abs()) + mu_inf.min(1.0) * l_b;
    // sigma2'(x) = beta (a - 2(a+1) x + 3 x^2)
    let dsig = |x: f64| beta * (a - 2.0 * (a + 1.0) * x + 3.0 * x * x);
    let mut l_sigma = dsig(0.0).abs().max(dsig(1.0).abs());
    let vertex = (a + 1.0) / 3.0;
    if (0.0..=1.0).contains(&vertex) {
        l_sigma = l_sigma.max(dsig(vertex).abs());
    }
    let lipschitz = Lipschitz {
        f: l_f,
        h: l_h,
        sigma: l_sigma,
    };
    CoefficientBundle::custom(
        format!("altruism(alpha={alpha},beta={beta},kappa={kappa},a={a},mu_inf={mu_inf})"),
        f,
        h,
        h_d,
        sigma2,
        mu_inf * b0,
        Some(lipschitz),
    )
}

/// Default mutation profile `b(x) = 1 - x` for the altruism preset.
pub fn default_mutation_profile() -> Fn1 {
    Arc::new(|x| 1.0 - x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DawsonGrevenParams {
    pub c: f64,
    pub d: f64,
    pub m: f64,
    pub s: f64,
}

/// Wright-Fisher diffusions with selection and rare mutation:
/// `sigma2 = d x (1-x)`, `f = c`, `h_D = -c x + s x (1-x) + (m/D)(1-x)`.
///
/// `m = 0` and `s = 0` are accepted so that the critical and neutral cases can
/// be exercised; negative values are rejected.
pub fn dawson_greven_preset(p: DawsonGrevenParams) -> Result<CoefficientBundle> {
    let DawsonGrevenParams { c, d, m, s } = p;
    for (name, v) in [("c", c), ("d", d)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::param(name, "must be positive"));
        }
    }
    for (name, v) in [("m", m), ("s", s)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::param(name, "must be nonnegative"));
        }
    }
    let f: Fn2 = Arc::new(move |_, _| c);
    let h: Fn1 = Arc::new(move |x| -c * x + s * x * (1.0 - x));
    let h_d: FnD = Arc::new(move |dd, x| -c * x + s * x * (1.0 - x) + (m / dd as f64) * (1.0 - x));
    let sigma2: Fn1 = Arc::new(move |x| (d * x * (1.0 - x)).max(0.0));
    CoefficientBundle::custom(
        format!("dawson_greven(c={c},d={d},m={m},s={s})"),
        f,
        h,
        h_d,
        sigma2,
        m,
        Some(Lipschitz {
            f: c,
            h: c + s + m,
            sigma: d,
        }),
    )
}

/// Polynomial in one variable, coefficients in increasing degree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Polynomial(pub Vec<f64>);

impl Polynomial {
    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Custom bundle with polynomial coefficients:
/// `f(y,x) = sum_{p,q} f_coeffs[p][q] y^p x^q`, `h_D = h + (mu/D) imm`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolynomialBundleSpec {
    pub f_coeffs: Vec<Vec<f64>>,
    pub h: Polynomial,
    pub sigma2: Polynomial,
    pub immigration: Polynomial,
    pub mu: f64,
}

pub fn polynomial_bundle(spec: &PolynomialBundleSpec) -> Result<CoefficientBundle> {
    if spec.f_coeffs.is_empty() {
        return Err(Error::param("f_coeffs", "needs at least one row"));
    }
    let imm0 = spec.immigration.eval(0.0);
    if spec.mu > 0.0 && (imm0 - 1.0).abs() > ASSUMPTION_TOL {
        return Err(Error::param("immigration", "profile must satisfy imm(0) = 1"));
    }
    let fc = spec.f_coeffs.clone();
    let f: Fn2 = Arc::new(move |y, x| {
        fc.iter()
            .rev()
            .fold(0.0, |acc, row| acc * y + Polynomial::eval_slice(row, x))
    });
    let hp = spec.h.clone();
    let h: Fn1 = Arc::new(move |x| hp.eval(x));
    let hp2 = spec.h.clone();
    let ip = spec.immigration.clone();
    let mu = spec.mu;
    let h_d: FnD = Arc::new(move |d, x| hp2.eval(x) + mu / d as f64 * ip.eval(x));
    let sp = spec.sigma2.clone();
    let sigma2: Fn1 = Arc::new(move |x| sp.eval(x).max(0.0));
    CoefficientBundle::custom("polynomial", f, h, h_d, sigma2, mu, None)
}

impl Polynomial {
    fn eval_slice(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

fn checked(v: f64, what: &'static str, x: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::EvaluatorFailure { what, x })
    }
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

fn difference_quotient_1d(g: &Fn1, n: usize, what: &'static str) -> Result<f64> {
    let xs = grid(n);
    let mut worst: f64 = 0.0;
    let mut prev = checked(g(xs[0]), what, xs[0])?;
    for w in xs.windows(2) {
        let v = checked(g(w[1]), what, w[1])?;
        worst = worst.max((v - prev).abs() / (w[1] - w[0]));
        prev = v;
    }
    Ok(worst)
}

const LIPSCHITZ_LADDER: [u64; 4] = [1, 10, 100, 1000];

fn estimate_lipschitz(f: &Fn2, h: &Fn1, h_d: &FnD, sigma2: &Fn1, n: usize) -> Result<Lipschitz> {
    let n2 = n.min(201);
    let xs = grid(n2);
    let mut l_f: f64 = 0.0;
    for (iy, &y) in xs.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            let v = checked(f(y, x), "f", x)?;
            l_f = l_f.max(v.abs());
            if iy + 1 < n2 {
                let dy = checked(f(xs[iy + 1], x), "f", x)?;
                l_f = l_f.max((dy - v).abs() / (xs[iy + 1] - y));
            }
            if ix + 1 < n2 {
                let dx = checked(f(y, xs[ix + 1]), "f", xs[ix + 1])?;
                l_f = l_f.max((dx - v).abs() / (xs[ix + 1] - x));
            }
        }
    }
    let mut l_h = difference_quotient_1d(h, n, "h")?;
    for d in LIPSCHITZ_LADDER {
        let hd = h_d.clone();
        let g: Fn1 = Arc::new(move |x| hd(d, x));
        l_h = l_h.max(difference_quotient_1d(&g, n, "h_D")?);
    }
    let l_sigma = difference_quotient_1d(sigma2, n, "sigma2")?;
    Ok(Lipschitz {
        f: l_f,
        h: l_h,
        sigma: l_sigma,
    })
}

/// Finite list of `(deme, frequency)` pairs; demes are labelled `1..=D`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SparseInitialCondition {
    entries: Vec<(usize, f64)>,
}

impl SparseInitialCondition {
    pub fn new(mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::param("init", format!("deme {} listed twice", w[0].0)));
            }
        }
        for &(i, x) in &entries {
            if i == 0 {
                return Err(Error::param("init", "deme labels start at 1"));
            }
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::param("init", format!("frequency {x} outside [0,1]")));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(x: f64) -> Result<Self> {
        Self::new(vec![(1, x)])
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn max_deme(&self) -> usize {
        self.entries.last().map_or(0, |e| e.0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|e| e.1 == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Relation {
    /// `|margin| <= tol`
    Equal,
    /// `margin >= -tol`
    NonNegative,
    /// `margin > tol`
    Positive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub id: &'static str,
    pub relation: Relation,
    pub passed: bool,
    /// Coordinates of the worst grid point (`[x]`, `[y, x]` or `[D, x]`).
    pub worst_point: Vec<f64>,
    pub worst_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub bundle: String,
    pub grid_n: usize,
    pub d_ladder: Vec<u64>,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, id: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Ids of all assumptions, in report order.
pub const ASSUMPTION_IDS: [&str; 20] = [
    "h(0) = 0",
    "h(1) < 0",
    "sigma2(0) = 0",
    "sigma2(1) = 0",
    "sigma2(x) > 0 on (0,1)",
    "f(y,0) > 0 on (0,1]",
    "y f(y,1) + h(1) <= 0",
    "y f(y,1) + h_D(1) <= 0",
    "D h_D(0) >= 0",
    "D h_D(0) <= 2 mu",
    "D h_D(0) -> mu",
    "h_D -> h",
    "|f| <= L_f",
    "f Lipschitz in y <= L_f",
    "f Lipschitz in x <= L_f",
    "h Lipschitz <= L_h",
    "h_D Lipschitz <= L_h",
    "sigma2 Lipschitz <= L_sigma",
    "h / sigma2 integrable at 0",
    "hitting condition",
];

struct Worst {
    margin: f64,
    point: Vec<f64>,
}

impl Worst {
    fn new() -> Self {
        Self {
            margin: f64::INFINITY,
            point: Vec::new(),
        }
    }

    fn offer(&mut self, margin: f64, point: &[f64]) {
        if margin < self.margin {
            self.margin = margin;
            self.point = point.to_vec();
        }
    }
}

fn verdict(relation: Relation, margin: f64) -> bool {
    match relation {
        Relation::Equal => margin.abs() <= ASSUMPTION_TOL,
        Relation::NonNegative => margin >= -ASSUMPTION_TOL,
        Relation::Positive => margin > ASSUMPTION_TOL,
    }
}

/// Checks every standing assumption on a uniform grid of `grid_n` points and
/// on each `D` of `d_ladder`.
pub fn validate_setting(
    bundle: &CoefficientBundle,
    grid_n: usize,
    d_ladder: &[u64],
) -> Result<ValidationReport> {
    if grid_n < 2 {
        return Err(Error::param("grid_n", "must be at least 2"));
    }
    if d_ladder.is_empty() || d_ladder.contains(&0) {
        return Err(Error::param("d_ladder", "must be a nonempty list of positive integers"));
    }
    let xs = grid(grid_n);
    let ev_f = |y: f64, x: f64| checked(bundle.f(y, x), "f", x);
    let ev_h = |x: f64| checked(bundle.h(x), "h", x);
    let ev_hd = |d: u64, x: f64| checked(bundle.h_d(d, x), "h_D", x);
    let ev_s = |x: f64| checked(bundle.sigma2(x), "sigma2", x);
    let lip = bundle.lipschitz();
    let mu = bundle.mu();

    let mut checks: Vec<AssumptionCheck> = Vec::with_capacity(ASSUMPTION_IDS.len());
    let mut push = |id: &'static str, relation: Relation, w: Worst| {
        let margin = if w.margin.is_finite() { w.margin } else { 0.0 };
        checks.push(AssumptionCheck {
            id,
            relation,
            passed: verdict(relation, margin),
            worst_point: w.point,
            worst_margin: margin,
        });
    };

    let mut w = Worst::new();
    let h0 = ev_h(0.0)?;
    w.offer(-h0.abs(), &[0.0]);
    push(ASSUMPTION_IDS[0], Relation::Equal, w);

    let mut w = Worst::new();
    w.offer(-ev_h(1.0)?, &[1.0]);
    push(ASSUMPTION_IDS[1], Relation::Positive, w);

    let mut w = Worst::new();
    w.offer(-ev_s(0.0)?.abs(), &[0.0]);
    push(ASSUMPTION_IDS[2], Relation::Equal, w);

    let mut w = Worst::new();
    w.offer(-ev_s(1.0)?.abs(), &[1.0]);
    push(ASSUMPTION_IDS[3], Relation::Equal, w);

    let mut w = Worst::new();
    for &x in &xs[1..grid_n - 1] {
        w.offer(ev_s(x)?, &[x]);
    }
    push(ASSUMPTION_IDS[4], Relation::Positive, w);

    let mut w = Worst::new();
    for &y in &xs[1..] {
        w.offer(ev_f(y, 0.0)?, &[y, 0.0]);
    }
    push(ASSUMPTION_IDS[5], Relation::Positive, w);

    let h1 = ev_h(1.0)?;
    let mut w = Worst::new();
    for &y in &xs[1..] {
        w.offer(-(y * ev_f(y, 1.0)? + h1), &[y, 1.0]);
    }
    push(ASSUMPTION_IDS[6], Relation::NonNegative, w);

    let mut w = Worst::new();
    for &d in d_ladder {
        let hd1 = ev_hd(d, 1.0)?;
        for &y in &xs[1..] {
            w.offer(-(y * ev_f(y, 1.0)? + hd1), &[d as f64, y]);
        }
    }
    push(ASSUMPTION_IDS[7], Relation::NonNegative, w);

    let mut w_lo = Worst::new();
    let mut w_hi = Worst::new();
    let mut w_lim = Worst::new();
    for &d in d_ladder {
        let v = d as f64 * ev_hd(d, 0.0)?;
        w_lo.offer(v, &[d as f64]);
        w_hi.offer(2.0 * mu - v, &[d as f64]);
        w_lim.offer(2.0 * mu / d as f64 - (v - mu).abs(), &[d as f64]);
    }
    push(ASSUMPTION_IDS[8], Relation::NonNegative, w_lo);
    push(ASSUMPTION_IDS[9], Relation::NonNegative, w_hi);
    push(ASSUMPTION_IDS[10], Relation::NonNegative, w_lim);

    let sup_err = |d: u64| -> Result<(f64, f64)> {
        let mut worst = (0.0, 0.0);
        for &x in &xs {
            let e = (ev_hd(d, x)? - ev_h(x)?).abs();
            if e > worst.0 {
                worst = (e, x);
            }
        }
        Ok(worst)
    };
    let mut w = Worst::new();
    let (first, last) = (d_ladder[0], *d_ladder.last().unwrap());
    let (e_first, _) = sup_err(first)?;
    let (e_last, x_last) = sup_err(last)?;
    w.offer(e_first - e_last, &[last as f64, x_last]);
    push(ASSUMPTION_IDS[11], Relation::NonNegative, w);

    let mut w_abs = Worst::new();
    let mut w_y = Worst::new();
    let mut w_x = Worst::new();
    for (iy, &y) in xs.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            let v = ev_f(y, x)?;
            w_abs.offer(lip.f - v.abs(), &[y, x]);
            if iy + 1 < grid_n {
                let q = (ev_f(xs[iy + 1], x)? - v).abs() / (xs[iy + 1] - y);
                w_y.offer(lip.f - q, &[y, x]);
            }
            if ix + 1 < grid_n {
                let q = (ev_f(y, xs[ix + 1])? - v).abs() / (xs[ix + 1] - x);
                w_x.offer(lip.f - q, &[y, x]);
            }
        }
    }
    push(ASSUMPTION_IDS[12], Relation::NonNegative, w_abs);
    push(ASSUMPTION_IDS[13], Relation::NonNegative, w_y);
    push(ASSUMPTION_IDS[14], Relation::NonNegative, w_x);

    let mut w = Worst::new();
    for pair in xs.windows(2) {
        let q = (ev_h(pair[1])? - ev_h(pair[0])?).abs() / (pair[1] - pair[0]);
        w.offer(lip.h - q, &[pair[0]]);
    }
    push(ASSUMPTION_IDS[15], Relation::NonNegative, w);

    let mut w = Worst::new();
    for &d in d_ladder {
        for pair in xs.windows(2) {
            let q = (ev_hd(d, pair[1])? - ev_hd(d, pair[0])?).abs() / (pair[1] - pair[0]);
            w.offer(lip.h - q, &[d as f64, pair[0]]);
        }
    }
    push(ASSUMPTION_IDS[16], Relation::NonNegative, w);

    let mut w = Worst::new();
    for pair in xs.windows(2) {
        let q = (ev_s(pair[1])? - ev_s(pair[0])?).abs() / (pair[1] - pair[0]);
        w.offer(lip.sigma - q, &[pair[0]]);
    }
    push(ASSUMPTION_IDS[17], Relation::NonNegative, w);

    let tol = 1e-9;
    let mut w = Worst::new();
    match quadrature::scale_density(bundle, 0.5, tol) {
        Ok(r) => w.offer(if r.value.is_finite() { 1.0 } else { -1.0 }, &[0.5]),
        Err(Error::HittingConditionViolated { endpoint }) => w.offer(-1.0, &[endpoint]),
        Err(e) => return Err(e),
    }
    push(ASSUMPTION_IDS[18], Relation::Positive, w);

    let mut w = Worst::new();
    match quadrature::hitting_condition(bundle, 0.5, tol) {
        Ok(hc) => w.offer(if hc.holds() { 1.0 } else { -1.0 }, &[0.5]),
        Err(Error::HittingConditionViolated { endpoint }) => w.offer(-1.0, &[endpoint]),
        Err(e) => return Err(e),
    }
    push(ASSUMPTION_IDS[19], Relation::Positive, w);

    Ok(ValidationReport {
        bundle: bundle.name().to_string(),
        grid_n,
        d_ladder: d_ladder.to_vec(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn altruism(alpha: f64, beta: f64, kappa: f64, a: f64) -> CoefficientBundle {
        altruism_preset(AltruismParams::new(alpha, beta, kappa, a), default_mutation_profile()).unwrap()
    }

    #[test]
    fn altruism_setting_passes() {
        let b = altruism(1.0, 1.0, 1.0, 2.0);
        let r = validate_setting(&b, 101, &[10, 100, 1000]).unwrap();
        assert_eq!(r.checks.len(), ASSUMPTION_IDS.len());
        for c in &r.checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn every_assumption_listed_once() {
        let b = altruism(1.0, 1.0, 1.0, 2.0);
        let r = validate_setting(&b, 11, &[10]).unwrap();
        let ids: Vec<_> = r.checks.iter().map(|c| c.id).collect();
        assert_eq!(ids, ASSUMPTION_IDS.to_vec());
    }

    #[test]
    fn dawson_greven_setting_passes() {
        let b = dawson_greven_preset(DawsonGrevenParams {
            c: 1.0,
            d: 1.0,
            m: 1.0,
            s: 1.0,
        })
        .unwrap();
        let r = validate_setting(&b, 101, &[10, 100, 1000]).unwrap();
        assert!(r.all_passed(), "{:?}", r.failures().collect::<Vec<_>>());
    }

    #[test]
    fn h_of_one_zero_fails() {
        let b = dawson_greven_preset(DawsonGrevenParams {
            c: 1.0,
            d: 1.0,
            m: 0.0,
            s: 0.0,
        })
        .unwrap();
        // Same bundle but with h shifted so that h(1) = 0.
        let bad = CoefficientBundle::custom(
            "h1zero",
            Arc::new(|_, _| 1.0),
            Arc::new(|x| -x * (1.0 - x)),
            Arc::new(|_, x| -x * (1.0 - x)),
            Arc::new(|x| x * (1.0 - x)),
            0.0,
            Some(b.lipschitz()),
        )
        .unwrap();
        let r = validate_setting(&bad, 101, &[10]).unwrap();
        assert!(!r.get("h(1) < 0").unwrap().passed);
    }

    #[test]
    fn nonfinite_evaluator_reports_location() {
        let bad = CoefficientBundle::custom(
            "nan",
            Arc::new(|_, _| 1.0),
            Arc::new(|x| if x > 0.5 { f64::NAN } else { -x }),
            Arc::new(|_, x| -x),
            Arc::new(|x| x * (1.0 - x)),
            0.0,
            Some(Lipschitz {
                f: 1.0,
                h: 1.0,
                sigma: 1.0,
            }),
        )
        .unwrap();
        match validate_setting(&bad, 11, &[10]) {
            Err(Error::EvaluatorFailure { what: "h", x }) => assert!(x > 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn altruism_closed_values() {
        let b = altruism(1.0, 1.0, 1.0, 2.0);
        assert_abs_diff_eq!(b.h(1.0), -0.5, epsilon = 1e-15);
        assert_eq!(b.sigma2(0.0), 0.0);
        assert_eq!(b.sigma2(1.0), 0.0);
        assert_abs_diff_eq!(b.f(1.0, 1.0), 0.5, epsilon = 1e-15);
        assert!(b.f(1.0, 1.0) + b.h(1.0) <= 0.0);
    }

    #[test]
    fn altruism_rejects_small_a() {
        let e = altruism_preset(AltruismParams::new(1.0, 1.0, 1.0, 1.0), default_mutation_profile());
        assert!(matches!(e, Err(Error::Parameter { name: "a", .. })));
    }

    #[test]
    fn tight_boundary_case() {
        for k in [0.5, 1.0, 2.0] {
            let b = altruism(k, k, k, k + 1.0);
            let v = b.f(1.0, 1.0) + b.h(1.0);
            assert!(v.abs() <= 1e-12, "{v}");
            let xs = grid(1001);
            for &y in &xs[1..] {
                assert!(y * b.f(y, 1.0) + b.h(1.0) <= 1e-12);
            }
        }
    }

    #[test]
    fn dawson_greven_immigration_limit() {
        let b = dawson_greven_preset(DawsonGrevenParams {
            c: 1.0,
            d: 1.0,
            m: 1.7,
            s: 0.3,
        })
        .unwrap();
        assert_eq!(b.mu(), 1.7);
        for d in [1u64, 10, 100, 1000] {
            assert_abs_diff_eq!(d as f64 * b.h_d(d, 0.0), 1.7, epsilon = 1e-12);
        }
        assert_eq!(b.h(0.0), 0.0);
        for y in [0.1, 0.5, 1.0] {
            assert_eq!(b.f(y, 0.0), 1.0);
        }
    }

    #[test]
    fn h_tilde_values() {
        let b = dawson_greven_preset(DawsonGrevenParams {
            c: 1.0,
            d: 1.0,
            m: 2.0,
            s: 1.0,
        })
        .unwrap();
        assert_eq!(b.h_tilde(10, 0.0), 0.0);
        assert_abs_diff_eq!(b.h_tilde(10, 0.5), -0.35, epsilon = 1e-14);
        let a = altruism(1.0, 1.0, 1.0, 2.0);
        for x in [0.1, 0.4, 0.9] {
            assert_eq!(a.h_tilde(10, x), a.h(x));
        }
    }

    #[test]
    fn immigration_ladder_invariant() {
        let mut bundles = vec![
            dawson_greven_preset(DawsonGrevenParams {
                c: 1.0,
                d: 1.0,
                m: 1.0,
                s: 1.0,
            })
            .unwrap(),
        ];
        let mut p = AltruismParams::new(1.0, 1.0, 1.0, 2.0);
        p.mu_inf = 0.8;
        bundles.push(altruism_preset(p, default_mutation_profile()).unwrap());
        for b in &bundles {
            for d in [10u64, 100, 1000] {
                let v = d as f64 * b.h_d(d, 0.0);
                assert!((v - b.mu()).abs() <= 2.0 * b.mu() / d as f64 + 1e-12);
            }
            assert!(validate_setting(b, 101, &[10, 100, 1000]).unwrap().all_passed());
        }
    }

    #[test]
    fn h_tilde_lipschitz_bound() {
        let mut p = AltruismParams::new(1.5, 1.0, 1.0, 2.0);
        p.mu_inf = 0.5;
        let b = altruism_preset(p, default_mutation_profile()).unwrap();
        let xs = grid(2001);
        for d in [1u64, 10, 100] {
            for w in xs.windows(2) {
                let q = (b.h_tilde(d, w[1]) - b.h_tilde(d, w[0])).abs() / (w[1] - w[0]);
                assert!(q <= 2.0 * b.lipschitz().h + 1e-12);
            }
        }
    }

    #[test]
    fn polynomial_bundle_matches_dawson_greven() {
        let spec = PolynomialBundleSpec {
            f_coeffs: vec![vec![1.0]],
            h: Polynomial(vec![0.0, -0.5, -0.5]),
            sigma2: Polynomial(vec![0.0, 1.0, -1.0]),
            immigration: Polynomial(vec![1.0, -1.0]),
            mu: 1.0,
        };
        let b = polynomial_bundle(&spec).unwrap();
        let dg = dawson_greven_preset(DawsonGrevenParams {
            c: 1.0,
            d: 1.0,
            m: 1.0,
            s: 0.5,
        })
        .unwrap();
        for x in [0.0, 0.2, 0.7, 1.0] {
            assert_abs_diff_eq!(b.h_d(10, x), dg.h_d(10, x), epsilon = 1e-14);
            assert_abs_diff_eq!(b.sigma2(x), dg.sigma2(x), epsilon = 1e-14);
        }
        assert!(b.lipschitz().h >= 0.5);
        assert!(validate_setting(&b, 101, &[10, 100]).unwrap().all_passed());
    }

    #[test]
    fn initial_condition_rules() {
        assert!(SparseInitialCondition::new(vec![(1, 0.2), (1, 0.3)]).is_err());
        assert!(SparseInitialCondition::new(vec![(2, 1.2)]).is_err());
        assert!(SparseInitialCondition::new(vec![(0, 0.2)]).is_err());
        let ic = SparseInitialCondition::new(vec![(3, 0.2), (1, 0.5)]).unwrap();
        assert_eq!(ic.entries(), &[(1, 0.5), (3, 0.2)]);
        assert_eq!(ic.max_deme(), 3);
        assert_abs_diff_eq!(ic.total_mass(), 0.7);
    }
}
