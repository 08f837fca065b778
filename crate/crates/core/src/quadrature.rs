//! Scale function, hitting condition and excursion integrals.
//!
//! All integrals go through an adaptive Gauss-Kronrod (7/15) rule. Endpoints
//! where `sigma2` vanishes are handled by geometric subdivision: the interval
//! is cut into pieces of halving width toward the singular end, and the
//! remaining tail is extrapolated from the ratio of successive pieces.
//! Divergence is declared when that ratio stays at or above
//! [`DIVERGENCE_RATIO`] for [`DIVERGENCE_RUN`] successive pieces.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::CoefficientBundle;

pub const DIVERGENCE_RATIO: f64 = 0.999;
pub const DIVERGENCE_RUN: usize = 3;

const MAX_INTERVALS: usize = 4000;
const REL_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IntegralResult {
    pub value: f64,
    pub abs_error: f64,
    pub converged: bool,
    /// Set when divergence was detected at a singular endpoint; `value` is
    /// then infinite.
    pub divergent: bool,
}

impl IntegralResult {
    fn divergent(sign: f64) -> Self {
        Self {
            value: f64::INFINITY.copysign(sign),
            abs_error: f64::INFINITY,
            converged: false,
            divergent: true,
        }
    }

    pub fn is_finite(&self) -> bool {
        !self.divergent && self.value.is_finite()
    }

    fn add(self, o: IntegralResult, tol: f64) -> Self {
        if self.divergent || o.divergent {
            let sign = if self.divergent { self.value } else { o.value };
            return Self::divergent(sign);
        }
        let abs_error = self.abs_error + o.abs_error;
        Self {
            value: self.value + o.value,
            abs_error,
            converged: self.converged && o.converged && abs_error <= tol,
            divergent: false,
        }
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss-Kronrod 7/15 panel. Returns `(kronrod, |kronrod - gauss|)`, or
/// `None` if the integrand is not finite at a node.
pub(crate) fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Option<(f64, f64)> {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let fc = f(c);
    if !fc.is_finite() {
        return None;
    }
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let dx = hw * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        if !(f1.is_finite() && f2.is_finite()) {
            return None;
        }
        k += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            g += WG[j / 2] * (f1 + f2);
        }
    }
    Some((k * hw, ((k - g) * hw).abs()))
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Panel {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Panel {
    fn cmp(&self, o: &Self) -> Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// Adaptive quadrature on a finite interval whose interior integrand values
/// are finite. Bisects the panel with the largest error estimate until the
/// total estimate falls below `max(tol, 1e-14 |value|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> IntegralResult {
    if a == b {
        return IntegralResult {
            value: 0.0,
            abs_error: 0.0,
            converged: true,
            divergent: false,
        };
    }
    let nonfinite = IntegralResult {
        value: f64::NAN,
        abs_error: f64::INFINITY,
        converged: false,
        divergent: false,
    };
    let Some((v, e)) = gk15(&f, a, b) else {
        return nonfinite;
    };
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value: v, err: e });
    let (mut total, mut total_err) = (v, e);
    while total_err > tol.max(REL_FLOOR * total.abs()) && heap.len() < MAX_INTERVALS {
        let p = heap.pop().expect("heap is nonempty");
        let m = 0.5 * (p.a + p.b);
        if m <= p.a || m >= p.b {
            heap.push(p);
            break;
        }
        let (Some((v1, e1)), Some((v2, e2))) = (gk15(&f, p.a, m), gk15(&f, m, p.b)) else {
            return nonfinite;
        };
        total += v1 + v2 - p.value;
        total_err += e1 + e2 - p.err;
        heap.push(Panel {
            a: p.a,
            b: m,
            value: v1,
            err: e1,
        });
        heap.push(Panel {
            a: m,
            b: p.b,
            value: v2,
            err: e2,
        });
    }
    // Re-sum to shed accumulated cancellation in the running totals.
    let (mut value, mut err) = (0.0, 0.0);
    for p in heap.iter() {
        value += p.value;
        err += p.err;
    }
    IntegralResult {
        value,
        abs_error: err,
        converged: err <= tol.max(REL_FLOOR * value.abs()),
        divergent: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Left,
    Right,
}

/// Integrates over `[a, b]` with a possible singularity at one endpoint.
pub fn integrate_singular<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
    singular: Endpoint,
) -> IntegralResult {
    let w = b - a;
    if w <= 0.0 {
        return integrate(f, a, b, tol);
    }
    let anchor = match singular {
        Endpoint::Left => a,
        Endpoint::Right => b,
    };
    // Near a nonzero endpoint, node coordinates lose relative precision.
    let min_width = if anchor == 0.0 {
        1e-280
    } else {
        1e6 * f64::EPSILON * anchor.abs()
    };
    let piece = |k: i32| -> (f64, f64) {
        let outer = w * 0.5f64.powi(k);
        let inner = w * 0.5f64.powi(k + 1);
        match singular {
            Endpoint::Left => (a + inner, a + outer),
            Endpoint::Right => (b - outer, b - inner),
        }
    };
    let mut sum = 0.0;
    let mut err = 0.0;
    let mut prev: Option<f64> = None;
    let mut prev_ratio: Option<f64> = None;
    let mut run = 0usize;
    let mut k = 0i32;
    loop {
        let (lo, hi) = piece(k);
        let mut tk = (tol * 0.5f64.powi(k + 2)).max(1e-300);
        // Nodes of a narrow piece near a nonzero anchor carry relative
        // position error eps*|anchor|/width; no tolerance below that holds.
        if anchor != 0.0 {
            if let Some((v, _)) = gk15(&f, lo, hi) {
                let floor = 64.0 * f64::EPSILON * anchor.abs() / (hi - lo) * v.abs();
                tk = tk.max(floor);
            }
        }
        let r = integrate(&f, lo, hi, tk);
        if !r.value.is_finite() {
            return IntegralResult::divergent(1.0);
        }
        sum += r.value;
        err += r.abs_error;
        let width = hi - lo;
        if let Some(p) = prev {
            let ratio = if p != 0.0 {
                r.value / p
            } else if r.value == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            if ratio >= DIVERGENCE_RATIO {
                run += 1;
                if run >= DIVERGENCE_RUN {
                    return IntegralResult::divergent(sum);
                }
            } else {
                run = 0;
            }
            if ratio.abs() < 1.0 {
                let tail = r.value * ratio / (1.0 - ratio);
                if k >= 3 && tail.abs() <= 0.25 * tol {
                    return IntegralResult {
                        value: sum + tail,
                        abs_error: err + tail.abs(),
                        converged: err + tail.abs() <= tol,
                        divergent: false,
                    };
                }
                if width < min_width || k > 1100 {
                    let drift = prev_ratio.map_or(1.0, |q: f64| (ratio - q).abs());
                    let tail_err = tail.abs() * (drift / (1.0 - ratio)).min(1.0) + 1e-12 * tail.abs();
                    let total = err + tail_err;
                    return IntegralResult {
                        value: sum + tail,
                        abs_error: total,
                        converged: total <= tol,
                        divergent: false,
                    };
                }
            } else if width < min_width || k > 1100 {
                return IntegralResult::divergent(sum);
            }
            prev_ratio = Some(ratio);
        }
        prev = Some(r.value);
        k += 1;
    }
}

/// Integrates over `[a, b]` with possible singularities at both ends.
pub fn integrate_two_sided<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> IntegralResult {
    let m = 0.5 * (a + b);
    let l = integrate_singular(&f, a, m, 0.5 * tol, Endpoint::Left);
    let r = integrate_singular(&f, m, b, 0.5 * tol, Endpoint::Right);
    l.add(r, tol)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * z * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = nf * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// `y f(y, 0)`.
pub fn a_tilde(bundle: &CoefficientBundle, y: f64) -> f64 {
    bundle.a_tilde(y)
}

/// Tabulated scale density and scale function.
///
/// Anchors are placed on a log-spaced grid near 0, a uniform grid in the
/// bulk and a log-spaced grid toward 1; values between anchors are completed
/// by a local quadrature from the nearest anchor to the left.
#[derive(Clone, Debug)]
pub struct ScaleTable {
    bundle: CoefficientBundle,
    tol: f64,
    pub grid: Vec<f64>,
    pub log_s_values: Vec<f64>,
    pub s_values: Vec<f64>,
    pub s_big_values: Vec<f64>,
    pub est_error: Vec<f64>,
}

fn anchor_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    for j in 0..=80 {
        g.push(10f64.powf(-10.0 + 8.0 * j as f64 / 80.0));
    }
    for j in 2..=98 {
        g.push(j as f64 / 100.0);
    }
    for j in 0..=60 {
        g.push(1.0 - 10f64.powf(-2.0 - 6.0 * j as f64 / 60.0));
    }
    g.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    g
}

impl ScaleTable {
    pub fn build(bundle: &CoefficientBundle, tol: f64) -> Result<Self> {
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Error::param("tol", "must be positive"));
        }
        let b = bundle.clone();
        let phi = move |x: f64| -2.0 * b.h(x) / b.sigma2(x);
        let probe = integrate_singular(&phi, 0.0, 0.5, tol, Endpoint::Left);
        if probe.divergent || !probe.value.is_finite() {
            return Err(Error::HittingConditionViolated { endpoint: 0.0 });
        }
        let grid = anchor_grid();
        let n = grid.len();
        let inner_tol = tol * 1e-3;
        let mut ls = vec![0.0; n];
        let mut ls_err = vec![0.0; n];
        for k in 1..n {
            let r = if k == 1 {
                integrate_singular(&phi, grid[0], grid[1], inner_tol, Endpoint::Left)
            } else {
                integrate(&phi, grid[k - 1], grid[k], inner_tol)
            };
            if !r.value.is_finite() {
                return Err(Error::EvaluatorFailure {
                    what: "h / sigma2",
                    x: grid[k],
                });
            }
            ls[k] = ls[k - 1] + r.value;
            ls_err[k] = ls_err[k - 1] + r.abs_error;
        }
        let mut table = Self {
            bundle: bundle.clone(),
            tol,
            grid,
            s_values: ls.iter().map(|v| v.exp()).collect(),
            log_s_values: ls,
            s_big_values: vec![0.0; n],
            est_error: vec![0.0; n],
        };
        for k in 1..n {
            let (lo, hi) = (table.grid[k - 1], table.grid[k]);
            // Toward 1 both s and S grow without bound; rounding in s then
            // sits above any absolute tolerance, so accuracy is relative.
            let s_lo = table.log_s_values[k - 1].exp() * (hi - lo);
            let local_tol = inner_tol.max(1e-12 * (table.s_big_values[k - 1] + s_lo));
            let r = integrate(|z| table.log_s_from(k - 1, z).exp(), lo, hi, local_tol);
            if !r.value.is_finite() {
                return Err(Error::EvaluatorFailure { what: "s", x: hi });
            }
            table.s_big_values[k] = table.s_big_values[k - 1] + r.value;
            // Error from the anchor of log s propagates multiplicatively.
            let prop = r.value * ls_err[k];
            table.est_error[k] = table.est_error[k - 1] + r.abs_error + prop;
        }
        Ok(table)
    }

    pub fn bundle(&self) -> &CoefficientBundle {
        &self.bundle
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    fn phi(&self, x: f64) -> f64 {
        -2.0 * self.bundle.h(x) / self.bundle.sigma2(x)
    }

    fn anchor(&self, z: f64) -> usize {
        self.grid.partition_point(|&g| g <= z).saturating_sub(1)
    }

    fn log_s_from(&self, k: usize, z: f64) -> f64 {
        let g = self.grid[k];
        if z == g {
            return self.log_s_values[k];
        }
        // A single fixed panel keeps log s smooth in z, which outer adaptive
        // rules rely on; anchors are close enough for full accuracy.
        let phi = |x: f64| self.phi(x);
        match gk15(&phi, g, z) {
            Some((v, _)) => self.log_s_values[k] + v,
            None => f64::NAN,
        }
    }

    /// `log s(z)` for `z` in `[0, 1)`.
    pub fn log_s(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        if z >= 1.0 {
            return f64::INFINITY;
        }
        let k = self.anchor(z);
        self.log_s_from(k, z)
    }

    pub fn s(&self, z: f64) -> f64 {
        self.log_s(z).exp()
    }

    /// `S(y) = int_0^y s`.
    pub fn big_s(&self, y: f64) -> f64 {
        self.scale_function(y).value
    }

    pub fn scale_function(&self, y: f64) -> IntegralResult {
        if y <= 0.0 {
            return IntegralResult {
                value: 0.0,
                abs_error: 0.0,
                converged: true,
                divergent: false,
            };
        }
        if y >= 1.0 {
            // S(1) may be finite; integrate the remaining tail toward 1.
            let last = self.grid.len() - 1;
            let g = self.grid[last];
            let r = integrate_singular(|z| self.log_s_from(last, z).exp(), g, 1.0, self.tol, Endpoint::Right);
            let mut out = r;
            out.value += self.s_big_values[last];
            out.abs_error += self.est_error[last];
            return out;
        }
        let k = self.anchor(y);
        let g = self.grid[k];
        let r = integrate(|z| self.log_s_from(k, z).exp(), g, y, self.tol * 1e-3);
        let abs_error = self.est_error[k] + r.abs_error;
        IntegralResult {
            value: self.s_big_values[k] + r.value,
            abs_error,
            converged: r.converged && abs_error <= self.tol,
            divergent: false,
        }
    }

    pub fn scale_density(&self, z: f64) -> IntegralResult {
        let v = self.s(z);
        IntegralResult {
            value: v,
            abs_error: v * self.tol * 1e-3,
            converged: v.is_finite(),
            divergent: !v.is_finite(),
        }
    }

    /// `int_0^1 2 g(y) / (sigma2(y) s(y)) dy`, the Q-integral of
    /// `int_0^inf g(chi_t) dt`.
    pub fn occupation_integral<G: Fn(f64) -> f64>(&self, g: G, tol: f64) -> IntegralResult {
        let b = &self.bundle;
        integrate_two_sided(
            |y| 2.0 * g(y) * (-self.log_s(y)).exp() / b.sigma2(y),
            0.0,
            1.0,
            tol,
        )
    }

    /// `E_x[int_0^{T0} g(Y_t) dt] = int_0^1 2 S(x ^ y) g(y) / (sigma2 s) dy`.
    pub fn green_integral<G: Fn(f64) -> f64>(&self, x: f64, g: G, tol: f64) -> IntegralResult {
        let b = &self.bundle;
        let sx = self.big_s(x);
        let below = integrate_singular(
            |y| 2.0 * self.big_s(y) * g(y) * (-self.log_s(y)).exp() / b.sigma2(y),
            0.0,
            x,
            0.5 * tol,
            Endpoint::Left,
        );
        let above = integrate_singular(
            |y| 2.0 * sx * g(y) * (-self.log_s(y)).exp() / b.sigma2(y),
            x,
            1.0,
            0.5 * tol,
            Endpoint::Right,
        );
        below.add(above, tol)
    }

    pub fn hitting_condition(&self, x_mid: f64, tol: f64) -> Result<HittingCondition> {
        if !(x_mid > 0.0 && x_mid < 1.0) {
            return Err(Error::param("x_mid", "must lie in (0,1)"));
        }
        let b = &self.bundle;
        let below = integrate_singular(
            |y| self.big_s(y) * (-self.log_s(y)).exp() / b.sigma2(y),
            0.0,
            x_mid,
            tol,
            Endpoint::Left,
        );
        let above = integrate_singular(
            |y| b.a_tilde(y) * (-self.log_s(y)).exp() / b.sigma2(y),
            x_mid,
            1.0,
            tol,
            Endpoint::Right,
        );
        Ok(HittingCondition { x_mid, below, above })
    }

    /// Rows `(y, s, S, a_tilde, area integrand)` on the anchor grid.
    pub fn rows(&self) -> Vec<[f64; 5]> {
        self.grid
            .iter()
            .enumerate()
            .map(|(k, &y)| {
                let at = self.bundle.a_tilde(y);
                let integrand = if y > 0.0 {
                    2.0 * at / (self.bundle.sigma2(y) * self.s_values[k])
                } else {
                    2.0 * self.bundle.f(0.0, 0.0) / self.bundle.sigma2_over_x(0.0)
                };
                [y, self.s_values[k], self.s_big_values[k], at, integrand]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HittingCondition {
    pub x_mid: f64,
    /// `int_0^x S / (sigma2 s)`
    pub below: IntegralResult,
    /// `int_x^1 a_tilde / (sigma2 s)`
    pub above: IntegralResult,
}

impl HittingCondition {
    pub fn holds(&self) -> bool {
        self.below.is_finite() && self.above.is_finite()
    }
}

pub fn scale_density(bundle: &CoefficientBundle, z: f64, tol: f64) -> Result<IntegralResult> {
    if !(0.0..1.0).contains(&z) {
        return Err(Error::param("z", "must lie in [0,1)"));
    }
    if z == 0.0 {
        return Ok(IntegralResult {
            value: 1.0,
            abs_error: 0.0,
            converged: true,
            divergent: false,
        });
    }
    let b = bundle.clone();
    let r = integrate_singular(
        move |x| -2.0 * b.h(x) / b.sigma2(x),
        0.0,
        z,
        tol * 1e-3,
        Endpoint::Left,
    );
    if r.divergent || !r.value.is_finite() {
        return Err(Error::HittingConditionViolated { endpoint: 0.0 });
    }
    let value = r.value.exp();
    // d(e^v) = e^v dv
    let abs_error = value * r.abs_error;
    Ok(IntegralResult {
        value,
        abs_error,
        converged: r.converged && abs_error <= tol.max(REL_FLOOR * value),
        divergent: false,
    })
}

pub fn scale_function(bundle: &CoefficientBundle, y: f64, tol: f64) -> Result<IntegralResult> {
    if !(0.0..1.0).contains(&y) {
        return Err(Error::param("y", "must lie in [0,1)"));
    }
    Ok(ScaleTable::build(bundle, tol)?.scale_function(y))
}

pub fn hitting_condition(bundle: &CoefficientBundle, x_mid: f64, tol: f64) -> Result<HittingCondition> {
    ScaleTable::build(bundle, tol)?.hitting_condition(x_mid, tol)
}

fn require_hitting(table: &ScaleTable, tol: f64) -> Result<()> {
    let hc = table.hitting_condition(0.5, tol)?;
    if hc.below.divergent {
        return Err(Error::HittingConditionViolated { endpoint: 0.0 });
    }
    if hc.above.divergent {
        return Err(Error::HittingConditionViolated { endpoint: 1.0 });
    }
    Ok(())
}

/// `int_0^1 a_tilde / (sigma2 s / 2)`, the expected emigration of one
/// excursion under Q.
pub fn excursion_area(bundle: &CoefficientBundle, tol: f64) -> Result<IntegralResult> {
    let table = ScaleTable::build(bundle, tol)?;
    excursion_area_with(&table, tol)
}

pub fn excursion_area_with(table: &ScaleTable, tol: f64) -> Result<IntegralResult> {
    require_hitting(table, tol)?;
    let b = table.bundle().clone();
    let r = table.occupation_integral(|y| b.a_tilde(y), tol);
    if !r.is_finite() {
        return Err(Error::ExcursionAreaInfinite);
    }
    Ok(r)
}

/// `int_0^1 y / (sigma2 s / 2)`.
pub fn mean_excursion_mass(bundle: &CoefficientBundle, tol: f64) -> Result<IntegralResult> {
    let table = ScaleTable::build(bundle, tol)?;
    mean_excursion_mass_with(&table, tol)
}

pub fn mean_excursion_mass_with(table: &ScaleTable, tol: f64) -> Result<IntegralResult> {
    require_hitting(table, tol)?;
    Ok(table.occupation_integral(|y| y, tol))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExtinctionVerdict {
    /// Total mass dies out (`area <= 1`).
    pub holds: bool,
    /// `1 - area`.
    pub margin: f64,
    pub area: IntegralResult,
}

/// Decides whether the limiting forest dies out. Fails with
/// [`Error::Indeterminate`] when `|1 - area|` is within the quadrature error.
pub fn extinction_criterion(bundle: &CoefficientBundle, tol: f64) -> Result<ExtinctionVerdict> {
    let area = excursion_area(bundle, tol)?;
    let margin = 1.0 - area.value;
    if margin.abs() < area.abs_error.max(tol) {
        return Err(Error::Indeterminate {
            area: area.value,
            error: area.abs_error.max(tol),
        });
    }
    Ok(ExtinctionVerdict {
        holds: margin >= 0.0,
        margin,
        area,
    })
}

/// Closed forms for the altruism preset.
pub mod altruism_closed_form {
    use crate::model::AltruismParams;

    /// `(1-z)^{-2 kappa/(a beta)} ((a-z)/a)^{-2 alpha/beta}`
    pub fn log_s(p: &AltruismParams, z: f64) -> f64 {
        let e1 = 2.0 * p.kappa / (p.a * p.beta);
        let e2 = 2.0 * p.alpha / p.beta;
        -e1 * (-z).ln_1p() - e2 * ((p.a - z) / p.a).ln()
    }

    pub fn s(p: &AltruismParams, z: f64) -> f64 {
        log_s(p, z).exp()
    }

    /// Integrand of the area in the reduced form
    /// `(2 kappa/(a beta)) (1-y)^{2 kappa/(a beta)-1} ((a-y)/a)^{2 alpha/beta-2}`.
    pub fn area_integrand(p: &AltruismParams, y: f64) -> f64 {
        let e1 = 2.0 * p.kappa / (p.a * p.beta);
        let e2 = 2.0 * p.alpha / p.beta;
        e1 * (1.0 - y).powf(e1 - 1.0) * ((p.a - y) / p.a).powf(e2 - 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{altruism_preset, default_mutation_profile, AltruismParams};
    use approx::assert_relative_eq;

    #[test]
    fn gk_polynomial_exact() {
        let r = integrate(|x| x.powi(5) - 3.0 * x * x, 0.0, 2.0, 1e-12);
        assert_relative_eq!(r.value, 64.0 / 6.0 - 8.0, max_relative = 1e-14);
        assert!(r.converged);
    }

    #[test]
    fn singular_power_laws() {
        for p in [0.0, 0.3, 0.5, 0.9] {
            let r = integrate_singular(|x: f64| x.powf(-p), 0.0, 1.0, 1e-10, Endpoint::Left);
            assert!(!r.divergent);
            assert_relative_eq!(r.value, 1.0 / (1.0 - p), max_relative = 1e-8);
            let r = integrate_singular(|x: f64| (1.0 - x).powf(-p), 0.0, 1.0, 1e-10, Endpoint::Right);
            assert_relative_eq!(r.value, 1.0 / (1.0 - p), max_relative = 1e-7);
        }
    }

    #[test]
    fn divergence_detected() {
        let r = integrate_singular(|x: f64| 1.0 / x, 0.0, 1.0, 1e-10, Endpoint::Left);
        assert!(r.divergent);
        let r = integrate_singular(|x: f64| (1.0 - x).powi(-2), 0.0, 1.0, 1e-10, Endpoint::Right);
        assert!(r.divergent);
    }

    #[test]
    fn legendre_rules() {
        let (x, w) = gauss_legendre(64);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, max_relative = 1e-13);
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert_relative_eq!(m, 2.0 / 11.0, max_relative = 1e-13);
        let (x, w) = gauss_legendre(5);
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert_relative_eq!(m, 2.0 / 9.0, max_relative = 1e-13);
    }

    #[test]
    fn table_matches_closed_form() {
        let p = AltruismParams::new(1.0, 1.0, 1.0, 2.0);
        let b = altruism_preset(p, default_mutation_profile()).unwrap();
        let t = ScaleTable::build(&b, 1e-10).unwrap();
        for z in [1e-6, 0.1, 0.5, 0.9, 0.999] {
            assert_relative_eq!(t.s(z), altruism_closed_form::s(&p, z), max_relative = 1e-9);
        }
        assert_relative_eq!(t.s(0.5), 32.0 / 9.0, max_relative = 1e-9);
    }
}
