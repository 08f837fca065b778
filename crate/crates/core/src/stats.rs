//! Monte Carlo summaries and the verdict rules built on them.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Mean with standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
            n: 0,
        }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let mut w = Welford::default();
        for &x in xs {
            w.push(x);
        }
        w.estimate()
    }

    pub fn pooled_se(&self, o: &Estimate) -> f64 {
        self.std_error.hypot(o.std_error)
    }

    /// Whether `|self - o| <= k * pooled SE`.
    pub fn overlaps(&self, o: &Estimate, k: f64) -> bool {
        (self.mean - o.mean).abs() <= k * self.pooled_se(o)
    }

    /// `self - o` for independent estimates.
    pub fn minus(&self, o: &Estimate) -> Estimate {
        Estimate {
            mean: self.mean - o.mean,
            std_error: self.pooled_se(o),
            n: self.n.min(o.n),
        }
    }

    pub fn abs(&self) -> Estimate {
        Estimate {
            mean: self.mean.abs(),
            ..*self
        }
    }

    pub fn scale(&self, c: f64) -> Estimate {
        Estimate {
            mean: self.mean * c,
            std_error: self.std_error * c.abs(),
            n: self.n,
        }
    }

    /// Interval `mean +- k SE` contains `v`.
    pub fn contains(&self, v: f64, k: f64) -> bool {
        (self.mean - v).abs() <= k * self.std_error
    }
}

/// Streaming mean and variance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Chan's parallel merge; used in fixed cell order for determinism.
    pub fn merge(&mut self, o: &Welford) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64;
        self.n = n;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean,
            std_error: if self.n > 1 {
                (self.variance() / self.n as f64).sqrt()
            } else {
                0.0
            },
            n: self.n,
        }
    }
}

/// Outcome of a monotone-decrease check along a ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    /// Every step satisfies `next - prev <= k * pooled SE` (no significant
    /// increase).
    pub lenient: bool,
    /// Every step decreases in point estimate.
    pub strict: bool,
    /// Every step decreases by more than `k` pooled SE.
    pub significant: bool,
    pub steps: Vec<TrendStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendStep {
    pub change: f64,
    pub pooled_se: f64,
}

pub fn trend_decreasing(values: &[Estimate], k: f64) -> TrendVerdict {
    let steps: Vec<TrendStep> = values
        .windows(2)
        .map(|w| TrendStep {
            change: w[1].mean - w[0].mean,
            pooled_se: w[0].pooled_se(&w[1]),
        })
        .collect();
    TrendVerdict {
        lenient: steps.iter().all(|s| s.change <= k * s.pooled_se),
        strict: steps.iter().all(|s| s.change < 0.0),
        significant: steps.iter().all(|s| -s.change > k * s.pooled_se),
        steps,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Goodness of fit of nonnegative integer `counts` to Poisson(`mean`).
/// Cells are merged from the right until each expects at least 5 draws.
pub fn chi_square_poisson(counts: &[u64], mean: f64) -> ChiSquareResult {
    let n = counts.len() as f64;
    let kmax = counts.iter().copied().max().unwrap_or(0) as usize;
    let mut observed = vec![0.0; kmax + 1];
    for &c in counts {
        observed[c as usize] += 1.0;
    }
    // Poisson pmf by recurrence; the last cell absorbs the upper tail.
    let mut probs = Vec::with_capacity(kmax + 1);
    let mut p = (-mean).exp();
    let mut acc = 0.0;
    for k in 0..=kmax {
        probs.push(p);
        acc += p;
        p *= mean / (k + 1) as f64;
    }
    *probs.last_mut().unwrap() += (1.0 - acc).max(0.0);
    // merge cells so every expected count is >= 5
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for k in 0..=kmax {
        o += observed[k];
        e += probs[k] * n;
        if e >= 5.0 {
            cells.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => cells.push((o, e)),
        }
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    // one parameter (the mean) is known, not fitted
    let dof = cells.len().saturating_sub(1).max(1);
    let p_value = 1.0 - ChiSquared::new(dof as f64).expect("dof > 0").cdf(statistic);
    ChiSquareResult {
        statistic,
        dof,
        p_value,
    }
}
