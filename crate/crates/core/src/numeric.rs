//! Log-domain and compensated accumulation helpers.

use rand::Rng;

/// Neumaier's variant of Kahan summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn scale(&mut self, factor: f64) {
        self.sum *= factor;
        self.compensation *= factor;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// `log(sum(exp(xs)))`, max-shifted. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s = compensated_sum(xs.iter().map(|&x| (x - max).exp()));
    max + s.ln()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Streaming log-sum-exp: rescales its running sum whenever a new maximum
/// arrives, so it never holds more than one exponent's worth of range.
#[derive(Clone, Copy, Debug)]
pub struct LogSumExp {
    max: f64,
    sum: CompensatedSum,
}

impl Default for LogSumExp {
    fn default() -> Self {
        LogSumExp {
            max: f64::NEG_INFINITY,
            sum: CompensatedSum::new(),
        }
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            if self.max != f64::NEG_INFINITY {
                self.sum.scale((self.max - x).exp());
            }
            self.max = x;
            self.sum.add(1.0);
        } else {
            self.sum.add((x - self.max).exp());
        }
    }

    pub fn merge(mut self, other: LogSumExp) -> LogSumExp {
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        let mut other = other;
        if other.max > self.max {
            self.sum.scale((self.max - other.max).exp());
            self.max = other.max;
        } else {
            other.sum.scale((other.max - self.max).exp());
        }
        self.sum.add(other.sum.sum);
        self.sum.add(other.sum.compensation);
        self
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.value().ln()
        }
    }
}

/// Streaming self-normalised weighted mean of `h` under log-weights.
#[derive(Clone, Copy, Debug)]
pub struct LogWeightedMean {
    max: f64,
    weights: CompensatedSum,
    weighted: CompensatedSum,
}

impl Default for LogWeightedMean {
    fn default() -> Self {
        LogWeightedMean {
            max: f64::NEG_INFINITY,
            weights: CompensatedSum::new(),
            weighted: CompensatedSum::new(),
        }
    }
}

impl LogWeightedMean {
    #[inline]
    pub fn add(&mut self, log_weight: f64, h: f64) {
        if log_weight == f64::NEG_INFINITY {
            return;
        }
        if log_weight > self.max {
            if self.max != f64::NEG_INFINITY {
                let f = (self.max - log_weight).exp();
                self.weights.scale(f);
                self.weighted.scale(f);
            }
            self.max = log_weight;
            self.weights.add(1.0);
            self.weighted.add(h);
        } else {
            let w = (log_weight - self.max).exp();
            self.weights.add(w);
            self.weighted.add(w * h);
        }
    }

    pub fn merge(mut self, mut other: LogWeightedMean) -> LogWeightedMean {
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        if other.max > self.max {
            let f = (self.max - other.max).exp();
            self.weights.scale(f);
            self.weighted.scale(f);
            self.max = other.max;
        } else {
            let f = (other.max - self.max).exp();
            other.weights.scale(f);
            other.weighted.scale(f);
        }
        self.weights.add(other.weights.value());
        self.weighted.add(other.weighted.value());
        self
    }

    pub fn mean(&self) -> f64 {
        self.weighted.value() / self.weights.value()
    }
}

/// Draws an index with probability proportional to `exp(log_weights[k])`.
/// `scratch` is reused for the cumulative sums. Returns `None` when every
/// weight is zero.
pub fn sample_log_categorical<R: Rng + ?Sized>(
    log_weights: &[f64],
    scratch: &mut Vec<f64>,
    rng: &mut R,
) -> Option<usize> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    scratch.clear();
    let mut total = 0.0;
    for &lw in log_weights {
        total += (lw - max).exp();
        scratch.push(total);
    }
    let target = rng.random::<f64>() * total;
    let k = scratch.partition_point(|&c| c <= target);
    // Guard the right edge against rounding and skip zero-mass tails.
    let mut k = k.min(log_weights.len() - 1);
    while log_weights[k] == f64::NEG_INFINITY && k > 0 {
        k -= 1;
    }
    Some(k)
}

/// Draws an index with probability proportional to `weights[k] >= 0`.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = Some(k);
        }
        acc += w;
        if target < acc && w > 0.0 {
            return Some(k);
        }
    }
    last_positive
}

/// Population variance (divides by `n`); `None` for an empty slice.
pub fn mean_and_variance(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = compensated_sum(xs.iter().copied()) / n;
    let var = compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / n;
    Some((mean, var))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
