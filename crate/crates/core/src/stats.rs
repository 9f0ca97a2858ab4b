//! Running mean / standard-error accumulators and deterministic parallel
//! reductions.

use rayon::prelude::*;

/// Items per work unit in the parallel reductions. The merge order is fixed by
/// chunk index, so results do not depend on the thread count.
const CHUNK: usize = 2048;

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// `|mean - target| <= k * stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

/// Welford accumulator. Merging is order-sensitive in floating point, so callers
/// that need bitwise reproducibility merge partial results in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Accumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        let stderr = if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        };
        Estimate {
            mean: self.mean,
            stderr,
        }
    }
}

impl FromIterator<f64> for Accumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Accumulator::new();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// Mean and standard error of `f(i)` for `i in 0..n`, reduced in parallel.
pub fn par_estimate<F>(n: usize, f: F) -> Estimate
where
    F: Fn(usize) -> f64 + Sync,
{
    let partial: Vec<Accumulator> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).collect())
        .collect();
    let mut total = Accumulator::new();
    for p in &partial {
        total.merge(p);
    }
    total.estimate()
}

/// Entrywise estimates of a vector-valued `f(i, out)` that writes `len`
/// values into `out`.
pub fn par_estimate_vec<F>(n: usize, len: usize, f: F) -> Vec<Estimate>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partial: Vec<Vec<Accumulator>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut accs = vec![Accumulator::new(); len];
            let mut buf = vec![0.0; len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut buf);
                for (a, v) in accs.iter_mut().zip(&buf) {
                    a.push(*v);
                }
            }
            accs
        })
        .collect();
    let mut total = vec![Accumulator::new(); len];
    for p in &partial {
        for (t, a) in total.iter_mut().zip(p) {
            t.merge(a);
        }
    }
    total.iter().map(|a| a.estimate()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_two_pass() {
        let xs: Vec<f64> = (0..57).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let acc: Accumulator = xs.iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((acc.mean() - mean).abs() < 1e-14);
        assert!((acc.variance() - var).abs() < 1e-13);
    }

    #[test]
    fn parallel_reduction_thread_independent() {
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let run = |t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| par_estimate(10_000, f))
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
        let v = par_estimate_vec(5000, 2, |i, out| {
            out[0] = f(i);
            out[1] = 2.0 * f(i);
        });
        assert!((v[1].mean - 2.0 * v[0].mean).abs() < 1e-14);
    }

    #[test]
    fn merge_equals_sequential() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let whole: Accumulator = xs.iter().copied().collect();
        let mut left: Accumulator = xs[..40].iter().copied().collect();
        let right: Accumulator = xs[40..].iter().copied().collect();
        left.merge(&right);
        assert_eq!(left.count(), 100);
        assert!((left.mean() - whole.mean()).abs() < 1e-14);
        assert!((left.variance() - whole.variance()).abs() < 1e-13);
    }
}
