//! Small numeric helpers: compensated summation, stream derivation, Wilson
//! intervals and power-exponential series.

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Compensated sum of an iterator.
pub fn csum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th replica stream derived from a master seed.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03)))
}

/// Deterministic ChaCha generator for replica `index`.
pub fn replica_rng(seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(seed, index))
}

/// Wilson score interval at `z` standard deviations.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let ph = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (ph + z2 / (2.0 * n)) / denom;
    let half = z * (ph * (1.0 - ph) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Σ_{k≥1} k^{-s} e^{-c/k} for s > 1, c ≥ 0.
///
/// Terms up to `N = max(2000, 20c)` are summed directly; the rest is closed by
/// Euler–Maclaurin with the integral expanded in powers of c/N.
pub fn power_exp_series(s: f64, c: f64) -> f64 {
    assert!(s > 1.0 && c >= 0.0);
    let n_direct = (20.0 * c).ceil().max(2000.0) as u64;
    let f = |k: f64| k.powf(-s) * (-c / k).exp();
    let mut acc = CompensatedSum::new();
    for k in (1..n_direct).rev() {
        acc.add(f(k as f64));
    }
    let n = n_direct as f64;
    // ∫_N^∞ k^{-s} e^{-c/k} dk = Σ_j (-c)^j / (j! (s+j-1) N^{s+j-1})
    let x = c / n;
    let mut integral = 0.0;
    let mut coef = 1.0;
    for j in 0..60 {
        let jf = j as f64;
        let term = coef / ((s + jf - 1.0) * n.powf(s - 1.0));
        integral += term;
        if term.abs() < 1e-18 * integral.abs() {
            break;
        }
        coef *= -x / (jf + 1.0);
    }
    // f(N)/2 - f'(N)/12 (+ f'''(N)/720, negligible at this N)
    let h = 1e-3 * n;
    let fp = (f(n + h) - f(n - h)) / (2.0 * h);
    acc.add(integral);
    acc.add(0.5 * f(n));
    acc.add(-fp / 12.0);
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(csum(v), 2.0);
    }

    #[test]
    fn zeta_three_halves() {
        let z = power_exp_series(1.5, 0.0);
        assert!((z - 2.612_375_348_685_488).abs() < 1e-10, "{z}");
        let z2 = power_exp_series(2.0, 0.0);
        assert!((z2 - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn series_with_damping_matches_long_direct_sum() {
        let (s, c) = (1.5, 3.0);
        let direct: f64 = csum((1..2_000_000u64).rev().map(|k| {
            let k = k as f64;
            k.powf(-s) * (-c / k).exp()
        }));
        // the direct sum misses a tail of about 2/sqrt(2e6)
        let tail = 2.0 / (2.0e6f64).sqrt();
        assert!((power_exp_series(s, c) - direct - tail).abs() < 1e-5);
    }

    #[test]
    fn wilson_inside_unit_interval() {
        let (lo, hi) = wilson_interval(0, 10, 2.0);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 1.0);
        let (lo, hi) = wilson_interval(50, 100, 1.96);
        assert!(lo < 0.5 && hi > 0.5);
    }
}
