use rand::{CryptoRng, RngCore};
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::{check_epsilon, DpError};

/// Laplace scale derived from a field's sensitivity and the budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceParams {
    pub sensitivity: f64,
    pub epsilon: f64,
}

impl LaplaceParams {
    pub fn new(sensitivity: f64, epsilon: f64) -> Result<Self, DpError> {
        check_epsilon(epsilon)?;
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(DpError::InvalidSensitivity(sensitivity));
        }
        Ok(Self { sensitivity, epsilon })
    }

    /// `b = sensitivity / epsilon`
    pub fn scale(&self) -> f64 {
        self.sensitivity / self.epsilon
    }
}

/// Inverse CDF of Lap(0, b) at a centered uniform `u` in (-1/2, 1/2).
pub fn laplace_from_uniform(u: f64, b: f64) -> f64 {
    if u == 0.0 {
        return 0.0;
    }
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Uniform in the open interval (-1/2, 1/2).
fn centered_uniform<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> f64 {
    // 52 bits keep `bits + 0.5` exact, so neither endpoint is reachable.
    let bits = rng.next_u64() >> 12;
    (bits as f64 + 0.5) / (1u64 << 52) as f64 - 0.5
}

/// One draw from Lap(0, b).
pub fn laplace_sample<R: RngCore + CryptoRng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    debug_assert!(b > 0.0);
    laplace_from_uniform(centered_uniform(rng), b)
}

/// Fills `out` with independent Lap(0, b) draws, each a random sign times a
/// ziggurat exponential variate. Same law as [`laplace_sample`]; used where
/// whole vectors are perturbed, since it needs no logarithm on the fast path.
pub fn laplace_fill<R: RngCore + CryptoRng + ?Sized>(b: f64, out: &mut [f64], rng: &mut R) {
    debug_assert!(b > 0.0);
    for chunk in out.chunks_mut(64) {
        let signs = rng.next_u64();
        for (i, x) in chunk.iter_mut().enumerate() {
            let e: f64 = Exp1.sample(rng);
            *x = if (signs >> i) & 1 == 1 { -b * e } else { b * e };
        }
    }
}

/// `clamp(round(value + Lap(sensitivity / epsilon)), lo, hi)`.
pub fn noise_integer<R: RngCore + CryptoRng + ?Sized>(
    value: i64,
    sensitivity: f64,
    epsilon: f64,
    lo: i64,
    hi: i64,
    rng: &mut R,
) -> Result<i64, DpError> {
    let params = LaplaceParams::new(sensitivity, epsilon)?;
    if lo > hi || value < lo || value > hi {
        return Err(DpError::OutOfRange { value, lo, hi });
    }
    let noisy = (value as f64 + laplace_sample(params.scale(), rng)).round();
    Ok(noisy.clamp(lo as f64, hi as f64) as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn median_maps_to_zero() {
        assert_eq!(laplace_from_uniform(0.0, 3.0), 0.0);
        // F^{-1}(3/4) = b ln 2 for the centered parameterization u = 1/4.
        let x = laplace_from_uniform(0.25, 2.0);
        assert!((x - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((laplace_from_uniform(-0.25, 2.0) + x).abs() < 1e-12);
    }

    #[test]
    fn uniform_never_hits_endpoints() {
        struct Fixed(u64);
        impl RngCore for Fixed {
            fn next_u32(&mut self) -> u32 {
                self.0 as u32
            }
            fn next_u64(&mut self) -> u64 {
                self.0
            }
            fn fill_bytes(&mut self, dst: &mut [u8]) {
                dst.fill(0)
            }
        }
        impl CryptoRng for Fixed {}
        for raw in [0, u64::MAX] {
            let u = centered_uniform(&mut Fixed(raw));
            assert!(u > -0.5 && u < 0.5);
            assert!(laplace_sample(1.0, &mut Fixed(raw)).is_finite());
        }
    }

    #[test]
    fn huge_epsilon_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for v in [0, 17, 6543, 9999] {
            assert_eq!(noise_integer(v, 100.0, 1e12, 0, 9999, &mut rng).unwrap(), v);
        }
    }

    #[test]
    fn output_is_clamped() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let v = noise_integer(6543, 100.0, 0.01, 0, 9999, &mut rng).unwrap();
            assert!((0..=9999).contains(&v));
        }
    }

    #[test]
    fn parameter_errors() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert_eq!(noise_integer(5, 1.0, 0.0, 0, 10, &mut rng), Err(DpError::InvalidEpsilon(0.0)));
        assert!(matches!(noise_integer(5, 1.0, -1.0, 0, 10, &mut rng), Err(DpError::InvalidEpsilon(_))));
        assert!(matches!(noise_integer(5, 0.0, 1.0, 0, 10, &mut rng), Err(DpError::InvalidSensitivity(_))));
        assert!(matches!(noise_integer(11, 1.0, 1.0, 0, 10, &mut rng), Err(DpError::OutOfRange { .. })));
    }

    #[test]
    fn median_tracks_location() {
        // Median of value + Lap(b) is the value; its standard error is b/sqrt(N) ~ 0.32.
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut draws: Vec<i64> =
            (0..100_000).map(|_| noise_integer(5000, 100.0, 1.0, 0, 10_000, &mut rng).unwrap()).collect();
        draws.sort_unstable();
        let median = draws[draws.len() / 2];
        assert!((median - 5000).abs() <= 5, "median {median}");
    }

    #[test]
    fn variance_is_two_b_squared() {
        let b = 3.0;
        let n = 200_000;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..n).map(|_| laplace_sample(b, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * (2.0f64).sqrt() * b / (n as f64).sqrt());
        assert!((var / (2.0 * b * b) - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn seeded_generators_reproduce() {
        let a: Vec<f64> = {
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            (0..16).map(|_| laplace_sample(1.0, &mut rng)).collect()
        };
        let b: Vec<f64> = {
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            (0..16).map(|_| laplace_sample(1.0, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn filled_draws_match_the_laplace_moments() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let b = 3.0;
        let mut v = vec![0.0; 200_000];
        laplace_fill(b, &mut v, &mut rng);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let mean_abs = v.iter().map(|x| x.abs()).sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let negative = v.iter().filter(|x| **x < 0.0).count() as f64 / n;
        assert!(mean.abs() < 3.0 * (2.0f64).sqrt() * b / n.sqrt(), "{mean}");
        assert!((mean_abs - b).abs() / b < 0.01, "{mean_abs}");
        assert!((var - 2.0 * b * b).abs() / (2.0 * b * b) < 0.03, "{var}");
        assert!((negative - 0.5).abs() < 0.005, "{negative}");
        // P(|X| > 2b) = e^-2.
        let tail = v.iter().filter(|x| x.abs() > 2.0 * b).count() as f64 / n;
        assert!((tail - (-2.0f64).exp()).abs() < 0.003, "{tail}");
    }
}
