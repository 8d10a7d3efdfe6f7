//! Seeded random-stream derivation.
//!
//! One master seed fans out into independent ChaCha8 streams keyed by a
//! (domain, index) pair: one stream per client for minibatch draws, one for
//! participation, one for data generation, and so on. Same seed, same
//! streams, always — and streams never share state, so work scheduled across
//! threads stays bit-reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The concrete random stream used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Stream domains. Each purpose gets its own tag so streams for different
/// purposes never collide even when their indices do.
pub mod domain {
    pub const PARTICIPATION: u64 = 1;
    pub const MINIBATCH: u64 = 2;
    pub const DATA: u64 = 3;
    pub const THETA_SAMPLES: u64 = 4;
    pub const MARGINAL_EST: u64 = 5;
    pub const CHUNK: u64 = 6;
    pub const CHECKER: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the independent stream for `(master, domain, index)`.
pub fn derive_stream(master: u64, domain: u64, index: u64) -> Stream {
    let z = splitmix(master ^ splitmix(domain ^ splitmix(index)));
    ChaCha8Rng::seed_from_u64(z)
}

/// Standard normal draw via Box-Muller. Consumes two uniforms per call.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mut u1: f64 = rng.gen();
    while u1 <= f64::MIN_POSITIVE {
        u1 = rng.gen();
    }
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform draw from the closed Euclidean ball of the given radius.
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v; // all-zero direction: return the center
    }
    let r = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
    for x in &mut v {
        *x *= r / norm;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_stream() {
        let mut a = derive_stream(42, domain::MINIBATCH, 3);
        let mut b = derive_stream(42, domain::MINIBATCH, 3);
        let xs: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn different_domains_differ() {
        let mut a = derive_stream(42, domain::MINIBATCH, 0);
        let mut b = derive_stream(42, domain::PARTICIPATION, 0);
        assert_ne!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn different_indices_differ() {
        let mut a = derive_stream(42, domain::MINIBATCH, 0);
        let mut b = derive_stream(42, domain::MINIBATCH, 1);
        assert_ne!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = derive_stream(7, domain::THETA_SAMPLES, 0);
        for _ in 0..200 {
            let v = uniform_in_ball(&mut rng, 5, 2.5);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= 2.5 + 1e-12);
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = derive_stream(11, domain::THETA_SAMPLES, 1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
