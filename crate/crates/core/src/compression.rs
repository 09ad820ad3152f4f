//! Unbiased stochastic compression operators.
//!
//! Every operator satisfies `E[C(z)] = z`. Randomness always comes from the
//! caller's stream, so a compressor is a pure function of `(z, stream)`.
//!
//! Two noise contracts are exposed:
//!
//! * [`Compression::alpha_bound`]: a certified bound on the realised ratio
//!   `||C(z) - z|| / ||z||`, needed by difference compression.
//! * [`Compression::variance_bound`]: a bound on `E||C(z) - z||^2`, needed by
//!   extrapolation compression. For the norm-scaled operators the bound is
//!   relative to `||z||^2`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Full precision payload per entry.
pub const FULL_PRECISION_BITS: u64 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressionError {
    #[error("input entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid compressor: {0}")]
    Invalid(String),
}

/// Certified noise-to-signal ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaBound {
    Finite(f64),
    Unbounded,
}

impl AlphaBound {
    pub fn finite(self) -> Option<f64> {
        match self {
            AlphaBound::Finite(a) => Some(a),
            AlphaBound::Unbounded => None,
        }
    }
}

/// Bound on `E||C(z) - z||^2` (the quantity written `sigma_tilde^2 / 2`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceBound {
    /// Holds for every input.
    Absolute(f64),
    /// `E||C(z) - z||^2 <= coef * ||z||^2`; finite only for norm-bounded inputs.
    NormScaled(f64),
}

impl VarianceBound {
    /// Evaluate the bound for inputs with `||z|| <= norm`.
    pub fn at_norm(self, norm: f64) -> f64 {
        match self {
            VarianceBound::Absolute(v) => v,
            VarianceBound::NormScaled(c) => c * norm * norm,
        }
    }
}

/// Interface shared by the built-in [`Compressor`] and test doubles.
pub trait Compression: Send + Sync {
    fn compress(&self, z: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>, CompressionError>;

    fn alpha_bound(&self, dim: usize) -> AlphaBound;

    fn variance_bound(&self, dim: usize) -> VarianceBound;

    /// Bits needed to send one compressed `dim`-vector.
    fn bits_transmitted(&self, dim: usize) -> u64;

    /// `C(z) = z` exactly. Lossless operators let the engine transmit the
    /// target value itself rather than reconstructing it from a difference.
    fn is_lossless(&self) -> bool {
        false
    }
}

/// Scale used by the quantizer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantNorm {
    #[default]
    Inf,
    L2,
}

impl QuantNorm {
    pub fn is_inf(&self) -> bool {
        *self == QuantNorm::Inf
    }
}

/// The built-in operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Compressor {
    Identity,
    /// Stochastic rounding onto `{0, +-m/s, ..., +-m}` with `m = ||z||_inf`,
    /// or `m = ||z||_2` when `norm = "l2"`.
    Quantize {
        levels: u32,
        #[serde(default, skip_serializing_if = "QuantNorm::is_inf")]
        norm: QuantNorm,
    },
    /// Keep each entry with probability `keep_prob`, rescaled by `1/keep_prob`.
    Sparsify {
        keep_prob: f64,
    },
    /// Adds noise drawn uniformly from the sphere of radius `sqrt(noise_bound)`.
    /// `noise_bound` is therefore exactly `E||C(z) - z||^2`.
    Synthetic {
        noise_bound: f64,
    },
}

impl Compressor {
    /// Max-norm quantizer with `levels` levels per sign.
    pub fn quantize(levels: u32) -> Self {
        Compressor::Quantize { levels, norm: QuantNorm::Inf }
    }

    pub fn validate(&self) -> Result<(), CompressionError> {
        match *self {
            Compressor::Identity => Ok(()),
            Compressor::Quantize { levels, .. } if levels >= 1 => Ok(()),
            Compressor::Quantize { levels, .. } => {
                Err(CompressionError::Invalid(format!("levels must be >= 1, got {levels}")))
            }
            Compressor::Sparsify { keep_prob } if keep_prob > 0.0 && keep_prob <= 1.0 => Ok(()),
            Compressor::Sparsify { keep_prob } => {
                Err(CompressionError::Invalid(format!("keep_prob must be in (0, 1], got {keep_prob}")))
            }
            Compressor::Synthetic { noise_bound } if noise_bound >= 0.0 && noise_bound.is_finite() => Ok(()),
            Compressor::Synthetic { noise_bound } => {
                Err(CompressionError::Invalid(format!("noise_bound must be >= 0, got {noise_bound}")))
            }
        }
    }

    /// Human-readable short name used in CSV metadata.
    pub fn label(&self) -> String {
        match self {
            Compressor::Identity => "identity".into(),
            Compressor::Quantize { levels, norm: QuantNorm::Inf } => format!("quantize(s={levels})"),
            Compressor::Quantize { levels, norm: QuantNorm::L2 } => format!("quantize(s={levels},l2)"),
            Compressor::Sparsify { keep_prob } => format!("sparsify(p={keep_prob})"),
            Compressor::Synthetic { noise_bound } => format!("synthetic(b2={noise_bound})"),
        }
    }
}

fn check_finite(z: &[f64]) -> Result<(), CompressionError> {
    match z.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(CompressionError::NonFinite { index, value: z[index] }),
        None => Ok(()),
    }
}

fn ceil_log2(x: u64) -> u64 {
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros() as u64
    }
}

/// Randomly round `value` to one of the bracketing thresholds `lo <= value <= hi`
/// so that the expectation is `value`. `u` is a uniform draw in `[0, 1)`.
#[inline]
pub fn round_between(value: f64, lo: f64, hi: f64, u: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let p_hi = (value - lo) / (hi - lo);
    if u < p_hi {
        hi
    } else {
        lo
    }
}

/// Unbiased stochastic rounding of `value` onto a sorted threshold set.
///
/// Values outside the threshold range are an input error.
pub fn quantize_to_thresholds<R: Rng + ?Sized>(
    value: f64,
    thresholds: &[f64],
    rng: &mut R,
) -> Result<f64, CompressionError> {
    let outside = thresholds.is_empty()
        || !value.is_finite()
        || value < thresholds[0]
        || value > thresholds[thresholds.len() - 1];
    if outside {
        return Err(CompressionError::Invalid(format!("{value} is outside the threshold range")));
    }
    let k = thresholds.partition_point(|&t| t <= value);
    if k == 0 || thresholds[k - 1] == value {
        return Ok(value);
    }
    let (lo, hi) = (thresholds[k - 1], thresholds[k]);
    Ok(round_between(value, lo, hi, rng.random::<f64>()))
}

fn quantize(z: &[f64], levels: u32, norm: QuantNorm, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    let scale = match norm {
        QuantNorm::Inf => z.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        QuantNorm::L2 => z.iter().map(|v| v * v).sum::<f64>().sqrt(),
    };
    if scale == 0.0 {
        return vec![0.0; z.len()];
    }
    let s = levels as f64;
    z.iter()
        .map(|&v| {
            let u = rng.random::<f64>();
            let pos = (v.abs() / scale * s).min(s);
            let lo = pos.floor();
            let level = if pos == lo { lo } else { round_between(pos, lo, lo + 1.0, u) };
            if level == s {
                // The grid endpoint is the scale itself.
                scale.copysign(v)
            } else {
                (level * scale / s).copysign(v)
            }
        })
        .collect()
}

fn sparsify(z: &[f64], p: f64, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    z.iter().map(|&v| if rng.random::<f64>() < p { v / p } else { 0.0 }).collect()
}

fn synthetic(z: &[f64], noise_bound: f64, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..z.len()).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let radius = noise_bound.sqrt();
    if norm > 0.0 {
        for d in &mut dir {
            *d *= radius / norm;
        }
    }
    z.iter().zip(&dir).map(|(v, d)| v + d).collect()
}

impl Compression for Compressor {
    fn compress(&self, z: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>, CompressionError> {
        check_finite(z)?;
        if z.is_empty() {
            return Ok(Vec::new());
        }
        Ok(match *self {
            Compressor::Identity => z.to_vec(),
            Compressor::Quantize { levels, norm } => quantize(z, levels, norm, rng),
            Compressor::Sparsify { keep_prob } => sparsify(z, keep_prob, rng),
            Compressor::Synthetic { noise_bound } => synthetic(z, noise_bound, rng),
        })
    }

    fn alpha_bound(&self, dim: usize) -> AlphaBound {
        match *self {
            Compressor::Identity => AlphaBound::Finite(0.0),
            Compressor::Quantize { levels, .. } => AlphaBound::Finite((dim as f64).sqrt() / levels as f64),
            // Each coordinate's error is either z_i (dropped) or z_i (1/p - 1) (kept).
            Compressor::Sparsify { keep_prob } if keep_prob >= 1.0 => AlphaBound::Finite(0.0),
            Compressor::Sparsify { keep_prob } => AlphaBound::Finite(1f64.max(1.0 / keep_prob - 1.0)),
            Compressor::Synthetic { noise_bound: 0.0 } => AlphaBound::Finite(0.0),
            Compressor::Synthetic { .. } => AlphaBound::Unbounded,
        }
    }

    fn variance_bound(&self, dim: usize) -> VarianceBound {
        match *self {
            Compressor::Identity => VarianceBound::Absolute(0.0),
            // Per entry: (m/s)^2 p(1-p) <= m^2 / (4 s^2), and m <= ||z|| for either scale.
            Compressor::Quantize { levels, .. } => {
                VarianceBound::NormScaled(dim as f64 / (4.0 * (levels as f64).powi(2)))
            }
            Compressor::Sparsify { keep_prob } => VarianceBound::NormScaled(1.0 / keep_prob - 1.0),
            Compressor::Synthetic { noise_bound } => VarianceBound::Absolute(noise_bound),
        }
    }

    fn bits_transmitted(&self, dim: usize) -> u64 {
        let d = dim as u64;
        match *self {
            Compressor::Identity | Compressor::Synthetic { .. } => FULL_PRECISION_BITS * d,
            Compressor::Quantize { levels, .. } => d * ceil_log2(2 * levels as u64 + 1) + FULL_PRECISION_BITS,
            Compressor::Sparsify { keep_prob } => {
                let per_entry = (FULL_PRECISION_BITS + ceil_log2(d)) as f64;
                (keep_prob * dim as f64 * per_entry).ceil() as u64
            }
        }
    }

    fn is_lossless(&self) -> bool {
        match *self {
            Compressor::Identity => true,
            Compressor::Synthetic { noise_bound } => noise_bound == 0.0,
            _ => false,
        }
    }
}

/// `||C(z) - z||^2` for a realised compression.
pub fn error_norm2(original: &[f64], compressed: &[f64]) -> f64 {
    original.iter().zip(compressed).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn threshold_example() {
        let th = [0.0, 0.3, 0.8, 1.0];
        let mut r = rng(7);
        let trials = 100_000;
        let mut lo = 0usize;
        let mut sum = 0.0;
        for _ in 0..trials {
            let q = quantize_to_thresholds(0.5, &th, &mut r).unwrap();
            assert!(q == 0.3 || q == 0.8);
            if q == 0.3 {
                lo += 1;
            }
            sum += q;
        }
        let frac = lo as f64 / trials as f64;
        // unbiased rounding of 0.5 onto {0.3, 0.8} picks 0.3 with probability 0.6
        assert!((frac - 0.6).abs() < 4.0 * (0.24f64 / trials as f64).sqrt(), "frac {frac}");
        assert!((sum / trials as f64 - 0.5).abs() < 0.01);
        assert_eq!(quantize_to_thresholds(0.8, &th, &mut r).unwrap(), 0.8);
        assert!(quantize_to_thresholds(1.5, &th, &mut r).is_err());
    }

    #[test]
    fn sparsify_example() {
        let c = Compressor::Sparsify { keep_prob: 0.25 };
        let mut r = rng(3);
        let trials = 100_000;
        let mut kept = 0usize;
        let mut sum = 0.0;
        for _ in 0..trials {
            let out = c.compress(&[4.0], &mut r).unwrap()[0];
            assert!(out == 16.0 || out == 0.0);
            if out == 16.0 {
                kept += 1;
            }
            sum += out;
        }
        let frac = kept as f64 / trials as f64;
        assert!((frac - 0.25).abs() < 4.0 * (0.25 * 0.75 / trials as f64).sqrt());
        // per-sample sd is 16 * sqrt(p(1-p)) ~ 6.93
        let se = 6.93 / (trials as f64).sqrt();
        assert!((sum / trials as f64 - 4.0).abs() < 4.0 * se);
    }

    #[test]
    fn grid_aligned_values_pass_through() {
        let c = Compressor::quantize(2);
        for seed in 0..50 {
            assert_eq!(c.compress(&[0.5, 1.0], &mut rng(seed)).unwrap(), vec![0.5, 1.0]);
            assert_eq!(c.compress(&[-0.5, 1.0, 0.0], &mut rng(seed)).unwrap(), vec![-0.5, 1.0, 0.0]);
        }
    }

    #[test]
    fn quantize_outputs_on_grid() {
        let c = Compressor::quantize(4);
        let z = [0.13, -0.9, 0.44, 0.0, 0.61];
        let m = 0.9;
        for seed in 0..200 {
            for v in c.compress(&z, &mut rng(seed)).unwrap() {
                let k = v.abs() / m * 4.0;
                assert!((k - k.round()).abs() < 1e-12, "{v} off grid");
            }
        }
    }

    #[test]
    fn empty_and_non_finite() {
        let c = Compressor::quantize(3);
        assert!(c.compress(&[], &mut rng(0)).unwrap().is_empty());
        assert!(matches!(c.compress(&[1.0, f64::NAN], &mut rng(0)), Err(CompressionError::NonFinite { index: 1, .. })));
        assert!(matches!(
            Compressor::Identity.compress(&[f64::INFINITY], &mut rng(0)),
            Err(CompressionError::NonFinite { index: 0, .. })
        ));
    }

    #[test]
    fn alpha_values() {
        assert_eq!(Compressor::Identity.alpha_bound(10), AlphaBound::Finite(0.0));
        assert_eq!(Compressor::quantize(4).alpha_bound(16), AlphaBound::Finite(1.0));
        assert_eq!(Compressor::Sparsify { keep_prob: 0.5 }.alpha_bound(8), AlphaBound::Finite(1.0));
        assert_eq!(Compressor::Sparsify { keep_prob: 0.1 }.alpha_bound(8), AlphaBound::Finite(9.0));
        assert_eq!(Compressor::Synthetic { noise_bound: 0.1 }.alpha_bound(8), AlphaBound::Unbounded);
    }

    #[test]
    fn quantize_alpha_dominates_empirical_ratio() {
        let c = Compressor::quantize(4);
        let bound = c.alpha_bound(16).finite().unwrap();
        let mut r = rng(11);
        let mut worst = 0.0f64;
        for _ in 0..2000 {
            // mix of dense and one-spike inputs, the spike ones stress the bound
            let spike = r.random::<bool>();
            let z: Vec<f64> = (0..16)
                .map(|i| {
                    let g: f64 = r.sample(StandardNormal);
                    if spike && i > 0 {
                        g * 0.05
                    } else {
                        g
                    }
                })
                .collect();
            let out = c.compress(&z, &mut r).unwrap();
            let ratio = (error_norm2(&z, &out) / z.iter().map(|v| v * v).sum::<f64>()).sqrt();
            worst = worst.max(ratio);
        }
        assert!(worst <= bound, "{worst} > {bound}");
        assert!(worst > 0.3, "search too weak: {worst}");
    }

    #[test]
    fn sparsify_alpha_by_enumeration() {
        // Worst-case z for p = 0.5 has equal-magnitude entries; enumerate all
        // 2^8 keep/drop patterns and take the largest realised ratio.
        let p: f64 = 0.5;
        let z = [1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0];
        let znorm2: f64 = z.iter().map(|v| v * v).sum();
        let mut worst = 0.0f64;
        for mask in 0u32..256 {
            let out: Vec<f64> =
                z.iter().enumerate().map(|(i, &v)| if mask & (1 << i) != 0 { v / p } else { 0.0 }).collect();
            worst = worst.max((error_norm2(&z, &out) / znorm2).sqrt());
        }
        assert!((worst - 1.0).abs() < 1e-15);
        assert_eq!(Compressor::Sparsify { keep_prob: p }.alpha_bound(8).finite(), Some(worst));
    }

    #[test]
    fn bits_examples() {
        assert_eq!(Compressor::Identity.bits_transmitted(100), 3200);
        assert_eq!(Compressor::quantize(127).bits_transmitted(100), 832);
        assert_eq!(Compressor::quantize(7).bits_transmitted(100), 432);
        assert_eq!(Compressor::Sparsify { keep_prob: 0.1 }.bits_transmitted(1000), 4200);
        assert_eq!(ceil_log2(255), 8);
        assert_eq!(ceil_log2(256), 8);
        assert_eq!(ceil_log2(257), 9);
        assert_eq!(ceil_log2(1), 0);
    }

    #[test]
    fn synthetic_noise_has_exact_radius() {
        let c = Compressor::Synthetic { noise_bound: 0.09 };
        let z = vec![1.0; 12];
        let out = c.compress(&z, &mut rng(5)).unwrap();
        assert!((error_norm2(&z, &out) - 0.09).abs() < 1e-12);
        assert_eq!(c.variance_bound(12), VarianceBound::Absolute(0.09));
    }

    #[test]
    fn reproducible_per_seed() {
        let c = Compressor::quantize(5);
        let z: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let a: Vec<Vec<f64>> = {
            let mut r = rng(99);
            (0..20).map(|_| c.compress(&z, &mut r).unwrap()).collect()
        };
        let b: Vec<Vec<f64>> = {
            let mut r = rng(99);
            (0..20).map(|_| c.compress(&z, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn validation() {
        assert!(Compressor::quantize(0).validate().is_err());
        assert!(Compressor::Sparsify { keep_prob: 0.0 }.validate().is_err());
        assert!(Compressor::Sparsify { keep_prob: 1.2 }.validate().is_err());
        assert!(Compressor::Synthetic { noise_bound: -1.0 }.validate().is_err());
        assert!(Compressor::Sparsify { keep_prob: 1.0 }.validate().is_ok());
    }
}
