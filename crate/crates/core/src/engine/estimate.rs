//! Extrapolation and estimate updates used by ECD, exposed separately so
//! the estimate-error behaviour can be studied on fixed model sequences.

use nalgebra::DVector;
use rand::RngCore;

use crate::compression::{Compression, CompressionError};

/// `z_s = (1 - s/2) x_{s-1} + (s/2) x_s`.
pub fn extrapolate(prev: &DVector<f64>, current: &DVector<f64>, s: usize) -> DVector<f64> {
    let half = 0.5 * s as f64;
    let mut z = prev * (1.0 - half);
    z.axpy(half, current, 1.0);
    z
}

/// `x~_s = (1 - 2/s) x~_{s-1} + (2/s) C(z_s)`, in place.
pub fn update_estimate(estimate: &mut DVector<f64>, compressed: &DVector<f64>, s: usize) {
    let w = 2.0 / s as f64;
    estimate.axpy(w, compressed, 1.0 - w);
}

/// Runs the estimator against a model sequence `models[0] = x_1, models[1] = x_2, ...`
/// and returns `||x~_t - x_t||^2` for every `t`. The estimate starts exact.
pub fn estimate_errors(
    models: &[DVector<f64>],
    compressor: &dyn Compression,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>, CompressionError> {
    let Some(first) = models.first() else {
        return Ok(Vec::new());
    };
    let mut estimate = first.clone();
    let mut errors = vec![0.0];
    for (k, pair) in models.windows(2).enumerate() {
        let s = k + 2;
        let z = extrapolate(&pair[0], &pair[1], s);
        let c = DVector::from_vec(compressor.compress(z.as_slice(), rng)?);
        update_estimate(&mut estimate, &c, s);
        errors.push((&estimate - &pair[1]).norm_squared());
    }
    Ok(errors)
}

/// Expected squared estimate error when each compression adds independent
/// noise of second moment `b_t`: `a_t = (1 - 2/t)^2 a_{t-1} + (4/t^2) b_t`, `a_1 = 0`.
pub fn error_recursion(noise: impl Fn(usize) -> f64, horizon: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(horizon);
    let mut a = 0.0;
    for t in 1..=horizon {
        if t > 1 {
            let tf = t as f64;
            a = (1.0 - 2.0 / tf).powi(2) * a + 4.0 / (tf * tf) * noise(t);
        }
        out.push(a);
    }
    out
}
