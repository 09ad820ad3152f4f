//! Convergence constants, feasibility conditions and theoretical step sizes
//! for difference compression (DCD) and extrapolation compression (ECD).
//!
//! Everything here is a pure function of the spectral quantities `rho`, `mu`
//! of the mixing matrix, the compression ratio `alpha`, the smoothness `L`
//! and the step size `gamma`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("topology is infeasible: rho = {0} >= 1")]
    InfeasibleTopology(f64),
    #[error("compression too aggressive for difference compression: (1-rho)^2 - 4 mu^2 alpha^2 = {margin} <= 0")]
    InfeasibleAlpha { margin: f64 },
    #[error("invalid theory input: {0}")]
    Invalid(String),
    #[error("step size {gamma} violates {condition}")]
    StepSize { gamma: f64, condition: &'static str },
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// `(1 - rho)^2 - 4 mu^2 alpha^2`; DCD is covered by the theory iff this is positive.
pub fn dcd_margin(rho: f64, mu: f64, alpha: f64) -> f64 {
    (1.0 - rho).powi(2) - 4.0 * mu * mu * alpha * alpha
}

pub fn dcd_feasible(rho: f64, mu: f64, alpha: f64) -> Result<bool> {
    if !(0.0..1.0).contains(&rho) {
        return Err(TheoryError::InfeasibleTopology(rho));
    }
    if mu < 0.0 || alpha < 0.0 || !alpha.is_finite() {
        return Err(TheoryError::Invalid(format!("mu = {mu}, alpha = {alpha}")));
    }
    Ok(dcd_margin(rho, mu, alpha) > 0.0)
}

/// Largest `alpha` that keeps DCD feasible: `(1 - rho) / (2 mu)`.
pub fn dcd_alpha_limit(rho: f64, mu: f64) -> f64 {
    (1.0 - rho) / (2.0 * mu)
}

/// Inputs shared by both constant families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantInputs {
    pub rho: f64,
    pub mu: f64,
    pub alpha: f64,
    pub smoothness: f64,
    pub gamma: f64,
    /// `sigma_tilde^2` (ECD compression-noise bound). Carried for reporting;
    /// it enters the rate, not the constants.
    pub sigma_tilde2: f64,
}

/// Constants of the DCD convergence bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcdConstants {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
}

/// Constants of the ECD convergence bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcdConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateConstants {
    pub inputs: ConstantInputs,
    /// `None` when DCD is infeasible at this `alpha`.
    pub dcd: Option<DcdConstants>,
    pub ecd: EcdConstants,
}

/// `D1` and `D2`; these depend only on the spectrum and `alpha`.
pub fn dcd_d1_d2(rho: f64, mu: f64, alpha: f64) -> Result<(f64, f64)> {
    if !dcd_feasible(rho, mu, alpha)? {
        return Err(TheoryError::InfeasibleAlpha { margin: dcd_margin(rho, mu, alpha) });
    }
    let a2 = alpha * alpha;
    let inner = 2.0 * mu * mu * (1.0 + 2.0 * a2) / dcd_margin(rho, mu, alpha) + 1.0;
    let d1 = 2.0 * a2 / (1.0 - rho * rho) * inner + 1.0 / (1.0 - rho).powi(2);
    let d2 = 2.0 * a2 * inner;
    Ok((d1, d2))
}

pub fn dcd_constants(inputs: &ConstantInputs) -> Result<DcdConstants> {
    let ConstantInputs { rho, mu, alpha, smoothness: l, gamma: g, .. } = *inputs;
    let (d1, d2) = dcd_d1_d2(rho, mu, alpha)?;
    let g2 = g * g;
    let d3 = (4.0 * l * l + 3.0 * l.powi(3) * d2 * g2) * 3.0 * d1 * g2 / (1.0 - 3.0 * d1 * l * l * g2)
        + 3.0 * l * d2 * g2 / 2.0;
    Ok(DcdConstants { d1, d2, d3, d4: 1.0 - l * g })
}

/// ECD constants, evaluated as written. `C2` contains `rho^-2`, so at
/// `rho = 0` it evaluates to `-0.0`.
pub fn ecd_constants(inputs: &ConstantInputs) -> Result<EcdConstants> {
    let ConstantInputs { rho, smoothness: l, gamma: g, .. } = *inputs;
    if !(0.0..1.0).contains(&rho) {
        return Err(TheoryError::InfeasibleTopology(rho));
    }
    let c1 = 1.0 / (1.0 - rho).powi(2);
    let c2 = 1.0 / (1.0 - 6.0 * c1 * l * l * g * g / (rho * rho));
    let c3 = 12.0 * l * l * c2 * c1 * g * g;
    Ok(EcdConstants { c1, c2, c3, c4: 1.0 - l * g })
}

pub fn rate_constants(inputs: &ConstantInputs) -> Result<RateConstants> {
    let ecd = ecd_constants(inputs)?;
    let dcd = match dcd_constants(inputs) {
        Ok(c) => Some(c),
        Err(TheoryError::InfeasibleAlpha { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(RateConstants { inputs: *inputs, dcd, ecd })
}

/// Problem-side inputs to the step-size rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeInputs {
    pub smoothness: f64,
    pub sigma: f64,
    pub zeta: f64,
    pub nodes: usize,
    pub iterations: usize,
}

impl StepSizeInputs {
    fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.nodes < 1 || self.smoothness <= 0.0 || self.sigma < 0.0 || self.zeta < 0.0 {
            return Err(TheoryError::Invalid(format!("{self:?}")));
        }
        Ok(())
    }

    fn noise_terms(&self) -> f64 {
        let t = self.iterations as f64;
        self.sigma / (self.nodes as f64).sqrt() * t.sqrt() + self.zeta.powf(2.0 / 3.0) * t.cbrt()
    }
}

/// DCD step size `1 / (6 sqrt(D1) L + 6 sqrt(D2 L) + sigma sqrt(T/n) + zeta^(2/3) T^(1/3))`.
///
/// Requires feasibility at `alpha`; also checks `1 - 3 D1 L^2 gamma^2 > 0`.
pub fn gamma_dcd(p: &StepSizeInputs, rho: f64, mu: f64, alpha: f64) -> Result<f64> {
    p.validate()?;
    let (d1, d2) = dcd_d1_d2(rho, mu, alpha)?;
    let l = p.smoothness;
    let gamma = 1.0 / (6.0 * d1.sqrt() * l + 6.0 * (d2 * l).sqrt() + p.noise_terms());
    if 1.0 - 3.0 * d1 * l * l * gamma * gamma <= 0.0 {
        return Err(TheoryError::StepSize { gamma, condition: "1 - 3 D1 L^2 gamma^2 > 0" });
    }
    Ok(gamma)
}

/// ECD step size `1 / (12 sqrt(C1) L + sigma sqrt(T/n) + zeta^(2/3) T^(1/3))`;
/// checks `1 - 6 C1 L^2 gamma^2 > 0`.
pub fn gamma_ecd(p: &StepSizeInputs, rho: f64) -> Result<f64> {
    p.validate()?;
    if !(0.0..1.0).contains(&rho) {
        return Err(TheoryError::InfeasibleTopology(rho));
    }
    let c1 = 1.0 / (1.0 - rho).powi(2);
    let l = p.smoothness;
    let gamma = 1.0 / (12.0 * c1.sqrt() * l + p.noise_terms());
    if 1.0 - 6.0 * c1 * l * l * gamma * gamma <= 0.0 {
        return Err(TheoryError::StepSize { gamma, condition: "1 - 6 C1 L^2 gamma^2 > 0" });
    }
    Ok(gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeKind {
    Dcd,
    Ecd,
}

/// Leading expression of the averaged-gradient bound with all hidden
/// constants set to 1. Only meaningful for comparisons and trends.
pub fn rate_envelope(
    kind: EnvelopeKind,
    iterations: usize,
    nodes: usize,
    sigma: f64,
    zeta: f64,
    sigma_tilde: f64,
) -> f64 {
    let t = iterations as f64;
    let n = nodes as f64;
    let z = zeta.powf(2.0 / 3.0) / t.powf(2.0 / 3.0);
    let base_sigma = sigma / (n * t).sqrt();
    match kind {
        EnvelopeKind::Dcd => base_sigma + z + 1.0 / t,
        EnvelopeKind::Ecd => {
            let st2_log = sigma_tilde * sigma_tilde * t.ln();
            let inflate = 1.0 + st2_log / n;
            base_sigma * inflate + z * inflate + 1.0 / t + st2_log / t
        }
    }
}

/// Everything the `theory` subcommand prints.
#[derive(Debug, Clone)]
pub struct TheoryReport {
    pub rho: f64,
    pub mu: f64,
    pub alpha: Option<f64>,
    pub alpha_limit: f64,
    pub dcd_feasible: Option<bool>,
    pub smoothness: f64,
    pub sigma2: f64,
    pub zeta2: f64,
    pub sigma_tilde2: Option<f64>,
    pub gamma: f64,
    pub constants: RateConstants,
    pub gamma_dcd: Option<f64>,
    pub gamma_ecd: Option<f64>,
}

impl fmt::Display for TheoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "unbounded".to_string(), |x| format!("{x}"));
        writeln!(f, "rho = {}", self.rho)?;
        writeln!(f, "mu = {}", self.mu)?;
        writeln!(f, "spectral_gap = {}", 1.0 - self.rho)?;
        writeln!(f, "alpha = {}", opt(self.alpha))?;
        writeln!(f, "alpha_limit_dcd = {}", self.alpha_limit)?;
        match self.dcd_feasible {
            Some(b) => writeln!(f, "dcd_feasible = {b}")?,
            None => writeln!(f, "dcd_feasible = false (alpha unbounded)")?,
        }
        writeln!(f, "L = {}", self.smoothness)?;
        writeln!(f, "sigma2 = {}", self.sigma2)?;
        writeln!(f, "zeta2 = {}", self.zeta2)?;
        writeln!(f, "sigma_tilde2 = {}", opt(self.sigma_tilde2))?;
        writeln!(f, "gamma = {}", self.gamma)?;
        match self.constants.dcd {
            Some(d) => writeln!(f, "D1 = {}\nD2 = {}\nD3 = {}\nD4 = {}", d.d1, d.d2, d.d3, d.d4)?,
            None => writeln!(f, "D1 = n/a\nD2 = n/a\nD3 = n/a\nD4 = n/a")?,
        }
        let c = self.constants.ecd;
        writeln!(f, "C1 = {}\nC2 = {}\nC3 = {}\nC4 = {}", c.c1, c.c2, c.c3, c.c4)?;
        writeln!(f, "gamma_dcd = {}", self.gamma_dcd.map_or("n/a".to_string(), |g| g.to_string()))?;
        write!(f, "gamma_ecd = {}", self.gamma_ecd.map_or("n/a".to_string(), |g| g.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RING8_RHO: f64 = 0.804_737_854_124_365_2; // (1 + sqrt 2) / 3

    fn inputs(rho: f64, mu: f64, alpha: f64) -> ConstantInputs {
        ConstantInputs { rho, mu, alpha, smoothness: 1.0, gamma: 0.01, sigma_tilde2: 0.0 }
    }

    #[test]
    fn feasibility_examples() {
        assert!(dcd_feasible(0.9, 1.5, 0.0).unwrap());
        assert!(dcd_feasible(0.0, 1.0, 0.4999).unwrap());
        assert!(!dcd_feasible(0.0, 1.0, 0.5).unwrap());
        let limit = dcd_alpha_limit(RING8_RHO, 4.0 / 3.0);
        assert!((limit - 0.0732).abs() < 1e-4, "{limit}");
        assert!(dcd_feasible(RING8_RHO, 4.0 / 3.0, 0.073).unwrap());
        assert!(!dcd_feasible(RING8_RHO, 4.0 / 3.0, 0.0735).unwrap());
        assert_eq!(dcd_feasible(1.0, 1.0, 0.0), Err(TheoryError::InfeasibleTopology(1.0)));
    }

    #[test]
    fn feasibility_boundary() {
        for &(rho, mu) in &[(RING8_RHO, 4.0 / 3.0), (0.0, 1.0), (0.5, 0.75), (0.95, 4.0 / 3.0)] {
            let limit = dcd_alpha_limit(rho, mu);
            assert!(dcd_feasible(rho, mu, limit * (1.0 - 1e-9)).unwrap());
            assert!(!dcd_feasible(rho, mu, limit * (1.0 + 1e-9)).unwrap());
        }
    }

    #[test]
    fn alpha_zero_collapses() {
        let c = rate_constants(&inputs(0.6, 1.2, 0.0)).unwrap();
        let d = c.dcd.unwrap();
        assert_eq!(d.d1, c.ecd.c1);
        assert_eq!(d.d2, 0.0);
        assert_eq!(d.d4, c.ecd.c4);
    }

    #[test]
    fn infeasible_alpha_gives_no_dcd_constants() {
        let c = rate_constants(&inputs(0.8, 1.3, 0.5)).unwrap();
        assert!(c.dcd.is_none());
    }

    #[test]
    fn gamma_dcd_uncompressed_complete_graph() {
        let p = StepSizeInputs { smoothness: 2.0, sigma: 0.0, zeta: 0.0, nodes: 8, iterations: 100 };
        let g = gamma_dcd(&p, 0.0, 1.0, 0.0).unwrap();
        assert!((g - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_ecd_uncompressed_complete_graph() {
        let p = StepSizeInputs { smoothness: 2.0, sigma: 0.0, zeta: 0.0, nodes: 8, iterations: 100 };
        let g = gamma_ecd(&p, 0.0).unwrap();
        assert!((g - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_large_t_limit() {
        let n = 16;
        let sigma = 0.5;
        for rule in 0..2 {
            let ratio_at = |t: usize| {
                let p = StepSizeInputs { smoothness: 1.0, sigma, zeta: 0.0, nodes: n, iterations: t };
                let g = if rule == 0 { gamma_dcd(&p, 0.5, 1.0, 0.1).unwrap() } else { gamma_ecd(&p, 0.5).unwrap() };
                g * sigma * (t as f64).sqrt() / (n as f64).sqrt()
            };
            assert!(ratio_at(10_000_000_000) > 0.99);
            assert!(ratio_at(10_000_000_000) > ratio_at(10_000));
        }
    }

    #[test]
    fn gamma_conditions_hold() {
        let mut seed = 17u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            let rho = next() * 0.99;
            let mu = (1.0 - rho) + next();
            let alpha = dcd_alpha_limit(rho, mu) * next() * 0.999;
            let p = StepSizeInputs {
                smoothness: 0.1 + 10.0 * next(),
                sigma: 3.0 * next(),
                zeta: 3.0 * next(),
                nodes: 2 + (next() * 30.0) as usize,
                iterations: 1 + (next() * 1e5) as usize,
            };
            let g = gamma_dcd(&p, rho, mu, alpha).unwrap();
            let (d1, _) = dcd_d1_d2(rho, mu, alpha).unwrap();
            assert!(3.0 * d1 * p.smoothness.powi(2) * g * g <= 1.0 / 12.0 + 1e-15);
            let g = gamma_ecd(&p, rho).unwrap();
            assert!(1.0 - p.smoothness * g >= 0.0);
        }
    }

    #[test]
    fn gamma_dcd_rejects_infeasible() {
        let p = StepSizeInputs { smoothness: 1.0, sigma: 0.0, zeta: 0.0, nodes: 8, iterations: 10 };
        assert!(matches!(gamma_dcd(&p, 0.0, 1.0, 0.6), Err(TheoryError::InfeasibleAlpha { .. })));
    }

    #[test]
    fn envelope_properties() {
        let (sigma, zeta) = (10.0, 0.0);
        let t = 1_000_000;
        for kind in [EnvelopeKind::Dcd, EnvelopeKind::Ecd] {
            let r = rate_envelope(kind, t, 8, sigma, zeta, 0.0) / rate_envelope(kind, t, 16, sigma, zeta, 0.0);
            assert!((r - 2f64.sqrt()).abs() < 1e-2, "{r}");
        }
        for t in [1, 10, 1000, 100_000] {
            assert_eq!(
                rate_envelope(EnvelopeKind::Dcd, t, 8, 1.0, 0.5, 0.0),
                rate_envelope(EnvelopeKind::Ecd, t, 8, 1.0, 0.5, 0.0)
            );
        }
        for kind in [EnvelopeKind::Dcd, EnvelopeKind::Ecd] {
            let mut prev = f64::INFINITY;
            for t in 8..5000 {
                let v = rate_envelope(kind, t, 4, 1.0, 0.7, 0.8);
                assert!(v < prev, "{kind:?} not decreasing at T = {t}");
                prev = v;
            }
        }
    }
}
