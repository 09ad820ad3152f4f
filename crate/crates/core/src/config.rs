//! Run configuration: parsing, validation, step-size resolution, CSV output
//! and parameter sweeps.

use std::fmt;
use std::io::{self, Write};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{AlphaBound, Compression, Compressor, QuantNorm, VarianceBound, FULL_PRECISION_BITS};
use crate::costmodel::{epoch_time_allreduce, epoch_time_decentralized, NetworkSpec};
use crate::engine::{init_stream, simulate, Algorithm, RunOutput, RunStatus, Simulation, TRACE_HEADER};
use crate::problems::{Problem, ProblemSpec};
use crate::theory::{self, ConstantInputs, StepSizeInputs, TheoryReport};
use crate::topology::{MixingMatrix, TopologySpec};

/// A configuration problem, tagged with the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl fmt::Display) -> Self {
        Self { key: key.into(), message: message.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Step size: a number, or `"theory"` for the rule matching the algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GammaRepr", into = "GammaRepr")]
pub enum GammaSpec {
    Value(f64),
    Theory,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<GammaRepr> for GammaSpec {
    type Error = String;
    fn try_from(r: GammaRepr) -> Result<Self, String> {
        match r {
            GammaRepr::Number(v) => Ok(GammaSpec::Value(v)),
            GammaRepr::Word(w) if w == "theory" => Ok(GammaSpec::Theory),
            GammaRepr::Word(w) => Err(format!("expected a number or \"theory\", got {w:?}")),
        }
    }
}

impl From<GammaSpec> for GammaRepr {
    fn from(g: GammaSpec) -> Self {
        match g {
            GammaSpec::Value(v) => GammaRepr::Number(v),
            GammaSpec::Theory => GammaRepr::Word("theory".into()),
        }
    }
}

/// Link parameters used for the simulated wall-clock column of sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Bits per second per link.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// Seconds per message.
    #[serde(default = "default_latency")]
    pub latency: f64,
    /// Seconds of computation per step.
    #[serde(default)]
    pub compute_s: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { bandwidth: default_bandwidth(), latency: default_latency(), compute_s: 0.0 }
    }
}

fn default_bandwidth() -> f64 {
    1.4e9
}
fn default_latency() -> f64 {
    0.13e-3
}
fn default_trace_every() -> usize {
    1
}
fn default_init_scale() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    1e-6
}
fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

/// Top-level run configuration. See `--help` of the binary for defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub gamma: GammaSpec,
    #[serde(rename = "T")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seeds used by sweeps; empty means `[seed]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    /// Seed for the problem instance, kept apart so seed sweeps share one problem.
    #[serde(default)]
    pub problem_seed: u64,
    /// Standard deviation of the common Gaussian starting point.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// `grad_norm2` level for time-to-threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "is_default")]
    pub parallel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    pub topology: TopologySpec,
    pub problem: ProblemSpec,
    #[serde(default = "default_compressor")]
    pub compressor: Compressor,
    #[serde(default)]
    pub network: NetworkConfig,
}

fn default_compressor() -> Compressor {
    Compressor::Identity
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn toml_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let message = e.message().to_string();
    if let Some(start) = message.find("field `") {
        let rest = &message[start + 7..];
        if let Some(end) = rest.find('`') {
            return ConfigError::new(&rest[..end], message.clone());
        }
    }
    let key = e.span().and_then(|span| key_at(text, span.start)).unwrap_or_else(|| "<document>".into());
    ConfigError::new(key, message)
}

/// Dotted key of the assignment on the line containing byte `pos`.
fn key_at(text: &str, pos: usize) -> Option<String> {
    let pos = pos.min(text.len());
    let line_start = text[..pos].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let mut section = None;
    for l in text[..line_start].lines() {
        let l = l.trim();
        if l.starts_with('[') && l.ends_with(']') {
            section = Some(l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
        }
    }
    let key = line.split('=').next().map(str::trim).filter(|k| !k.is_empty() && !k.starts_with('['));
    match (section, key) {
        (Some(s), Some(k)) if line.contains('=') => Some(format!("{s}.{k}")),
        (None, Some(k)) if line.contains('=') => Some(k.to_string()),
        (Some(s), _) => Some(s),
        _ => None,
    }
}

/// Checks every cross-field constraint that does not need heavy computation.
pub fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    if cfg.trace_every == 0 {
        return Err(ConfigError::new("trace_every", "must be at least 1"));
    }
    if let GammaSpec::Value(g) = cfg.gamma {
        if !(g >= 0.0 && g.is_finite()) {
            return Err(ConfigError::new("gamma", format!("must be a nonnegative number, got {g}")));
        }
    }
    if !(cfg.init_scale >= 0.0 && cfg.init_scale.is_finite()) {
        return Err(ConfigError::new("init_scale", "must be nonnegative"));
    }
    if cfg.threshold.is_nan() {
        return Err(ConfigError::new("threshold", "must be a number"));
    }
    if cfg.problem.dim() == 0 {
        return Err(ConfigError::new("problem.dim", "must be positive"));
    }
    cfg.compressor.validate().map_err(|e| ConfigError::new("compressor", e))?;
    let net = NetworkSpec::new(cfg.network.bandwidth, cfg.network.latency, cfg.topology.n.max(1), 1);
    net.validate().map_err(|e| ConfigError::new("network", e))?;
    if cfg.network.compute_s < 0.0 {
        return Err(ConfigError::new("network.compute_s", "must be nonnegative"));
    }
    if cfg.algorithm == Algorithm::Dcd {
        if let AlphaBound::Unbounded = cfg.compressor.alpha_bound(cfg.problem.dim()) {
            return Err(ConfigError::new(
                "compressor",
                format!("dcd requires a finite alpha bound, {} has none", cfg.compressor.label()),
            ));
        }
    }
    Ok(())
}

/// A validated configuration with its topology, problem and step size built.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub mixing: MixingMatrix,
    pub problem: Problem,
    pub gamma: f64,
    /// Compression ratio bound for the configured operator, when finite.
    pub alpha: Option<f64>,
    pub warnings: Vec<String>,
}

impl ResolvedRun {
    pub fn step_inputs(&self) -> StepSizeInputs {
        StepSizeInputs {
            smoothness: self.problem.smoothness(),
            sigma: self.problem.sigma2().sqrt(),
            zeta: self.problem.zeta2().sqrt(),
            nodes: self.mixing.n(),
            iterations: self.config.iterations.max(1),
        }
    }

    /// Shared starting point `init_scale * N(0, I)` drawn from the master seed.
    pub fn initial_point(&self) -> DVector<f64> {
        let mut rng = init_stream(self.config.seed);
        let scale = self.config.init_scale;
        DVector::from_fn(self.problem.dim(), |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn simulation(&self) -> Simulation<'_> {
        Simulation {
            algorithm: self.config.algorithm,
            mixing: &self.mixing,
            problem: &self.problem,
            compressor: &self.config.compressor,
            gamma: self.gamma,
            iterations: self.config.iterations,
            trace_every: self.config.trace_every,
            seed: self.config.seed,
            init: self.initial_point(),
            threshold: self.config.threshold,
            parallel: self.config.parallel,
        }
    }

    pub fn run(&self) -> Result<RunOutput, ConfigError> {
        simulate(&self.simulation()).map_err(|e| ConfigError::new("algorithm", e))
    }

    /// Bytes of one message relative to full precision.
    pub fn compression_ratio(&self) -> f64 {
        if self.config.algorithm.compresses() {
            let dim = self.problem.dim();
            self.config.compressor.bits_transmitted(dim) as f64 / (FULL_PRECISION_BITS * dim as u64) as f64
        } else {
            1.0
        }
    }

    /// Simulated wall-clock seconds for `steps` steps on the configured network.
    pub fn wall_time(&self, steps: usize) -> f64 {
        let net = &self.config.network;
        let mut spec = NetworkSpec::new(net.bandwidth, net.latency, self.mixing.n(), self.problem.dim());
        spec.compute_per_step = net.compute_s;
        spec.compression_ratio = self.compression_ratio();
        match self.config.algorithm {
            Algorithm::Centralized => epoch_time_allreduce(&spec, steps),
            _ => epoch_time_decentralized(&spec, steps, self.mixing.max_degree()),
        }
    }

    pub fn theory_report(&self) -> Result<TheoryReport, ConfigError> {
        let rho = self.mixing.rho();
        let mu = self.mixing.mu();
        let inputs = ConstantInputs {
            rho,
            mu,
            alpha: self.alpha.unwrap_or(0.0),
            smoothness: self.problem.smoothness(),
            gamma: self.gamma,
            sigma_tilde2: 0.0,
        };
        let mut constants = theory::rate_constants(&inputs).map_err(|e| ConfigError::new("topology", e))?;
        if self.alpha.is_none() {
            constants.dcd = None;
        }
        let p = self.step_inputs();
        let sigma_tilde2 = match self.config.compressor.variance_bound(self.problem.dim()) {
            VarianceBound::Absolute(b) => Some(b),
            VarianceBound::NormScaled(_) => None,
        };
        Ok(TheoryReport {
            rho,
            mu,
            alpha: self.alpha,
            alpha_limit: theory::dcd_alpha_limit(rho, mu),
            dcd_feasible: self.alpha.map(|a| theory::dcd_margin(rho, mu, a) > 0.0),
            smoothness: p.smoothness,
            sigma2: self.problem.sigma2(),
            zeta2: self.problem.zeta2(),
            sigma_tilde2,
            gamma: self.gamma,
            constants,
            gamma_dcd: self.alpha.and_then(|a| theory::gamma_dcd(&p, rho, mu, a).ok()),
            gamma_ecd: theory::gamma_ecd(&p, rho).ok(),
        })
    }

    /// `# key = value` block echoing the configuration and resolved values.
    pub fn metadata(&self) -> Vec<String> {
        let mut lines: Vec<String> = self.config.to_toml().lines().map(|l| format!("# {l}")).collect();
        lines.push("# [resolved]".into());
        lines.push(format!("# gamma = {}", self.gamma));
        lines.push(format!("# rho = {}", self.mixing.rho()));
        lines.push(format!("# mu = {}", self.mixing.mu()));
        match self.alpha {
            Some(a) => lines.push(format!("# alpha = {a}")),
            None => lines.push("# alpha = \"unbounded\"".into()),
        }
        lines.push(format!("# smoothness = {}", self.problem.smoothness()));
        lines.push(format!("# sigma2 = {}", self.problem.sigma2()));
        lines.push(format!("# zeta2 = {}", self.problem.zeta2()));
        for w in &self.warnings {
            lines.push(format!("# warning = {w:?}"));
        }
        lines
    }

    pub fn write_trace_csv<W: Write>(&self, output: &RunOutput, mut out: W) -> io::Result<()> {
        for l in self.metadata() {
            writeln!(out, "{l}")?;
        }
        let s = &output.summary;
        writeln!(out, "# status = {:?}", s.status.label())?;
        if let RunStatus::Diverged { t } = s.status {
            writeln!(out, "# diverged_at = {t}")?;
        }
        writeln!(out, "# final_grad_norm2 = {}", s.final_grad_norm2)?;
        writeln!(out, "# min_grad_norm2 = {}", s.min_grad_norm2)?;
        writeln!(out, "# total_bits = {}", s.total_bits)?;
        match s.time_to_threshold {
            Some(t) => writeln!(out, "# time_to_threshold = {t}")?,
            None => writeln!(out, "# time_to_threshold = \"never\"")?,
        }
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &output.trace {
            writeln!(out, "{}", r.csv_line())?;
        }
        Ok(())
    }
}

/// Builds topology and problem and fixes the step size.
pub fn resolve(cfg: &RunConfig) -> Result<ResolvedRun, ConfigError> {
    validate(cfg)?;
    let mixing = cfg.topology.build().map_err(|e| ConfigError::new("topology", e))?;
    let problem = cfg.problem.build(mixing.n(), cfg.problem_seed).map_err(|e| ConfigError::new("problem", e))?;
    let alpha = cfg.compressor.alpha_bound(problem.dim()).finite();
    let mut warnings = Vec::new();
    let (rho, mu) = (mixing.rho(), mixing.mu());

    if cfg.algorithm == Algorithm::Dcd {
        let a = alpha.expect("validated: dcd has a finite alpha");
        if theory::dcd_margin(rho, mu, a) <= 0.0 {
            warnings.push(format!(
                "alpha = {a} exceeds the difference-compression limit {} for this topology; the run may diverge",
                theory::dcd_alpha_limit(rho, mu)
            ));
        }
    }
    if cfg.algorithm == Algorithm::Ecd {
        if let VarianceBound::NormScaled(_) = cfg.compressor.variance_bound(problem.dim()) {
            warnings.push(format!(
                "{} has a norm-scaled noise bound; the estimate-error guarantee holds only while extrapolated values stay bounded",
                cfg.compressor.label()
            ));
        }
    }

    let mut resolved = ResolvedRun { config: cfg.clone(), mixing, problem, gamma: 0.0, alpha, warnings };
    resolved.gamma = match cfg.gamma {
        GammaSpec::Value(g) => g,
        GammaSpec::Theory => theory_gamma(&resolved).map_err(|e| ConfigError::new("gamma", e))?,
    };
    Ok(resolved)
}

/// Theoretical step size: the DCD rule for gossip variants (with `alpha = 0`
/// when nothing is compressed differentially), the ECD rule for ECD, and the
/// DCD rule on a perfect mixer (`rho = 0`) for the centralized baseline.
fn theory_gamma(r: &ResolvedRun) -> Result<f64, theory::TheoryError> {
    let p = r.step_inputs();
    let (rho, mu) = (r.mixing.rho(), r.mixing.mu());
    match r.config.algorithm {
        Algorithm::Dcd => theory::gamma_dcd(&p, rho, mu, r.alpha.unwrap_or(0.0)),
        Algorithm::Ecd => theory::gamma_ecd(&p, rho),
        Algorithm::Dpsgd | Algorithm::Naive => theory::gamma_dcd(&p, rho, mu, 0.0),
        Algorithm::Centralized => theory::gamma_dcd(&p, 0.0, 1.0, 0.0),
    }
}

pub fn run_config(cfg: &RunConfig) -> Result<(ResolvedRun, RunOutput), ConfigError> {
    let r = resolve(cfg)?;
    let out = r.run()?;
    Ok((r, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Gamma,
    Levels,
    Nodes,
    Seed,
    Bandwidth,
    Latency,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::Levels => "levels",
            SweepAxis::Nodes => "n",
            SweepAxis::Seed => "seed",
            SweepAxis::Bandwidth => "bandwidth",
            SweepAxis::Latency => "latency",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Ok(match s {
            "gamma" => SweepAxis::Gamma,
            "levels" => SweepAxis::Levels,
            "n" => SweepAxis::Nodes,
            "seed" => SweepAxis::Seed,
            "bandwidth" => SweepAxis::Bandwidth,
            "latency" => SweepAxis::Latency,
            other => {
                return Err(ConfigError::new(
                    "axis",
                    format!("unknown axis {other:?}; expected gamma, levels, n, seed, bandwidth or latency"),
                ))
            }
        })
    }
}

/// Returns a copy of `cfg` with the axis set to `value`.
pub fn apply_axis(cfg: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig, ConfigError> {
    let mut c = cfg.clone();
    let bad = |e: &dyn fmt::Display| ConfigError::new("values", format!("{value:?} for axis {}: {e}", axis.name()));
    match axis {
        SweepAxis::Gamma => c.gamma = GammaSpec::Value(value.parse().map_err(|e| bad(&e))?),
        SweepAxis::Levels => {
            let levels = value.parse().map_err(|e| bad(&e))?;
            let norm = match cfg.compressor {
                Compressor::Quantize { norm, .. } => norm,
                _ => QuantNorm::Inf,
            };
            c.compressor = Compressor::Quantize { levels, norm };
        }
        SweepAxis::Nodes => c.topology.n = value.parse().map_err(|e| bad(&e))?,
        SweepAxis::Seed => {
            c.seed = value.parse().map_err(|e| bad(&e))?;
            c.seeds.clear();
        }
        SweepAxis::Bandwidth => c.network.bandwidth = value.parse().map_err(|e| bad(&e))?,
        SweepAxis::Latency => c.network.latency = value.parse().map_err(|e| bad(&e))?,
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    /// `completed`, `diverged` or `error: ...`.
    pub status: String,
    pub gamma: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub final_grad_norm2: f64,
    pub min_grad_norm2: f64,
    pub final_consensus: f64,
    pub total_bits: u64,
    pub time_to_threshold: Option<usize>,
    pub wall_time_s: f64,
}

pub const SWEEP_HEADER: &str = "value,seed,status,gamma,steps,final_loss,final_grad_norm2,min_grad_norm2,final_consensus,total_bits,time_to_threshold,wall_time_s";

impl SweepRow {
    fn failed(value: &str, seed: u64, err: &ConfigError) -> Self {
        Self {
            value: value.to_string(),
            seed,
            status: format!("error: {err}").replace([',', '\n'], ";"),
            gamma: f64::NAN,
            steps: 0,
            final_loss: f64::NAN,
            final_grad_norm2: f64::NAN,
            min_grad_norm2: f64::NAN,
            final_consensus: f64::NAN,
            total_bits: 0,
            time_to_threshold: None,
            wall_time_s: f64::NAN,
        }
    }

    pub fn csv_line(&self) -> String {
        let ttt = self.time_to_threshold.map_or_else(String::new, |t| t.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.value,
            self.seed,
            self.status,
            self.gamma,
            self.steps,
            self.final_loss,
            self.final_grad_norm2,
            self.min_grad_norm2,
            self.final_consensus,
            self.total_bits,
            ttt,
            self.wall_time_s
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub base: RunConfig,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for l in self.base.to_toml().lines() {
            writeln!(out, "# {l}")?;
        }
        writeln!(out, "# [sweep]")?;
        writeln!(out, "# axis = {:?}", self.axis.name())?;
        writeln!(out, "{SWEEP_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{}", r.csv_line())?;
        }
        Ok(())
    }
}

fn sweep_entry(cfg: &RunConfig, axis: SweepAxis, value: &str, seed: u64) -> SweepRow {
    let cfg = match apply_axis(cfg, axis, value) {
        Ok(mut c) => {
            c.seed = seed;
            c
        }
        Err(e) => return SweepRow::failed(value, seed, &e),
    };
    match run_config(&cfg) {
        Ok((r, out)) => {
            let s = &out.summary;
            SweepRow {
                value: value.to_string(),
                seed,
                status: s.status.label().to_string(),
                gamma: r.gamma,
                steps: s.steps_completed,
                final_loss: s.final_loss,
                final_grad_norm2: s.final_grad_norm2,
                min_grad_norm2: s.min_grad_norm2,
                final_consensus: s.final_consensus,
                total_bits: s.total_bits,
                time_to_threshold: s.time_to_threshold,
                wall_time_s: r.wall_time(s.steps_completed),
            }
        }
        Err(e) => SweepRow::failed(value, seed, &e),
    }
}

/// One row per value per seed, value-major. Entries run in parallel; a
/// failing entry becomes a row with an error status.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<SweepTable, ConfigError> {
    if values.is_empty() {
        return Err(ConfigError::new("values", "at least one value is required"));
    }
    let jobs: Vec<(String, u64)> = values
        .iter()
        .flat_map(|v| {
            let seeds = if axis == SweepAxis::Seed { vec![0] } else { cfg.seed_list() };
            seeds.into_iter().map(move |s| (v.clone(), s))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(v, s)| {
            let seed = if axis == SweepAxis::Seed { v.parse().unwrap_or(*s) } else { *s };
            sweep_entry(cfg, axis, v, seed)
        })
        .collect();
    Ok(SweepTable { axis, base: cfg.clone(), rows })
}
