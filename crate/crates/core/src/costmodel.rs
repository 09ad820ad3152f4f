//! Analytic per-epoch wall-clock model for allreduce and gossip training.
//!
//! Allreduce is modelled as ring-allreduce: `2(n-1)` latency-bound rounds
//! moving `2(n-1)/n` payloads per node. A decentralized step is one round of
//! `degree` concurrent messages sharing the node's link.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::FULL_PRECISION_BITS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid network spec: {0}")]
    Invalid(String),
}

/// Link and payload description for one training job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkSpec {
    /// Bits per second per link.
    pub bandwidth: f64,
    /// Seconds per message.
    pub latency: f64,
    pub nodes: usize,
    /// Full-precision payload per exchange, `32 * N`.
    pub model_bits: f64,
    /// Compressed payload over full payload; 1 for uncompressed.
    pub compression_ratio: f64,
    /// Seconds of local computation per step, added to every configuration.
    pub compute_per_step: f64,
}

impl NetworkSpec {
    pub fn new(bandwidth: f64, latency: f64, nodes: usize, dim: usize) -> Self {
        Self {
            bandwidth,
            latency,
            nodes,
            model_bits: (FULL_PRECISION_BITS * dim as u64) as f64,
            compression_ratio: 1.0,
            compute_per_step: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(CostError::Invalid(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(CostError::Invalid(format!("latency must be nonnegative, got {}", self.latency)));
        }
        if self.nodes < 1 {
            return Err(CostError::Invalid("nodes must be at least 1".into()));
        }
        if !(self.model_bits >= 0.0 && self.compression_ratio >= 0.0 && self.compute_per_step >= 0.0) {
            return Err(CostError::Invalid("payload, ratio and compute must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Ring-allreduce time for `steps` synchronous steps. Always full precision.
pub fn epoch_time_allreduce(spec: &NetworkSpec, steps: usize) -> f64 {
    let n = spec.nodes as f64;
    let per_step = 2.0 * (n - 1.0) * spec.latency + 2.0 * ((n - 1.0) / n) * spec.model_bits / spec.bandwidth;
    steps as f64 * (per_step + spec.compute_per_step)
}

/// Gossip time for `steps` steps where every node sends to `degree` neighbors.
pub fn epoch_time_decentralized(spec: &NetworkSpec, steps: usize, degree: usize) -> f64 {
    let per_step = spec.latency + degree as f64 * spec.model_bits * spec.compression_ratio / spec.bandwidth;
    steps as f64 * (per_step + spec.compute_per_step)
}

/// Fixed parameters of a grid evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub dim: usize,
    pub nodes: usize,
    pub degree: usize,
    pub steps_per_epoch: usize,
    pub compute_per_step: f64,
    pub compression_ratio: f64,
}

impl Default for Workload {
    /// A ResNet-20-sized model (about 270k parameters) on 8 ring workers,
    /// 8-bit quantized messages, 49 steps per epoch.
    fn default() -> Self {
        Self {
            dim: 270_000,
            nodes: 8,
            degree: 2,
            steps_per_epoch: 49,
            compute_per_step: 0.1,
            compression_ratio: default_compression_ratio(270_000),
        }
    }
}

/// Ratio of the 127-level quantizer's payload to full precision.
pub fn default_compression_ratio(dim: usize) -> f64 {
    use crate::compression::{Compression, Compressor};
    let c = Compressor::quantize(127);
    c.bits_transmitted(dim) as f64 / (FULL_PRECISION_BITS * dim as u64) as f64
}

pub const BANDWIDTH_GRID: [f64; 9] = [1.4e9, 1e9, 500e6, 200e6, 100e6, 50e6, 20e6, 10e6, 5e6];
pub const LATENCY_GRID: [f64; 5] = [0.13e-3, 0.5e-3, 1e-3, 2e-3, 5e-3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub bandwidth: f64,
    pub latency: f64,
    pub allreduce: f64,
    pub decen_full: f64,
    pub decen_compressed: f64,
}

pub fn evaluate(work: &Workload, bandwidth: f64, latency: f64) -> CostRow {
    let mut spec = NetworkSpec::new(bandwidth, latency, work.nodes, work.dim);
    spec.compute_per_step = work.compute_per_step;
    let allreduce = epoch_time_allreduce(&spec, work.steps_per_epoch);
    let decen_full = epoch_time_decentralized(&spec, work.steps_per_epoch, work.degree);
    spec.compression_ratio = work.compression_ratio;
    let decen_compressed = epoch_time_decentralized(&spec, work.steps_per_epoch, work.degree);
    CostRow { bandwidth, latency, allreduce, decen_full, decen_compressed }
}

/// Cartesian grid, bandwidth-major.
pub fn grid(work: &Workload, bandwidths: &[f64], latencies: &[f64]) -> Vec<CostRow> {
    bandwidths.iter().flat_map(|&b| latencies.iter().map(move |&l| evaluate(work, b, l))).collect()
}

pub const CSV_HEADER: &str = "bandwidth,latency,allreduce_s,decen_full_s,decen_compressed_s";

pub fn csv_line(row: &CostRow) -> String {
    format!("{},{},{},{},{}", row.bandwidth, row.latency, row.allreduce, row.decen_full, row.decen_compressed)
}

/// Relative spread tolerated for "similar runtime" at the best network.
pub const SIMILAR_TOLERANCE: f64 = 0.10;
/// Bandwidths at or below this count as the low-bandwidth regime.
pub const LOW_BANDWIDTH: f64 = 50e6;
/// Band for "full-precision gossip is no better than allreduce" at low latency.
pub const FULL_VS_ALLREDUCE_BAND: (f64, f64) = (0.9, 1.2);

/// Outcome of the four qualitative ordering claims over a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingReport {
    pub similar_at_best: bool,
    pub decentralized_wins_high_latency: bool,
    pub compressed_wins_low_bandwidth: bool,
    pub full_matches_allreduce_on_bandwidth: bool,
}

impl OrderingReport {
    pub fn all(&self) -> bool {
        self.similar_at_best
            && self.decentralized_wins_high_latency
            && self.compressed_wins_low_bandwidth
            && self.full_matches_allreduce_on_bandwidth
    }
}

/// Latency-dominated cells are those where ring-allreduce spends at least as
/// long on latency as on moving bytes.
pub fn latency_dominated(work: &Workload, row: &CostRow) -> bool {
    let n = work.nodes as f64;
    let model_bits = (FULL_PRECISION_BITS * work.dim as u64) as f64;
    2.0 * (n - 1.0) * row.latency >= 2.0 * ((n - 1.0) / n) * model_bits / row.bandwidth
}

pub fn check_orderings(work: &Workload, rows: &[CostRow]) -> OrderingReport {
    let max_b = rows.iter().map(|r| r.bandwidth).fold(f64::NEG_INFINITY, f64::max);
    let min_l = rows.iter().map(|r| r.latency).fold(f64::INFINITY, f64::min);

    let similar_at_best = rows.iter().filter(|r| r.bandwidth == max_b && r.latency == min_l).all(|r| {
        let v = [r.allreduce, r.decen_full, r.decen_compressed];
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        hi / lo <= 1.0 + SIMILAR_TOLERANCE
    });
    let latency_cells: Vec<_> = rows.iter().filter(|r| latency_dominated(work, r)).collect();
    let decentralized_wins_high_latency = !latency_cells.is_empty()
        && latency_cells.iter().all(|r| r.decen_full < r.allreduce && r.decen_compressed < r.allreduce);
    let compressed_wins_low_bandwidth = rows
        .iter()
        .filter(|r| r.bandwidth <= LOW_BANDWIDTH)
        .all(|r| r.decen_compressed < r.allreduce && r.decen_compressed < r.decen_full);
    let full_matches_allreduce_on_bandwidth = rows.iter().filter(|r| r.latency == min_l).all(|r| {
        let q = r.decen_full / r.allreduce;
        (FULL_VS_ALLREDUCE_BAND.0..=FULL_VS_ALLREDUCE_BAND.1).contains(&q)
    });
    OrderingReport {
        similar_at_best,
        decentralized_wins_high_latency,
        compressed_wins_low_bandwidth,
        full_matches_allreduce_on_bandwidth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_latency_allreduce() {
        let spec = NetworkSpec::new(1e9, 0.0, 8, 1000);
        let t = epoch_time_allreduce(&spec, 10);
        let expected = 32_000.0 / 1e9 * (7.0 / 4.0) * 10.0;
        assert!((t - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_payload_allreduce() {
        let spec = NetworkSpec::new(1e9, 1e-3, 8, 0);
        assert!((epoch_time_allreduce(&spec, 10) - 14e-3 * 10.0).abs() < 1e-15);
    }

    #[test]
    fn decentralized_formula() {
        let mut spec = NetworkSpec::new(1e6, 2e-3, 8, 100);
        spec.compression_ratio = 0.5;
        let t = epoch_time_decentralized(&spec, 3, 2);
        assert!((t - 3.0 * (2e-3 + 2.0 * 3200.0 * 0.5 / 1e6)).abs() < 1e-15);
    }

    #[test]
    fn default_ratio_near_quarter() {
        let r = default_compression_ratio(270_000);
        assert!((0.25..0.26).contains(&r), "{r}");
    }

    #[test]
    fn monotone_in_network() {
        let w = Workload::default();
        for pair in BANDWIDTH_GRID.windows(2) {
            for &l in &LATENCY_GRID {
                let fast = evaluate(&w, pair[0], l);
                let slow = evaluate(&w, pair[1], l);
                assert!(fast.allreduce <= slow.allreduce);
                assert!(fast.decen_full <= slow.decen_full);
                assert!(fast.decen_compressed <= slow.decen_compressed);
            }
        }
        for pair in LATENCY_GRID.windows(2) {
            for &b in &BANDWIDTH_GRID {
                let low = evaluate(&w, b, pair[0]);
                let high = evaluate(&w, b, pair[1]);
                assert!(low.allreduce <= high.allreduce);
                assert!(low.decen_full <= high.decen_full);
                assert!(low.decen_compressed <= high.decen_compressed);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(NetworkSpec::new(0.0, 0.0, 8, 10).validate().is_err());
        assert!(NetworkSpec::new(1.0, -1.0, 8, 10).validate().is_err());
        assert!(NetworkSpec::new(1.0, 0.0, 8, 10).validate().is_ok());
    }
}
