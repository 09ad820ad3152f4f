//! Synchronous-round simulation of decentralized training.
//!
//! Every step has two phases. In the compute phase each node reads the
//! frozen previous-round state and produces its gradient and outgoing
//! message; this phase may run on several threads. The apply phase then
//! delivers the messages and writes the new models. Each node owns one random
//! stream per purpose, so thread count never changes a result.

pub mod estimate;
pub mod run;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::{AlphaBound, Compression, CompressionError, Compressor, FULL_PRECISION_BITS};
use crate::problems::{Problem, ProblemError};
use crate::topology::MixingMatrix;

pub use run::{simulate, RunOutput, RunStatus, Simulation, Summary, TraceRecord, TRACE_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dpsgd,
    Naive,
    Dcd,
    Ecd,
    Centralized,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::Dpsgd, Algorithm::Naive, Algorithm::Dcd, Algorithm::Ecd, Algorithm::Centralized];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dpsgd => "dpsgd",
            Algorithm::Naive => "naive",
            Algorithm::Dcd => "dcd",
            Algorithm::Ecd => "ecd",
            Algorithm::Centralized => "centralized",
        }
    }

    /// Whether messages go through the compressor.
    pub fn compresses(self) -> bool {
        matches!(self, Algorithm::Naive | Algorithm::Dcd | Algorithm::Ecd)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("diverged at iteration {t}")]
    Diverged { t: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Sampling = 0,
    Compression = 1,
}

/// Independent stream for one (node, purpose) pair under a master seed.
pub fn node_stream(master: u64, node: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(node as u64 * 2 + purpose as u64);
    rng
}

/// Stream for the shared initial point; disjoint from all node streams.
pub fn init_stream(master: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(u64::MAX);
    rng
}

#[derive(Debug, Clone)]
pub struct NodeStreams {
    pub sampling: ChaCha8Rng,
    pub compression: ChaCha8Rng,
}

/// Everything one step records besides the new models.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Column `i` of the effective noise `Q_t`.
    pub q: Vec<DVector<f64>>,
    /// Column `i` of the stochastic gradient matrix `G(X_t; xi_t)`.
    pub g: Vec<DVector<f64>>,
    /// Bits sent during this step.
    pub bits: u64,
    /// Largest norm handed to the compressor this step.
    pub max_input_norm: f64,
}

impl StepReport {
    pub fn q_norm2(&self) -> f64 {
        self.q.iter().map(|v| v.norm_squared()).sum()
    }

    pub fn g_norm2(&self) -> f64 {
        self.g.iter().map(|v| v.norm_squared()).sum()
    }
}

/// What a node sends after the compute phase.
enum Message {
    /// The receiver replaces its copy by this value.
    Exact(DVector<f64>),
    /// A compressed payload to be applied by the algorithm's update rule.
    Compressed(DVector<f64>),
}

struct NodeOutput {
    model: DVector<f64>,
    message: Message,
    q: DVector<f64>,
    g: DVector<f64>,
    input_norm: f64,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    /// Iteration counter, starting at 1.
    pub t: usize,
    pub models: Vec<DVector<f64>>,
    pub prev_models: Vec<DVector<f64>>,
    /// `replicas[i][k]`: node i's copy of its k-th neighbor (DCD).
    pub replicas: Vec<Vec<DVector<f64>>>,
    /// `estimates[i][k]`: node i's estimate of the k-th entry of its support,
    /// which is its neighbors plus itself in ascending order (ECD).
    pub estimates: Vec<Vec<DVector<f64>>>,
    pub streams: Vec<NodeStreams>,
    pub bits: u64,
    /// Run node computations on the rayon pool.
    pub parallel: bool,
    neighbors: Vec<Vec<usize>>,
    support: Vec<Vec<usize>>,
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl WorldState {
    /// All nodes start at `x1`; replicas and estimates start exact.
    pub fn new(w: &MixingMatrix, x1: &DVector<f64>, master_seed: u64) -> Self {
        let n = w.n();
        let neighbors: Vec<Vec<usize>> = (0..n).map(|i| w.neighbors(i).to_vec()).collect();
        let support: Vec<Vec<usize>> = neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut s = nb.clone();
                s.push(i);
                s.sort_unstable();
                s
            })
            .collect();
        Self {
            t: 1,
            models: vec![x1.clone(); n],
            prev_models: vec![x1.clone(); n],
            replicas: neighbors.iter().map(|nb| vec![x1.clone(); nb.len()]).collect(),
            estimates: support.iter().map(|s| vec![x1.clone(); s.len()]).collect(),
            streams: (0..n)
                .map(|i| NodeStreams {
                    sampling: node_stream(master_seed, i, Purpose::Sampling),
                    compression: node_stream(master_seed, i, Purpose::Compression),
                })
                .collect(),
            bits: 0,
            parallel: false,
            neighbors,
            support,
        }
    }

    pub fn n(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.models.first().map_or(0, |x| x.len())
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Neighbors of `i` plus `i`, ascending.
    pub fn support(&self, i: usize) -> &[usize] {
        &self.support[i]
    }

    pub fn average(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for x in &self.models {
            acc += x;
        }
        acc / self.n() as f64
    }

    /// `sum_i ||x_bar - x_i||^2`.
    pub fn consensus(&self) -> f64 {
        let mean = self.average();
        self.models.iter().map(|x| (x - &mean).norm_squared()).sum()
    }

    /// Largest `||x^_j - x_j||` over all nodes and neighbors.
    pub fn max_replica_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, nb) in self.neighbors.iter().enumerate() {
            for (k, &j) in nb.iter().enumerate() {
                worst = worst.max((&self.replicas[i][k] - &self.models[j]).norm());
            }
        }
        worst
    }

    /// Node `j`'s estimate of itself, which every neighbor holds identically.
    pub fn own_estimate(&self, j: usize) -> &DVector<f64> {
        let k = self.support[j].binary_search(&j).expect("support contains self");
        &self.estimates[j][k]
    }

    /// Average over nodes of `||x~_j - x_j||^2`.
    pub fn mean_estimate_error(&self) -> f64 {
        let n = self.n();
        (0..n).map(|j| (self.own_estimate(j) - &self.models[j]).norm_squared()).sum::<f64>() / n as f64
    }

    fn check_matches(&self, w: &MixingMatrix) -> Result<()> {
        if w.n() != self.n() {
            return Err(EngineError::Config(format!("mixing matrix has {} nodes, state has {}", w.n(), self.n())));
        }
        Ok(())
    }

    fn finish(&mut self, outputs: Vec<NodeOutput>, bits: u64) -> Result<StepReport> {
        let t = self.t;
        if outputs.iter().any(|o| !finite(&o.model)) {
            return Err(EngineError::Diverged { t });
        }
        let mut q = Vec::with_capacity(outputs.len());
        let mut g = Vec::with_capacity(outputs.len());
        let mut max_input_norm: f64 = 0.0;
        let mut models = Vec::with_capacity(outputs.len());
        for o in outputs {
            models.push(o.model);
            q.push(o.q);
            g.push(o.g);
            max_input_norm = max_input_norm.max(o.input_norm);
        }
        self.prev_models = std::mem::replace(&mut self.models, models);
        self.bits += bits;
        self.t += 1;
        Ok(StepReport { q, g, bits, max_input_norm })
    }

    /// Plain gossip SGD: `x_i <- sum_j W_ij x_j - gamma g_i`.
    pub fn dpsgd_step(&mut self, w: &MixingMatrix, problem: &Problem, gamma: f64) -> Result<StepReport> {
        self.check_matches(w)?;
        let dim = self.dim();
        let (models, support) = (&self.models, &self.support);
        let t = self.t;
        let outputs = for_each_node(self.parallel, &mut self.streams, |i, s| {
            let g = gradient(problem, i, &models[i], &mut s.sampling, t)?;
            let model = mix_step(w, i, &support[i], |j| &models[j], &g, gamma);
            Ok(NodeOutput { message: Message::Exact(model.clone()), model, q: DVector::zeros(dim), g, input_norm: 0.0 })
        })?;
        let bits = w.total_degree() as u64 * FULL_PRECISION_BITS * dim as u64;
        self.finish(outputs, bits)
    }

    /// Gossip over compressed models: `x_i <- sum_j W_ij C(x_j) - gamma g_i`.
    pub fn naive_step(
        &mut self,
        w: &MixingMatrix,
        compressor: &Compressor,
        problem: &Problem,
        gamma: f64,
    ) -> Result<StepReport> {
        self.check_matches(w)?;
        let t = self.t;
        let models = &self.models;
        let first = for_each_node(self.parallel, &mut self.streams, |i, s| {
            let g = gradient(problem, i, &models[i], &mut s.sampling, t)?;
            let c = compress(compressor, &models[i], &mut s.compression, t)?;
            Ok(NodeOutput {
                q: &c - &models[i],
                model: c.clone(),
                message: Message::Compressed(c),
                g,
                input_norm: models[i].norm(),
            })
        })?;
        let compressed: Vec<&DVector<f64>> = first.iter().map(|o| &o.model).collect();
        let outputs: Vec<NodeOutput> = first
            .iter()
            .enumerate()
            .map(|(i, o)| NodeOutput {
                model: mix_step(w, i, &self.support[i], |j| compressed[j], &o.g, gamma),
                message: Message::Exact(DVector::zeros(0)),
                q: o.q.clone(),
                g: o.g.clone(),
                input_norm: o.input_norm,
            })
            .collect();
        let bits = w.total_degree() as u64 * compressor.bits_transmitted(self.dim());
        self.finish(outputs, bits)
    }

    /// Difference compression. Each node averages its neighbors' replicas,
    /// compresses the change to its own model and applies the same
    /// compressed change locally and at every neighbor's replica.
    pub fn dcd_step(
        &mut self,
        w: &MixingMatrix,
        compressor: &Compressor,
        problem: &Problem,
        gamma: f64,
    ) -> Result<StepReport> {
        self.check_matches(w)?;
        if let AlphaBound::Unbounded = compressor.alpha_bound(self.dim()) {
            return Err(EngineError::Config(format!(
                "difference compression needs a finite alpha bound; {} has none",
                compressor.label()
            )));
        }
        let t = self.t;
        let lossless = compressor.is_lossless();
        let (models, replicas, neighbors, support) = (&self.models, &self.replicas, &self.neighbors, &self.support);
        let outputs = for_each_node(self.parallel, &mut self.streams, |i, s| {
            let x = &models[i];
            let g = gradient(problem, i, x, &mut s.sampling, t)?;
            let source = |j: usize| {
                if j == i {
                    x
                } else {
                    let k = neighbors[i].binary_search(&j).expect("neighbor lists are sorted");
                    &replicas[i][k]
                }
            };
            let half = mix_step(w, i, &support[i], source, &g, gamma);
            if lossless {
                return Ok(NodeOutput {
                    model: half.clone(),
                    message: Message::Exact(half),
                    q: DVector::zeros(x.len()),
                    g,
                    input_norm: 0.0,
                });
            }
            let z = &half - x;
            let c = compress(compressor, &z, &mut s.compression, t)?;
            let mut model = x.clone();
            model += &c;
            Ok(NodeOutput { q: &c - &z, input_norm: z.norm(), model, message: Message::Compressed(c), g })
        })?;

        for (i, nb) in self.neighbors.iter().enumerate() {
            for (k, &j) in nb.iter().enumerate() {
                match &outputs[j].message {
                    Message::Exact(v) => self.replicas[i][k].copy_from(v),
                    Message::Compressed(c) => self.replicas[i][k] += c,
                }
            }
        }
        let bits = w.total_degree() as u64 * compressor.bits_transmitted(self.dim());
        self.finish(outputs, bits)
    }

    /// Extrapolation compression. Each node averages its estimates, takes a
    /// gradient step, and broadcasts a compressed extrapolation from which
    /// every holder (itself included) advances its estimate.
    pub fn ecd_step(
        &mut self,
        w: &MixingMatrix,
        compressor: &Compressor,
        problem: &Problem,
        gamma: f64,
    ) -> Result<StepReport> {
        self.check_matches(w)?;
        let t = self.t;
        let s_next = t + 1;
        let lossless = compressor.is_lossless();
        let (models, estimates, support) = (&self.models, &self.estimates, &self.support);
        let outputs = for_each_node(self.parallel, &mut self.streams, |i, s| {
            let x = &models[i];
            let g = gradient(problem, i, x, &mut s.sampling, t)?;
            let sup = &support[i];
            let source = |j: usize| &estimates[i][sup.binary_search(&j).expect("support is sorted")];
            let next = mix_step(w, i, sup, source, &g, gamma);
            let plain = mix_step(w, i, sup, |j| &models[j], &g, gamma);
            let q = &next - &plain;
            if lossless {
                return Ok(NodeOutput { model: next.clone(), message: Message::Exact(next), q, g, input_norm: 0.0 });
            }
            let z = estimate::extrapolate(x, &next, s_next);
            let c = compress(compressor, &z, &mut s.compression, t)?;
            Ok(NodeOutput { input_norm: z.norm(), model: next, message: Message::Compressed(c), q, g })
        })?;

        for (i, sup) in self.support.iter().enumerate() {
            for (k, &j) in sup.iter().enumerate() {
                match &outputs[j].message {
                    Message::Exact(v) => self.estimates[i][k].copy_from(v),
                    Message::Compressed(c) => estimate::update_estimate(&mut self.estimates[i][k], c, s_next),
                }
            }
        }
        let bits = w.total_degree() as u64 * compressor.bits_transmitted(self.dim());
        self.finish(outputs, bits)
    }

    /// Parameter-server SGD on the common model held by node 0:
    /// `x <- x - gamma * mean_i g_i`. Every node ends with the same model.
    pub fn centralized_step(&mut self, problem: &Problem, gamma: f64) -> Result<StepReport> {
        let n = self.n();
        let dim = self.dim();
        let t = self.t;
        let x = self.models[0].clone();
        let grads = for_each_node(self.parallel, &mut self.streams, |i, s| {
            let g = gradient(problem, i, &x, &mut s.sampling, t)?;
            Ok(NodeOutput {
                model: DVector::zeros(0),
                message: Message::Exact(DVector::zeros(0)),
                q: DVector::zeros(dim),
                g,
                input_norm: 0.0,
            })
        })?;
        let mut mean = DVector::zeros(dim);
        for o in &grads {
            mean += &o.g;
        }
        mean /= n as f64;
        let mut next = x;
        next.axpy(-gamma, &mean, 1.0);
        let outputs = grads.into_iter().map(|o| NodeOutput { model: next.clone(), ..o }).collect();
        let bits = 2 * (n as u64 - 1) * FULL_PRECISION_BITS * dim as u64;
        self.finish(outputs, bits)
    }

    pub fn step(
        &mut self,
        algorithm: Algorithm,
        w: &MixingMatrix,
        compressor: &Compressor,
        problem: &Problem,
        gamma: f64,
    ) -> Result<StepReport> {
        match algorithm {
            Algorithm::Dpsgd => self.dpsgd_step(w, problem, gamma),
            Algorithm::Naive => self.naive_step(w, compressor, problem, gamma),
            Algorithm::Dcd => self.dcd_step(w, compressor, problem, gamma),
            Algorithm::Ecd => self.ecd_step(w, compressor, problem, gamma),
            Algorithm::Centralized => self.centralized_step(problem, gamma),
        }
    }
}

fn for_each_node<F>(parallel: bool, streams: &mut [NodeStreams], f: F) -> Result<Vec<NodeOutput>>
where
    F: Fn(usize, &mut NodeStreams) -> Result<NodeOutput> + Sync + Send,
{
    if parallel {
        streams.par_iter_mut().enumerate().map(|(i, s)| f(i, s)).collect()
    } else {
        streams.iter_mut().enumerate().map(|(i, s)| f(i, s)).collect()
    }
}

/// `sum_{j in support} W_ij src(j) - gamma g`, always summed in ascending `j`
/// so that every algorithm performs the same floating-point operations.
fn mix_step<'a>(
    w: &MixingMatrix,
    i: usize,
    support: &[usize],
    src: impl Fn(usize) -> &'a DVector<f64>,
    g: &DVector<f64>,
    gamma: f64,
) -> DVector<f64> {
    let mut acc = DVector::zeros(g.len());
    for &j in support {
        acc.axpy(w.weight(i, j), src(j), 1.0);
    }
    acc.axpy(-gamma, g, 1.0);
    acc
}

fn gradient(problem: &Problem, node: usize, x: &DVector<f64>, rng: &mut ChaCha8Rng, t: usize) -> Result<DVector<f64>> {
    match problem.stochastic_gradient(node, x, rng) {
        Ok(g) if finite(&g) => Ok(g),
        Ok(_) | Err(ProblemError::Diverged { .. }) => Err(EngineError::Diverged { t }),
        Err(e) => Err(e.into()),
    }
}

fn compress(c: &Compressor, z: &DVector<f64>, rng: &mut dyn RngCore, t: usize) -> Result<DVector<f64>> {
    match c.compress(z.as_slice(), rng) {
        Ok(v) => Ok(DVector::from_vec(v)),
        Err(CompressionError::NonFinite { .. }) => Err(EngineError::Diverged { t }),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::ProblemSpec;
    use nalgebra::DMatrix;

    fn quadratic(nodes: usize, noise: f64, heterogeneity: f64) -> Problem {
        ProblemSpec::Quadratic { dim: 6, heterogeneity, noise, condition: 5.0, smoothness: 1.0 }
            .build(nodes, 3)
            .unwrap()
    }

    fn start(dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |i, _| (i as f64 - 2.0) * 0.7)
    }

    #[test]
    fn zero_step_size_keeps_consensual_state() {
        let w = MixingMatrix::fully_connected(2).unwrap();
        let p = quadratic(2, 0.5, 1.0);
        let mut s = WorldState::new(&w, &start(6), 1);
        let before = s.models.clone();
        s.dpsgd_step(&w, &p, 0.0).unwrap();
        for (a, b) in s.models.iter().zip(&before) {
            assert!((a - b).amax() < 1e-15);
        }
    }

    #[test]
    fn dpsgd_matches_matrix_expression() {
        let w = MixingMatrix::from_weights(DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75])).unwrap();
        let p = ProblemSpec::Quadratic { dim: 2, heterogeneity: 1.0, noise: 0.0, condition: 3.0, smoothness: 1.0 }
            .build(2, 9)
            .unwrap();
        let mut s = WorldState::new(&w, &DVector::zeros(2), 0);
        s.models[0] = DVector::from_vec(vec![1.0, -1.0]);
        s.models[1] = DVector::from_vec(vec![0.5, 2.0]);
        let x = DMatrix::from_columns(&s.models);
        let g = DMatrix::from_columns(&[p.local_gradient(0, &s.models[0]), p.local_gradient(1, &s.models[1])]);
        let expected = &x * w.entries() - &g * 0.1;
        s.dpsgd_step(&w, &p, 0.1).unwrap();
        for i in 0..2 {
            assert!((&s.models[i] - expected.column(i)).amax() < 1e-14);
        }
    }

    #[test]
    fn identity_collapses_compressed_algorithms() {
        let w = MixingMatrix::ring(5).unwrap();
        let p = quadratic(5, 0.3, 0.5);
        let mut base = WorldState::new(&w, &start(6), 11);
        let mut others: Vec<WorldState> = (0..3).map(|_| base.clone()).collect();
        for _ in 0..30 {
            base.dpsgd_step(&w, &p, 0.2).unwrap();
            others[0].naive_step(&w, &Compressor::Identity, &p, 0.2).unwrap();
            others[1].dcd_step(&w, &Compressor::Identity, &p, 0.2).unwrap();
            others[2].ecd_step(&w, &Compressor::Identity, &p, 0.2).unwrap();
            for o in &others {
                assert_eq!(o.models, base.models);
            }
        }
    }

    #[test]
    fn dcd_scalar_hand_computation() {
        // n = 2 complete graph, N = 1, sparsify with keep_prob 1 is exact.
        let w = MixingMatrix::fully_connected(2).unwrap();
        let p = ProblemSpec::Quadratic { dim: 1, heterogeneity: 0.0, noise: 0.0, condition: 1.0, smoothness: 1.0 }
            .build(2, 0)
            .unwrap();
        let q = p.as_quadratic().unwrap();
        let mut s = WorldState::new(&w, &DVector::from_vec(vec![2.0]), 0);
        s.models[1] = DVector::from_vec(vec![4.0]);
        s.replicas[0][0] = DVector::from_vec(vec![4.0]);
        s.replicas[1][0] = DVector::from_vec(vec![2.0]);
        let star = q.minimizer()[0];
        let report = s.dcd_step(&w, &Compressor::Sparsify { keep_prob: 1.0 }, &p, 0.5).unwrap();
        // gradient is (x - x*) with L = 1 in one dimension
        let expect0 = 3.0 - 0.5 * (2.0 - star);
        let expect1 = 3.0 - 0.5 * (4.0 - star);
        assert!((s.models[0][0] - expect0).abs() < 1e-14);
        assert!((s.models[1][0] - expect1).abs() < 1e-14);
        assert_eq!(s.max_replica_error(), 0.0);
        assert!(report.q_norm2() < 1e-28);
    }

    #[test]
    fn replicas_stay_exact_under_quantization() {
        let w = MixingMatrix::ring(6).unwrap();
        let p = quadratic(6, 0.2, 0.5);
        let mut s = WorldState::new(&w, &start(6), 4);
        for _ in 0..50 {
            s.dcd_step(&w, &Compressor::quantize(16), &p, 0.1).unwrap();
            assert_eq!(s.max_replica_error(), 0.0);
        }
    }

    #[test]
    fn dcd_refuses_unbounded_alpha() {
        let w = MixingMatrix::ring(4).unwrap();
        let p = quadratic(4, 0.0, 0.0);
        let mut s = WorldState::new(&w, &start(6), 0);
        let err = s.dcd_step(&w, &Compressor::Synthetic { noise_bound: 1.0 }, &p, 0.1).unwrap_err();
        assert!(matches!(err, EngineError::Config(_)));
    }

    #[test]
    fn parallel_matches_sequential() {
        let w = MixingMatrix::ring(8).unwrap();
        let p = quadratic(8, 0.4, 0.5);
        let c = Compressor::quantize(8);
        for algo in Algorithm::ALL {
            let mut a = WorldState::new(&w, &start(6), 21);
            let mut b = a.clone();
            b.parallel = true;
            for _ in 0..20 {
                a.step(algo, &w, &c, &p, 0.1).unwrap();
                b.step(algo, &w, &c, &p, 0.1).unwrap();
            }
            assert_eq!(a.models, b.models, "{algo}");
            assert_eq!(a.bits, b.bits);
        }
    }

    #[test]
    fn centralized_keeps_columns_equal_and_counts_allreduce_bits() {
        let w = MixingMatrix::ring(4).unwrap();
        let p = quadratic(4, 0.3, 0.5);
        let mut s = WorldState::new(&w, &start(6), 2);
        s.centralized_step(&p, 0.1).unwrap();
        assert!(s.models.iter().all(|m| m == &s.models[0]));
        assert_eq!(s.bits, 2 * 3 * 32 * 6);
    }

    #[test]
    fn nan_input_reports_divergence() {
        let w = MixingMatrix::ring(3).unwrap();
        let p = quadratic(3, 0.0, 0.0);
        let mut s = WorldState::new(&w, &start(6), 0);
        s.models[1][0] = f64::NAN;
        assert_eq!(s.dpsgd_step(&w, &p, 0.1).unwrap_err(), EngineError::Diverged { t: 1 });
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = node_stream(5, 0, Purpose::Sampling);
        let mut b = node_stream(5, 0, Purpose::Compression);
        let mut c = node_stream(5, 1, Purpose::Sampling);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert!(x != y && y != z && x != z);
        assert_eq!(node_stream(5, 1, Purpose::Sampling).next_u64(), z);
    }
}
