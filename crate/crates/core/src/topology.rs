//! Gossip mixing matrices.
//!
//! A [`MixingMatrix`] is a symmetric doubly-stochastic `n x n` matrix `W`
//! whose off-diagonal support is the communication graph. Construction
//! validates the matrix and caches its spectrum together with the two
//! spectral quantities the convergence theory uses:
//!
//! ```text
//! rho = max(|lambda_2|, |lambda_n|)       (consensus contraction factor)
//! mu  = max_{i >= 2} |lambda_i - 1|       (compression budget for DCD)
//! ```

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row sums must match 1 to this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Eigenvalues this close to 1 count as exactly 1.
pub const UNIT_EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("graph is disconnected (rho = {rho} >= 1)")]
    Disconnected { rho: f64 },
}

pub type Result<T> = std::result::Result<T, TopologyError>;

/// Full real spectrum of a symmetric matrix plus the derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralStats {
    /// Eigenvalues sorted in descending order.
    pub eigenvalues: Vec<f64>,
    pub rho: f64,
    pub mu: f64,
}

impl SpectralStats {
    /// `rho < 1`, i.e. gossip with this matrix reaches consensus.
    pub fn is_feasible(&self) -> bool {
        self.rho < 1.0 - UNIT_EIGEN_TOL
    }

    pub fn spectral_gap(&self) -> f64 {
        1.0 - self.rho
    }
}

/// Eigen-decompose a symmetric matrix and derive `rho` and `mu`.
///
/// Never fails; a disconnected `W` simply reports `rho = 1`.
pub fn spectral_stats(w: &DMatrix<f64>) -> SpectralStats {
    let n = w.nrows();
    let eig = SymmetricEigen::new(w.clone());
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    if n < 2 {
        return SpectralStats { eigenvalues, rho: 0.0, mu: 0.0 };
    }
    let rho = eigenvalues[1].abs().max(eigenvalues[n - 1].abs());
    let mu = eigenvalues[1..].iter().map(|l| (l - 1.0).abs()).fold(0.0, f64::max);
    SpectralStats { eigenvalues, rho, mu }
}

/// Symmetric adjacency structure used by [`MixingMatrix::metropolis`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    adj: Vec<Vec<bool>>,
}

impl Adjacency {
    /// Build from directed arcs `(from, to)`. Self loops are ignored.
    /// The result need not be symmetric; [`MixingMatrix::metropolis`] rejects
    /// asymmetric input.
    pub fn from_arcs(n: usize, arcs: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![vec![false; n]; n];
        for &(i, j) in arcs {
            if i >= n || j >= n {
                return Err(TopologyError::Invalid(format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            if i != j {
                adj[i][j] = true;
            }
        }
        Ok(Self { n, adj })
    }

    /// Build from undirected edges; both directions are inserted.
    pub fn from_undirected(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let arcs: Vec<(usize, usize)> = edges.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
        Self::from_arcs(n, &arcs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.adj[i][j] == self.adj[j][i]))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].iter().filter(|&&e| e).count()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i][j]
    }
}

/// Validated symmetric doubly-stochastic gossip matrix with cached spectrum.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
    stats: SpectralStats,
}

impl MixingMatrix {
    /// Ring where every node averages itself and its two neighbours with
    /// weight 1/3 each.
    pub fn ring(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(TopologyError::Invalid(format!("ring needs n >= 3, got {n}")));
        }
        let third = 1.0 / 3.0;
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            w[(i, i)] = third;
            w[(i, (i + 1) % n)] = third;
            w[(i, (i + n - 1) % n)] = third;
        }
        Self::from_weights(w)
    }

    /// `W = (1/n) 1 1^T`: exact averaging in one round.
    pub fn fully_connected(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(TopologyError::Invalid(format!("fully connected topology needs n >= 2, got {n}")));
        }
        Self::from_weights(DMatrix::from_element(n, n, 1.0 / n as f64))
    }

    /// Metropolis–Hastings weights on an arbitrary connected graph:
    /// `W_ij = 1 / (1 + max(deg_i, deg_j))` on edges, the remainder on the
    /// diagonal.
    pub fn metropolis(graph: &Adjacency) -> Result<Self> {
        let n = graph.n();
        if n < 2 {
            return Err(TopologyError::Invalid(format!("graph needs n >= 2, got {n}")));
        }
        if !graph.is_symmetric() {
            return Err(TopologyError::Invalid("edge list is not symmetric".into()));
        }
        let deg: Vec<usize> = (0..n).map(|i| graph.degree(i)).collect();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if graph.has_edge(i, j) {
                    let v = 1.0 / (1 + deg[i].max(deg[j])) as f64;
                    w[(i, j)] = v;
                    w[(j, i)] = v;
                }
            }
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::from_weights(w)
    }

    /// Validate an explicit weight matrix.
    pub fn from_weights(w: DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        if n < 2 || w.ncols() != n {
            return Err(TopologyError::Invalid(format!(
                "weight matrix must be square with n >= 2, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = w[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(TopologyError::Invalid(format!("W[{i},{j}] = {v} is not a nonnegative weight")));
                }
                if v != w[(j, i)] {
                    return Err(TopologyError::Invalid(format!("W is not symmetric at ({i}, {j})")));
                }
            }
            let row: f64 = w.row(i).iter().sum();
            if (row - 1.0).abs() > ROW_SUM_TOL {
                return Err(TopologyError::Invalid(format!("row {i} sums to {row}, not 1")));
            }
        }
        let stats = spectral_stats(&w);
        if (stats.eigenvalues[0] - 1.0).abs() > UNIT_EIGEN_TOL {
            return Err(TopologyError::Invalid(format!("leading eigenvalue {} is not 1", stats.eigenvalues[0])));
        }
        if !stats.is_feasible() {
            return Err(TopologyError::Disconnected { rho: stats.rho });
        }
        let neighbors = (0..n).map(|i| (0..n).filter(|&j| j != i && w[(i, j)] != 0.0).collect()).collect();
        Ok(Self { entries: w, neighbors, stats })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Nodes `j != i` with `W_ij > 0`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Number of directed messages per gossip round (sum of degrees).
    pub fn total_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn stats(&self) -> &SpectralStats {
        &self.stats
    }

    pub fn rho(&self) -> f64 {
        self.stats.rho
    }

    pub fn mu(&self) -> f64 {
        self.stats.mu
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.stats.eigenvalues
    }
}

/// Topology section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub n: usize,
    /// Undirected edges, only for `kind = "custom"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Ring,
    Complete,
    Custom,
}

impl TopologySpec {
    pub fn build(&self) -> Result<MixingMatrix> {
        match self.kind {
            TopologyKind::Ring => MixingMatrix::ring(self.n),
            TopologyKind::Complete => MixingMatrix::fully_connected(self.n),
            TopologyKind::Custom => {
                let edges = self
                    .edges
                    .as_ref()
                    .ok_or_else(|| TopologyError::Invalid("custom topology requires `edges`".into()))?;
                MixingMatrix::metropolis(&Adjacency::from_undirected(self.n, edges)?)
            }
        }
    }
}
