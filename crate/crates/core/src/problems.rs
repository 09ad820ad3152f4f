//! Synthetic distributed objectives `f(x) = (1/n) sum_i f_i(x)` with known
//! smoothness `L`, gradient-noise bound `sigma^2` and node heterogeneity
//! bound `zeta^2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("model of node {node} has a non-finite entry")]
    Diverged { node: usize },
}

pub type Result<T> = std::result::Result<T, ProblemError>;

fn gaussian_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

fn check_finite(x: &DVector<f64>, node: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ProblemError::Diverged { node })
    }
}

/// Knobs for [`Quadratic::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticSpec {
    pub dim: usize,
    pub nodes: usize,
    pub heterogeneity: f64,
    pub noise: f64,
    /// Ratio of the largest to smallest Hessian eigenvalue.
    pub condition: f64,
    /// Largest Hessian eigenvalue (the smoothness constant).
    pub smoothness: f64,
}

/// Least squares with a shared design matrix and node-specific targets:
///
/// ```text
/// f_i(x) = ||A x - b_i||^2 / (2m),   b_i = b + h * delta_i,   sum_i delta_i = 0
/// ```
///
/// Stochastic gradients add isotropic Gaussian noise of per-coordinate
/// variance `noise^2`, so `sigma^2 = noise^2 * N` exactly.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: DMatrix<f64>,
    at: DMatrix<f64>,
    targets: Vec<DVector<f64>>,
    mean_target: DVector<f64>,
    hessian: DMatrix<f64>,
    noise: f64,
    smoothness: f64,
    sigma2: f64,
    zeta2: f64,
    minimizer: DVector<f64>,
    optimum: f64,
}

impl Quadratic {
    pub fn new<R: Rng + ?Sized>(spec: QuadraticSpec, rng: &mut R) -> Result<Self> {
        let QuadraticSpec { dim, nodes, heterogeneity, noise, condition, smoothness } = spec;
        if dim < 1 || nodes < 2 {
            return Err(ProblemError::Invalid(format!("need dim >= 1 and nodes >= 2, got {dim}, {nodes}")));
        }
        if heterogeneity < 0.0 || noise < 0.0 || condition < 1.0 || smoothness <= 0.0 {
            return Err(ProblemError::Invalid(
                "heterogeneity, noise >= 0, condition >= 1, smoothness > 0 required".into(),
            ));
        }
        let m = dim;
        // A = diag(sqrt(m * lambda)) V^T gives A^T A / m = V diag(lambda) V^T.
        let basis = gaussian_matrix(dim, dim, rng).qr().q();
        let lambda: Vec<f64> = (0..dim)
            .map(|k| {
                if dim == 1 {
                    smoothness
                } else {
                    let frac = k as f64 / (dim - 1) as f64;
                    smoothness / condition + frac * (smoothness - smoothness / condition)
                }
            })
            .collect();
        let scale = DMatrix::from_diagonal(&DVector::from_iterator(dim, lambda.iter().map(|l| (m as f64 * l).sqrt())));
        let a = scale * basis.transpose();
        let at = a.transpose();
        let hessian = &at * &a / m as f64;

        let base = gaussian_vec(m, rng);
        let mut deltas: Vec<DVector<f64>> = (0..nodes).map(|_| gaussian_vec(m, rng)).collect();
        let mean = deltas.iter().fold(DVector::zeros(m), |acc, d| acc + d) / nodes as f64;
        for d in &mut deltas {
            *d -= &mean;
        }
        let rms = (deltas.iter().map(|d| d.norm_squared()).sum::<f64>() / nodes as f64).sqrt();
        if rms > 0.0 {
            for d in &mut deltas {
                *d /= rms;
            }
        }
        let targets: Vec<DVector<f64>> = deltas.iter().map(|d| &base + d * heterogeneity).collect();
        let mean_target = targets.iter().fold(DVector::zeros(m), |acc, b| acc + b) / nodes as f64;

        // grad f_i - grad f = -A^T (b_i - b_bar) / m, independent of x.
        let zeta2 =
            targets.iter().map(|b| (&at * (b - &mean_target) / m as f64).norm_squared()).sum::<f64>() / nodes as f64;

        let rhs = &at * &mean_target / m as f64;
        let minimizer = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| ProblemError::Invalid("Hessian is not positive definite".into()))?
            .solve(&rhs);

        let smoothness_eig = SymmetricEigen::new(hessian.clone()).eigenvalues.max();

        let mut q = Self {
            a,
            at,
            targets,
            mean_target,
            hessian,
            noise,
            smoothness: smoothness_eig,
            sigma2: noise * noise * dim as f64,
            zeta2,
            minimizer,
            optimum: 0.0,
        };
        q.optimum = q.loss(&q.minimizer.clone());
        Ok(q)
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn minimizer(&self) -> &DVector<f64> {
        &self.minimizer
    }

    fn m(&self) -> f64 {
        self.a.nrows() as f64
    }

    pub fn local_loss(&self, node: usize, x: &DVector<f64>) -> f64 {
        0.5 * (&self.a * x - &self.targets[node]).norm_squared() / self.m()
    }

    pub fn local_gradient(&self, node: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.at * (&self.a * x - &self.targets[node]) / self.m()
    }

    pub fn loss(&self, x: &DVector<f64>) -> f64 {
        (0..self.targets.len()).map(|i| self.local_loss(i, x)).sum::<f64>() / self.targets.len() as f64
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.at * (&self.a * x - &self.mean_target) / self.m()
    }
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// How labels are distributed over nodes in [`Logistic::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSplit {
    /// Every node sees both classes in equal proportion.
    Mixed,
    /// Even nodes see only the positive class, odd nodes only the negative.
    ByNode,
    /// All samples are positive.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticSpec {
    pub dim: usize,
    pub nodes: usize,
    pub samples_per_node: usize,
    pub separation: f64,
    pub reg: f64,
    pub split: LabelSplit,
}

/// `l2`-regularised logistic regression on Gaussian clusters. The stochastic
/// oracle draws a single local sample.
#[derive(Debug, Clone)]
pub struct Logistic {
    features: Vec<Vec<DVector<f64>>>,
    labels: Vec<Vec<f64>>,
    reg: f64,
    smoothness: f64,
    sigma2: f64,
    zeta2: f64,
}

/// Number of probe points used to estimate `sigma^2` and `zeta^2`.
pub const LOGISTIC_PROBES: usize = 10_000;

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl Logistic {
    pub fn new<R: Rng + ?Sized>(spec: LogisticSpec, rng: &mut R) -> Result<Self> {
        let LogisticSpec { dim, nodes, samples_per_node, separation, reg, split } = spec;
        if dim < 1 || nodes < 2 || samples_per_node < 1 {
            return Err(ProblemError::Invalid("need dim >= 1, nodes >= 2, samples_per_node >= 1".into()));
        }
        if reg < 0.0 || separation < 0.0 {
            return Err(ProblemError::Invalid("reg and separation must be >= 0".into()));
        }
        let mut direction = gaussian_vec(dim, rng);
        direction /= direction.norm();
        let mut features = Vec::with_capacity(nodes);
        let mut labels = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let mut fs = Vec::with_capacity(samples_per_node);
            let mut ls = Vec::with_capacity(samples_per_node);
            for k in 0..samples_per_node {
                let y = match split {
                    LabelSplit::Mixed => {
                        if k % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    LabelSplit::ByNode => {
                        if i % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    LabelSplit::Constant => 1.0,
                };
                // Label-dependent shifts would make `y * a` identically distributed
                // on every node, so the by-node split shares one shift.
                let shift = if split == LabelSplit::ByNode { 1.0 } else { y };
                fs.push(gaussian_vec(dim, rng) + &direction * (separation * shift));
                ls.push(y);
            }
            features.push(fs);
            labels.push(ls);
        }
        let max_row = features.iter().flatten().map(|a| a.norm_squared()).fold(0.0, f64::max);
        let mut p = Self { features, labels, reg, smoothness: 0.25 * max_row + reg, sigma2: 0.0, zeta2: 0.0 };

        // The finite-sum variance and heterogeneity are evaluated exactly at
        // each probe; the supremum over x is what gets estimated.
        let probe_scale = 1.0 + separation;
        let mut sigma2 = 0.0f64;
        let mut zeta2 = 0.0f64;
        for _ in 0..LOGISTIC_PROBES {
            let x = gaussian_vec(dim, rng) * probe_scale;
            let grads: Vec<DVector<f64>> = (0..nodes).map(|i| p.local_gradient(i, &x)).collect();
            let mean = grads.iter().fold(DVector::zeros(dim), |acc, g| acc + g) / nodes as f64;
            zeta2 = zeta2.max(grads.iter().map(|g| (g - &mean).norm_squared()).sum::<f64>() / nodes as f64);
            for (i, gi) in grads.iter().enumerate() {
                sigma2 = sigma2.max(p.sample_variance(i, &x, gi));
            }
        }
        p.sigma2 = sigma2;
        p.zeta2 = zeta2;
        Ok(p)
    }

    fn sample_gradient(&self, node: usize, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let a = &self.features[node][k];
        let y = self.labels[node][k];
        a * (-y * sigmoid(-y * a.dot(x))) + x * self.reg
    }

    /// Exact `E||grad F_i(x; xi) - grad f_i(x)||^2` over the local samples.
    pub fn sample_variance(&self, node: usize, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let m = self.features[node].len();
        (0..m).map(|k| (self.sample_gradient(node, k, x) - mean).norm_squared()).sum::<f64>() / m as f64
    }

    pub fn local_loss(&self, node: usize, x: &DVector<f64>) -> f64 {
        let m = self.features[node].len() as f64;
        let data: f64 = self.features[node].iter().zip(&self.labels[node]).map(|(a, y)| softplus(-y * a.dot(x))).sum();
        data / m + 0.5 * self.reg * x.norm_squared()
    }

    pub fn local_gradient(&self, node: usize, x: &DVector<f64>) -> DVector<f64> {
        let m = self.features[node].len();
        let mut g = DVector::zeros(x.len());
        for k in 0..m {
            let a = &self.features[node][k];
            let y = self.labels[node][k];
            g += a * (-y * sigmoid(-y * a.dot(x)));
        }
        g / m as f64 + x * self.reg
    }

    pub fn max_row_norm2(&self) -> f64 {
        self.features.iter().flatten().map(|a| a.norm_squared()).fold(0.0, f64::max)
    }

    pub fn local_hessian(&self, node: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let m = self.features[node].len() as f64;
        let mut h = DMatrix::identity(n, n) * self.reg;
        for a in &self.features[node] {
            let s = sigmoid(a.dot(x));
            h += a * a.transpose() * (s * (1.0 - s) / m);
        }
        h
    }
}

/// A distributed objective.
#[derive(Debug, Clone)]
pub enum Problem {
    Quadratic(Quadratic),
    Logistic(Logistic),
}

impl Problem {
    pub fn dim(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.a.ncols(),
            Problem::Logistic(l) => l.features[0][0].len(),
        }
    }

    pub fn nodes(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.targets.len(),
            Problem::Logistic(l) => l.features.len(),
        }
    }

    pub fn smoothness(&self) -> f64 {
        match self {
            Problem::Quadratic(q) => q.smoothness,
            Problem::Logistic(l) => l.smoothness,
        }
    }

    /// Bound on the per-node stochastic gradient variance.
    pub fn sigma2(&self) -> f64 {
        match self {
            Problem::Quadratic(q) => q.sigma2,
            Problem::Logistic(l) => l.sigma2,
        }
    }

    /// Bound on `(1/n) sum_i ||grad f_i - grad f||^2`.
    pub fn zeta2(&self) -> f64 {
        match self {
            Problem::Quadratic(q) => q.zeta2,
            Problem::Logistic(l) => l.zeta2,
        }
    }

    /// Known minimal value `f*`, if available in closed form.
    pub fn optimum(&self) -> Option<f64> {
        match self {
            Problem::Quadratic(q) => Some(q.optimum),
            Problem::Logistic(_) => None,
        }
    }

    pub fn loss(&self, x: &DVector<f64>) -> f64 {
        match self {
            Problem::Quadratic(q) => q.loss(x),
            Problem::Logistic(l) => (0..self.nodes()).map(|i| l.local_loss(i, x)).sum::<f64>() / self.nodes() as f64,
        }
    }

    pub fn local_loss(&self, node: usize, x: &DVector<f64>) -> f64 {
        match self {
            Problem::Quadratic(q) => q.local_loss(node, x),
            Problem::Logistic(l) => l.local_loss(node, x),
        }
    }

    /// `grad f(x)`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Problem::Quadratic(q) => q.gradient(x),
            Problem::Logistic(l) => {
                let n = self.nodes();
                (0..n).fold(DVector::zeros(x.len()), |acc, i| acc + l.local_gradient(i, x)) / n as f64
            }
        }
    }

    /// `grad f_i(x)`.
    pub fn local_gradient(&self, node: usize, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Problem::Quadratic(q) => q.local_gradient(node, x),
            Problem::Logistic(l) => l.local_gradient(node, x),
        }
    }

    /// One draw of `grad F_i(x; xi)`.
    pub fn stochastic_gradient<R: Rng + ?Sized>(
        &self,
        node: usize,
        x: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if node >= self.nodes() {
            return Err(ProblemError::Invalid(format!("node {node} out of range")));
        }
        check_finite(x, node)?;
        Ok(match self {
            Problem::Quadratic(q) => {
                let mut g = q.local_gradient(node, x);
                if q.noise > 0.0 {
                    for v in g.iter_mut() {
                        *v += q.noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                g
            }
            Problem::Logistic(l) => {
                let k = rng.random_range(0..l.features[node].len());
                l.sample_gradient(node, k, x)
            }
        })
    }

    pub fn as_quadratic(&self) -> Option<&Quadratic> {
        match self {
            Problem::Quadratic(q) => Some(q),
            Problem::Logistic(_) => None,
        }
    }

    pub fn as_logistic(&self) -> Option<&Logistic> {
        match self {
            Problem::Logistic(l) => Some(l),
            Problem::Quadratic(_) => None,
        }
    }
}

fn default_condition() -> f64 {
    10.0
}

fn default_smoothness() -> f64 {
    1.0
}

fn default_samples() -> usize {
    32
}

fn default_reg() -> f64 {
    0.1
}

fn default_split() -> LabelSplit {
    LabelSplit::Mixed
}

/// Problem section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        dim: usize,
        #[serde(default)]
        heterogeneity: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_condition")]
        condition: f64,
        #[serde(default = "default_smoothness")]
        smoothness: f64,
    },
    Logistic {
        dim: usize,
        #[serde(default = "default_samples")]
        samples_per_node: usize,
        #[serde(default)]
        separation: f64,
        #[serde(default = "default_reg")]
        reg: f64,
        #[serde(default = "default_split")]
        split: LabelSplit,
    },
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        match self {
            ProblemSpec::Quadratic { dim, .. } | ProblemSpec::Logistic { dim, .. } => *dim,
        }
    }

    /// Build the problem for `nodes` workers from a dedicated seed.
    pub fn build(&self, nodes: usize, seed: u64) -> Result<Problem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            ProblemSpec::Quadratic { dim, heterogeneity, noise, condition, smoothness } => {
                Quadratic::new(QuadraticSpec { dim, nodes, heterogeneity, noise, condition, smoothness }, &mut rng)
                    .map(Problem::Quadratic)
            }
            ProblemSpec::Logistic { dim, samples_per_node, separation, reg, split } => {
                Logistic::new(LogisticSpec { dim, nodes, samples_per_node, separation, reg, split }, &mut rng)
                    .map(Problem::Logistic)
            }
        }
    }
}
