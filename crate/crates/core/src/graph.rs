//! Weighted undirected graphs and their normalized Laplacians.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-12;

/// Undirected graph on nodes `0..n` stored as a dense symmetric weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    weights: Tensor,
}

impl Graph {
    /// Validates and wraps an `N×N` weight matrix.
    pub fn from_dense(weights: Tensor) -> Result<Self> {
        let (n, m) = weights
            .check_matrix("graph")
            .map_err(|_| Error::Graph(format!("adjacency must be a matrix, got {:?}", weights.shape())))?;
        if n != m {
            return Err(Error::Graph(format!("adjacency must be square, got {n}x{m}")));
        }
        for i in 0..n {
            for j in 0..n {
                let w = weights.at(i, j);
                if !w.is_finite() {
                    return Err(Error::Graph(format!("weight ({i},{j}) is not finite")));
                }
                if w < 0.0 {
                    return Err(Error::Graph(format!("weight ({i},{j}) = {w} is negative")));
                }
                if i == j && w != 0.0 {
                    return Err(Error::Graph(format!("self-loop at node {i}")));
                }
                if (w - weights.at(j, i)).abs() > SYMMETRY_TOL {
                    return Err(Error::Graph(format!("weights ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(Self { n, weights })
    }

    /// Builds a graph from undirected weighted edges; repeated edges keep the
    /// last weight.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Graph("graph needs at least one node".into()));
        }
        let mut w = Tensor::zeros(&[n, n]);
        for &(i, j, weight) in edges {
            if i >= n || j >= n {
                return Err(Error::Graph(format!("edge ({i},{j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(Error::Graph(format!("self-loop at node {i}")));
            }
            w.set(i, j, weight);
            w.set(j, i, weight);
        }
        Self::from_dense(w)
    }

    /// Graph with `n` nodes and no edges.
    pub fn edgeless(n: usize) -> Result<Self> {
        Self::from_edges(n, &[])
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.at(i, j)
    }

    /// Edges `(i, j, w)` with `i < j` and `w > 0`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let w = self.weights.at(i, j);
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Number of incident edges.
    pub fn degree(&self, i: usize) -> usize {
        self.weights.row(i).iter().filter(|&&w| w > 0.0).count()
    }

    /// Sum of incident edge weights (the diagonal of D).
    pub fn strength(&self, i: usize) -> f64 {
        self.weights.row(i).iter().sum()
    }

    /// Sum of all edge weights, each undirected edge counted once.
    pub fn total_weight(&self) -> f64 {
        self.edges().iter().map(|e| e.2).sum()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(j, &w)| (j, w))
    }
}

/// How λ_max of the normalized Laplacian is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum LambdaMax {
    /// Power iteration with a fallback to 2 on non-convergence.
    #[default]
    Estimate,
    /// Use the given value without estimation (2 is the usual bound).
    Fixed(f64),
}

/// `L = I − D^{-1/2} W D^{-1/2}` with its rescaled form `L̃ = 2L/λ_max − I`.
#[derive(Clone, Debug)]
pub struct GraphLaplacian {
    laplacian: Tensor,
    lambda_max: f64,
    rescaled: Arc<Tensor>,
}

impl GraphLaplacian {
    pub fn new(g: &Graph, mode: LambdaMax) -> Result<Self> {
        let laplacian = normalized_laplacian(g);
        let lambda_max = match mode {
            LambdaMax::Estimate => estimate_lambda_max(&laplacian)?,
            LambdaMax::Fixed(v) if v > 0.0 && v.is_finite() => v,
            LambdaMax::Fixed(v) => return Err(Error::Graph(format!("invalid fixed lambda_max {v}"))),
        };
        Ok(Self::with_lambda_max(laplacian, lambda_max))
    }

    /// Rescales an already computed Laplacian with the given λ_max.
    pub fn with_lambda_max(laplacian: Tensor, lambda_max: f64) -> Self {
        let n = laplacian.rows();
        let mut rescaled = laplacian.map(|v| 2.0 * v / lambda_max);
        for i in 0..n {
            let d = rescaled.at(i, i);
            rescaled.set(i, i, d - 1.0);
        }
        Self {
            laplacian,
            lambda_max,
            rescaled: Arc::new(rescaled),
        }
    }

    pub fn node_count(&self) -> usize {
        self.laplacian.rows()
    }

    pub fn laplacian(&self) -> &Tensor {
        &self.laplacian
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn rescaled(&self) -> &Arc<Tensor> {
        &self.rescaled
    }
}

/// Normalized Laplacian. Zero-degree nodes take `D^{-1/2}_ii = 0`, which
/// leaves an identity row and column for them.
pub fn normalized_laplacian(g: &Graph) -> Tensor {
    let n = g.node_count();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = g.strength(i);
            if d > 0.0 {
                1.0 / libm::sqrt(d)
            } else {
                0.0
            }
        })
        .collect();
    let mut l = Tensor::identity(n);
    for i in 0..n {
        for j in 0..n {
            let w = g.weight(i, j);
            if w != 0.0 {
                let v = l.at(i, j) - inv_sqrt[i] * w * inv_sqrt[j];
                l.set(i, j, v);
            }
        }
    }
    l
}

pub const POWER_TOL: f64 = 1e-7;
pub const POWER_MAX_ITER: usize = 10_000;
/// Value substituted when power iteration does not converge.
pub const FALLBACK_LAMBDA_MAX: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerIteration {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest eigenvalue of a symmetric matrix by shifted power iteration.
///
/// The shift is the Gershgorin lower bound, which makes the shifted matrix
/// positive semidefinite so its dominant eigenvalue is the largest algebraic
/// one. Stops when the eigen-residual `‖Lv − λv‖` drops below [`POWER_TOL`].
pub fn power_iteration(l: &Tensor) -> Result<PowerIteration> {
    let (n, m) = l.check_matrix("power_iteration")?;
    if n != m {
        return Err(Error::Usage(format!("power iteration needs a square matrix, got {n}x{m}")));
    }
    let shift = (0..n)
        .map(|i| {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| l.at(i, j).abs()).sum();
            l.at(i, i) - off
        })
        .fold(f64::INFINITY, f64::min)
        .min(0.0)
        .abs();

    // Deterministic start vector with no symmetry to get trapped by.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i * 7919 + 13) % 101) as f64 / 101.0)
        .collect();
    normalize(&mut v);
    let mut lv = vec![0.0; n];
    let mut lambda = 0.0;
    for it in 1..=POWER_MAX_ITER {
        mat_vec(l, &v, &mut lv);
        lambda = dot(&v, &lv);
        let residual = libm::sqrt(
            lv.iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b) * (a - lambda * b))
                .sum(),
        );
        if residual < POWER_TOL {
            return Ok(PowerIteration {
                value: lambda,
                converged: true,
                iterations: it,
            });
        }
        for (vi, lvi) in v.iter_mut().zip(&lv) {
            *vi = lvi + shift * *vi;
        }
        if normalize(&mut v) == 0.0 {
            break;
        }
    }
    Ok(PowerIteration {
        value: lambda,
        converged: false,
        iterations: POWER_MAX_ITER,
    })
}

/// λ_max estimate, falling back to 2 (with a warning) on non-convergence.
pub fn estimate_lambda_max(l: &Tensor) -> Result<f64> {
    let est = power_iteration(l)?;
    if est.converged && est.value > 0.0 {
        Ok(est.value)
    } else {
        log::warn!(
            "lambda_max power iteration did not converge after {} iterations; using {}",
            est.iterations,
            FALLBACK_LAMBDA_MAX
        );
        Ok(FALLBACK_LAMBDA_MAX)
    }
}

fn mat_vec(a: &Tensor, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(a.row(i), x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = libm::sqrt(dot(v, v));
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Largest graph handled by the dense eigendecomposition oracle.
pub const ORACLE_MAX_NODES: usize = 64;
const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Full eigendecomposition `L = U Λ Uᵀ` of a small symmetric matrix.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    /// Columns are eigenvectors.
    pub eigenvectors: Tensor,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
}

impl SpectralDecomposition {
    /// Cyclic Jacobi rotations until the off-diagonal norm is below 1e-10.
    pub fn of(l: &Tensor) -> Result<Self> {
        let (n, m) = l.check_matrix("eigendecomposition")?;
        if n != m {
            return Err(Error::Usage(format!("eigendecomposition needs a square matrix, got {n}x{m}")));
        }
        if n > ORACLE_MAX_NODES {
            return Err(Error::Usage(format!(
                "eigendecomposition oracle limited to {ORACLE_MAX_NODES} nodes, got {n}"
            )));
        }
        let mut a: Vec<f64> = l.data().to_vec();
        let mut v = Tensor::identity(n).into_data();
        for _ in 0..JACOBI_MAX_SWEEPS {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum();
            if libm::sqrt(off) < JACOBI_TOL {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / libm::sqrt(t * t + 1.0);
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
        let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
        let mut u = Tensor::zeros(&[n, n]);
        for (col, &src) in order.iter().enumerate() {
            for row in 0..n {
                u.set(row, col, v[row * n + src]);
            }
        }
        Ok(Self {
            eigenvectors: u,
            eigenvalues,
        })
    }

    pub fn largest(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }

    /// `U · diag(values) · Uᵀ`.
    pub fn reconstruct_with(&self, values: &[f64]) -> Tensor {
        let u = &self.eigenvectors;
        let n = u.rows();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| u.at(i, k) * values[k] * u.at(j, k)).sum();
                out.set(i, j, v);
            }
        }
        out
    }
}
