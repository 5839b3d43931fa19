//! Chebyshev graph convolution and its exact spectral counterpart.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::graph::{GraphLaplacian, SpectralDecomposition, ORACLE_MAX_NODES};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Validates a `K×C_out×C_in` coefficient tensor and returns `(K, C_out, C_in)`.
pub fn kernel_dims(theta: &Tensor) -> Result<(usize, usize, usize)> {
    match theta.shape() {
        &[k, c_out, c_in] => Ok((k, c_out, c_in)),
        s => Err(dim_err!("Chebyshev kernel must be K x C_out x C_in, got {s:?}")),
    }
}

/// `y = Σ_{k<K} T_k(L̃) · x · θ_kᵀ`, evaluated with the recursion on the signal.
/// `x` may stack `B` samples node-major, as `[N·B, C_in]`.
pub fn cheb_conv<'t>(theta: &Var<'t>, lap: &GraphLaplacian, x: &Var<'t>) -> Result<Var<'t>> {
    let (order, _, c_in) = kernel_dims(&theta.value())?;
    let xs = x.shape();
    let n = lap.node_count();
    if xs.len() != 2 || xs[0] == 0 || xs[0] % n != 0 || xs[1] != c_in {
        return Err(dim_err!(
            "cheb_conv: signal {xs:?} does not match {n} nodes x {c_in} channels"
        ));
    }
    x.cheb_basis(lap.rescaled(), order)?.cheb_combine(theta)
}

/// Evaluates the same filter through the eigendecomposition,
/// `U · (Σ_k θ_k T_k(Λ̃)) · Uᵀ · x` with `Λ̃ = 2Λ/λ_max − I`. Test oracle only.
pub fn spectral_conv_oracle(
    theta: &Tensor,
    decomp: &SpectralDecomposition,
    lambda_max: f64,
    x: &Tensor,
) -> Result<Tensor> {
    let (order, c_out, c_in) = kernel_dims(theta)?;
    let u = &decomp.eigenvectors;
    let n = u.rows();
    if n > ORACLE_MAX_NODES {
        return Err(Error::Usage(format!("spectral oracle limited to {ORACLE_MAX_NODES} nodes")));
    }
    let (xn, xc) = x.check_matrix("spectral_conv_oracle")?;
    if xn != n || xc != c_in {
        return Err(dim_err!("spectral_conv_oracle: signal {:?} vs {n} nodes, {c_in} channels", x.shape()));
    }
    // Graph Fourier transform of every channel.
    let x_hat = u.transpose()?.matmul(x)?;
    let scaled: Vec<f64> = decomp
        .eigenvalues
        .iter()
        .map(|&l| 2.0 * l / lambda_max - 1.0)
        .collect();
    let mut y_hat = Tensor::zeros(&[n, c_out]);
    for (i, &lam) in scaled.iter().enumerate() {
        let mut t_vals = vec![0.0; order];
        for k in 0..order {
            t_vals[k] = match k {
                0 => 1.0,
                1 => lam,
                _ => 2.0 * lam * t_vals[k - 1] - t_vals[k - 2],
            };
        }
        for o in 0..c_out {
            let mut acc = 0.0;
            for (k, tk) in t_vals.iter().enumerate() {
                for c in 0..c_in {
                    acc += tk * theta.data()[(k * c_out + o) * c_in + c] * x_hat.at(i, c);
                }
            }
            y_hat.set(i, o, acc);
        }
    }
    u.matmul(&y_hat)
}

/// Graph convolution followed by a per-channel bias, used for the readout.
#[derive(Clone, Copy, Debug)]
pub struct GraphConvLayer<'t> {
    pub theta: Var<'t>,
    pub bias: Option<Var<'t>>,
}

impl<'t> GraphConvLayer<'t> {
    pub fn forward(&self, lap: &GraphLaplacian, x: &Var<'t>) -> Result<Var<'t>> {
        let y = cheb_conv(&self.theta, lap, x)?;
        match &self.bias {
            Some(b) => y.add_row_bias(b),
            None => Ok(y),
        }
    }
}
