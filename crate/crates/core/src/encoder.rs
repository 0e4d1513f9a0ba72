//! Jacobi encoder (`H x = b`) and the modulo inverse-shaping map.

use serde::{Deserialize, Serialize};

use crate::analysis::{spectral_radius, SpectralOptions};
use crate::error::{LdlcError, Result};
use crate::lattice::{MagicSquareLdlc, SparseMatrix};

/// Consecutive residual increases tolerated before the iteration is abandoned.
pub const DIVERGENCE_RUN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub max_iterations: usize,
    /// Stop once `max |H x - b|` falls to this value.
    pub tolerance: f64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self { max_iterations: 1000, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodeReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// `max |H x - b|` after each sweep.
    pub residuals: Vec<f64>,
}

/// `x_i = (b_r - sum_{k != i} H[r][k] x_k) / H[r][i]` where row `r` carries
/// the largest weight of column `i`.
#[derive(Debug, Clone)]
pub struct JacobiEncoder {
    h: SparseMatrix,
    pivot_row: Vec<usize>,
    pivot: Vec<f64>,
    /// Row `i`: off-pivot entries of row `pivot_row[i]` divided by the pivot.
    iteration: SparseMatrix,
}

impl JacobiEncoder {
    pub fn new(m: &MagicSquareLdlc) -> Result<Self> {
        let h = m.realize();
        let n = m.n();
        let mut pivot_row = Vec::with_capacity(n);
        let mut pivot = Vec::with_capacity(n);
        let mut entries = Vec::with_capacity(n * m.d().saturating_sub(1));
        for i in 0..n {
            let r = m.row_of(0, i);
            let p = h.get(r, i);
            if p == 0.0 {
                return Err(LdlcError::Structure(format!("zero pivot in column {i}")));
            }
            pivot_row.push(r);
            pivot.push(p);
            entries.extend(h.row(r).filter(|&(k, _)| k != i).map(|(k, v)| (i, k, v / p)));
        }
        Ok(Self {
            iteration: SparseMatrix::new(n, n, entries)?,
            h,
            pivot_row,
            pivot,
        })
    }

    pub fn n(&self) -> usize {
        self.pivot.len()
    }

    /// The Jacobi iteration matrix.
    pub fn iteration_matrix(&self) -> &SparseMatrix {
        &self.iteration
    }

    /// Spectral radius of the iteration matrix; warns when it is not below 1.
    pub fn check_convergence(&self, opts: &SpectralOptions) -> Result<f64> {
        let rho = spectral_radius(&self.iteration, opts)?.radius;
        if rho >= 1.0 {
            log::warn!("Jacobi iteration matrix has spectral radius {rho:.4}; encoding may diverge");
        }
        Ok(rho)
    }

    fn residual(&self, x: &[f64], b: &[f64]) -> Result<f64> {
        let hx = self.h.mul_vec(x)?;
        Ok(hx.iter().zip(b).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn encode(&self, b: &[i64], params: &EncoderParams) -> Result<EncodeReport> {
        let n = self.n();
        if b.len() != n {
            return Err(LdlcError::DimensionMismatch { expected: n, got: b.len() });
        }
        if !(params.tolerance > 0.0) {
            return Err(LdlcError::InvalidParameter("tolerance must be positive".into()));
        }
        let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let b_tilde: Vec<f64> = (0..n).map(|i| bf[self.pivot_row[i]] / self.pivot[i]).collect();
        let mut x = vec![0.0; n];
        let mut residuals = Vec::new();
        let mut growth = 0;
        for t in 1..=params.max_iterations {
            let hx = self.iteration.mul_vec(&x)?;
            x = b_tilde.iter().zip(&hx).map(|(a, s)| a - s).collect();
            let res = self.residual(&x, &bf)?;
            if residuals.last().is_some_and(|&prev| res > prev) {
                growth += 1;
            } else {
                growth = 0;
            }
            residuals.push(res);
            if res <= params.tolerance {
                return Ok(EncodeReport { x, iterations: t, residual: res, residuals });
            }
            if growth >= DIVERGENCE_RUN || !res.is_finite() {
                log::warn!("Jacobi residual grew for {growth} iterations; iteration matrix likely has spectral radius >= 1");
                return Err(LdlcError::Diverged { iteration: t, residual: res });
            }
        }
        Err(LdlcError::NotConverged {
            iterations: params.max_iterations,
            residual: residuals.last().copied().unwrap_or(f64::NAN),
        })
    }
}

/// Lattice point `x` with `H x = b`.
pub fn encode(m: &MagicSquareLdlc, b: &[i64], params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(JacobiEncoder::new(m)?.encode(b, params)?.x)
}

/// Componentwise non-negative residue of `b_prime` modulo `modulus`.
pub fn inverse_shaping(b_prime: &[i64], modulus: i64) -> Result<Vec<i64>> {
    if modulus < 2 {
        return Err(LdlcError::InvalidParameter(format!(
            "modulus must be at least 2, got {modulus}"
        )));
    }
    Ok(b_prime.iter().map(|v| v.rem_euclid(modulus)).collect())
}
