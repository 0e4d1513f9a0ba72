//! Core lattice types: sparse parity-check matrices, magic-square codes and the
//! handful of scalar operations (syndrome, determinant, noise level) shared by
//! every other module.
//!
//! A lattice point is `x = G b` for an integer vector `b`; the parity-check
//! matrix is `H = G^-1`, so `x` is a lattice point iff `H x` is integer.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LdlcError, Result};

/// Largest dimension for which dense determinants and inverses are computed.
pub const DENSE_CAP: usize = 4096;

/// Default tolerance on `|det(H)^(1/n) - 1|` below which normalization is skipped.
///
/// 5e-3 is a codeword gain of about 0.04 dB.
pub const DEFAULT_NORMALIZE_SKIP_TOL: f64 = 5e-3;

/// Nearest integer with ties rounded toward positive infinity.
///
/// This fixes `frac(x) = x - nearest(x)` to the half-open range `[-0.5, 0.5)`.
pub fn nearest_integer(x: f64) -> f64 {
    let r = x.round();
    // `round` sends -k.5 to -(k+1); move those ties up.
    if x - r == 0.5 {
        r + 1.0
    } else {
        r
    }
}

/// Fractional part relative to the nearest integer, in `[-0.5, 0.5)`.
pub fn frac(x: f64) -> f64 {
    x - nearest_integer(x)
}

/// A sparse real matrix stored as an entry list with row and column adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
    row_adj: Vec<Vec<usize>>,
    col_adj: Vec<Vec<usize>>,
}

impl SparseMatrix {
    pub fn new(n_rows: usize, n_cols: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(LdlcError::InvalidParameter(
                "matrix dimensions must be positive".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for &(r, c, _) in &entries {
            if r >= n_rows || c >= n_cols {
                return Err(LdlcError::Structure(format!(
                    "entry ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            if !seen.insert((r, c)) {
                return Err(LdlcError::Structure(format!("duplicate entry ({r}, {c})")));
            }
        }
        let (row_adj, col_adj) = Self::adjacency(n_rows, n_cols, &entries);
        Ok(Self {
            n_rows,
            n_cols,
            entries,
            row_adj,
            col_adj,
        })
    }

    /// Builds a sparse matrix from the nonzero entries of a dense row-major matrix.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(LdlcError::DimensionMismatch {
                    expected: n_cols,
                    got: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    entries.push((r, c, v));
                }
            }
        }
        Self::new(n_rows, n_cols, entries)
    }

    /// Diagonal matrix.
    pub fn diagonal(values: &[f64]) -> Result<Self> {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, &v)| (i, i, v))
            .collect();
        Self::new(values.len(), values.len(), entries)
    }

    fn adjacency(
        n_rows: usize,
        n_cols: usize,
        entries: &[(usize, usize, f64)],
    ) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut row_adj = vec![Vec::new(); n_rows];
        let mut col_adj = vec![Vec::new(); n_cols];
        for (idx, &(r, c, _)) in entries.iter().enumerate() {
            row_adj[r].push(idx);
            col_adj[c].push(idx);
        }
        (row_adj, col_adj)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `(col, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row_adj[r].iter().map(move |&i| {
            let (_, c, v) = self.entries[i];
            (c, v)
        })
    }

    /// `(row, value)` pairs of column `c`.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.col_adj[c].iter().map(move |&i| {
            let (r, _, v) = self.entries[i];
            (r, v)
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    /// Rebuilds the adjacency indices from the entry list and compares.
    pub fn adjacency_consistent(&self) -> bool {
        let (row_adj, col_adj) = Self::adjacency(self.n_rows, self.n_cols, &self.entries);
        row_adj == self.row_adj && col_adj == self.col_adj
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols {
            return Err(LdlcError::DimensionMismatch {
                expected: self.n_cols,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.n_rows];
        for &(r, c, v) in &self.entries {
            out[r] += v * x[c];
        }
        Ok(out)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let entries = self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect();
        SparseMatrix::new(self.n_cols, self.n_rows, entries).expect("transpose of a valid matrix")
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
        }
        m
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; self.n_cols]; self.n_rows];
        for &(r, c, v) in &self.entries {
            rows[r][c] = v;
        }
        rows
    }

    pub fn scaled(&self, factor: f64) -> SparseMatrix {
        let entries = self.entries.iter().map(|&(r, c, v)| (r, c, v * factor)).collect();
        SparseMatrix::new(self.n_rows, self.n_cols, entries).expect("scaling keeps structure")
    }
}

/// The sorted nonzero magnitudes `h_1 >= h_2 >= ... >= h_d > 0` shared by every
/// row and column of a magic-square code.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingSequence {
    values: Vec<f64>,
    alpha: f64,
}

/// Reciprocals of the first seven primes with a small dither, the sequence
/// behind the reported simulation results.
pub const DITHERED_PRIME_RECIPROCALS: [f64; 7] = [
    1.0 / 2.31,
    1.0 / 3.17,
    1.0 / 5.11,
    1.0 / 7.33,
    1.0 / 11.71,
    1.0 / 13.11,
    1.0 / 17.55,
];

impl GeneratingSequence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LdlcError::InvalidParameter(
                "generating sequence must be non-empty".into(),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(LdlcError::InvalidParameter(
                "generating sequence values must be finite and positive".into(),
            ));
        }
        if values.windows(2).any(|w| w[0] < w[1]) {
            return Err(LdlcError::InvalidParameter(
                "generating sequence must be sorted non-increasing".into(),
            ));
        }
        let alpha = Self::compute_alpha(&values);
        Ok(Self { values, alpha })
    }

    /// First `d` dithered prime reciprocals, scaled so that `h_1 = 1`.
    pub fn dithered_primes(d: usize) -> Result<Self> {
        if d == 0 || d > DITHERED_PRIME_RECIPROCALS.len() {
            return Err(LdlcError::InvalidParameter(format!(
                "dithered prime sequence supports 1 <= d <= 7, got {d}"
            )));
        }
        Self::new(DITHERED_PRIME_RECIPROCALS[..d].to_vec())?.scaled_to_unit_lead()
    }

    /// `{1, 1/sqrt(d), ..., 1/sqrt(d)}`, for which `alpha = (d-1)/d`.
    pub fn unit_lead_flat(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(LdlcError::InvalidParameter("d must be positive".into()));
        }
        let eps = 1.0 / (d as f64).sqrt();
        let mut values = vec![eps; d];
        values[0] = 1.0;
        Self::new(values)
    }

    pub fn scaled_to_unit_lead(&self) -> Result<Self> {
        let lead = self.values[0];
        Self::new(self.values.iter().map(|v| v / lead).collect())
    }

    fn compute_alpha(values: &[f64]) -> f64 {
        let tail: f64 = values[1..].iter().map(|h| h * h).sum();
        tail / (values[0] * values[0])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn degree(&self) -> usize {
        self.values.len()
    }

    pub fn h(&self, j: usize) -> f64 {
        self.values[j]
    }

    /// `alpha = sum_{i>=2} h_i^2 / h_1^2`, recomputed from the values.
    pub fn alpha(&self) -> f64 {
        Self::compute_alpha(&self.values)
    }

    /// The value cached at construction.
    pub fn stored_alpha(&self) -> f64 {
        self.alpha
    }
}

/// A magic-square parity-check matrix stored as `d` signed permutations.
///
/// Weight class `j` places `sign * h_j * norm_factor` at row `perms[j][c]` of
/// every column `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagicSquareLdlc {
    n: usize,
    seq: GeneratingSequence,
    perms: Vec<Vec<usize>>,
    signs: Vec<Vec<i8>>,
    norm_factor: f64,
    seed: u64,
}

impl MagicSquareLdlc {
    pub fn new(
        seq: GeneratingSequence,
        perms: Vec<Vec<usize>>,
        signs: Vec<Vec<i8>>,
        norm_factor: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = seq.degree();
        if perms.len() != d || signs.len() != d {
            return Err(LdlcError::Structure(format!(
                "expected {d} permutations and sign rows, got {} and {}",
                perms.len(),
                signs.len()
            )));
        }
        let n = perms[0].len();
        if n == 0 {
            return Err(LdlcError::InvalidParameter("n must be positive".into()));
        }
        for (j, p) in perms.iter().enumerate() {
            if !is_permutation(p, n) {
                return Err(LdlcError::Structure(format!(
                    "row {j} of perms is not a permutation of 0..{n}"
                )));
            }
        }
        for s in &signs {
            if s.len() != n || s.iter().any(|&v| v != 1 && v != -1) {
                return Err(LdlcError::Structure("signs must be +-1, length n".into()));
            }
        }
        if !(norm_factor.is_finite() && norm_factor > 0.0) {
            return Err(LdlcError::InvalidParameter(
                "norm_factor must be finite and positive".into(),
            ));
        }
        Ok(Self {
            n,
            seq,
            perms,
            signs,
            norm_factor,
            seed,
        })
    }

    /// Recovers the permutation structure of a dense magic-square matrix whose
    /// entries equal `+-seq[j]` (up to `1e-12` relative).
    pub fn from_dense(rows: &[Vec<f64>], seq: GeneratingSequence) -> Result<Self> {
        let n = rows.len();
        let d = seq.degree();
        let mut perms = vec![vec![usize::MAX; n]; d];
        let mut signs = vec![vec![1i8; n]; d];
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(LdlcError::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let class = seq
                    .values()
                    .iter()
                    .position(|h| (v.abs() - h).abs() <= 1e-12 * h)
                    .ok_or_else(|| {
                        LdlcError::Structure(format!("value {v} at ({r}, {c}) not in sequence"))
                    })?;
                if perms[class][c] != usize::MAX {
                    return Err(LdlcError::Structure(format!(
                        "column {c} holds weight class {class} twice"
                    )));
                }
                perms[class][c] = r;
                signs[class][c] = if v < 0.0 { -1 } else { 1 };
            }
        }
        Self::new(seq, perms, signs, 1.0, 0)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.seq.degree()
    }

    pub fn seq(&self) -> &GeneratingSequence {
        &self.seq
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn signs(&self) -> &[Vec<i8>] {
        &self.signs
    }

    pub fn norm_factor(&self) -> f64 {
        self.norm_factor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_norm_factor(mut self, norm_factor: f64) -> Self {
        self.norm_factor = norm_factor;
        self
    }

    /// Row holding weight class `j` in column `c`.
    pub fn row_of(&self, j: usize, c: usize) -> usize {
        self.perms[j][c]
    }

    /// Signed entry of weight class `j` in column `c`, including normalization.
    pub fn value(&self, j: usize, c: usize) -> f64 {
        f64::from(self.signs[j][c]) * self.seq.h(j) * self.norm_factor
    }

    /// `inv[j][r]` is the column holding weight class `j` in row `r`.
    pub fn inverse_perms(&self) -> Vec<Vec<usize>> {
        self.perms
            .iter()
            .map(|p| {
                let mut inv = vec![0; self.n];
                for (c, &r) in p.iter().enumerate() {
                    inv[r] = c;
                }
                inv
            })
            .collect()
    }

    /// Materializes `H`. Weight classes that collide on one row of a column
    /// (a 2-loop) are summed into a single entry.
    pub fn realize(&self) -> SparseMatrix {
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(self.n * self.d());
        for c in 0..self.n {
            let first = entries.len();
            for j in 0..self.d() {
                let r = self.perms[j][c];
                let v = self.value(j, c);
                match entries[first..].iter_mut().find(|e| e.0 == r) {
                    Some(e) => e.2 += v,
                    None => entries.push((r, c, v)),
                }
            }
        }
        SparseMatrix::new(self.n, self.n, entries).expect("entries are deduplicated per column")
    }

    /// `H x` computed directly from the permutation structure.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(LdlcError::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        for (c, &xc) in x.iter().enumerate() {
            for j in 0..self.d() {
                out[self.perms[j][c]] += self.value(j, c) * xc;
            }
        }
        Ok(out)
    }

    pub fn to_file(&self) -> MatrixFile {
        MatrixFile {
            n: self.n,
            d: self.d(),
            seq: self.seq.values().iter().map(|&v| format_exact(v)).collect(),
            perms: self.perms.clone(),
            signs: self.signs.clone(),
            norm_factor: format_exact(self.norm_factor),
            seed: self.seed,
        }
    }

    pub fn from_file(file: &MatrixFile) -> Result<Self> {
        let seq = file
            .seq
            .iter()
            .map(|s| parse_exact(s))
            .collect::<Result<Vec<_>>>()?;
        if seq.len() != file.d || file.perms.len() != file.d {
            return Err(LdlcError::Structure(
                "d does not match seq/perms lengths".into(),
            ));
        }
        let m = Self::new(
            GeneratingSequence::new(seq)?,
            file.perms.clone(),
            file.signs.clone(),
            parse_exact(&file.norm_factor)?,
            file.seed,
        )?;
        if m.n != file.n {
            return Err(LdlcError::DimensionMismatch {
                expected: file.n,
                got: m.n,
            });
        }
        Ok(m)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: MatrixFile = serde_json::from_str(&text)?;
        Self::from_file(&file)
    }
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &v in p {
        if v >= n || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    true
}

/// On-disk form of a magic-square matrix. Real values are decimal strings with
/// 17 significant digits so that a reload is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFile {
    pub n: usize,
    pub d: usize,
    pub seq: Vec<String>,
    pub perms: Vec<Vec<usize>>,
    pub signs: Vec<Vec<i8>>,
    pub norm_factor: String,
    pub seed: u64,
}

/// Formats with 17 significant digits.
pub fn format_exact(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_exact(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| LdlcError::Parse(format!("{s:?}: {e}")))
}

/// `frac(H y)` componentwise.
pub fn syndrome(h: &SparseMatrix, y: &[f64]) -> Result<Vec<f64>> {
    Ok(h.mul_vec(y)?.into_iter().map(frac).collect())
}

/// `ln |det(H)|` by dense LU with partial pivoting; `-inf` for a singular matrix.
pub fn log_abs_det(h: &SparseMatrix) -> Result<f64> {
    if !h.is_square() {
        return Err(LdlcError::InvalidParameter("determinant of non-square matrix".into()));
    }
    if h.n_rows() > DENSE_CAP {
        return Err(LdlcError::TooLarge {
            n: h.n_rows(),
            cap: DENSE_CAP,
        });
    }
    Ok(dense_log_abs_det(h.to_dense()))
}

pub(crate) fn dense_log_abs_det(a: DMatrix<f64>) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return f64::NEG_INFINITY;
    }
    let n = a.nrows();
    let lu = a.lu();
    let u = lu.u();
    let tiny = 1e-13 * scale;
    let mut acc = 0.0;
    for i in 0..n {
        let p = u[(i, i)].abs();
        if p <= tiny {
            return f64::NEG_INFINITY;
        }
        acc += p.ln();
    }
    acc
}

/// Dense `G = H^-1`.
pub fn dense_generator(m: &MagicSquareLdlc) -> Result<DMatrix<f64>> {
    if m.n() > DENSE_CAP {
        return Err(LdlcError::TooLarge {
            n: m.n(),
            cap: DENSE_CAP,
        });
    }
    m.realize().to_dense().try_inverse().ok_or(LdlcError::Singular)
}

/// Rescales `norm_factor` so that `|det(H)| = 1`, unless the `n`-th root of
/// the determinant is already within [`DEFAULT_NORMALIZE_SKIP_TOL`] of one.
pub fn normalize_determinant(m: &MagicSquareLdlc) -> Result<MagicSquareLdlc> {
    normalize_determinant_with_tol(m, DEFAULT_NORMALIZE_SKIP_TOL)
}

pub fn normalize_determinant_with_tol(m: &MagicSquareLdlc, skip_tol: f64) -> Result<MagicSquareLdlc> {
    if m.n() > DENSE_CAP {
        log::warn!(
            "n = {} exceeds the dense cap; determinant normalization skipped",
            m.n()
        );
        return Ok(m.clone());
    }
    let ld = log_abs_det(&m.realize())?;
    if ld == f64::NEG_INFINITY {
        return Err(LdlcError::Singular);
    }
    let root = (ld / m.n() as f64).exp();
    if (root - 1.0).abs() < skip_tol {
        return Ok(m.clone());
    }
    Ok(m.clone().with_norm_factor(m.norm_factor() / root))
}

/// Noise variance at `gap_db` dB below the unconstrained-channel threshold
/// `1/(2 pi e)` of a unit-determinant lattice.
pub fn sigma2_from_capacity_gap(gap_db: f64) -> f64 {
    let threshold = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
    threshold * 10f64.powf(-gap_db / 10.0)
}

/// Inverse of [`sigma2_from_capacity_gap`].
pub fn capacity_gap_db(sigma2: f64) -> f64 {
    let threshold = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::E);
    10.0 * (threshold / sigma2).log10()
}

/// The 6x6, degree-3 magic-square example with sequence `{1, 0.8, 0.5}`.
pub fn example_6x6_rows() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, -0.8, 0.0, -0.5, 1.0, 0.0],
        vec![0.8, 0.0, 0.0, 1.0, 0.0, -0.5],
        vec![0.0, 0.5, 1.0, 0.0, 0.8, 0.0],
        vec![0.0, 0.0, -0.5, -0.8, 0.0, 1.0],
        vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.8],
        vec![0.5, -1.0, -0.8, 0.0, 0.0, 0.0],
    ]
}

/// The 6x6 example as a magic-square code (unnormalized).
pub fn example_6x6() -> MagicSquareLdlc {
    let seq = GeneratingSequence::new(vec![1.0, 0.8, 0.5]).expect("valid sequence");
    MagicSquareLdlc::from_dense(&example_6x6_rows(), seq).expect("valid magic square")
}

/// The 6x6 example with four off-pivot signs flipped so that its Jacobi
/// iteration matrix is contractive (spectral radius about 0.856; the
/// original's is about 1.014).
pub fn example_6x6_contractive_rows() -> Vec<Vec<f64>> {
    let mut rows = example_6x6_rows();
    for (r, c) in [(1, 5), (2, 1), (2, 4), (3, 2)] {
        rows[r][c] = -rows[r][c];
    }
    rows
}

pub fn example_6x6_contractive() -> MagicSquareLdlc {
    let seq = GeneratingSequence::new(vec![1.0, 0.8, 0.5]).expect("valid sequence");
    MagicSquareLdlc::from_dense(&example_6x6_contractive_rows(), seq).expect("valid magic square")
}
