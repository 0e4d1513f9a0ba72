//! Convergence analytics for magic-square codes.
//!
//! Covers the Gaussian variance recursion and its closed-form bounds, the
//! mean-error iteration matrices `H~` (narrow messages) and `F` (wide
//! messages), spectral radius estimation, the `W` decision matrix, and an
//! exhaustive nearest-lattice-point oracle for tiny dimensions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LdlcError, Result};
use crate::lattice::{dense_generator, GeneratingSequence, MagicSquareLdlc, SparseMatrix, DENSE_CAP};

/// Iterates of the per-weight-class variance recursion plus the two closed-form
/// envelopes `U1(t) = s2 (1-a) / (1 - a^(t+1))` and `U2(t) = s2 a^t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceTrajectory {
    pub sigma2: f64,
    pub alpha: f64,
    /// `variances[t][i]` for weight class `i` after `t` iterations.
    pub variances: Vec<Vec<f64>>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

impl VarianceTrajectory {
    pub fn steps(&self) -> usize {
        self.variances.len() - 1
    }

    /// Variance of weight class `i` over time.
    pub fn class(&self, i: usize) -> Vec<f64> {
        self.variances.iter().map(|v| v[i]).collect()
    }
}

/// Runs `steps` iterations of
/// `1/V_i(t+1) = 1/s2 + sum_{m != i} h_m^2 / sum_{j != m} h_j^2 V_j(t)`
/// from `V_i(0) = s2`.
pub fn variance_recursion(
    seq: &GeneratingSequence,
    sigma2: f64,
    steps: usize,
) -> Result<VarianceTrajectory> {
    if !(sigma2 > 0.0) {
        return Err(LdlcError::InvalidParameter("sigma2 must be positive".into()));
    }
    if steps == 0 {
        return Err(LdlcError::InvalidParameter("steps must be at least 1".into()));
    }
    let h2: Vec<f64> = seq.values().iter().map(|h| h * h).collect();
    let d = h2.len();
    let alpha = seq.alpha();
    let mut variances = vec![vec![sigma2; d]];
    for _ in 0..steps {
        let v = variances.last().expect("non-empty");
        // summed explicitly: subtracting from the full sum cancels badly once
        // the narrow variances are many orders below the wide one
        let excluding: Vec<f64> = (0..d)
            .map(|m| (0..d).filter(|&j| j != m).map(|j| h2[j] * v[j]).sum())
            .collect();
        let next = (0..d)
            .map(|i| {
                let mut inv = 1.0 / sigma2;
                for m in (0..d).filter(|&m| m != i) {
                    inv += h2[m] / excluding[m];
                }
                1.0 / inv
            })
            .collect();
        variances.push(next);
    }
    let u1 = (0..=steps)
        .map(|t| {
            if alpha == 1.0 {
                sigma2 / (t as f64 + 1.0)
            } else {
                sigma2 * (1.0 - alpha) / (1.0 - alpha.powi(t as i32 + 1))
            }
        })
        .collect();
    let u2 = (0..=steps).map(|t| sigma2 * alpha.powi(t as i32)).collect();
    Ok(VarianceTrajectory {
        sigma2,
        alpha,
        variances,
        u1,
        u2,
    })
}

/// `U1` by its defining recursion `1/U1(t+1) = 1/s2 + a / U1(t)`, `U1(0) = s2`.
pub fn u1_by_recursion(alpha: f64, sigma2: f64, steps: usize) -> Vec<f64> {
    let mut u = vec![sigma2];
    for _ in 0..steps {
        let prev = *u.last().expect("non-empty");
        u.push(1.0 / (1.0 / sigma2 + alpha / prev));
    }
    u
}

fn structure_err(e: LdlcError) -> LdlcError {
    match e {
        LdlcError::InvalidParameter(s) => LdlcError::Structure(s),
        other => other,
    }
}

/// Row `i` of `H~` is the row of `H` holding the `h_1` entry of column `i`,
/// divided by that entry, with the diagonal removed.
pub fn build_h_tilde(m: &MagicSquareLdlc) -> Result<SparseMatrix> {
    let n = m.n();
    let inv = m.inverse_perms();
    let mut entries = Vec::with_capacity(n * (m.d() - 1));
    for i in 0..n {
        let r = m.row_of(0, i);
        let pivot = m.value(0, i);
        for (j, inv_j) in inv.iter().enumerate().skip(1) {
            let c = inv_j[r];
            if c == i {
                return Err(LdlcError::Structure(format!(
                    "column {i} holds two weights on row {r}"
                )));
            }
            entries.push((i, c, m.value(j, c) / pivot));
        }
    }
    SparseMatrix::new(n, n, entries).map_err(structure_err)
}

/// `F` by scanning the realized matrix: `F[k][l] = H[r][k] / H[r][l]` where
/// `|H[r][l]| = h_1` and `H[r][k] != 0`, `k != l`.
pub fn build_f(m: &MagicSquareLdlc) -> Result<SparseMatrix> {
    let h = m.realize();
    let lead = m.seq().h(0) * m.norm_factor();
    let n = m.n();
    let mut entries = Vec::with_capacity(n * (m.d() - 1));
    for r in 0..n {
        let leads: Vec<(usize, f64)> = h
            .row(r)
            .filter(|(_, v)| (v.abs() - lead).abs() <= 1e-12 * lead)
            .collect();
        // with h_1 = h_2 several entries qualify; weight class 0 decides
        let (l, hl) = if leads.len() == 1 {
            leads[0]
        } else {
            let l = m.inverse_perms()[0][r];
            (l, h.get(r, l))
        };
        for (k, hk) in h.row(r) {
            if k != l {
                entries.push((k, l, hk / hl));
            }
        }
    }
    SparseMatrix::new(n, n, entries).map_err(structure_err)
}

/// `F` row by row: for column `k` of `H` and each class `i >= 2`, find the
/// row `r_i` holding `h_i` and the column `l_i` holding `h_1` in that row.
pub fn build_f_by_rows(m: &MagicSquareLdlc) -> Result<SparseMatrix> {
    let n = m.n();
    let inv = m.inverse_perms();
    let mut entries = Vec::with_capacity(n * (m.d() - 1));
    for k in 0..n {
        for i in 1..m.d() {
            let r = m.row_of(i, k);
            let l = inv[0][r];
            if l == k {
                return Err(LdlcError::Structure(format!(
                    "column {k} holds two weights on row {r}"
                )));
            }
            entries.push((k, l, m.value(i, k) / m.value(0, l)));
        }
    }
    SparseMatrix::new(n, n, entries).map_err(structure_err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 20_000,
            restarts: 10,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub radius: f64,
    /// Change of the estimate over the last check block.
    pub achieved_tol: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Dominant eigenvalue magnitude by power iteration.
///
/// The estimate is the geometric-mean growth of `|A^k x|` over the second half
/// of the run, which also settles for complex-conjugate dominant pairs where
/// the per-step ratio oscillates. The largest estimate over all restarts wins.
pub fn spectral_radius(a: &SparseMatrix, opts: &SpectralOptions) -> Result<SpectralEstimate> {
    if !a.is_square() {
        return Err(LdlcError::InvalidParameter(
            "spectral radius of non-square matrix".into(),
        ));
    }
    if opts.restarts == 0 || opts.max_iter < 2 {
        return Err(LdlcError::InvalidParameter(
            "need at least one restart and two iterations".into(),
        ));
    }
    let runs: Vec<SpectralEstimate> = (0..opts.restarts)
        .into_par_iter()
        .map(|k| power_run(a, opts, k as u64))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.radius > a.radius { b } else { a })
        .expect("at least one restart");
    if !best.converged {
        log::warn!(
            "power iteration stopped at {} iterations, estimate {} +- {:e}",
            best.iterations,
            best.radius,
            best.achieved_tol
        );
    }
    Ok(best)
}

fn power_run(a: &SparseMatrix, opts: &SpectralOptions, stream: u64) -> SpectralEstimate {
    const BLOCK: usize = 64;
    let n = a.n_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = l2(&x);
    x.iter_mut().for_each(|v| *v /= norm);

    // cumulative[k] = ln |A^k x0|
    let mut cumulative = vec![0.0];
    let mut prev_est = f64::NAN;
    let mut delta = f64::INFINITY;
    let estimate = |cum: &[f64]| {
        let k = cum.len() - 1;
        let h = k / 2;
        ((cum[k] - cum[h]) / (k - h) as f64).exp()
    };
    for it in 1..=opts.max_iter {
        let y = a.mul_vec(&x).expect("square matrix");
        let g = l2(&y);
        if g == 0.0 || !g.is_finite() {
            return SpectralEstimate {
                radius: 0.0,
                achieved_tol: 0.0,
                iterations: it,
                converged: g == 0.0,
            };
        }
        cumulative.push(cumulative[it - 1] + g.ln());
        x = y.into_iter().map(|v| v / g).collect();
        if it % BLOCK == 0 && it >= 2 * BLOCK {
            let est = estimate(&cumulative);
            delta = (est - prev_est).abs();
            prev_est = est;
            if delta <= opts.tol * est.max(opts.tol) {
                return SpectralEstimate {
                    radius: est,
                    achieved_tol: delta,
                    iterations: it,
                    converged: true,
                };
            }
        }
    }
    SpectralEstimate {
        radius: estimate(&cumulative),
        achieved_tol: delta,
        iterations: opts.max_iter,
        converged: false,
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn require_dense(n: usize) -> Result<()> {
    if n > DENSE_CAP {
        return Err(LdlcError::TooLarge { n, cap: DENSE_CAP });
    }
    Ok(())
}

/// The symmetric decision matrix
/// `W = (d+1-a) I - 2(1-a)(I+F)^-1 + (1-a)(I+F)^-T ((d-1)^2 I - F^T F)(I+F)^-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WMatrix {
    pub w: DMatrix<f64>,
    /// `max |W - W^T|` before symmetrization.
    pub asymmetry: f64,
}

impl WMatrix {
    pub fn quadratic_form(&self, q: &[f64]) -> f64 {
        let q = DVector::from_column_slice(q);
        q.dot(&(&self.w * &q))
    }
}

pub fn w_matrix(m: &MagicSquareLdlc) -> Result<WMatrix> {
    require_dense(m.n())?;
    w_from_f(&build_f(m)?.to_dense(), m.d(), m.seq().alpha())
}

pub(crate) fn w_from_f(f: &DMatrix<f64>, d: usize, alpha: f64) -> Result<WMatrix> {
    let n = f.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let inv = (&eye + f).try_inverse().ok_or(LdlcError::Singular)?;
    let dm1 = (d as f64 - 1.0).powi(2);
    let middle = &eye * dm1 - f.transpose() * f;
    let raw = &eye * (d as f64 + 1.0 - alpha) - &inv * (2.0 * (1.0 - alpha))
        + inv.transpose() * middle * &inv * (1.0 - alpha);
    let asymmetry = (&raw - raw.transpose()).amax();
    let w = (&raw + raw.transpose()) * 0.5;
    Ok(WMatrix { w, asymmetry })
}

/// Dense `G` and `W` for repeated scoring.
#[derive(Debug, Clone)]
pub struct QuadraticScorer {
    generator: DMatrix<f64>,
    w: WMatrix,
}

impl QuadraticScorer {
    pub fn new(m: &MagicSquareLdlc) -> Result<Self> {
        Ok(Self {
            generator: dense_generator(m)?,
            w: w_matrix(m)?,
        })
    }

    pub fn w(&self) -> &WMatrix {
        &self.w
    }

    /// `(G b - y)^T W (G b - y)`.
    pub fn score(&self, b: &[i64], y: &[f64]) -> Result<f64> {
        let n = self.generator.nrows();
        for len in [b.len(), y.len()] {
            if len != n {
                return Err(LdlcError::DimensionMismatch { expected: n, got: len });
            }
        }
        let bv = DVector::from_iterator(n, b.iter().map(|&v| v as f64));
        let e = &self.generator * bv - DVector::from_column_slice(y);
        Ok(self.w.quadratic_form(e.as_slice()))
    }
}

pub fn quadratic_score(m: &MagicSquareLdlc, b: &[i64], y: &[f64]) -> Result<f64> {
    QuadraticScorer::new(m)?.score(b, y)
}

pub const ML_ORACLE_BUDGET: f64 = 1e8;
pub const ML_ORACLE_MAX_N: usize = 10;

/// Exhaustive `argmin_b |G b - y|^2` over `b` in `{-radius..radius}^n`.
///
/// Ties go to the lexicographically smallest `b`.
pub fn ml_oracle(m: &MagicSquareLdlc, y: &[f64], radius: u32) -> Result<Vec<i64>> {
    ml_oracle_dense(&dense_generator(m)?, y, radius)
}

pub fn ml_oracle_dense(g: &DMatrix<f64>, y: &[f64], radius: u32) -> Result<Vec<i64>> {
    let n = g.nrows();
    if y.len() != n {
        return Err(LdlcError::DimensionMismatch { expected: n, got: y.len() });
    }
    let points = (2.0 * radius as f64 + 1.0).powi(n as i32);
    if n > ML_ORACLE_MAX_N || points > ML_ORACLE_BUDGET {
        return Err(LdlcError::BudgetExceeded {
            points,
            budget: ML_ORACLE_BUDGET,
        });
    }
    let cols: Vec<Vec<f64>> = (0..n).map(|c| g.column(c).iter().copied().collect()).collect();
    let r = radius as i64;
    let residual: Vec<f64> = y.iter().map(|v| -v).collect();

    let (best_dist, best) = (-r..=r)
        .into_par_iter()
        .map(|b0| {
            let mut b = vec![0i64; n];
            b[0] = b0;
            let res0: Vec<f64> = residual
                .iter()
                .zip(&cols[0])
                .map(|(e, c)| e + b0 as f64 * c)
                .collect();
            let mut best = (f64::INFINITY, b.clone());
            search(&cols, &res0, 1, r, &mut b, &mut best);
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, Vec::new()), |acc, cand| {
            if cand.0 < acc.0 {
                cand
            } else {
                acc
            }
        });
    debug_assert!(best_dist.is_finite());
    Ok(best)
}

fn search(
    cols: &[Vec<f64>],
    res: &[f64],
    depth: usize,
    r: i64,
    b: &mut Vec<i64>,
    best: &mut (f64, Vec<i64>),
) {
    if depth == cols.len() {
        let dist: f64 = res.iter().map(|v| v * v).sum();
        if dist < best.0 {
            best.0 = dist;
            best.1.clone_from(b);
        }
        return;
    }
    let mut next = vec![0.0; res.len()];
    for v in -r..=r {
        for ((o, e), c) in next.iter_mut().zip(res).zip(&cols[depth]) {
            *o = e + v as f64 * c;
        }
        b[depth] = v;
        search(cols, &next, depth + 1, r, b, best);
    }
    b[depth] = 0;
}

/// Iterates of the linearized mean-error recursions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanErrorTrajectories {
    /// `e(t+1) = -H~ e(t)`.
    pub narrow: Vec<Vec<f64>>,
    /// `e(t+1) = -F e(t) + (1-a) q`.
    pub wide: Vec<Vec<f64>>,
}

/// Runs both recursions for `steps` iterations from `e0`; `q` is the noise
/// offset `y - G b` driving the wide recursion.
pub fn mean_error_recursions(
    m: &MagicSquareLdlc,
    e0: &[f64],
    q: &[f64],
    steps: usize,
) -> Result<MeanErrorTrajectories> {
    let n = m.n();
    for len in [e0.len(), q.len()] {
        if len != n {
            return Err(LdlcError::DimensionMismatch { expected: n, got: len });
        }
    }
    let h_tilde = build_h_tilde(m)?;
    let f = build_f(m)?;
    let gain = 1.0 - m.seq().alpha();
    let mut narrow = vec![e0.to_vec()];
    let mut wide = vec![e0.to_vec()];
    for _ in 0..steps {
        let nx = h_tilde.mul_vec(narrow.last().expect("non-empty"))?;
        narrow.push(nx.into_iter().map(|v| -v).collect());
        let wx = f.mul_vec(wide.last().expect("non-empty"))?;
        wide.push(wx.iter().zip(q).map(|(fv, qv)| -fv + gain * qv).collect());
    }
    Ok(MeanErrorTrajectories { narrow, wide })
}

/// Steady state `(1-a)(I+F)^-1 q` of the wide recursion.
pub fn wide_fixed_point(m: &MagicSquareLdlc, q: &[f64]) -> Result<Vec<f64>> {
    require_dense(m.n())?;
    let f = build_f(m)?.to_dense();
    let n = m.n();
    if q.len() != n {
        return Err(LdlcError::DimensionMismatch { expected: n, got: q.len() });
    }
    let a = DMatrix::<f64>::identity(n, n) + f;
    let sol = a
        .lu()
        .solve(&DVector::from_column_slice(q))
        .ok_or(LdlcError::Singular)?;
    let gain = 1.0 - m.seq().alpha();
    Ok(sol.iter().map(|v| gain * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::example_6x6;
    use crate::matrix_gen::generate;
    use proptest::prelude::*;

    fn seq(v: &[f64]) -> GeneratingSequence {
        GeneratingSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn equal_weights_give_harmonic_decay() {
        let s2 = 0.3;
        let tr = variance_recursion(&seq(&[1.0; 4]), s2, 30).unwrap();
        for (t, v) in tr.variances.iter().enumerate() {
            for &vi in v {
                assert!((vi - s2 / (t as f64 + 1.0)).abs() <= 1e-15 * s2);
            }
        }
    }

    #[test]
    fn three_weight_example_matches_hand_transcription() {
        // The three displayed update equations for {1, 0.8, 0.5}, written out.
        let s2 = 0.05;
        let (mut v1, mut v2, mut v3) = (s2, s2, s2);
        let tr = variance_recursion(&seq(&[1.0, 0.8, 0.5]), s2, 10).unwrap();
        for t in 1..=10 {
            let n1 = 1.0 / (1.0 / s2 + 0.64 / (v1 + 0.25 * v3) + 0.25 / (v1 + 0.64 * v2));
            let n2 = 1.0 / (1.0 / s2 + 1.0 / (0.64 * v2 + 0.25 * v3) + 0.25 / (v1 + 0.64 * v2));
            let n3 = 1.0 / (1.0 / s2 + 1.0 / (0.64 * v2 + 0.25 * v3) + 0.64 / (v1 + 0.25 * v3));
            (v1, v2, v3) = (n1, n2, n3);
            let got = &tr.variances[t];
            for (g, w) in got.iter().zip([v1, v2, v3]) {
                assert!((g - w).abs() <= 1e-15 * w.max(1e-300) * 4.0, "t={t}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn u1_closed_form_matches_recursion() {
        let tr = variance_recursion(&seq(&[1.0, 0.6, 0.5, 0.4, 0.3, 0.3, 0.2]), 1.0, 200).unwrap();
        let rec = u1_by_recursion(tr.alpha, 1.0, 200);
        for (x, y) in tr.u1.iter().zip(&rec) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn variance_bounds_hold(
            tail in prop::collection::vec(0.05f64..0.6, 1..6),
            s2 in 0.001f64..1.0,
        ) {
            let mut v = vec![1.0];
            let mut t = tail.clone();
            t.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v.extend(t);
            let s = seq(&v);
            prop_assume!(s.alpha() < 1.0);
            let tr = variance_recursion(&s, s2, 200).unwrap();
            let floor = s2 * (1.0 - tr.alpha);
            // beyond the normal range of f64 the bound is checked against rounding noise
            for t in (0..=200).take_while(|&t| tr.u2[t] > 1e-280) {
                let vt = &tr.variances[t];
                prop_assert!(vt[0] >= floor * (1.0 - 1e-12));
                prop_assert!(vt[0] >= tr.u1[t] * (1.0 - 1e-12));
                for &vi in &vt[1..] {
                    prop_assert!(vi <= tr.u2[t] * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn narrow_classes_decay_at_rate_alpha() {
        // onset of the asymptotic regime grows with alpha
        for (d, onset) in [(3, 50), (5, 150), (7, 150)] {
            let s = GeneratingSequence::dithered_primes(d).unwrap();
            let tr = variance_recursion(&s, 0.01, 600).unwrap();
            for i in 1..d {
                let c = tr.class(i);
                for t in onset..600 {
                    let ratio = c[t + 1] / c[t];
                    assert!((ratio - tr.alpha).abs() < 1e-6, "d {d} class {i} t {t}: {ratio}");
                }
            }
            let wide = tr.class(0);
            let floor = 0.01 * (1.0 - tr.alpha);
            assert!((wide[600] - floor).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_one_matrices_are_zero() {
        let s = seq(&[1.0]);
        let m = MagicSquareLdlc::new(s, vec![vec![2, 0, 1]], vec![vec![1, -1, 1]], 1.0, 0).unwrap();
        assert_eq!(build_h_tilde(&m).unwrap().nnz(), 0);
        assert_eq!(build_f(&m).unwrap().nnz(), 0);
        assert_eq!(build_f_by_rows(&m).unwrap().nnz(), 0);
    }

    #[test]
    fn h_tilde_of_printed_example() {
        let m = example_6x6();
        let ht = build_h_tilde(&m).unwrap();
        let rows = crate::lattice::example_6x6_rows();
        // hand construction: find the unit entry of column i, divide its row by it
        for i in 0..6 {
            let r = (0..6).find(|&r| rows[r][i].abs() == 1.0).unwrap();
            for c in 0..6 {
                let want = if c == i { 0.0 } else { rows[r][c] / rows[r][i] };
                assert_eq!(ht.get(i, c), want);
            }
            assert_eq!(ht.row(i).count(), 2);
        }
    }

    #[test]
    fn all_ones_eigenvector_without_signs() {
        let (m, _) = generate(50, &seq(&[1.0, 0.6, 0.3]), 2).unwrap();
        let pos = MagicSquareLdlc::new(
            m.seq().clone(),
            m.perms().to_vec(),
            vec![vec![1; 50]; 3],
            1.0,
            0,
        )
        .unwrap();
        let ht = build_h_tilde(&pos).unwrap();
        let y = ht.mul_vec(&[1.0; 50]).unwrap();
        for v in y {
            assert!((v - 0.9).abs() < 1e-12);
        }
        let rho = spectral_radius(&ht, &SpectralOptions::default()).unwrap();
        assert!((rho.radius - 0.9).abs() < 1e-3);
    }

    /// Random signed permutations without 2-loops; 4-loops are allowed, which
    /// is all the `F` constructions need.
    fn random_code(n: usize, d: usize, seed: u64) -> MagicSquareLdlc {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perms: Vec<Vec<usize>> = Vec::new();
        while perms.len() < d {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            if perms.iter().all(|q| q.iter().zip(&p).all(|(a, b)| a != b)) {
                perms.push(p);
            }
        }
        let signs = (0..d)
            .map(|_| (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
            .collect();
        MagicSquareLdlc::new(GeneratingSequence::dithered_primes(d).unwrap(), perms, signs, 1.0, seed)
            .unwrap()
    }

    #[test]
    fn f_constructions_agree() {
        for d in [3, 5, 7] {
            for seed in 0..50 {
                let m = random_code(100, d, seed);
                let a = build_f(&m).unwrap();
                let b = build_f_by_rows(&m).unwrap();
                assert_eq!(a.to_rows(), b.to_rows(), "d={d} seed={seed}");
                for k in 0..100 {
                    assert_eq!(a.row(k).count(), d - 1);
                }
                assert_eq!(a.to_rows(), build_h_tilde(&m).unwrap().transpose().to_rows());
            }
        }
    }

    #[test]
    fn spectral_radius_simple_cases() {
        let opts = SpectralOptions::default();
        let diag = SparseMatrix::diagonal(&[0.5, -0.9]).unwrap();
        assert!((spectral_radius(&diag, &opts).unwrap().radius - 0.9).abs() < 1e-3);

        let nil = SparseMatrix::new(3, 3, vec![(0, 1, 1.0), (0, 2, 2.0), (1, 2, 3.0)]).unwrap();
        assert!(spectral_radius(&nil, &opts).unwrap().radius <= opts.tol);

        // rotation scaled by 0.8: complex pair of modulus 0.8
        let rot = SparseMatrix::new(
            3,
            3,
            vec![(0, 0, 0.0), (0, 1, -0.8), (1, 0, 0.8), (2, 2, 0.3)],
        )
        .unwrap();
        assert!((spectral_radius(&rot, &opts).unwrap().radius - 0.8).abs() < 1e-3);
    }

    #[test]
    fn w_for_zero_f_is_scalar() {
        let f = DMatrix::zeros(4, 4);
        let (d, a) = (3, 0.4);
        let w = w_from_f(&f, d, a).unwrap();
        let want = (d as f64 + 1.0 - a) - 2.0 * (1.0 - a) + (1.0 - a) * ((d - 1) as f64).powi(2);
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { want } else { 0.0 };
                assert!((w.w[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    /// Gauss-Jordan inverse with partial pivoting, independent of nalgebra.
    fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let p = (col..n)
                .max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap())
                .unwrap();
            m.swap(col, p);
            let pv = m[col][col];
            for v in m[col].iter_mut() {
                *v /= pv;
            }
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    let pivot_row = m[col].clone();
                    for (v, pr) in m[r].iter_mut().zip(pivot_row) {
                        *v -= f * pr;
                    }
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
            .collect()
    }

    fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        (0..n).map(|i| (0..n).map(|j| a[j][i]).collect()).collect()
    }

    #[test]
    fn w_matches_independent_evaluation_on_example() {
        let m = example_6x6();
        let f = build_f(&m).unwrap().to_rows();
        let n = 6;
        let a = m.seq().alpha();
        let ipf: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| f[i][j] + if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let inv = gauss_jordan_inverse(&ipf);
        let ftf = matmul(&transpose(&f), &f);
        let mid: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 4.0 } else { 0.0 } - ftf[i][j]).collect())
            .collect();
        let tail = matmul(&matmul(&transpose(&inv), &mid), &inv);
        let w = w_matrix(&m).unwrap();
        for i in 0..n {
            for j in 0..n {
                let raw = |i: usize, j: usize| {
                    (if i == j { 4.0 - a } else { 0.0 }) - 2.0 * (1.0 - a) * inv[i][j]
                        + (1.0 - a) * tail[i][j]
                };
                let want = 0.5 * (raw(i, j) + raw(j, i));
                assert!((w.w[(i, j)] - want).abs() < 1e-10, "({i},{j})");
            }
        }
        // frozen regression values
        assert!((w.w[(0, 0)] - W_EXAMPLE_00).abs() < 1e-9 * W_EXAMPLE_00, "{}", w.w[(0, 0)]);
        assert!((w.w[(2, 5)] - W_EXAMPLE_25).abs() < 1e-9 * W_EXAMPLE_25, "{}", w.w[(2, 5)]);
    }

    const W_EXAMPLE_00: f64 = 1.06848310375494884e3;
    const W_EXAMPLE_25: f64 = 6.74708515084986828e1;

    #[test]
    fn w_is_positive_definite() {
        let (m, _) = generate(60, &GeneratingSequence::dithered_primes(3).unwrap(), 11).unwrap();
        let w = w_matrix(&m).unwrap();
        assert!(w.asymmetry.is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let q: Vec<f64> = (0..60).map(|_| StandardNormal.sample(&mut rng)).collect();
            assert!(w.quadratic_form(&q) > 0.0);
        }
    }

    #[test]
    fn score_zero_on_lattice_points_and_translation_invariant() {
        let m = example_6x6();
        let sc = QuadraticScorer::new(&m).unwrap();
        let g = dense_generator(&m).unwrap();
        let b = [1i64, -2, 0, 3, 1, -1];
        let gb: Vec<f64> = (&g * DVector::from_iterator(6, b.iter().map(|&v| v as f64)))
            .iter()
            .copied()
            .collect();
        assert!(sc.score(&b, &gb).unwrap().abs() < 1e-18);
        let y: Vec<f64> = gb.iter().enumerate().map(|(i, v)| v + 0.01 * i as f64).collect();
        let s1 = sc.score(&b, &y).unwrap();
        let shift = [2i64, 0, -1, 0, 1, 1];
        let gs = &g * DVector::from_iterator(6, shift.iter().map(|&v| v as f64));
        let y2: Vec<f64> = y.iter().zip(gs.iter()).map(|(a, b)| a + b).collect();
        let b2: Vec<i64> = b.iter().zip(shift).map(|(a, b)| a + b).collect();
        assert!((sc.score(&b2, &y2).unwrap() - s1).abs() < 1e-10);
    }

    #[test]
    fn oracle_basics() {
        let m = MagicSquareLdlc::new(seq(&[1.0]), vec![vec![0]], vec![vec![1]], 1.0, 0).unwrap();
        assert_eq!(ml_oracle(&m, &[1.4], 3).unwrap(), vec![1]);
        // tie at 0.5 goes to the smaller integer
        assert_eq!(ml_oracle(&m, &[0.5], 3).unwrap(), vec![0]);

        let ex = example_6x6();
        let g = dense_generator(&ex).unwrap();
        let b = [2i64, -1, 0, 1, -3, 2];
        let y = &g * DVector::from_iterator(6, b.iter().map(|&v| v as f64));
        assert_eq!(ml_oracle(&ex, y.as_slice(), 3).unwrap(), b.to_vec());
        assert!(matches!(
            ml_oracle(&ex, y.as_slice(), 30),
            Err(LdlcError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn oracle_matches_plain_enumeration_in_two_dims() {
        let m = MagicSquareLdlc::new(
            seq(&[1.0, 0.7]),
            vec![vec![0, 1], vec![1, 0]],
            vec![vec![1, 1], vec![-1, 1]],
            1.0,
            0,
        )
        .unwrap();
        let g = dense_generator(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let y: Vec<f64> = (0..2)
                .map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>();
            let mut best = (f64::INFINITY, vec![0, 0]);
            for b0 in -6..=6i64 {
                for b1 in -6..=6i64 {
                    let x0 = g[(0, 0)] * b0 as f64 + g[(0, 1)] * b1 as f64 - y[0];
                    let x1 = g[(1, 0)] * b0 as f64 + g[(1, 1)] * b1 as f64 - y[1];
                    let dist = x0 * x0 + x1 * x1;
                    if dist < best.0 {
                        best = (dist, vec![b0, b1]);
                    }
                }
            }
            assert_eq!(ml_oracle(&m, &y, 6).unwrap(), best.1);
        }
    }

    #[test]
    fn mean_error_recursions_behave() {
        let (m, _) = generate(200, &GeneratingSequence::dithered_primes(5).unwrap(), 3).unwrap();
        let zero = vec![0.0; 200];
        let tr = mean_error_recursions(&m, &zero, &zero, 20).unwrap();
        assert!(tr.narrow.iter().chain(&tr.wide).all(|v| v.iter().all(|&x| x == 0.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e0: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let tr = mean_error_recursions(&m, &e0, &q, 3000).unwrap();

        let rho = spectral_radius(&build_h_tilde(&m).unwrap(), &SpectralOptions::default())
            .unwrap()
            .radius;
        let norms: Vec<f64> = tr.narrow.iter().map(|v| l2(v)).collect();
        let slope = ((norms[1500].ln() - norms[1000].ln()) / 500.0).exp();
        assert!((slope - rho).abs() < 5e-3, "slope {slope} rho {rho}");

        let fixed = wide_fixed_point(&m, &q).unwrap();
        let last = tr.wide.last().unwrap();
        for (a, b) in last.iter().zip(&fixed) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
