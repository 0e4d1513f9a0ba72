//! Iterative message-passing decoder.
//!
//! Each variable node owns a grid of the configured profile centred on its
//! channel observation; every message destined for that node (and every
//! message it sends) lives on that grid. Messages are stored flat:
//! variable-to-check message of column `c`, class `j` at slot `c*d + j`;
//! check-to-variable message of row `r`, class `j` at slot `r*d + j`. Both
//! phases therefore write one contiguous chunk per node.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdlcError, Result};
use crate::lattice::{frac, nearest_integer, MagicSquareLdlc, SparseMatrix};
use crate::pdf::{
    argmax_index, convolve_direct, expand, fold_to_period, gaussian_samples, moments,
    stretch_into, widen, GridSpec, PdfGrid, PeriodicConvolver, PeriodicPdf, Product,
    QuantizedPdf,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub max_iterations: usize,
    pub grid: GridSpec,
    /// Widen check messages by one sample on each side before products.
    pub widen: bool,
    /// Stop once `b` has been stable this many iterations and the syndrome is small.
    pub early_stop: Option<usize>,
    pub syndrome_tol: f64,
    /// Record message variances every iteration instead of every tenth.
    pub diagnostics: bool,
}

impl Default for DecoderParams {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            grid: GridSpec::standard(),
            widen: true,
            early_stop: Some(4),
            syndrome_tol: 0.1,
            diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    ZeroProduct,
    MaxIterations,
}

/// Variances of the variable-to-check messages of each weight class,
/// averaged over columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceSnapshot {
    pub iteration: usize,
    /// Variance of the dominant mixture component: moments taken within half
    /// a unit of the peak. Components of one message share a variance and sit
    /// at least one unit apart.
    pub by_class: Vec<f64>,
    /// Variance of the whole message, including the spread between components.
    pub mixture_by_class: Vec<f64>,
    /// Relative spread (max/min - 1) of the per-edge variances in each class.
    pub spread_by_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeResult {
    pub b_hat: Vec<i64>,
    pub x_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub failure: Option<FailureReason>,
    pub max_syndrome: f64,
    pub variances: Vec<VarianceSnapshot>,
    pub forward_ffts: u64,
    pub inverse_ffts: u64,
    /// Bytes held by the two message arrays.
    pub message_bytes: usize,
}

/// All messages of one decode in progress.
#[derive(Debug, Clone)]
pub struct DecoderState {
    y: Vec<f64>,
    sigma2: f64,
    grids: Vec<PdfGrid>,
    channel: Vec<f64>,
    var_to_check: Vec<f64>,
    check_to_var: Vec<f64>,
    iteration: usize,
    check_messages_ready: bool,
}

impl DecoderState {
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn grid(&self, c: usize) -> &PdfGrid {
        &self.grids[c]
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn observation(&self) -> &[f64] {
        &self.y
    }

    fn len(&self) -> usize {
        self.grids[0].length()
    }

    fn slot(buf: &[f64], slot: usize, len: usize) -> &[f64] {
        &buf[slot * len..(slot + 1) * len]
    }

    pub fn message_bytes(&self) -> usize {
        (self.var_to_check.len() + self.check_to_var.len()) * std::mem::size_of::<f64>()
    }
}

/// Stops once the last `window` hard decisions agree and every syndrome
/// component of the soft estimate is below `tol` in magnitude.
pub fn early_stop(history: &[Vec<i64>], max_syndrome: f64, window: usize, tol: f64) -> bool {
    if window == 0 || history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    tail.iter().all(|b| b == &tail[0]) && max_syndrome < tol
}

/// A decoder bound to one code and parameter set; reusable across decodes.
pub struct Decoder<'a> {
    code: &'a MagicSquareLdlc,
    h: SparseMatrix,
    inv: Vec<Vec<usize>>,
    params: DecoderParams,
    conv: PeriodicConvolver,
    forward: AtomicU64,
    inverse: AtomicU64,
}

struct VariableOutcome {
    zero: bool,
    x_hat: f64,
}

impl<'a> Decoder<'a> {
    pub fn new(code: &'a MagicSquareLdlc, params: DecoderParams) -> Result<Self> {
        if params.max_iterations == 0 {
            return Err(LdlcError::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(Self {
            code,
            h: code.realize(),
            inv: code.inverse_perms(),
            conv: PeriodicConvolver::new(params.grid.samples_per_unit()),
            params,
            forward: AtomicU64::new(0),
            inverse: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &DecoderParams {
        &self.params
    }

    /// `(forward, inverse)` transforms run so far by this decoder.
    pub fn fft_counts(&self) -> (u64, u64) {
        (
            self.forward.load(Ordering::Relaxed),
            self.inverse.load(Ordering::Relaxed),
        )
    }

    /// State with every variable-to-check message set to the channel Gaussian.
    pub fn init(&self, y: &[f64], sigma2: f64) -> Result<DecoderState> {
        let n = self.code.n();
        if y.len() != n {
            return Err(LdlcError::DimensionMismatch { expected: n, got: y.len() });
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(LdlcError::InvalidParameter(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        let d = self.code.d();
        let spec = self.params.grid;
        let len = spec.length();
        let grids: Vec<PdfGrid> = y.iter().map(|&v| spec.centered_on(v)).collect();
        let mut channel = Vec::with_capacity(n * len);
        for (g, &yc) in grids.iter().zip(y) {
            let mut vals = gaussian_samples(g, yc, sigma2);
            let mass: f64 = vals.iter().sum::<f64>() * spec.delta();
            vals.iter_mut().for_each(|v| *v /= mass);
            channel.extend(vals);
        }
        let mut var_to_check = Vec::with_capacity(n * d * len);
        for c in 0..n {
            for _ in 0..d {
                var_to_check.extend_from_slice(&channel[c * len..(c + 1) * len]);
            }
        }
        Ok(DecoderState {
            y: y.to_vec(),
            sigma2,
            grids,
            channel,
            var_to_check,
            check_to_var: vec![0.0; n * d * len],
            iteration: 0,
            check_messages_ready: false,
        })
    }

    /// Variable-to-check message from column `c` along weight class `j`.
    pub fn var_message(&self, state: &DecoderState, c: usize, j: usize) -> QuantizedPdf {
        let len = state.len();
        let slot = c * self.code.d() + j;
        QuantizedPdf::from_raw(
            state.grids[c],
            DecoderState::slot(&state.var_to_check, slot, len).to_vec(),
        )
    }

    /// Check-to-variable message from row `r` along weight class `j`, on the
    /// destination node's grid.
    pub fn check_message(&self, state: &DecoderState, r: usize, j: usize) -> QuantizedPdf {
        let len = state.len();
        let c = self.inv[j][r];
        let slot = r * self.code.d() + j;
        QuantizedPdf::from_raw(
            state.grids[c],
            DecoderState::slot(&state.check_to_var, slot, len).to_vec(),
        )
    }

    fn expanded_inputs(&self, state: &DecoderState, r: usize) -> Result<Vec<QuantizedPdf>> {
        (0..self.code.d())
            .map(|j| {
                let c = self.inv[j][r];
                expand(&self.var_message(state, c, j), self.code.value(j, c))
            })
            .collect()
    }

    fn count_ffts(&self, forward: usize, inverse: usize) {
        self.forward.fetch_add(forward as u64, Ordering::Relaxed);
        self.inverse.fetch_add(inverse as u64, Ordering::Relaxed);
    }

    fn check_periods(&self, state: &DecoderState, r: usize) -> Result<Vec<PeriodicPdf>> {
        let inputs = self.expanded_inputs(state, r)?;
        let d = inputs.len();
        let periods = self.conv.convolve_excluding_each(&inputs)?;
        if d > 1 {
            self.count_ffts(d, d);
        }
        Ok(periods)
    }

    /// Message from check `r` to the variable holding class `j`: convolve the
    /// other expanded inputs on one unit period, then stretch by `-h_j` onto
    /// the destination grid.
    pub fn check_node_update(&self, state: &DecoderState, r: usize, j: usize) -> Result<QuantizedPdf> {
        let periods = self.check_periods(state, r)?;
        self.stretch(&periods[j], r, j, state)
    }

    /// Same message computed by linear convolution and explicit folding.
    pub fn check_node_update_direct(
        &self,
        state: &DecoderState,
        r: usize,
        j: usize,
    ) -> Result<QuantizedPdf> {
        let mut inputs = self.expanded_inputs(state, r)?;
        inputs.remove(j);
        let period = if inputs.is_empty() {
            let m = self.params.grid.samples_per_unit();
            let mut unit = vec![0.0; m];
            unit[0] = m as f64;
            PeriodicPdf::new(unit)?
        } else {
            fold_to_period(&convolve_direct(&inputs)?)
        };
        self.stretch(&period, r, j, state)
    }

    fn stretch(&self, p: &PeriodicPdf, r: usize, j: usize, state: &DecoderState) -> Result<QuantizedPdf> {
        let c = self.inv[j][r];
        let mut out = vec![0.0; state.len()];
        stretch_into(p, self.code.value(j, c), &state.grids[c], &mut out)?;
        Ok(QuantizedPdf::from_raw(state.grids[c], out))
    }

    /// Recomputes every check-to-variable message.
    pub fn check_phase(&self, state: &mut DecoderState) -> Result<()> {
        let d = self.code.d();
        let len = state.len();
        let mut out = std::mem::take(&mut state.check_to_var);
        let shared: &DecoderState = state;
        let res: Result<()> = out
            .par_chunks_mut(d * len)
            .enumerate()
            .try_for_each(|(r, chunk)| {
                let periods = self.check_periods(shared, r)?;
                for (j, (p, dst)) in periods.iter().zip(chunk.chunks_mut(len)).enumerate() {
                    let c = self.inv[j][r];
                    stretch_into(p, self.code.value(j, c), &shared.grids[c], dst)?;
                }
                Ok(())
            });
        state.check_to_var = out;
        res?;
        state.check_messages_ready = true;
        Ok(())
    }

    fn factors(&self, state: &DecoderState, c: usize) -> Vec<Vec<f64>> {
        let d = self.code.d();
        let len = state.len();
        (0..d)
            .map(|j| {
                let r = self.code.row_of(j, c);
                let q = DecoderState::slot(&state.check_to_var, r * d + j, len);
                let mut f = if self.params.widen { widen(q) } else { q.to_vec() };
                // peak scaling keeps long products away from underflow
                let peak = f.iter().fold(0.0f64, |m, &v| m.max(v));
                if peak > 0.0 {
                    f.iter_mut().for_each(|v| *v /= peak);
                }
                f
            })
            .collect()
    }

    /// Message from column `c` along class `j`: channel times every other
    /// incoming check message, normalized.
    pub fn variable_node_update(&self, state: &DecoderState, c: usize, j: usize) -> Result<Product> {
        let len = state.len();
        let grid = state.grids[c];
        let channel = DecoderState::slot(&state.channel, c, len).to_vec();
        if !state.check_messages_ready {
            return Ok(Product::Normalized(QuantizedPdf::from_raw(grid, channel)));
        }
        let mut acc = channel;
        for (l, f) in self.factors(state, c).into_iter().enumerate() {
            if l != j {
                acc.iter_mut().zip(&f).for_each(|(a, b)| *a *= b);
            }
        }
        normalized_or_zero(grid, acc)
    }

    /// Recomputes every variable-to-check message and the per-node estimate
    /// from the full product.
    fn variable_phase(&self, state: &mut DecoderState) -> Vec<VariableOutcome> {
        let d = self.code.d();
        let len = state.len();
        let delta = self.params.grid.delta();
        let mut out = std::mem::take(&mut state.var_to_check);
        let shared: &DecoderState = state;
        let outcomes = out
            .par_chunks_mut(d * len)
            .enumerate()
            .map(|(c, chunk)| {
                let factors = self.factors(shared, c);
                let channel = DecoderState::slot(&shared.channel, c, len);
                // prefix[j] = channel * prod_{l<j} Q_l
                let mut prefix = Vec::with_capacity(d + 1);
                prefix.push(channel.to_vec());
                for f in &factors {
                    let last = prefix.last().expect("non-empty");
                    let next: Vec<f64> = last.iter().zip(f).map(|(a, b)| a * b).collect();
                    prefix.push(next);
                }
                let mut suffix = vec![1.0; len];
                let mut zero = false;
                for j in (0..d).rev() {
                    let dst = &mut chunk[j * len..(j + 1) * len];
                    let mut mass = 0.0;
                    let mut msg = vec![0.0; len];
                    for k in 0..len {
                        msg[k] = prefix[j][k] * suffix[k];
                        mass += msg[k];
                    }
                    if mass > 0.0 && mass.is_finite() {
                        let scale = 1.0 / (mass * delta);
                        for (o, v) in dst.iter_mut().zip(&msg) {
                            *o = v * scale;
                        }
                    } else {
                        zero = true;
                    }
                    suffix.iter_mut().zip(&factors[j]).for_each(|(s, f)| *s *= f);
                }
                let full = &prefix[d];
                let x_hat = match argmax_index(full) {
                    Some(k) => shared.grids[c].coord(k),
                    None => {
                        zero = true;
                        shared.y[c]
                    }
                };
                VariableOutcome { zero, x_hat }
            })
            .collect();
        state.var_to_check = out;
        outcomes
    }

    /// Final per-node estimates from the product of the channel and all
    /// incoming check messages; falls back to the observation where that
    /// product vanishes.
    pub fn soft_estimate(&self, state: &DecoderState) -> Vec<f64> {
        let len = state.len();
        (0..self.code.n())
            .map(|c| {
                if !state.check_messages_ready {
                    return state.y[c];
                }
                let mut acc = DecoderState::slot(&state.channel, c, len).to_vec();
                for f in self.factors(state, c) {
                    acc.iter_mut().zip(&f).for_each(|(a, b)| *a *= b);
                }
                argmax_index(&acc).map_or(state.y[c], |k| state.grids[c].coord(k))
            })
            .collect()
    }

    /// `round(H x)`.
    pub fn hard_decision(&self, x_hat: &[f64]) -> Result<(Vec<i64>, f64)> {
        let hx = self.h.mul_vec(x_hat)?;
        let max_syndrome = hx.iter().fold(0.0f64, |m, &v| m.max(frac(v).abs()));
        Ok((hx.into_iter().map(|v| nearest_integer(v) as i64).collect(), max_syndrome))
    }

    /// Integer estimate of every check equation from the linear convolution
    /// of all its expanded inputs, maximized over the integers.
    pub fn estimate_integers_direct(&self, state: &DecoderState) -> Result<Vec<i64>> {
        if !state.check_messages_ready {
            return Err(LdlcError::InvalidParameter(
                "direct estimate needs at least one completed iteration".into(),
            ));
        }
        let m = self.params.grid.samples_per_unit() as i64;
        (0..self.code.n())
            .into_par_iter()
            .map(|r| {
                let p = convolve_direct(&self.expanded_inputs(state, r)?)?;
                let g = p.grid();
                let lo = g.offset().div_euclid(m) + i64::from(g.offset().rem_euclid(m) != 0);
                let hi = (g.offset() + g.length() as i64 - 1).div_euclid(m);
                let mut best: Option<(i64, f64)> = None;
                for b in lo..=hi {
                    let v = p.values()[(b * m - g.offset()) as usize];
                    if v > best.map_or(0.0, |x| x.1) {
                        best = Some((b, v));
                    }
                }
                best.map(|x| x.0).ok_or(LdlcError::ZeroMass)
            })
            .collect()
    }

    fn snapshot(&self, state: &DecoderState) -> VarianceSnapshot {
        let d = self.code.d();
        let n = self.code.n();
        let half = self.params.grid.samples_per_unit() / 2;
        let mut by_class = Vec::with_capacity(d);
        let mut mixture_by_class = Vec::with_capacity(d);
        let mut spread_by_class = Vec::with_capacity(d);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        for j in 0..d {
            let mut comp = Vec::with_capacity(n);
            let mut full = Vec::with_capacity(n);
            for c in 0..n {
                let msg = self.var_message(state, c, j);
                if let Ok((_, v)) = moments(&msg) {
                    full.push(v);
                }
                if let Some(v) = component_variance(&msg, half) {
                    comp.push(v);
                }
            }
            let lo = comp.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = comp.iter().fold(0.0f64, |a, &b| a.max(b));
            by_class.push(mean(&comp));
            mixture_by_class.push(mean(&full));
            spread_by_class.push(if lo > 0.0 { hi / lo - 1.0 } else { f64::INFINITY });
        }
        VarianceSnapshot {
            iteration: state.iteration,
            by_class,
            mixture_by_class,
            spread_by_class,
        }
    }

    /// One flooding iteration: all check messages, then all variable messages.
    /// Returns the soft estimate and whether any product vanished.
    pub fn iterate(&self, state: &mut DecoderState) -> Result<(Vec<f64>, bool)> {
        self.check_phase(state)?;
        let outcomes = self.variable_phase(state);
        state.iteration += 1;
        let zero = outcomes.iter().any(|o| o.zero);
        Ok((outcomes.into_iter().map(|o| o.x_hat).collect(), zero))
    }

    pub fn decode(&self, y: &[f64], sigma2: f64) -> Result<DecodeResult> {
        let (f0, i0) = self.fft_counts();
        let mut state = self.init(y, sigma2)?;
        let mut variances = Vec::new();
        if self.params.diagnostics {
            variances.push(self.snapshot(&state));
        }
        let window = self.params.early_stop.unwrap_or(0);
        let mut history: Vec<Vec<i64>> = Vec::new();
        let mut x_hat = y.to_vec();
        let mut max_syndrome = f64::INFINITY;
        let mut failure = None;
        let mut converged = false;
        for t in 1..=self.params.max_iterations {
            let (x, zero) = self.iterate(&mut state)?;
            x_hat = x;
            let (b, syn) = self.hard_decision(&x_hat)?;
            max_syndrome = syn;
            history.push(b);
            if self.params.diagnostics || t % 10 == 0 {
                variances.push(self.snapshot(&state));
            }
            if zero {
                failure = Some(FailureReason::ZeroProduct);
                break;
            }
            if window > 0 && early_stop(&history, syn, window, self.params.syndrome_tol) {
                converged = true;
                break;
            }
        }
        if failure.is_none() && !converged {
            let w = if window > 0 { window } else { 1 };
            converged = early_stop(&history, max_syndrome, w, self.params.syndrome_tol);
            if !converged {
                failure = Some(FailureReason::MaxIterations);
            }
        }
        let (f1, i1) = self.fft_counts();
        Ok(DecodeResult {
            b_hat: history.pop().unwrap_or_default(),
            x_hat,
            converged,
            iterations: state.iteration,
            failure,
            max_syndrome,
            variances,
            forward_ffts: f1 - f0,
            inverse_ffts: i1 - i0,
            message_bytes: state.message_bytes(),
        })
    }
}

/// Variance of `f` restricted to `half` samples either side of its peak.
fn component_variance(f: &QuantizedPdf, half: usize) -> Option<f64> {
    let vals = f.values();
    let k = argmax_index(vals)?;
    let lo = k.saturating_sub(half);
    let hi = (k + half + 1).min(vals.len());
    let g = f.grid();
    let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, &v) in vals.iter().enumerate().take(hi).skip(lo) {
        let x = g.coord(i) - g.coord(k);
        w += v;
        m1 += v * x;
        m2 += v * x * x;
    }
    if !(w > 0.0) {
        return None;
    }
    let mu = m1 / w;
    Some(m2 / w - mu * mu)
}

fn normalized_or_zero(grid: PdfGrid, mut values: Vec<f64>) -> Result<Product> {
    let mass: f64 = values.iter().sum::<f64>() * grid.delta();
    if !(mass > 0.0) {
        return Ok(Product::Zero);
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(Product::Normalized(QuantizedPdf::from_raw(grid, values)))
}

/// Decodes `y` with a fresh [`Decoder`].
pub fn decode(
    code: &MagicSquareLdlc,
    y: &[f64],
    sigma2: f64,
    params: &DecoderParams,
) -> Result<DecodeResult> {
    Decoder::new(code, params.clone())?.decode(y, sigma2)
}
