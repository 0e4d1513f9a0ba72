//! Sampled one-dimensional densities.
//!
//! Every grid has an integer number `M` of samples per unit length and starts
//! at an integer multiple of `1/M`, so sample `k` of a grid with offset `o`
//! sits at `(o + k) / M`. Grids with different offsets therefore share one
//! global lattice of sample positions, which is what lets convolution results
//! be folded onto a single unit period.

use std::sync::{Arc, Once};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{LdlcError, Result};

/// Sampling profile shared by all messages of one decoder run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec")]
pub struct GridSpec {
    samples_per_unit: usize,
    length: usize,
}

#[derive(Deserialize)]
struct RawGridSpec {
    samples_per_unit: usize,
    length: usize,
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = LdlcError;

    fn try_from(raw: RawGridSpec) -> Result<Self> {
        Self::new(raw.samples_per_unit, raw.length)
    }
}

impl GridSpec {
    /// `length` must be a whole number of units so that a grid covers an
    /// integer range.
    pub fn new(samples_per_unit: usize, length: usize) -> Result<Self> {
        if samples_per_unit == 0 || length == 0 || length % samples_per_unit != 0 {
            return Err(LdlcError::InvalidParameter(format!(
                "grid needs 1/delta = {samples_per_unit} >= 1 dividing L = {length}"
            )));
        }
        Ok(Self {
            samples_per_unit,
            length,
        })
    }

    /// `delta = 1/64`, range 4.
    pub fn standard() -> Self {
        Self::new(64, 256).expect("valid preset")
    }

    /// `delta = 1/256`, range 4.
    pub fn high_fidelity() -> Self {
        Self::new(256, 1024).expect("valid preset")
    }

    /// Builds a spec from a resolution and a range, both as reals.
    pub fn from_delta_range(delta: f64, range: f64) -> Result<Self> {
        let m = (1.0 / delta).round();
        if !(m >= 1.0) || ((1.0 / delta) - m).abs() > 1e-9 * m {
            return Err(LdlcError::InvalidParameter(format!(
                "1/delta must be an integer, got {}",
                1.0 / delta
            )));
        }
        let l = range * m;
        if (l - l.round()).abs() > 1e-9 * l.max(1.0) {
            return Err(LdlcError::InvalidParameter(format!(
                "range {range} is not a whole number of samples"
            )));
        }
        Self::new(m as usize, l.round() as usize)
    }

    pub fn samples_per_unit(&self) -> usize {
        self.samples_per_unit
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn delta(&self) -> f64 {
        1.0 / self.samples_per_unit as f64
    }

    pub fn range(&self) -> usize {
        self.length / self.samples_per_unit
    }

    /// Grid of this spec whose centre sample is the one nearest `center`.
    pub fn centered_on(&self, center: f64) -> PdfGrid {
        let m = self.samples_per_unit as f64;
        let mid = (center * m).round() as i64;
        PdfGrid {
            samples_per_unit: self.samples_per_unit,
            offset: mid - (self.length / 2) as i64,
            length: self.length,
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::standard()
    }
}

/// A finite run of samples at positions `(offset + k) / M`, `k < length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdfGrid {
    samples_per_unit: usize,
    offset: i64,
    length: usize,
}

impl PdfGrid {
    pub fn new(samples_per_unit: usize, offset: i64, length: usize) -> Result<Self> {
        if samples_per_unit == 0 || length == 0 {
            return Err(LdlcError::InvalidParameter(
                "grid needs positive resolution and length".into(),
            ));
        }
        Ok(Self {
            samples_per_unit,
            offset,
            length,
        })
    }

    pub fn samples_per_unit(&self) -> usize {
        self.samples_per_unit
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn delta(&self) -> f64 {
        1.0 / self.samples_per_unit as f64
    }

    pub fn start(&self) -> f64 {
        self.offset as f64 * self.delta()
    }

    pub fn coord(&self, k: usize) -> f64 {
        (self.offset + k as i64) as f64 * self.delta()
    }

    /// True when the grid spans a whole number of units.
    pub fn whole_units(&self) -> bool {
        self.length % self.samples_per_unit == 0
    }

    fn same_resolution(&self, other: &PdfGrid) -> Result<()> {
        if self.samples_per_unit != other.samples_per_unit {
            return Err(LdlcError::GridMismatch(format!(
                "resolution 1/{} vs 1/{}",
                self.samples_per_unit, other.samples_per_unit
            )));
        }
        Ok(())
    }
}

/// Non-negative density samples on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPdf {
    grid: PdfGrid,
    values: Vec<f64>,
}

impl QuantizedPdf {
    pub fn new(grid: PdfGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.length {
            return Err(LdlcError::DimensionMismatch {
                expected: grid.length,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(LdlcError::InvalidParameter(
                "density samples must be finite and non-negative".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_raw(grid: PdfGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.length);
        Self { grid, values }
    }

    /// A single sample of height `1/delta` at index `k`.
    pub fn impulse(grid: PdfGrid, k: usize) -> Result<Self> {
        if k >= grid.length {
            return Err(LdlcError::InvalidParameter(format!(
                "impulse index {k} outside grid of length {}",
                grid.length
            )));
        }
        let mut values = vec![0.0; grid.length];
        values[k] = grid.samples_per_unit as f64;
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &PdfGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `sum(values) * delta`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.delta()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn normalized(mut self) -> Result<Self> {
        normalize_in_place(&mut self.values, self.grid.delta())?;
        Ok(self)
    }
}

fn normalize_in_place(values: &mut [f64], delta: f64) -> Result<()> {
    let mass = values.iter().sum::<f64>() * delta;
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(LdlcError::ZeroMass);
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(())
}

/// One unit period of a periodic function: bin `i` holds the value at every
/// position `x` with `x * M = i (mod M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicPdf {
    values: Vec<f64>,
}

impl PeriodicPdf {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) {
            return Err(LdlcError::InvalidParameter(
                "period must be non-empty and non-negative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn samples_per_unit(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Sums the samples of `f` into `M` bins by global sample index modulo `M`.
pub fn fold_to_period(f: &QuantizedPdf) -> PeriodicPdf {
    let mut bins = vec![0.0; f.grid.samples_per_unit];
    fold_into(f, &mut bins);
    PeriodicPdf { values: bins }
}

fn fold_into(f: &QuantizedPdf, bins: &mut [f64]) {
    let m = bins.len() as i64;
    let mut b = f.grid.offset.rem_euclid(m) as usize;
    for &v in &f.values {
        bins[b] += v;
        b += 1;
        if b == bins.len() {
            b = 0;
        }
    }
}

/// Normalized Gaussian samples.
pub fn gaussian(grid: PdfGrid, mean: f64, variance: f64) -> Result<QuantizedPdf> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(LdlcError::InvalidParameter(format!(
            "variance must be positive, got {variance}"
        )));
    }
    let values = gaussian_samples(&grid, mean, variance);
    QuantizedPdf::from_raw(grid, values).normalized()
}

/// Unnormalized `exp(-(x - mean)^2 / 2V)` on a grid.
pub(crate) fn gaussian_samples(grid: &PdfGrid, mean: f64, variance: f64) -> Vec<f64> {
    let scale = -0.5 / variance;
    (0..grid.length)
        .map(|k| {
            let e = grid.coord(k) - mean;
            (scale * e * e).exp()
        })
        .collect()
}

/// Half-width of the averaging window when one output sample stands for
/// `step` input samples.
pub fn window_half_width(step: f64) -> usize {
    (step.ceil() as usize) / 2
}

static UPSAMPLE_WARNING: Once = Once::new();

/// Density of `h X` where `X ~ f`, on the same resolution.
///
/// Output sample `k` reads source position `k / h`; when that covers several
/// source samples (`|h| < 1`) they are averaged over a window of half-width
/// `floor(ceil(1/|h|) / 2)` so that no impulse is skipped. For `|h| > 1` the
/// source is linearly interpolated. Mass is restored to the input mass.
pub fn expand(f: &QuantizedPdf, h: f64) -> Result<QuantizedPdf> {
    if h == 0.0 || !h.is_finite() {
        return Err(LdlcError::InvalidParameter(format!("cannot expand by {h}")));
    }
    if h == 1.0 {
        return Ok(f.clone());
    }
    let grid = &f.grid;
    let len = grid.length as i64;
    let o = grid.offset as f64;
    let mass = f.values.iter().sum::<f64>();

    let (lo, hi, values) = if h.abs() > 1.0 {
        UPSAMPLE_WARNING.call_once(|| {
            log::warn!("expansion by |h| > 1 uses linear interpolation");
        });
        let ends = [h * (o - 1.0), h * (o + len as f64)];
        let lo = ends[0].min(ends[1]).ceil() as i64;
        let hi = ends[0].max(ends[1]).floor() as i64;
        let at = |i: i64| {
            if (0..len).contains(&i) {
                f.values[i as usize]
            } else {
                0.0
            }
        };
        let values: Vec<f64> = (lo..=hi)
            .map(|k| {
                let s = k as f64 / h - o;
                let i0 = s.floor();
                let t = s - i0;
                let i0 = i0 as i64;
                (1.0 - t) * at(i0) + t * at(i0 + 1)
            })
            .collect();
        (lo, hi, values)
    } else {
        let lw = window_half_width(1.0 / h.abs()) as i64;
        let mut prefix = Vec::with_capacity(f.values.len() + 1);
        prefix.push(0.0);
        for v in &f.values {
            prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
        }
        // k such that round(k/h - o) lies in [-lw, len - 1 + lw]
        let ends = [h * (o - lw as f64 - 0.5), h * (o + (len - 1 + lw) as f64 + 0.5)];
        let lo = ends[0].min(ends[1]).floor() as i64;
        let hi = ends[0].max(ends[1]).ceil() as i64;
        let width = (2 * lw + 1) as f64;
        let values: Vec<f64> = (lo..=hi)
            .map(|k| {
                let i0 = (k as f64 / h - o).round() as i64;
                let a = (i0 - lw).clamp(0, len);
                let b = (i0 + lw + 1).clamp(0, len);
                if b > a {
                    (prefix[b as usize] - prefix[a as usize]) / width
                } else {
                    0.0
                }
            })
            .collect();
        (lo, hi, values)
    };
    let first = values.iter().position(|&v| v > 0.0);
    let last = values.iter().rposition(|&v| v > 0.0);
    let (first, last) = match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            let g = PdfGrid::new(grid.samples_per_unit, lo, (hi - lo + 1) as usize)?;
            return Ok(QuantizedPdf::from_raw(g, values));
        }
    };
    let mut values = values[first..=last].to_vec();
    let out_mass: f64 = values.iter().sum();
    let scale = mass / out_mass;
    values.iter_mut().for_each(|v| *v *= scale);
    let out = PdfGrid::new(grid.samples_per_unit, lo + first as i64, values.len())?;
    Ok(QuantizedPdf::from_raw(out, values))
}

/// Linear convolution `delta * sum_i f(i) g(k - i)` of all inputs, evaluated
/// term by term.
pub fn convolve_direct(fs: &[QuantizedPdf]) -> Result<QuantizedPdf> {
    let (first, rest) = fs
        .split_first()
        .ok_or_else(|| LdlcError::InvalidParameter("nothing to convolve".into()))?;
    let mut acc = first.clone();
    for f in rest {
        acc.grid.same_resolution(&f.grid)?;
        let delta = acc.grid.delta();
        let mut out = vec![0.0; acc.values.len() + f.values.len() - 1];
        for (i, &a) in acc.values.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in f.values.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        out.iter_mut().for_each(|v| *v *= delta);
        let grid = PdfGrid::new(
            acc.grid.samples_per_unit,
            acc.grid.offset + f.grid.offset,
            out.len(),
        )?;
        acc = QuantizedPdf::from_raw(grid, out);
    }
    Ok(acc)
}

/// Planned transforms of size `M` for periodic convolutions.
#[derive(Clone)]
pub struct PeriodicConvolver {
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PeriodicConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicConvolver").field("m", &self.m).finish()
    }
}

impl PeriodicConvolver {
    pub fn new(samples_per_unit: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            m: samples_per_unit,
            forward: planner.plan_fft_forward(samples_per_unit),
            inverse: planner.plan_fft_inverse(samples_per_unit),
        }
    }

    pub fn samples_per_unit(&self) -> usize {
        self.m
    }

    fn check(&self, fs: &[QuantizedPdf]) -> Result<()> {
        if fs.is_empty() {
            return Err(LdlcError::InvalidParameter("nothing to convolve".into()));
        }
        for f in fs {
            if f.grid.samples_per_unit != self.m {
                return Err(LdlcError::GridMismatch(format!(
                    "resolution 1/{} vs planned 1/{}",
                    f.grid.samples_per_unit, self.m
                )));
            }
        }
        Ok(())
    }

    fn spectrum(&self, f: &QuantizedPdf) -> Vec<Complex<f64>> {
        let mut bins = vec![0.0; self.m];
        fold_into(f, &mut bins);
        let mut buf: Vec<Complex<f64>> = bins.into_iter().map(|v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    fn to_period(&self, mut spec: Vec<Complex<f64>>, factors: usize) -> PeriodicPdf {
        self.inverse.process(&mut spec);
        // 1/M for the unnormalized inverse, delta per convolution
        let scale = (1.0 / self.m as f64) * (1.0 / self.m as f64).powi(factors as i32 - 1);
        PeriodicPdf {
            values: spec.into_iter().map(|c| (c.re * scale).max(0.0)).collect(),
        }
    }

    /// Unit period of the convolution of all inputs: fold each input onto
    /// `M` bins, multiply the `M`-point spectra, transform back.
    pub fn convolve(&self, fs: &[QuantizedPdf]) -> Result<PeriodicPdf> {
        self.check(fs)?;
        let mut acc = self.spectrum(&fs[0]);
        for f in &fs[1..] {
            for (a, b) in acc.iter_mut().zip(self.spectrum(f)) {
                *a *= b;
            }
        }
        Ok(self.to_period(acc, fs.len()))
    }

    /// For each `j`, the unit period of the convolution of every input except
    /// `j`. Uses `len` forward and `len` inverse transforms.
    pub fn convolve_excluding_each(&self, fs: &[QuantizedPdf]) -> Result<Vec<PeriodicPdf>> {
        self.check(fs)?;
        let d = fs.len();
        if d == 1 {
            let mut unit = vec![0.0; self.m];
            unit[0] = self.m as f64;
            return Ok(vec![PeriodicPdf { values: unit }]);
        }
        let spectra: Vec<Vec<Complex<f64>>> = fs.iter().map(|f| self.spectrum(f)).collect();
        let one = vec![Complex::new(1.0, 0.0); self.m];
        let mut suffix = vec![one.clone(); d + 1];
        for j in (0..d).rev() {
            suffix[j] = suffix[j + 1]
                .iter()
                .zip(&spectra[j])
                .map(|(a, b)| a * b)
                .collect();
        }
        let mut prefix = one;
        let mut out = Vec::with_capacity(d);
        for j in 0..d {
            let spec: Vec<Complex<f64>> =
                prefix.iter().zip(&suffix[j + 1]).map(|(a, b)| a * b).collect();
            out.push(self.to_period(spec, d - 1));
            for (p, s) in prefix.iter_mut().zip(&spectra[j]) {
                *p *= s;
            }
        }
        Ok(out)
    }
}

/// One-shot periodic convolution; plans its own transforms.
pub fn convolve_periodic_fft(fs: &[QuantizedPdf]) -> Result<PeriodicPdf> {
    let m = fs
        .first()
        .ok_or_else(|| LdlcError::InvalidParameter("nothing to convolve".into()))?
        .grid
        .samples_per_unit;
    PeriodicConvolver::new(m).convolve(fs)
}

/// Samples `Q(x) = P(-h x)` on `target`, where `P` is the unit-periodic
/// function `p`. The result repeats with period `1/|h|`.
///
/// A destination sample covers `|h|` source bins; for `|h| > 1` they are
/// averaged with the same window rule as [`expand`], otherwise the nearest
/// bin is taken.
pub fn stretch_periodic(p: &PeriodicPdf, h: f64, target: &PdfGrid) -> Result<QuantizedPdf> {
    let mut out = vec![0.0; target.length];
    stretch_into(p, h, target, &mut out)?;
    Ok(QuantizedPdf::from_raw(*target, out))
}

pub(crate) fn stretch_into(p: &PeriodicPdf, h: f64, target: &PdfGrid, out: &mut [f64]) -> Result<()> {
    if h == 0.0 || !h.is_finite() {
        return Err(LdlcError::InvalidParameter(format!("cannot stretch by {h}")));
    }
    let m = p.values.len();
    if m != target.samples_per_unit {
        return Err(LdlcError::GridMismatch(format!(
            "period of {m} bins on a 1/{} grid",
            target.samples_per_unit
        )));
    }
    let mi = m as i64;
    let lw = window_half_width(h.abs()) as i64;
    if lw == 0 {
        for (k, o) in out.iter_mut().enumerate() {
            let src = (-h * (target.offset + k as i64) as f64).round() as i64;
            *o = p.values[src.rem_euclid(mi) as usize];
        }
    } else {
        let width = (2 * lw + 1) as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let src = (-h * (target.offset + k as i64) as f64).round() as i64;
            let s: f64 = (src - lw..=src + lw)
                .map(|i| p.values[i.rem_euclid(mi) as usize])
                .sum();
            *o = s / width;
        }
    }
    Ok(())
}

/// `Q(k-1) + Q(k) + Q(k+1)`, treating samples outside the grid as zero.
pub fn widen(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|k| {
            let mut s = values[k];
            if k > 0 {
                s += values[k - 1];
            }
            if k + 1 < n {
                s += values[k + 1];
            }
            s
        })
        .collect()
}

/// Outcome of a pointwise product.
#[derive(Debug, Clone, PartialEq)]
pub enum Product {
    Normalized(QuantizedPdf),
    /// Every sample of the product is zero.
    Zero,
}

impl Product {
    pub fn is_zero(&self) -> bool {
        matches!(self, Product::Zero)
    }

    pub fn pdf(&self) -> Option<&QuantizedPdf> {
        match self {
            Product::Normalized(p) => Some(p),
            Product::Zero => None,
        }
    }
}

/// Pointwise product of `channel` and all `qs` (each widened first when
/// `widen` is set), normalized to unit mass.
pub fn product(channel: &QuantizedPdf, qs: &[QuantizedPdf], widen_inputs: bool) -> Result<Product> {
    for q in qs {
        if q.grid != channel.grid {
            return Err(LdlcError::GridMismatch(format!(
                "product operand on {:?}, channel on {:?}",
                q.grid, channel.grid
            )));
        }
    }
    let mut acc = channel.values.clone();
    for q in qs {
        let factor = if widen_inputs { widen(&q.values) } else { q.values.clone() };
        let peak = factor.iter().fold(0.0f64, |m, &v| m.max(v));
        if peak == 0.0 {
            return Ok(Product::Zero);
        }
        for (a, f) in acc.iter_mut().zip(&factor) {
            *a *= f / peak;
        }
    }
    if acc.iter().all(|&v| v == 0.0) {
        return Ok(Product::Zero);
    }
    let mut out = QuantizedPdf::from_raw(channel.grid, acc);
    normalize_in_place(&mut out.values, out.grid.delta())?;
    Ok(Product::Normalized(out))
}

/// Mean and variance of the sampled density.
pub fn moments(f: &QuantizedPdf) -> Result<(f64, f64)> {
    let total: f64 = f.values.iter().sum();
    if !(total > 0.0) {
        return Err(LdlcError::ZeroMass);
    }
    let mean = f
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| f.grid.coord(k) * v)
        .sum::<f64>()
        / total;
    let var = f
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let e = f.grid.coord(k) - mean;
            e * e * v
        })
        .sum::<f64>()
        / total;
    Ok((mean, var))
}

/// Index of the largest sample; the lowest index wins ties.
pub fn argmax_index(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in values.iter().enumerate() {
        if v > best.map_or(0.0, |b| b.1) {
            best = Some((k, v));
        }
    }
    best.map(|b| b.0)
}

/// Coordinate of the largest sample; the lowest coordinate wins ties.
pub fn argmax(f: &QuantizedPdf) -> Result<f64> {
    argmax_index(&f.values)
        .map(|k| f.grid.coord(k))
        .ok_or(LdlcError::ZeroMass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(m: usize, offset: i64, len: usize) -> PdfGrid {
        PdfGrid::new(m, offset, len).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn spec_rejects_fractional_ranges() {
        assert!(GridSpec::new(64, 100).is_err());
        assert!(GridSpec::from_delta_range(1.0 / 64.0, 4.0).unwrap() == GridSpec::standard());
        assert!(GridSpec::from_delta_range(0.3, 4.0).is_err());
        assert_eq!(GridSpec::high_fidelity().length(), 1024);
        let json = serde_json::to_string(&GridSpec::standard()).unwrap();
        assert_eq!(serde_json::from_str::<GridSpec>(&json).unwrap(), GridSpec::standard());
        assert!(serde_json::from_str::<GridSpec>(r#"{"samples_per_unit":64,"length":100}"#).is_err());
    }

    #[test]
    fn centered_gaussian_is_symmetric() {
        let g = GridSpec::standard().centered_on(0.0);
        let f = gaussian(g, 0.0, 0.05855).unwrap();
        let v = f.values();
        // sample 128 is x = 0; samples 128 - k and 128 + k mirror
        for k in 1..128 {
            assert!((v[128 - k] - v[128 + k]).abs() < 1e-15 * v[128]);
        }
        assert_eq!(argmax_index(v), Some(128));
        assert!((f.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_translation_is_a_shift() {
        let g = grid(64, -128, 256);
        let a = gaussian(g, 0.1, 0.02).unwrap();
        let b = gaussian(g, 0.1 + 1.0 / 64.0, 0.02).unwrap();
        for k in 60..200 {
            assert!((a.values()[k] - b.values()[k + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_moments_match() {
        let g = grid(64, -256, 512);
        for (mu, var) in [(0.3, 0.05), (-0.7, 0.01), (0.0, 0.2)] {
            let (m, v) = moments(&gaussian(g, mu, var).unwrap()).unwrap();
            let delta2 = 1.0 / 4096.0;
            assert!((m - mu).abs() < 1e-9);
            assert!((v - var).abs() <= delta2 / 12.0 + 1e-9, "{v} vs {var}");
        }
        assert!(gaussian(g, 0.0, 0.0).is_err());
    }

    #[test]
    fn expand_by_one_is_identity() {
        let f = gaussian(grid(64, -128, 256), 0.0, 0.05).unwrap();
        assert_eq!(expand(&f, 1.0).unwrap(), f);
    }

    #[test]
    fn expand_by_minus_one_reflects() {
        let f = gaussian(grid(64, -100, 256), 0.4, 0.05).unwrap();
        let r = expand(&f, -1.0).unwrap();
        let (m, v) = moments(&r).unwrap();
        let (m0, v0) = moments(&f).unwrap();
        assert!((m + m0).abs() < 1e-12);
        assert!((v - v0).abs() < 1e-12);
    }

    #[test]
    fn expanded_impulse_keeps_mass() {
        let g = grid(64, 0, 256);
        for k in [0, 1, 17, 100, 255] {
            let f = QuantizedPdf::impulse(g, k).unwrap();
            for h in [0.5, 0.3, 0.07, -0.45] {
                let e = expand(&f, h).unwrap();
                assert!(!e.is_zero(), "impulse at {k} lost under h = {h}");
                assert!((e.mass() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn expand_scales_variance() {
        // the averaging window adds roughly ((2 lw + 1)^2 - 1) / 12 + 1/2 source
        // samples squared, so the input has to be wide relative to the window
        let delta2 = 1.0 / 4096.0;
        let g = grid(64, -512, 1024);
        for &(h, var) in &[
            (0.9, 64.0 * delta2),
            (0.73, 64.0 * delta2),
            (-0.45, 64.0 * delta2),
            (0.2, 0.1),
            (0.057, 1.0),
        ] {
            let f = gaussian(g, 0.25, var).unwrap();
            let e = expand(&f, h).unwrap();
            let (m, v) = moments(&e).unwrap();
            let (_, v0) = moments(&f).unwrap();
            assert!((m - h * 0.25).abs() < 0.02 * h.abs(), "h {h}: mean {m}");
            assert!(rel_close(v, h * h * v0, 0.05), "h {h}: {v} vs {}", h * h * v0);
        }
    }

    #[test]
    fn direct_convolution_basics() {
        let g = grid(64, -400, 800);
        let a = gaussian(g, 0.0, 1.0).unwrap();
        assert_eq!(convolve_direct(std::slice::from_ref(&a)).unwrap(), a);

        let f = gaussian(grid(64, -50, 100), 0.1, 0.02).unwrap();
        let imp = QuantizedPdf::impulse(grid(64, 10, 5), 2).unwrap();
        let c = convolve_direct(&[imp, f.clone()]).unwrap();
        // impulse at 12/64 shifts f by 12 samples
        assert_eq!(c.grid().offset(), -50 + 10);
        for k in 0..100 {
            assert!((c.values()[k + 2] - f.values()[k]).abs() < 1e-12);
        }
        assert!(convolve_direct(&[]).is_err());
    }

    #[test]
    fn fft_path_matches_folded_direct_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let conv = PeriodicConvolver::new(64);
        for case in 0..1000 {
            let count = rng.random_range(1..=6);
            let fs: Vec<QuantizedPdf> = (0..count)
                .map(|_| {
                    let len = rng.random_range(1..300);
                    let off = rng.random_range(-400..400);
                    let vals = (0..len).map(|_| rng.random::<f64>()).collect();
                    QuantizedPdf::new(grid(64, off, len), vals).unwrap()
                })
                .collect();
            let fast = conv.convolve(&fs).unwrap();
            let slow = fold_to_period(&convolve_direct(&fs).unwrap());
            let peak = slow.values().iter().fold(0.0f64, |m, &v| m.max(v));
            let err = fast
                .values()
                .iter()
                .zip(slow.values())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-9 * peak, "case {case}: {err} vs peak {peak}");
        }
    }

    #[test]
    fn excluding_each_matches_individual_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = PeriodicConvolver::new(64);
        let fs: Vec<QuantizedPdf> = (0..5)
            .map(|i| gaussian(grid(64, -60 * i, 200), 0.1 * i as f64, 0.01 + 0.01 * i as f64).unwrap())
            .collect();
        let all = conv.convolve_excluding_each(&fs).unwrap();
        for j in 0..5 {
            let others: Vec<QuantizedPdf> =
                fs.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, f)| f.clone()).collect();
            let want = conv.convolve(&others).unwrap();
            for (a, b) in all[j].values().iter().zip(want.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let _ = rng.random::<u8>();
    }

    #[test]
    fn periodic_convolution_preserves_mass_and_uniformity() {
        let g = grid(64, -128, 256);
        let fs = vec![gaussian(g, 0.0, 0.1).unwrap(), gaussian(g, 0.3, 0.02).unwrap()];
        let p = convolve_periodic_fft(&fs).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-9);

        let uniform = QuantizedPdf::new(grid(64, 0, 64), vec![1.0; 64]).unwrap();
        let p = convolve_periodic_fft(&[uniform]).unwrap();
        assert!(p.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn stretch_mirrors_and_keeps_uniform() {
        let mut vals = vec![0.0; 64];
        vals[5] = 1.0;
        vals[20] = 2.0;
        let p = PeriodicPdf::new(vals).unwrap();
        let target = grid(64, -128, 256);
        let q = stretch_periodic(&p, -1.0, &target).unwrap();
        // h = -1: Q(x) = P(x), so the tiling is P itself
        for k in 0..256 {
            let idx = (-128 + k as i64).rem_euclid(64) as usize;
            assert_eq!(q.values()[k], p.values()[idx]);
        }
        let q1 = stretch_periodic(&p, 1.0, &target).unwrap();
        // h = +1 mirrors: Q(x) = P(-x)
        for k in 0..256 {
            let idx = (128 - k as i64).rem_euclid(64) as usize;
            assert_eq!(q1.values()[k], p.values()[idx]);
        }
        let uni = PeriodicPdf::new(vec![0.7; 64]).unwrap();
        for h in [0.3, -0.8, 1.7] {
            let q = stretch_periodic(&uni, h, &target).unwrap();
            assert!(q.values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn stretched_impulse_train_spacing() {
        let mut vals = vec![0.0; 64];
        vals[0] = 1.0;
        let p = PeriodicPdf::new(vals).unwrap();
        let target = grid(64, -512, 1024);
        for h in [0.8, -0.45, 0.31] {
            let q = stretch_periodic(&p, h, &target).unwrap();
            let peaks: Vec<usize> = (0..1024).filter(|&k| q.values()[k] > 0.0).collect();
            assert!(peaks.len() >= 2);
            // nearest-bin sampling can hit a peak on two adjacent samples
            let mut centers: Vec<f64> = Vec::new();
            let mut run: Vec<usize> = vec![peaks[0]];
            for &k in &peaks[1..] {
                if k == run.last().unwrap() + 1 {
                    run.push(k);
                } else {
                    centers.push(run.iter().sum::<usize>() as f64 / run.len() as f64);
                    run = vec![k];
                }
            }
            centers.push(run.iter().sum::<usize>() as f64 / run.len() as f64);
            let spacing = 64.0 / h.abs();
            for w in centers.windows(2) {
                assert!((w[1] - w[0] - spacing).abs() <= 1.0, "h {h}: {w:?}");
            }
        }
    }

    #[test]
    fn product_of_gaussians() {
        let g = grid(64, -512, 1024);
        let a = gaussian(g, 0.0, 1.0).unwrap();
        let b = gaussian(g, 1.0, 1.0).unwrap();
        let p = product(&a, &[b], false).unwrap();
        let (m, v) = moments(p.pdf().unwrap()).unwrap();
        assert!((m - 0.5).abs() < 0.01);
        assert!((v - 0.5).abs() < 0.01);

        let alone = product(&a, &[], true).unwrap();
        for (x, y) in alone.pdf().unwrap().values().iter().zip(a.values()) {
            assert!((x - y).abs() <= 1e-12 * y.max(1e-300));
        }
    }

    #[test]
    fn widening_rescues_misaligned_impulses() {
        let g = grid(64, 0, 64);
        let channel = QuantizedPdf::new(g, vec![1.0; 64]).unwrap();
        let a = QuantizedPdf::impulse(g, 30).unwrap();
        let b = QuantizedPdf::impulse(g, 31).unwrap();
        assert!(product(&channel, &[a.clone(), b.clone()], false).unwrap().is_zero());
        let w = product(&channel, &[a, b], true).unwrap();
        assert!(!w.is_zero());
    }

    #[test]
    fn product_with_impulse_is_impulse() {
        let g = grid(64, -128, 256);
        let channel = gaussian(g, 0.1, 0.05).unwrap();
        let imp = QuantizedPdf::impulse(g, 140).unwrap();
        let p = product(&channel, &[imp], false).unwrap();
        let vals = p.pdf().unwrap().values();
        assert_eq!(vals.iter().filter(|&&v| v > 0.0).count(), 1);
        assert!(vals[140] > 0.0);
    }

    #[test]
    fn product_rejects_mismatched_grids() {
        let a = gaussian(grid(64, 0, 64), 0.5, 0.1).unwrap();
        let b = gaussian(grid(64, 1, 64), 0.5, 0.1).unwrap();
        assert!(matches!(product(&a, &[b], true), Err(LdlcError::GridMismatch(_))));
    }

    #[test]
    fn moment_and_argmax_edge_cases() {
        let g = grid(64, 10, 100);
        let imp = QuantizedPdf::impulse(g, 7).unwrap();
        let (m, v) = moments(&imp).unwrap();
        assert!((m - 17.0 / 64.0).abs() < 1e-15);
        assert_eq!(v, 0.0);

        let mut vals = vec![0.0; 100];
        vals[20] = 1.0;
        vals[60] = 1.0;
        let bi = QuantizedPdf::new(g, vals.clone()).unwrap();
        assert!((moments(&bi).unwrap().0 - (10.0 + 40.0) / 64.0).abs() < 1e-15);
        assert_eq!(argmax(&bi).unwrap(), 30.0 / 64.0);

        let zero = QuantizedPdf::new(g, vec![0.0; 100]).unwrap();
        assert!(moments(&zero).is_err());
        assert!(argmax(&zero).is_err());
    }

    #[test]
    fn argmax_on_gaussian_and_impulse_train() {
        let g = grid(64, -256, 512);
        let f = gaussian(g, 0.25, 0.1).unwrap();
        assert_eq!(argmax(&f).unwrap(), 0.25);

        // impulses every 40 samples times a Gaussian centred between two of them
        let mut train = vec![0.0; 512];
        for k in (0..512).step_by(40) {
            train[k] = 1.0;
        }
        let train = QuantizedPdf::new(g, train).unwrap();
        let centre = g.coord(200) + 0.1 / 64.0;
        let gauss = gaussian(g, centre, 0.3).unwrap();
        let p = product(&gauss, &[train], false).unwrap();
        let want = (0..512)
            .step_by(40)
            .min_by(|&a, &b| {
                (g.coord(a) - centre).abs().partial_cmp(&(g.coord(b) - centre).abs()).unwrap()
            })
            .unwrap();
        assert_eq!(argmax(p.pdf().unwrap()).unwrap(), g.coord(want));
    }

    proptest! {
        #[test]
        fn operations_preserve_nonnegativity_and_mass(
            vals in prop::collection::vec(0.0f64..1.0, 10..200),
            off in -300i64..300,
            h in prop::sample::select(vec![0.9, 0.5, 0.31, -0.2, 0.057]),
        ) {
            prop_assume!(vals.iter().any(|&v| v > 0.0));
            let f = QuantizedPdf::new(grid(64, off, vals.len()), vals).unwrap().normalized().unwrap();
            let e = expand(&f, h).unwrap();
            prop_assert!(e.values().iter().all(|&v| v >= 0.0));
            prop_assert!((e.mass() - 1.0).abs() < 1e-9);
            let p = convolve_periodic_fft(&[f.clone(), e.clone()]).unwrap();
            prop_assert!(p.values().iter().all(|&v| v >= 0.0));
            prop_assert!((p.mass() - 1.0).abs() < 1e-9);
            let q = stretch_periodic(&p, h, f.grid()).unwrap();
            prop_assert!(q.values().iter().all(|&v| v >= 0.0));
            if let Product::Normalized(r) = product(&f, &[q], true).unwrap() {
                prop_assert!((r.mass() - 1.0).abs() < 1e-9);
            }
        }
    }
}
