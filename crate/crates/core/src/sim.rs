//! AWGN Monte Carlo harness: symbol error rate against distance from capacity.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderParams, FailureReason};
use crate::encoder::{EncoderParams, JacobiEncoder};
use crate::error::{LdlcError, Result};
use crate::lattice::{sigma2_from_capacity_gap, MagicSquareLdlc};
use crate::matrix_gen::derive_seed;
use crate::pdf::GridSpec;

/// Trials decoded between stopping-rule checks. Fixed so that results do not
/// depend on the worker count.
pub const BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Where the matrix came from (path or generation parameters).
    pub matrix: String,
    pub gaps_db: Vec<f64>,
    /// Trials per point; an upper bound when `target_errors` is set.
    pub trials: usize,
    pub target_errors: Option<u64>,
    pub decoder: DecoderParams,
    pub seed: u64,
    pub workers: usize,
    /// Send uniform random `b` in `[-bmax, bmax]` through the encoder instead
    /// of the all-zero codeword.
    pub random_codeword: Option<i64>,
    pub encoder: EncoderParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            matrix: String::new(),
            gaps_db: vec![],
            trials: 100,
            target_errors: None,
            decoder: DecoderParams::default(),
            seed: 0,
            workers: 1,
            random_codeword: None,
            encoder: EncoderParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(LdlcError::InvalidParameter("trials must be at least 1".into()));
        }
        if self.gaps_db.is_empty() {
            return Err(LdlcError::InvalidParameter("no gap values given".into()));
        }
        if self.gaps_db.iter().any(|g| !g.is_finite()) {
            return Err(LdlcError::InvalidParameter("gap values must be finite".into()));
        }
        if self.random_codeword.is_some_and(|b| b < 0) {
            return Err(LdlcError::InvalidParameter("bmax must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerRecord {
    pub gap_db: f64,
    pub sigma2: f64,
    pub symbols_sent: u64,
    pub symbol_errors: u64,
    pub ser: f64,
    pub trials: u64,
    /// Decodes that ended without converging, by reason.
    pub failures: BTreeMap<String, u64>,
    pub wall_seconds: f64,
    /// Iterations used -> number of trials.
    pub iterations: BTreeMap<usize, u64>,
    pub forward_ffts: u64,
    pub inverse_ffts: u64,
    pub config: SimConfig,
}

/// Worker count: explicit value, else `LDLC_WORKERS`, else available cores.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .filter(|&w| w > 0)
        .or_else(|| {
            std::env::var("LDLC_WORKERS")
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .filter(|&w: &usize| w > 0)
        })
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `n` i.i.d. zero-mean Gaussian samples of variance `sigma2`.
pub fn awgn<R: Rng + ?Sized>(rng: &mut R, n: usize, sigma2: f64) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, sigma2.sqrt())
        .map_err(|e| LdlcError::InvalidParameter(format!("noise variance {sigma2}: {e}")))?;
    Ok((0..n).map(|_| normal.sample(rng)).collect())
}

fn point_seed(seed: u64, gap_db: f64) -> u64 {
    derive_seed(seed, gap_db.to_bits())
}

struct TrialOutcome {
    errors: u64,
    iterations: usize,
    failure: Option<&'static str>,
    forward_ffts: u64,
    inverse_ffts: u64,
}

fn failure_key(reason: FailureReason) -> &'static str {
    match reason {
        FailureReason::ZeroProduct => "zero_product",
        FailureReason::MaxIterations => "max_iterations",
    }
}

struct TrialRunner<'a> {
    n: usize,
    decoder: Decoder<'a>,
    encoder: Option<JacobiEncoder>,
    config: &'a SimConfig,
    sigma2: f64,
    seed: u64,
}

impl TrialRunner<'_> {
    fn run(&self, t: usize) -> Result<TrialOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, t as u64));
        let (b, x) = match (&self.encoder, self.config.random_codeword) {
            (Some(enc), Some(bmax)) => {
                let b: Vec<i64> = (0..self.n).map(|_| rng.random_range(-bmax..=bmax)).collect();
                match enc.encode(&b, &self.config.encoder) {
                    Ok(r) => (b, r.x),
                    Err(e) => {
                        log::warn!("trial {t}: encoding failed: {e}");
                        return Ok(TrialOutcome {
                            errors: 0,
                            iterations: 0,
                            failure: Some("encode"),
                            forward_ffts: 0,
                            inverse_ffts: 0,
                        });
                    }
                }
            }
            _ => (vec![0; self.n], vec![0.0; self.n]),
        };
        let noise = awgn(&mut rng, self.n, self.sigma2)?;
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, z)| a + z).collect();
        let res = self.decoder.decode(&y, self.sigma2)?;
        let errors = res.b_hat.iter().zip(&b).filter(|(a, b)| a != b).count() as u64;
        Ok(TrialOutcome {
            errors,
            iterations: res.iterations,
            failure: res.failure.map(failure_key),
            forward_ffts: res.forward_ffts,
            inverse_ffts: res.inverse_ffts,
        })
    }
}

/// Simulates one distance from capacity. Every trial draws from its own
/// seed, so results are identical for any worker count.
pub fn run_point(code: &MagicSquareLdlc, gap_db: f64, config: &SimConfig) -> Result<SerRecord> {
    config.validate()?;
    let start = Instant::now();
    let sigma2 = sigma2_from_capacity_gap(gap_db);
    let encoder = match config.random_codeword {
        Some(_) => Some(JacobiEncoder::new(code)?),
        None => None,
    };
    let runner = TrialRunner {
        n: code.n(),
        decoder: Decoder::new(code, config.decoder.clone())?,
        encoder,
        config,
        sigma2,
        seed: point_seed(config.seed, gap_db),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| LdlcError::InvalidParameter(format!("worker pool: {e}")))?;

    let mut rec = SerRecord {
        gap_db,
        sigma2,
        symbols_sent: 0,
        symbol_errors: 0,
        ser: 0.0,
        trials: 0,
        failures: BTreeMap::new(),
        wall_seconds: 0.0,
        iterations: BTreeMap::new(),
        forward_ffts: 0,
        inverse_ffts: 0,
        config: config.clone(),
    };
    let mut next = 0;
    while next < config.trials {
        let end = (next + BATCH).min(config.trials);
        let outcomes: Vec<Result<TrialOutcome>> =
            pool.install(|| (next..end).into_par_iter().map(|t| runner.run(t)).collect());
        for o in outcomes {
            let o = o?;
            rec.trials += 1;
            if o.failure != Some("encode") {
                rec.symbols_sent += code.n() as u64;
                rec.symbol_errors += o.errors;
                *rec.iterations.entry(o.iterations).or_default() += 1;
            }
            if let Some(f) = o.failure {
                *rec.failures.entry(f.to_string()).or_default() += 1;
            }
            rec.forward_ffts += o.forward_ffts;
            rec.inverse_ffts += o.inverse_ffts;
        }
        next = end;
        if config.target_errors.is_some_and(|e| rec.symbol_errors >= e) {
            break;
        }
    }
    rec.ser = if rec.symbols_sent > 0 {
        rec.symbol_errors as f64 / rec.symbols_sent as f64
    } else {
        0.0
    };
    rec.wall_seconds = start.elapsed().as_secs_f64();
    log::info!(
        "gap {gap_db} dB: {} errors / {} symbols (SER {:.3e}) in {:.1} s",
        rec.symbol_errors,
        rec.symbols_sent,
        rec.ser,
        rec.wall_seconds
    );
    Ok(rec)
}

/// Reads a JSON-lines record file. A truncated final line (from an
/// interrupted write) is dropped and the file rewritten without it.
pub fn read_records(path: &Path) -> Result<Vec<SerRecord>> {
    let lines: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<_>>()?;
    let mut records = Vec::new();
    let mut truncated = false;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(e) if Some(i) == last => {
                log::warn!("{}: dropping incomplete last record ({e})", path.display());
                truncated = true;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if truncated {
        let mut f = File::create(path)?;
        for r in &records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.sync_all()?;
    }
    Ok(records)
}

fn append_record(path: &Path, rec: &SerRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(rec)?)?;
    f.flush()?;
    f.sync_data()?;
    Ok(())
}

/// Runs every gap of `config`, appending each record to `out` as soon as it
/// completes. Gaps already present in `out` are not rerun.
pub fn sweep(code: &MagicSquareLdlc, config: &SimConfig, out: Option<&Path>) -> Result<Vec<SerRecord>> {
    config.validate()?;
    let existing = match out {
        Some(p) if p.exists() => read_records(p)?,
        _ => vec![],
    };
    let mut records = Vec::with_capacity(config.gaps_db.len());
    for &gap in &config.gaps_db {
        if let Some(r) = existing.iter().find(|r| r.gap_db.to_bits() == gap.to_bits()) {
            log::info!("gap {gap} dB already recorded; skipping");
            records.push(r.clone());
            continue;
        }
        let rec = run_point(code, gap, config)?;
        if let Some(p) = out {
            append_record(p, &rec)?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// Two-column `(gap_db, ser)` data for a log-scale plot, sorted by gap, with
/// a third column flagging zero-error points.
pub fn emit_plot_data(records: &[SerRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(LdlcError::InvalidParameter("no records to plot".into()));
    }
    let mut sorted: Vec<&SerRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.gap_db.total_cmp(&b.gap_db));
    let mut s = String::from(
        "# gap_db ser upper_bound\n\
         # upper_bound = 1: no errors observed, ser column holds 1/(2*symbols_sent)\n",
    );
    for r in sorted {
        let (ser, flag) = if r.symbol_errors == 0 && r.symbols_sent > 0 {
            (1.0 / (2.0 * r.symbols_sent as f64), 1)
        } else {
            (r.ser, 0)
        };
        s.push_str(&format!("{} {:e} {}\n", r.gap_db, ser, flag));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub n: usize,
    pub d: usize,
    pub samples_per_unit: usize,
    pub length: usize,
    pub iterations: usize,
    /// `n d t (1/delta) log2(1/delta)`.
    pub predicted_multiplies: f64,
    /// `n d L` samples per message array.
    pub predicted_storage: f64,
    pub predicted_ffts: u64,
    pub measured_forward_ffts: u64,
    pub measured_inverse_ffts: u64,
    pub measured_message_bytes: usize,
    pub fft_ratio: f64,
    pub storage_ratio: f64,
}

/// Cost model for `iterations` iterations at dimension `n`, degree `d`.
pub fn predicted_cost(n: usize, d: usize, grid: GridSpec, iterations: usize) -> (f64, f64) {
    let m = grid.samples_per_unit() as f64;
    let mult = n as f64 * d as f64 * iterations as f64 * m * m.log2();
    let storage = n as f64 * d as f64 * grid.length() as f64;
    (mult, storage)
}

/// Decodes one frame at the first configured gap and sets the measured
/// counters beside the cost model.
pub fn complexity_report(code: &MagicSquareLdlc, config: &SimConfig) -> Result<ComplexityReport> {
    config.validate()?;
    let gap = config.gaps_db[0];
    let sigma2 = sigma2_from_capacity_gap(gap);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(point_seed(config.seed, gap), 0));
    let y = awgn(&mut rng, code.n(), sigma2)?;
    let res = Decoder::new(code, config.decoder.clone())?.decode(&y, sigma2)?;
    let grid = config.decoder.grid;
    let (n, d, t) = (code.n(), code.d(), res.iterations);
    let (mult, storage) = predicted_cost(n, d, grid, t);
    let predicted_ffts = 2 * (n * d * t) as u64;
    let measured = res.forward_ffts + res.inverse_ffts;
    let elements = res.message_bytes / std::mem::size_of::<f64>();
    Ok(ComplexityReport {
        n,
        d,
        samples_per_unit: grid.samples_per_unit(),
        length: grid.length(),
        iterations: t,
        predicted_multiplies: mult,
        predicted_storage: storage,
        predicted_ffts,
        measured_forward_ffts: res.forward_ffts,
        measured_inverse_ffts: res.inverse_ffts,
        measured_message_bytes: res.message_bytes,
        fft_ratio: if predicted_ffts > 0 { measured as f64 / predicted_ffts as f64 } else { f64::NAN },
        storage_ratio: elements as f64 / storage,
    })
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n = {}, d = {}, 1/delta = {}, L = {}, iterations = {}", self.n, self.d, self.samples_per_unit, self.length, self.iterations)?;
        writeln!(f, "predicted multiplies   {:.3e}", self.predicted_multiplies)?;
        writeln!(f, "predicted storage      {:.3e} samples per message array", self.predicted_storage)?;
        writeln!(
            f,
            "FFTs                   {} forward + {} inverse (model {}, ratio {:.3})",
            self.measured_forward_ffts, self.measured_inverse_ffts, self.predicted_ffts, self.fft_ratio
        )?;
        write!(
            f,
            "message memory         {} bytes ({:.2} x model)",
            self.measured_message_bytes, self.storage_ratio
        )
    }
}
