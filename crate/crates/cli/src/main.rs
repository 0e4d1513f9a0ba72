use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ldlc::analysis::{
    build_f, build_h_tilde, spectral_radius, variance_recursion, w_matrix, SpectralOptions,
};
use ldlc::decoder::{Decoder, DecoderParams};
use ldlc::encoder::{EncoderParams, JacobiEncoder};
use ldlc::lattice::{capacity_gap_db, normalize_determinant, GeneratingSequence, MagicSquareLdlc};
use ldlc::matrix_gen::{generate, validate_conditions};
use ldlc::pdf::GridSpec;
use ldlc::sim::{complexity_report, emit_plot_data, resolve_workers, sweep, SimConfig};

#[derive(Parser)]
#[command(name = "ldlc", version, about = "Low-density lattice codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a loop-free magic-square parity-check matrix.
    Gen(GenArgs),
    /// Decode a noisy observation.
    Decode(DecodeArgs),
    /// Map an integer vector to its lattice point.
    Encode(EncodeArgs),
    /// Convergence analytics for a matrix.
    Analyze(AnalyzeArgs),
    /// Symbol error rate against distance from capacity.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    /// Generating sequence; defaults to the dithered prime reciprocals.
    #[arg(long, value_delimiter = ',')]
    seq: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Check the four necessary conditions; exit nonzero if any fails.
    #[arg(long)]
    validate: bool,
    /// Keep the raw scale instead of normalizing to |det H| = 1.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Sample spacing, as a fraction `1/M` or a decimal.
    #[arg(long, default_value = "1/64")]
    delta: String,
    /// Grid range in units.
    #[arg(long, default_value_t = 4.0)]
    range: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Disable the one-sample widening of check messages.
    #[arg(long)]
    no_widen: bool,
    /// Run all iterations instead of stopping on a stable decision.
    #[arg(long)]
    no_early_stop: bool,
}

impl GridArgs {
    fn params(&self, diagnostics: bool) -> Result<DecoderParams> {
        Ok(DecoderParams {
            max_iterations: self.iters,
            grid: GridSpec::from_delta_range(parse_fraction(&self.delta)?, self.range)?,
            widen: !self.no_widen,
            early_stop: if self.no_early_stop { None } else { Some(4) },
            diagnostics,
            ..DecoderParams::default()
        })
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Observation vector; `-` reads stdin.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, conflicts_with = "gap_db", required_unless_present = "gap_db")]
    sigma2: Option<f64>,
    /// Noise level given as distance from capacity in dB.
    #[arg(long)]
    gap_db: Option<f64>,
    #[command(flatten)]
    grid: GridArgs,
    /// Write per-iteration variances and the stop reason here.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, requires = "steps")]
    variance_sigma2: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Estimate the spectral radii of the two iteration matrices.
    #[arg(long)]
    spectral: bool,
    /// Write the dense W matrix as JSON.
    #[arg(long)]
    w_matrix: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    gaps: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Stop a point after this many symbol errors (`--trials` becomes a cap).
    #[arg(long)]
    target_errors: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to LDLC_WORKERS, then to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// Send random encoded codewords instead of the all-zero one.
    #[arg(long, requires = "bmax")]
    random_codeword: bool,
    #[arg(long)]
    bmax: Option<i64>,
    /// Print the cost model against measured counters and exit.
    #[arg(long)]
    complexity: bool,
}

fn parse_fraction(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>()? / b.trim().parse::<f64>()?,
        None => s.trim().parse()?,
    };
    if !(v > 0.0) {
        bail!("expected a positive value, got {s}");
    }
    Ok(v)
}

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

/// Values separated by commas, whitespace or newlines; `#` starts a comment.
fn parse_vector<T: std::str::FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().with_context(|| format!("bad value {t:?}")))
        .collect()
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn lines<T: std::fmt::Display>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| format!("{v}\n")).collect()
}

fn load_matrix(path: &Path) -> Result<MagicSquareLdlc> {
    MagicSquareLdlc::load_json(path).with_context(|| format!("loading {}", path.display()))
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    let seq = match a.seq {
        Some(v) => GeneratingSequence::new(v)?,
        None => GeneratingSequence::dithered_primes(a.d)?,
    };
    if seq.degree() != a.d {
        bail!("--seq has {} values but --d is {}", seq.degree(), a.d);
    }
    let (mut code, report) = generate(a.n, &seq, a.seed)?;
    if !a.no_normalize {
        code = normalize_determinant(&code)?;
    }
    code.save_json(&a.out)?;
    let mut out = json!({ "generation": report });
    let mut code_ok = true;
    if a.validate {
        let cond = validate_conditions(&code)?;
        code_ok = cond.all_pass();
        out["conditions"] = serde_json::to_value(&cond)?;
    }
    emit(&(serde_json::to_string_pretty(&out)? + "\n"))?;
    Ok(if code_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn decode(a: DecodeArgs) -> Result<ExitCode> {
    let code = load_matrix(&a.matrix)?;
    let y: Vec<f64> = parse_vector(&read_input(&a.input)?)?;
    let sigma2 = match (a.sigma2, a.gap_db) {
        (Some(s), _) => s,
        (None, Some(g)) => ldlc::lattice::sigma2_from_capacity_gap(g),
        (None, None) => bail!("give --sigma2 or --gap-db"),
    };
    let params = a.grid.params(a.diagnostics.is_some())?;
    let res = Decoder::new(&code, params)?.decode(&y, sigma2)?;
    emit(&lines(&res.b_hat))?;
    if let Some(p) = a.diagnostics {
        let diag = json!({
            "sigma2": sigma2,
            "gap_db": capacity_gap_db(sigma2),
            "iterations": res.iterations,
            "converged": res.converged,
            "stop_reason": res.failure.map_or("converged".to_string(), |f| {
                serde_json::to_value(f).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            }),
            "max_syndrome": res.max_syndrome,
            "variances": res.variances,
            "forward_ffts": res.forward_ffts,
            "inverse_ffts": res.inverse_ffts,
        });
        fs::write(&p, serde_json::to_string_pretty(&diag)?)?;
    }
    Ok(if res.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn encode(a: EncodeArgs) -> Result<ExitCode> {
    let code = load_matrix(&a.matrix)?;
    let b: Vec<i64> = parse_vector(&read_input(&a.input)?)?;
    let params = EncoderParams { max_iterations: a.max_iters, tolerance: a.tol };
    let report = JacobiEncoder::new(&code)?.encode(&b, &params)?;
    emit(&lines(report.x.iter().map(|&x| ldlc::lattice::format_exact(x))))?;
    log::info!("{} sweeps, residual {:.3e}", report.iterations, report.residual);
    Ok(ExitCode::SUCCESS)
}

fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let code = load_matrix(&a.matrix)?;
    let mut out = json!({
        "n": code.n(),
        "d": code.d(),
        "sequence": code.seq().values(),
        "alpha": code.seq().alpha(),
    });
    if let (Some(s2), Some(steps)) = (a.variance_sigma2, a.steps) {
        out["variance"] = serde_json::to_value(variance_recursion(code.seq(), s2, steps)?)?;
    }
    if a.spectral {
        let opts = SpectralOptions::default();
        out["spectral"] = json!({
            "h_tilde": spectral_radius(&build_h_tilde(&code)?, &opts)?,
            "f": spectral_radius(&build_f(&code)?, &opts)?,
        });
    }
    if let Some(p) = a.w_matrix {
        let w = w_matrix(&code)?;
        let rows: Vec<Vec<f64>> = w.w.row_iter().map(|r| r.iter().copied().collect()).collect();
        fs::write(&p, serde_json::to_string(&json!({ "n": code.n(), "asymmetry": w.asymmetry, "w": rows }))?)?;
        out["w_asymmetry"] = json!(w.asymmetry);
    }
    emit(&(serde_json::to_string_pretty(&out)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let code = load_matrix(&a.matrix)?;
    let config = SimConfig {
        matrix: a.matrix.display().to_string(),
        gaps_db: a.gaps,
        trials: a.trials,
        target_errors: a.target_errors,
        decoder: a.grid.params(false)?,
        seed: a.seed,
        workers: resolve_workers(a.workers),
        random_codeword: if a.random_codeword { a.bmax } else { None },
        encoder: EncoderParams::default(),
    };
    if a.complexity {
        emit(&format!("{}\n", complexity_report(&code, &config)?))?;
        return Ok(ExitCode::SUCCESS);
    }
    let records = sweep(&code, &config, a.out.as_deref())?;
    emit(&lines(records.iter().map(|r| {
        format!(
            "gap {:>6.2} dB  SER {:.3e}  ({} / {} symbols, {} trials, {:.1} s)",
            r.gap_db, r.ser, r.symbol_errors, r.symbols_sent, r.trials, r.wall_seconds
        )
    })))?;
    if let Some(p) = a.plot {
        fs::write(&p, emit_plot_data(&records)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Decode(a) => decode(a),
        Command::Encode(a) => encode(a),
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
