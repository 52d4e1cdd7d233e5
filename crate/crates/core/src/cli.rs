//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O, parse, usage or validation failure (and a
//! failed gradient check), 2 an input escaped an approximation domain,
//! 3 every training seed diverged.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    compare_normalizers, epsilon_error_sweep, length_growth_contrast, locality_sweep, Distribution, SweepSpec,
};
use crate::attention::{AttentionConfig, Variant, DEFAULT_EPSILON, DEFAULT_EPSILON_PRIME, DEFAULT_P};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, smooth_input, toy_train, BlockOp, Differentiable, RowOp, ToyTrainConfig};
use crate::polymodel::{convert_block, ApproxConfig, BlockWeights};
use crate::tensor::Matrix;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_DOMAIN: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "polyattn", version, about = "Polynomial-friendly attention toolkit")]
struct Cli {
    /// Single-threaded, byte-stable execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the seed given in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Epsilon,
    Locality,
    Length,
    Compare,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replace every non-polynomial op of a block and write a report.
    Convert {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one of the experiment sweeps.
    Sweep {
        kind: SweepKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Train the toy model and write its loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Write a randomly initialized block weights file.
    GenWeights {
        #[arg(long)]
        d_model: usize,
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        d_ff: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return EXIT_OK;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return EXIT_FAILURE;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Domain { .. } => EXIT_DOMAIN,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    // Everything below is single-threaded already, so `--deterministic`
    // needs no extra work.
    let _ = cli.deterministic;
    match &cli.command {
        Command::Convert { weights, config, out } => cmd_convert(weights, config, out, cli.seed),
        Command::Sweep {
            kind,
            config,
            out,
            format,
        } => cmd_sweep(*kind, config, out, *format, cli.seed),
        Command::Gradcheck { config, out, format } => cmd_gradcheck(config.as_deref(), out.as_deref(), *format, cli.seed),
        Command::Train { config, out, format } => cmd_train(config, out, *format, cli.seed),
        Command::GenWeights {
            d_model,
            heads,
            d_ff,
            out,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            BlockWeights::random(*d_model, *heads, *d_ff, &mut rng)?.save(out)?;
            Ok(EXIT_OK)
        }
    }
}

/// Prefixes I/O and parse errors with the file they came from.
fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| with_path(path, e.into()))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| with_path(path, e.into()))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_count")]
    pub count: usize,
    pub seq_len: usize,
    #[serde(default = "default_probe_std")]
    pub std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_probe_count() -> usize {
    64
}
fn default_probe_std() -> f64 {
    1.0
}

/// Config of `convert`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertConfig {
    pub attention: AttentionConfig,
    #[serde(default)]
    pub approx: ApproxConfig,
    pub probes: ProbeConfig,
}

/// Gaussian probe inputs of shape `seq_len x d_model`.
pub fn probe_inputs(p: &ProbeConfig, d_model: usize) -> Result<Vec<Matrix>> {
    if p.count == 0 || p.seq_len == 0 {
        return Err(Error::InvalidArgument("probe count and seq_len must be positive".into()));
    }
    if !(p.std.is_finite() && p.std > 0.0) {
        return Err(Error::InvalidArgument(format!("probe std = {} must be positive", p.std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    Ok((0..p.count)
        .map(|_| Matrix::random_normal(p.seq_len, d_model, p.std, &mut rng))
        .collect())
}

fn cmd_convert(weights: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<i32> {
    let w = BlockWeights::load(weights).map_err(|e| with_path(weights, e))?;
    let mut cfg: ConvertConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.probes.seed = s;
    }
    if cfg.attention.d_k != w.d_k() {
        return Err(Error::InvalidArgument(format!(
            "config d_k = {} but the weights have d_k = {}",
            cfg.attention.d_k,
            w.d_k()
        )));
    }
    let probes = probe_inputs(&cfg.probes, w.d_model())?;
    let (_, report) = convert_block(&w, &cfg.attention, &cfg.approx, &probes)?;
    write_out(out, &to_json(&report)?)?;
    println!("ledger_total {}", report.ledger.total());
    println!("max_block_error {:e}", report.max_block_error);
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpsilonSweepConfig {
    spec: SweepSpec,
    #[serde(default = "default_budget")]
    budget: u32,
    #[serde(default = "default_s_max")]
    s_max: f64,
}

fn default_budget() -> u32 {
    8
}
fn default_s_max() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LengthSweepConfig {
    spec: SweepSpec,
    #[serde(default = "default_distribution")]
    distribution: Distribution,
    #[serde(default = "default_p")]
    p: u32,
}

fn default_distribution() -> Distribution {
    Distribution::Normal
}
fn default_p() -> u32 {
    DEFAULT_P
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalitySweepConfig {
    spec: SweepSpec,
    train: ToyTrainConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareConfig {
    #[serde(default = "default_distribution")]
    distribution: Distribution,
    n: usize,
    #[serde(default = "default_p")]
    p: u32,
    #[serde(default)]
    seed: u64,
}

fn cmd_sweep(kind: SweepKind, config: &Path, out: &Path, format: Format, seed: Option<u64>) -> Result<i32> {
    let render = |r: &crate::analysis::SweepResult| match format {
        Format::Csv => Ok(r.to_csv()),
        Format::Json => r.to_json(),
    };
    let text = match kind {
        SweepKind::Epsilon => {
            let mut c: EpsilonSweepConfig = read_config(config)?;
            c.spec.seed = seed.unwrap_or(c.spec.seed);
            render(&epsilon_error_sweep(&c.spec, c.budget, c.s_max)?)?
        }
        SweepKind::Length => {
            let mut c: LengthSweepConfig = read_config(config)?;
            c.spec.seed = seed.unwrap_or(c.spec.seed);
            render(&length_growth_contrast(&c.spec, c.distribution, c.p)?)?
        }
        SweepKind::Locality => {
            let mut c: LocalitySweepConfig = read_config(config)?;
            c.spec.seed = seed.unwrap_or(c.spec.seed);
            let outcome = locality_sweep(&c.spec, &c.train)?;
            if let Some(w) = &outcome.warning {
                eprintln!("{w}");
            }
            render(&outcome.result)?
        }
        SweepKind::Compare => {
            let c: CompareConfig = read_config(config)?;
            let cmp = compare_normalizers(c.distribution, c.n, c.p, seed.unwrap_or(c.seed))?;
            println!("rank_correlation {}", cmp.rank_correlation);
            println!("positive_rank_correlation {}", cmp.positive_rank_correlation);
            match format {
                Format::Json => to_json(&cmp)?,
                Format::Csv => {
                    let mut s = String::from("input,softmax,power_softmax\n");
                    for i in 0..cmp.input.len() {
                        s.push_str(&format!("{},{},{}\n", cmp.input[i], cmp.softmax[i], cmp.power_softmax[i]));
                    }
                    s
                }
            }
        }
    };
    write_out(out, &text)?;
    Ok(EXIT_OK)
}

/// Config of `gradcheck`; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default = "default_row_len")]
    pub row_len: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_block_tolerance")]
    pub block_tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_points() -> usize {
    20
}
fn default_row_len() -> usize {
    6
}
fn default_tolerance() -> f64 {
    1e-5
}
fn default_block_tolerance() -> f64 {
    1e-4
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub op: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs the gradient suite: every normalizer and LayerNorm on smooth random
/// points, then a small exact block per representative variant.
pub fn gradcheck_suite(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    if cfg.points == 0 || cfg.row_len < 2 {
        return Err(Error::InvalidArgument("gradcheck needs points >= 1 and row_len >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.row_len;
    let gain: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let bias: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.1).collect();
    let ops = [
        RowOp::power_softmax(cfg.p),
        RowOp::lipschitz(cfg.p, DEFAULT_EPSILON),
        RowOp::stable(cfg.p, DEFAULT_EPSILON_PRIME, DEFAULT_EPSILON),
        RowOp::length_agnostic(cfg.p, DEFAULT_EPSILON),
        RowOp::softmax(),
        RowOp::layernorm(gain, bias),
    ];
    let mut rows = Vec::new();
    for op in &ops {
        rows.push(check_many(op, cfg.points, cfg.tolerance, |rng| smooth_input(2, n, rng), &mut rng)?);
    }
    for variant in [Variant::Softmax, Variant::PowerStable, Variant::LengthAgnostic] {
        let mut cfg_a = AttentionConfig::new(variant, 4);
        cfg_a.p = cfg.p;
        let op = BlockOp {
            weights: BlockWeights::random(4, 1, 8, &mut rng)?,
            cfg: cfg_a,
        };
        rows.push(check_many(
            &op,
            cfg.points,
            cfg.block_tolerance,
            |rng| Matrix::random_normal(3, 4, 1.0, rng),
            &mut rng,
        )?);
    }
    Ok(rows)
}

fn check_many(
    op: &dyn Differentiable,
    points: usize,
    tolerance: f64,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Matrix,
    rng: &mut ChaCha8Rng,
) -> Result<GradcheckRow> {
    let mut worst = 0.0f64;
    for _ in 0..points {
        let x = sample(rng);
        worst = worst.max(grad_check(op, &x, tolerance)?.max_rel_err);
    }
    Ok(GradcheckRow {
        op: op.name(),
        points,
        max_rel_err: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

fn cmd_gradcheck(config: Option<&Path>, out: Option<&Path>, format: Format, seed: Option<u64>) -> Result<i32> {
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => GradcheckConfig::default(),
    };
    cfg.seed = seed.unwrap_or(cfg.seed);
    let rows = gradcheck_suite(&cfg)?;
    println!("{:<36} {:>7} {:>13} {:>10}  status", "op", "points", "max_rel_err", "tolerance");
    for r in &rows {
        println!(
            "{:<36} {:>7} {:>13.3e} {:>10.0e}  {}",
            r.op,
            r.points,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = out {
        let text = match format {
            Format::Json => to_json(&rows)?,
            Format::Csv => {
                let mut s = String::from("op,points,max_rel_err,tolerance,passed\n");
                for r in &rows {
                    s.push_str(&format!(
                        "\"{}\",{},{},{},{}\n",
                        r.op, r.points, r.max_rel_err, r.tolerance, r.passed
                    ));
                }
                s
            }
        };
        write_out(path, &text)?;
    }
    Ok(if rows.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_FAILURE })
}

/// Config of `train`: one base config and optionally several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub train: ToyTrainConfig,
    /// Replaces `train.seed` when present.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TrainRun {
    seed: u64,
    diverged: bool,
    losses: Vec<f64>,
}

fn cmd_train(config: &Path, out: &Path, format: Format, seed: Option<u64>) -> Result<i32> {
    let cfg: TrainConfig = read_config(config)?;
    let seeds = match (seed, &cfg.seeds) {
        (Some(s), _) => vec![s],
        (None, Some(list)) if list.is_empty() => {
            return Err(Error::InvalidArgument("seeds must not be empty".into()));
        }
        (None, Some(list)) => list.clone(),
        (None, None) => vec![cfg.train.seed],
    };
    let mut runs = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let mut c = cfg.train.clone();
        c.seed = s;
        let r = toy_train(&c)?;
        match (r.initial_loss(), r.final_loss()) {
            (Some(a), Some(b)) => println!("seed {s}: loss {a:.4} -> {b:.4}{}", if r.diverged { " (diverged)" } else { "" }),
            _ => println!("seed {s}: diverged before the first step"),
        }
        runs.push(TrainRun {
            seed: s,
            diverged: r.diverged,
            losses: r.losses,
        });
    }
    let text = match format {
        Format::Json => to_json(&runs)?,
        Format::Csv => {
            let mut s = String::from("seed,step,loss\n");
            for r in &runs {
                for (i, l) in r.losses.iter().enumerate() {
                    s.push_str(&format!("{},{},{}\n", r.seed, i, l));
                }
            }
            s
        }
    };
    write_out(out, &text)?;
    if runs.iter().all(|r| r.diverged) {
        eprintln!("error: training diverged for every seed");
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}
