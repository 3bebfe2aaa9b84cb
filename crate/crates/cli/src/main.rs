//! `toruslab`: batch experiment runner for affine random walks on the
//! torus and on F_p^d. Subcommands read parameters from a JSON config
//! (strictly validated) plus a few command-line overrides, write tidy
//! CSV/JSON outputs, and record every run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use toruslab_cli::builtin;
use toruslab_cli::commands;
use toruslab_cli::config::{ExperimentConfig, SpecSource};

#[derive(Parser)]
#[command(
    name = "toruslab",
    version,
    about = "Exact and statistical experiments for affine random walks on T^d and F_p^d"
)]
struct Cli {
    /// JSON experiment config; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for all randomized subcommands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Force exact interpretation of coordinates.
    #[arg(long, global = true, conflicts_with = "float")]
    exact: bool,

    /// Force float interpretation of coordinates.
    #[arg(long, global = true)]
    float: bool,

    /// Named spec (std-sl2, hyperbolic-pair, trapped-q3, fp-fixedpoint)
    /// or a path to a spec JSON file.
    #[arg(long, global = true)]
    spec: Option<String>,

    /// Starting point, e.g. "1/3,2/3" (exact) or "0.41,0.73" (float).
    #[arg(long, global = true)]
    x: Option<String>,

    /// Frequency vector, e.g. "3,0".
    #[arg(long, global = true)]
    a: Option<String>,

    /// Step count / maximum time.
    #[arg(long, global = true)]
    n: Option<usize>,

    /// Monte Carlo sample count (chains).
    #[arg(long, global = true)]
    samples: Option<usize>,

    /// Prime modulus for fp-* subcommands.
    #[arg(long, global = true)]
    p: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact orbit closure with height certificate.
    Orbit,
    /// Minimal height q of the finite orbit.
    Height,
    /// Certified upper bound on the distance to P_Q.
    PqDistance,
    /// Seeded Monte Carlo endpoints of the walk.
    Simulate,
    /// Fourier modulus per step count with a log-linear fit.
    DecayScan,
    /// Exhaustive Fourier table over a frequency box.
    Weyl,
    /// Trapping lower-bound report at a divisible frequency.
    TrapCheck,
    /// Top Lyapunov exponent of the linear part.
    Lyapunov,
    /// Alpha-energy and diagonal mass of an evolved Dirac.
    Energy,
    /// Contraction-hypothesis fit for the pair walk.
    ChFit,
    /// Drift inequality check with a supplied additive constant.
    MargulisCheck,
    /// Checkerboard decomposition with verified certificate.
    Decompose,
    /// Orbit census of the mod-p linear action.
    FpCensus,
    /// Exact mod-p distribution evolution with norm profiles.
    FpEvolve,
    /// Regular-representation spectral gap on the group table.
    FpGap,
    /// Trapped-or-decay verdict for the mod-p walk.
    FpDichotomy,
    /// Integer-linear approximation of a near-lattice point.
    Solzlin,
    /// Run the full acceptance suite (exit code reflects the result).
    VerifyAll,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Orbit => "orbit",
            Command::Height => "height",
            Command::PqDistance => "pq-distance",
            Command::Simulate => "simulate",
            Command::DecayScan => "decay-scan",
            Command::Weyl => "weyl",
            Command::TrapCheck => "trap-check",
            Command::Lyapunov => "lyapunov",
            Command::Energy => "energy",
            Command::ChFit => "ch-fit",
            Command::MargulisCheck => "margulis-check",
            Command::Decompose => "decompose",
            Command::FpCensus => "fp-census",
            Command::FpEvolve => "fp-evolve",
            Command::FpGap => "fp-gap",
            Command::FpDichotomy => "fp-dichotomy",
            Command::Solzlin => "solzlin",
            Command::VerifyAll => "verify-all",
        }
    }
}

fn main() -> ExitCode {
    // TORUSLAB_THREADS caps the parallelism of every subcommand
    if let Ok(v) = std::env::var("TORUSLAB_THREADS") {
        if let Ok(threads) = v.parse::<usize>() {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build_global()
                .ok();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(all_pass) => {
            if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };

    // command-line overrides
    if let Some(name) = &cli.spec {
        cfg.spec = Some(resolve_spec_flag(name)?);
    }
    if let Some(x) = &cli.x {
        cfg.x = Some(point_flag_to_values(x));
    }
    if let Some(a) = &cli.a {
        cfg.a = Some(
            a.split(',')
                .map(|t| t.trim().parse::<i64>().map_err(|e| format!("bad frequency: {e}")))
                .collect::<Result<_, _>>()?,
        );
    }
    if cli.n.is_some() {
        cfg.n = cli.n;
    }
    if cli.samples.is_some() {
        cfg.samples = cli.samples;
    }
    if cli.p.is_some() {
        cfg.p = cli.p;
    }
    if cli.exact {
        cfg.mode = Some("exact".into());
    }
    if cli.float {
        cfg.mode = Some("float".into());
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    let ctx = commands::Ctx { cfg, out_dir, seed };
    let record = commands::dispatch(cli.command.name(), &ctx)?;
    if !matches!(cli.command, Command::VerifyAll) {
        emit(&serde_json::to_string_pretty(&record.verdicts).unwrap());
        for o in &record.outputs {
            emit(&format!("wrote {o}"));
        }
    }
    let all_pass = record
        .verdicts
        .get("all_pass")
        .and_then(|v| v.as_bool())
        .unwrap_or(true);
    Ok(all_pass)
}

/// A spec flag is a built-in name or a path to a spec JSON file.
fn resolve_spec_flag(name: &str) -> Result<SpecSource, String> {
    if builtin::by_name(name).is_some() {
        return Ok(SpecSource::Named(name.to_string()));
    }
    let path = PathBuf::from(name);
    if path.exists() {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| format!("cannot read spec {}: {e}", path.display()))?;
        let dto = serde_json::from_str(&text).map_err(|e| format!("spec file invalid: {e}"))?;
        return Ok(SpecSource::Inline(dto));
    }
    Err(format!("unknown spec {name:?} (not a built-in, not a file)"))
}

/// Print a line, tolerating a closed pipe (e.g. `toruslab ... | head`).
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn point_flag_to_values(s: &str) -> Vec<serde_json::Value> {
    s.split(',')
        .map(|tok| {
            let tok = tok.trim();
            if tok.contains('/') || !tok.contains('.') {
                serde_json::Value::String(tok.to_string())
            } else {
                match serde_json::Number::from_f64(tok.parse::<f64>().unwrap_or(f64::NAN)) {
                    Some(n) => serde_json::Value::Number(n),
                    None => serde_json::Value::String(tok.to_string()),
                }
            }
        })
        .collect()
}
