//! Command-line runner for decentralized factor-graph fusion scenarios.
//!
//! Subcommands: `run` (single realization, trace CSV), `mc` (Monte Carlo
//! batch, metrics CSV + summary JSON), `costs` (communication/computation
//! ledger) and `validate-config`. Exit codes: 0 success, 2 configuration
//! error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fgddf::metrics::{compute_costs, metrics_csv, run_monte_carlo, run_seed, summary_json};
use fgddf::scenario::{
    build_mapping_scenario, build_tracking_scenario, realize, run_centralized, run_decentralized,
};
use fgddf::{Error, ScenarioConfig};

#[derive(Parser)]
#[command(name = "fgddf", version, about = "Decentralized data fusion on Gaussian factor graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Agents keep only their heterogeneous variable subsets.
    Heterogeneous,
    /// Every agent carries the full global state.
    Homogeneous,
    /// Single filter consuming all measurements (no network).
    Centralized,
}

#[derive(Subcommand)]
enum Command {
    /// Run one realization and write the trace CSV.
    Run {
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Mode::Heterogeneous)]
        mode: Mode,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a Monte Carlo batch and write metrics CSV plus summary JSON.
    Mc {
        #[arg(long)]
        config: String,
        #[arg(long)]
        runs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Mode::Heterogeneous)]
        mode: Mode,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run one realization and write the cost ledger.
    Costs {
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check a scenario config (schema, priors, tree topology).
    ValidateConfig { config: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Topology(_)
        | Error::Json(_)
        | Error::Io(_)
        | Error::UnknownVariable(_)
        | Error::DuplicateVariable(_)
        | Error::DimensionMismatch(_) => 2,
        Error::SingularMarginalization(_)
        | Error::NotADistribution(_)
        | Error::ImproperPosterior(_)
        | Error::FusionDeferred { .. }
        | Error::Protocol(_) => 3,
    }
}

/// Resolve `--config`: an existing file path, or one of the built-in
/// scenarios by name (`tracking[.json]`, `mapping[.json]`).
fn load_config(arg: &str) -> Result<ScenarioConfig, Error> {
    let path = Path::new(arg);
    if path.exists() {
        let text = fs::read_to_string(path)?;
        return ScenarioConfig::from_json(&text);
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(arg);
    match stem {
        "tracking" => Ok(build_tracking_scenario()),
        "mapping" => Ok(build_mapping_scenario()),
        _ => Err(Error::Config(format!(
            "config `{arg}` is neither a readable file nor a built-in scenario (tracking, mapping)"
        ))),
    }
}

/// Flag wins, then the FGDDF_OUT_DIR environment variable, then `./fgddf-out`.
fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("FGDDF_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("fgddf-out"))
}

fn checked_seed(seed: u64) -> Result<u64, Error> {
    if seed == 0 {
        return Err(Error::Config("seed must be positive".into()));
    }
    Ok(seed)
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::ValidateConfig { config } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            println!(
                "ok: {} agents, {} variables ({} scalars), {} links, tree topology",
                cfg.agents.len(),
                cfg.variables.len(),
                cfg.global_dim(),
                cfg.links.len()
            );
            Ok(())
        }
        Command::Run {
            config,
            seed,
            mode,
            out_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if mode == Mode::Homogeneous {
                cfg = cfg.homogenize();
            }
            let seed = checked_seed(seed.unwrap_or(cfg.mc.seed))?;
            let out = resolve_out_dir(out_dir);
            fs::create_dir_all(&out)?;
            let realization = realize(&cfg, run_seed(seed, 0))?;
            let csv = match mode {
                Mode::Centralized => run_centralized(&cfg, &realization)?.to_csv()?,
                _ => run_decentralized(&cfg, &realization)?.to_csv(),
            };
            write_out(&out, "trace.csv", &csv)?;
            write_out(&out, "config.json", &cfg.to_json()?)?;
            Ok(())
        }
        Command::Mc {
            config,
            runs,
            seed,
            mode,
            out_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if mode == Mode::Centralized {
                return Err(Error::Config(
                    "mc supports --mode heterogeneous or homogeneous".into(),
                ));
            }
            if mode == Mode::Homogeneous {
                cfg = cfg.homogenize();
            }
            if let Some(r) = runs {
                if r == 0 {
                    return Err(Error::Config("runs must be positive".into()));
                }
                cfg.mc.runs = r;
            }
            if let Some(s) = seed {
                cfg.mc.seed = checked_seed(s)?;
            }
            let out = resolve_out_dir(out_dir);
            fs::create_dir_all(&out)?;
            let metrics = run_monte_carlo(&cfg)?;
            let realization = realize(&cfg, run_seed(cfg.mc.seed, 0))?;
            let trace = run_decentralized(&cfg, &realization)?;
            let costs = compute_costs(&cfg, &trace)?;
            write_out(&out, "metrics.csv", &metrics_csv(&metrics))?;
            write_out(
                &out,
                "summary.json",
                &serde_json::to_string_pretty(&summary_json(&metrics, &costs))?,
            )?;
            Ok(())
        }
        Command::Costs {
            config,
            seed,
            out_dir,
        } => {
            let cfg = load_config(&config)?;
            let seed = checked_seed(seed.unwrap_or(cfg.mc.seed))?;
            let out = resolve_out_dir(out_dir);
            fs::create_dir_all(&out)?;
            let realization = realize(&cfg, run_seed(seed, 0))?;
            let trace = run_decentralized(&cfg, &realization)?;
            let costs = compute_costs(&cfg, &trace)?;
            write_out(&out, "costs.json", &serde_json::to_string_pretty(&costs)?)?;
            println!(
                "comm_ratio {:.4} comp_ratio {:.4}",
                costs.comm_ratio, costs.comp_ratio
            );
            Ok(())
        }
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}
