//! `pdcsim`: run scenarios, sweep parameters, check reference tables,
//! plan prefill/decode connections, quantize matrices and fit planes.
//!
//! Exit codes: 0 success, 1 validation failure, 2 configuration or input
//! error. Log verbosity comes from `PDCSIM_LOG` (e.g. `PDCSIM_LOG=debug`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{debug, info};
use pdc_sim::interconnect::{calibrate_plane, estimate_ep_exchange, parse_measurements_csv, Mechanism, PlaneSpec};
use pdc_sim::prefill_hybrid::map_connections;
use pdc_sim::quantizer::{parse_matrix_csv, quantize_per_channel, quantize_per_token, QuantizedTensor, RealMatrix};
use pdc_sim::scenario::{parse_config, run_scenario, sweep_to_csv, sweep_with_threads};
use pdc_sim::validation::validate_tables;
use pdc_sim::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pdcsim", version, about = "Prefill/decode/caching disaggregated serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its JSON report.
    Run {
        config: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario once per value of one field and print a CSV.
    Sweep {
        config: PathBuf,
        /// batch, ep_degree, reuse_rate, seed, num_requests, access_plane, prefill_tp
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deployment planning helpers.
    Plan {
        #[command(subcommand)]
        what: PlanCommand,
    },
    /// Quantize a matrix file (`rows,cols` header, then row-major values).
    Quantize {
        matrix: PathBuf,
        #[arg(long, value_enum, default_value_t = GranularityArg::PerChannel)]
        granularity: GranularityArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check recomputed reference values.
    Validate {
        #[command(subcommand)]
        what: ValidateCommand,
    },
    /// Fit model parameters to measurements.
    Calibrate {
        #[command(subcommand)]
        what: CalibrateCommand,
    },
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Print the decode-rank to prefill-rank connection map as CSV.
    PdMap {
        #[arg(long, default_value_t = 16)]
        prefill_tp: usize,
        #[arg(long, default_value_t = 4)]
        decode_tp: usize,
        #[arg(long, default_value_t = 8)]
        decode_dp: usize,
    },
}

#[derive(Subcommand)]
enum ValidateCommand {
    /// Buffer sizes, model-cache table, mapping, MTP, pipeline and EP tables.
    Tables,
}

#[derive(Subcommand)]
enum CalibrateCommand {
    /// Fit a UB plane to `ep_degree,latency,bandwidth` rows.
    Plane { csv: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerToken,
    PerChannel,
}

enum Failure {
    Validation(String),
    Config(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let root = match &e {
            Error::Scenario { source, .. } => source.as_ref(),
            other => other,
        };
        match root {
            Error::Config(_)
            | Error::Io(_)
            | Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::InvalidDistribution(_)
            | Error::Divisibility(_)
            | Error::DegenerateCalibration(_) => Failure::Config(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => {
            fs::write(p, text).map_err(|e| Failure::Config(format!("cannot write {}: {e}", p.display())))?;
            info!("wrote {}", p.display());
            Ok(())
        }
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("values serialize")
}

#[derive(Serialize)]
struct QuantizeReport<'a> {
    schema_version: u32,
    rows: usize,
    cols: usize,
    quantized: &'a QuantizedTensor,
    max_abs_error: f64,
    relative_frobenius_error: f64,
}

fn quantize(matrix: &Path, granularity: GranularityArg, out: Option<&Path>) -> CliResult {
    let m: RealMatrix = parse_matrix_csv(&read(matrix)?)?;
    debug!("read {}x{} matrix", m.rows, m.cols);
    let q = match granularity {
        GranularityArg::PerToken => quantize_per_token(&m),
        GranularityArg::PerChannel => quantize_per_channel(&m),
    };
    let d = q.dequantize();
    let max_abs_error = m.values.iter().zip(&d.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let norm = m.frobenius();
    let report = QuantizeReport {
        schema_version: pdc_sim::scenario::SCHEMA_VERSION,
        rows: m.rows,
        cols: m.cols,
        quantized: &q,
        max_abs_error,
        relative_frobenius_error: if norm > 0.0 { m.distance(&d) / norm } else { 0.0 },
    };
    emit(out, &to_json(&report))
}

#[derive(Serialize)]
struct PlaneFit {
    schema_version: u32,
    plane: PlaneSpec,
    rows: Vec<FitRow>,
}

#[derive(Serialize)]
struct FitRow {
    ep_degree: usize,
    measured_latency: f64,
    predicted_latency: f64,
}

fn calibrate(csv: &Path) -> CliResult {
    let rows = parse_measurements_csv(&read(csv)?)?;
    let plane = calibrate_plane(&rows, &PlaneSpec::ub_template())?;
    let fit = PlaneFit {
        schema_version: pdc_sim::scenario::SCHEMA_VERSION,
        rows: rows
            .iter()
            .map(|m| FitRow {
                ep_degree: m.ep_degree,
                measured_latency: m.latency,
                predicted_latency: estimate_ep_exchange(
                    m.ep_degree,
                    m.payload_bytes().round() as u64,
                    &plane,
                    Mechanism::AivDirect,
                )
                .latency,
            })
            .collect(),
        plane,
    };
    emit(None, &to_json(&fit))
}

fn validate() -> CliResult {
    let checks = validate_tables()?;
    let mut failed = 0;
    for c in &checks {
        println!("{}", c.line());
        if !c.pass {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", checks.len(), failed);
    if failed > 0 {
        return Err(Failure::Validation(format!("{failed} reference checks failed")));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = parse_config(&config)?;
            info!("running scenario {}", cfg.name);
            let report = run_scenario(&cfg)?;
            emit(out.as_deref(), &report.to_json())
        }
        Command::Sweep {
            config,
            axis,
            values,
            threads,
            out,
        } => {
            let cfg = parse_config(&config)?;
            let threads = if threads == 0 {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                threads
            };
            info!("sweeping {axis} over {} values on {threads} threads", values.len());
            let reports = sweep_with_threads(&cfg, &axis, &values, threads)?;
            emit(out.as_deref(), &sweep_to_csv(&axis, &values, &reports)?)
        }
        Command::Plan {
            what: PlanCommand::PdMap {
                prefill_tp,
                decode_tp,
                decode_dp,
            },
        } => {
            let map = map_connections(prefill_tp, decode_tp, decode_dp)?;
            emit(None, &map.to_csv())
        }
        Command::Quantize {
            matrix,
            granularity,
            out,
        } => quantize(&matrix, granularity, out.as_deref()),
        Command::Validate {
            what: ValidateCommand::Tables,
        } => validate(),
        Command::Calibrate {
            what: CalibrateCommand::Plane { csv },
        } => calibrate(&csv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PDCSIM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
