use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rateshare::allocator::{allocate, AllocationReport, StageOutcome};
use rateshare::oracle::verify_report;
use rateshare_cli::scenario::{load_scenario, Scenario, SweepRange};
use rateshare_cli::sweep::{format_sig6, run_sweep, write_csv, SweepRow};

/// Stationarity residual above which `--verify` fails the run.
const VERIFY_STATIONARITY_LIMIT: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "rateshare",
    about = "Utility-proportional-fair multi-carrier rate allocation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file (JSON).
    scenario: PathBuf,
    /// Override the scenario's solver tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Re-derive KKT certificates for every solved stage and fail on
    /// stationarity residuals above 1e-3.
    #[arg(long)]
    verify: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single allocation and print the stage-by-stage report.
    Allocate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-run the allocation across a capacity range of one carrier and
    /// write the results as CSV.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Carrier whose capacity is swept (defaults to the scenario's sweep
        /// block).
        #[arg(long)]
        carrier: Option<u32>,
        /// First capacity value (defaults to the sweep block's).
        #[arg(long)]
        from: Option<f64>,
        /// Last capacity value, inclusive (defaults to the sweep block's).
        #[arg(long)]
        to: Option<f64>,
        /// Capacity increment (defaults to the sweep block's).
        #[arg(long)]
        step: Option<f64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for sweep points (defaults to all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Allocate { common } => {
            let scenario = load_common(&common)?;
            let carriers = scenario.concrete_carriers().map_err(|e| e.to_string())?;
            let report = allocate(&scenario.users, &carriers, scenario.tolerance)
                .map_err(|e| e.to_string())?;
            print_report(&common.scenario, &report);
            if common.verify {
                verify_reports(std::iter::once((None, &report)))?;
            }
            Ok(())
        }
        Command::Sweep { common, carrier, from, to, step, out, workers } => {
            let scenario = load_common(&common)?;
            let file_sweep = scenario.sweep_carrier();
            let carrier_id = carrier
                .or(file_sweep.map(|(id, _)| id))
                .ok_or("no swept carrier: pass --carrier or add a sweep block")?;
            let pick = |flag: Option<f64>, field: fn(SweepRange) -> f64, name: &str| {
                flag.or(file_sweep.map(|(_, r)| field(r)))
                    .ok_or(format!("missing --{name} and the scenario has no sweep block"))
            };
            let range = SweepRange {
                from: pick(from, |r| r.from, "from")?,
                to: pick(to, |r| r.to, "to")?,
                step: pick(step, |r| r.step, "step")?,
            };
            let rows =
                run_sweep(&scenario, carrier_id, range, workers).map_err(|e| e.to_string())?;
            let mut failed = 0;
            for row in rows.iter().filter(|r| r.result.is_err()) {
                failed += 1;
                eprintln!(
                    "warning: sweep value {} failed: {}",
                    format_sig6(row.sweep_value),
                    row.result.as_ref().unwrap_err()
                );
            }
            write_csv(&scenario, &rows, &out)
                .map_err(|e| format!("cannot write {}: {e}", out.display()))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            if failed > 0 {
                return Err(format!(
                    "{failed} of {} sweep rows failed (marked in the CSV)",
                    rows.len()
                ));
            }
            if common.verify {
                verify_reports(rows.iter().filter_map(|r: &SweepRow| {
                    r.result.as_ref().ok().map(|rep| (Some(r.sweep_value), rep))
                }))?;
            }
            Ok(())
        }
    }
}

fn load_common(common: &CommonArgs) -> Result<Scenario, String> {
    let mut scenario = load_scenario(&common.scenario).map_err(|e| e.to_string())?;
    if let Some(t) = common.tolerance {
        if !(t > 0.0 && t.is_finite()) {
            return Err(format!("tolerance must be finite and > 0, got {t}"));
        }
        scenario.tolerance = t;
    }
    Ok(scenario)
}

fn print_report(path: &Path, report: &AllocationReport) {
    println!(
        "scenario {} ({} users, {} carriers), tolerance {}",
        path.display(),
        report.users.len(),
        report.carriers.len(),
        format_sig6(report.delta)
    );
    for stage in &report.stages {
        match &stage.outcome {
            StageOutcome::Skipped => {
                println!(
                    "carrier {} (capacity {}): skipped, no user in coverage",
                    stage.carrier_id,
                    format_sig6(stage.capacity)
                );
            }
            StageOutcome::Solved { case, shadow_price, residual, users } => {
                println!(
                    "carrier {} (capacity {}): case {}, price {}, residual {}",
                    stage.carrier_id,
                    format_sig6(stage.capacity),
                    case,
                    format_sig6(*shadow_price),
                    format_sig6(*residual)
                );
                println!("  user  deficit      reservation  rate         cumulative");
                for d in users {
                    println!(
                        "  {:<5} {:<12} {:<12} {:<12} {:<12}",
                        d.user_id,
                        format_sig6(d.deficit),
                        format_sig6(d.reservation),
                        format_sig6(d.total),
                        format_sig6(d.cumulative_after)
                    );
                }
            }
        }
    }
    println!("final rates:");
    for s in &report.summaries {
        let note = if s.reachable { "" } else { "  (out of coverage)" };
        println!("  user {:<4} {}{}", s.user_id, format_sig6(s.final_rate), note);
    }
}

/// Prints one certificate line per solved stage and fails when any
/// stationarity residual exceeds the limit.
fn verify_reports<'a, I>(reports: I) -> Result<(), String>
where
    I: Iterator<Item = (Option<f64>, &'a AllocationReport)>,
{
    let mut worst = 0.0f64;
    let mut stages = 0usize;
    for (sweep_value, report) in reports {
        for cert in verify_report(report) {
            stages += 1;
            worst = worst.max(cert.report.stationarity);
            let prefix = match sweep_value {
                Some(v) => format!("sweep {} ", format_sig6(v)),
                None => String::new(),
            };
            println!(
                "verify: {prefix}carrier {}: stationarity {}, zero-rate violation {}, budget residual {}",
                cert.carrier_id,
                format_sig6(cert.report.stationarity),
                format_sig6(cert.report.zero_rate_violation),
                format_sig6(cert.report.budget_residual)
            );
        }
    }
    if worst > VERIFY_STATIONARITY_LIMIT {
        return Err(format!(
            "verification failed: worst stationarity residual {} exceeds {}",
            format_sig6(worst),
            format_sig6(VERIFY_STATIONARITY_LIMIT)
        ));
    }
    println!(
        "verify: {stages} stages checked, worst stationarity {}",
        format_sig6(worst)
    );
    Ok(())
}
