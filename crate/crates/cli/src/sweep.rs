//! Capacity sweeps and their CSV serialization.
//!
//! A sweep re-runs the full staged allocation once per capacity value of one
//! carrier and serializes what the experiments plot: per-user per-carrier
//! rates, final aggregated rates, shadow prices, and stage case labels.

use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;

use rateshare::allocator::{allocate, AllocationReport, StageOutcome};

use crate::scenario::{Scenario, ScenarioError, SweepRange};

/// One sweep point: either a full allocation report or an error marker.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub sweep_value: f64,
    pub result: Result<AllocationReport, String>,
}

/// Runs the allocation once per capacity in `range` substituted into carrier
/// `carrier_id`. Rows come back ordered by sweep value regardless of worker
/// scheduling; a solver failure marks its row and leaves the rest intact.
pub fn run_sweep(
    scenario: &Scenario,
    carrier_id: u32,
    range: SweepRange,
    workers: Option<usize>,
) -> Result<Vec<SweepRow>, ScenarioError> {
    if !(range.from > 0.0 && range.step > 0.0) {
        return Err(ScenarioError::Invalid(format!(
            "sweep range needs from > 0 and step > 0, got from={} step={}",
            range.from, range.step
        )));
    }
    // Surface bad carrier ids / missing capacities before spawning work.
    scenario.carriers_with(carrier_id, range.from)?;

    let values = range.values();
    let solve_point = |&value: &f64| -> SweepRow {
        let carriers = match scenario.carriers_with(carrier_id, value) {
            Ok(c) => c,
            Err(e) => return SweepRow { sweep_value: value, result: Err(e.to_string()) },
        };
        let result = allocate(&scenario.users, &carriers, scenario.tolerance)
            .map_err(|e| e.to_string());
        SweepRow { sweep_value: value, result }
    };

    let rows = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ScenarioError::Invalid(format!("worker pool: {e}")))?
            .install(|| values.par_iter().map(solve_point).collect()),
        None => values.par_iter().map(solve_point).collect(),
    };
    Ok(rows)
}

/// Renders a number with 6 significant digits (scientific notation, stable
/// across platforms).
pub fn format_sig6(x: f64) -> String {
    format!("{x:.5e}")
}

/// CSV header for a scenario: `sweep_value`, then `r_<uid>_c<cid>` for every
/// user and carrier, `r_<uid>_final` per user, `p_c<cid>` and `case_c<cid>`
/// per carrier, all id-ascending.
pub fn csv_header(scenario: &Scenario) -> String {
    let users = scenario.user_ids();
    let carriers = scenario.carrier_ids();
    let mut cols = vec!["sweep_value".to_string()];
    for &u in &users {
        for &c in &carriers {
            cols.push(format!("r_{u}_c{c}"));
        }
    }
    for &u in &users {
        cols.push(format!("r_{u}_final"));
    }
    for &c in &carriers {
        cols.push(format!("p_c{c}"));
    }
    for &c in &carriers {
        cols.push(format!("case_c{c}"));
    }
    cols.join(",")
}

fn csv_row(scenario: &Scenario, row: &SweepRow) -> String {
    let users = scenario.user_ids();
    let carriers = scenario.carrier_ids();
    let mut cells = vec![format_sig6(row.sweep_value)];
    match &row.result {
        Ok(report) => {
            for &u in &users {
                for &c in &carriers {
                    cells.push(format_sig6(report.carrier_rate(u, c)));
                }
            }
            for &u in &users {
                cells.push(format_sig6(report.final_rate(u).unwrap_or(0.0)));
            }
            for &c in &carriers {
                let price = report.stage(c).and_then(|s| match &s.outcome {
                    StageOutcome::Solved { shadow_price, .. } => Some(*shadow_price),
                    StageOutcome::Skipped => None,
                });
                cells.push(price.map(format_sig6).unwrap_or_else(|| "nan".into()));
            }
            for &c in &carriers {
                let label = report.stage(c).map(|s| match &s.outcome {
                    StageOutcome::Solved { case, .. } => case.label(),
                    StageOutcome::Skipped => "skipped",
                });
                cells.push(label.unwrap_or("skipped").to_string());
            }
        }
        Err(_) => {
            let numeric = users.len() * carriers.len() + users.len() + carriers.len();
            cells.extend(std::iter::repeat_n("nan".to_string(), numeric));
            cells.extend(std::iter::repeat_n("error".to_string(), carriers.len()));
        }
    }
    cells.join(",")
}

/// Renders the whole sweep as a CSV document, rows ascending by sweep value.
pub fn render_csv(scenario: &Scenario, rows: &[SweepRow]) -> String {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.sweep_value.total_cmp(&b.sweep_value));
    let mut out = csv_header(scenario);
    out.push('\n');
    for row in sorted {
        out.push_str(&csv_row(scenario, row));
        out.push('\n');
    }
    out
}

pub fn write_csv(scenario: &Scenario, rows: &[SweepRow], path: &Path) -> io::Result<()> {
    fs::write(path, render_csv(scenario, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_scenario;
    use std::path::PathBuf;

    fn fixture(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
    }

    #[test]
    fn header_schema_is_fixed_by_ids() {
        let s = load_scenario(&fixture("single_carrier.json")).unwrap();
        assert_eq!(
            csv_header(&s),
            "sweep_value,r_1_c1,r_2_c1,r_3_c1,r_4_c1,r_1_final,r_2_final,r_3_final,r_4_final,p_c1,case_c1"
        );
    }

    #[test]
    fn format_uses_six_significant_digits() {
        assert_eq!(format_sig6(60.0), "6.00000e1");
        assert_eq!(format_sig6(0.001), "1.00000e-3");
        assert_eq!(format_sig6(0.0), "0.00000e0");
        assert_eq!(format_sig6(123456.789), "1.23457e5");
    }

    #[test]
    fn empty_range_yields_no_rows() {
        let s = load_scenario(&fixture("single_carrier.json")).unwrap();
        let rows = run_sweep(&s, 1, SweepRange { from: 100.0, to: 50.0, step: 10.0 }, None).unwrap();
        assert!(rows.is_empty());
        let doc = render_csv(&s, &rows);
        assert_eq!(doc.lines().count(), 1);
    }

    #[test]
    fn two_point_sweep_writes_three_lines() {
        let s = load_scenario(&fixture("single_carrier.json")).unwrap();
        let rows = run_sweep(&s, 1, SweepRange { from: 60.0, to: 70.0, step: 10.0 }, Some(2)).unwrap();
        assert_eq!(rows.len(), 2);
        let doc = render_csv(&s, &rows);
        assert_eq!(doc.lines().count(), 3);
        assert!(doc.starts_with("sweep_value,"));
        assert!(doc.lines().nth(1).unwrap().starts_with("6.00000e1,"));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let s = load_scenario(&fixture("two_carrier.json")).unwrap();
        let range = SweepRange { from: 10.0, to: 60.0, step: 10.0 };
        let a = render_csv(&s, &run_sweep(&s, 2, range, Some(4)).unwrap());
        let b = render_csv(&s, &run_sweep(&s, 2, range, Some(1)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn price_column_jumps_across_the_regime_change() {
        // Outer-carrier capacities 40 and 45 serve VIPs only; 50 brings the
        // regular users in and the clearing price jumps up.
        let s = load_scenario(&fixture("two_carrier.json")).unwrap();
        let rows = run_sweep(&s, 2, SweepRange { from: 40.0, to: 50.0, step: 5.0 }, None).unwrap();
        let doc = render_csv(&s, &rows);
        let mut lines = doc.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let p_col = header.iter().position(|&c| c == "p_c2").unwrap();
        let prices: Vec<f64> = lines
            .map(|l| l.split(',').nth(p_col).unwrap().parse().unwrap())
            .collect();
        assert_eq!(prices.len(), 3);
        assert!(prices[1] < prices[0], "{prices:?}"); // 45 below 40, same regime
        assert!(prices[2] > prices[1], "{prices:?}"); // jump at 50
    }

    #[test]
    fn unknown_carrier_is_rejected() {
        let s = load_scenario(&fixture("single_carrier.json")).unwrap();
        let err = run_sweep(&s, 9, SweepRange { from: 10.0, to: 20.0, step: 10.0 }, None).unwrap_err();
        assert!(err.to_string().contains("no carrier"), "{err}");
    }

    #[test]
    fn error_rows_are_marked() {
        let s = load_scenario(&fixture("single_carrier.json")).unwrap();
        let rows = vec![
            SweepRow { sweep_value: 10.0, result: Err("solver exploded".into()) },
        ];
        let doc = render_csv(&s, &rows);
        let line = doc.lines().nth(1).unwrap();
        assert!(line.starts_with("1.00000e1,nan,"), "{line}");
        assert!(line.ends_with(",error"), "{line}");
    }
}
