//! Library side of the rateshare command line: scenario files, sweep
//! execution, and CSV output. The binary in `main.rs` is a thin front-end
//! over these modules so integration tests can drive them directly.

pub mod scenario;
pub mod sweep;

pub use scenario::{load_scenario, Scenario, ScenarioError, SweepRange};
pub use sweep::{csv_header, format_sig6, render_csv, run_sweep, write_csv, SweepRow};
