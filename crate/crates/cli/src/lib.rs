//! Library behind the `polychaos` command-line tool: scenario configs,
//! polynomial expressions for uncertain matrix entries, and the runners
//! for each mode.

pub mod config;
pub mod expr;
pub mod run;

pub use config::{parse_config, parse_config_str, ConfigError, Mode, ParsedConfig, ScenarioConfig};
pub use run::{run_file, run_parsed, CliError, ExitKind, RunOptions, RunOutcome};

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "POLYCHAOS_THREADS";
