//! Command-line front end: one binary with a mode per pipeline stage.
//!
//! Every mode works inside a run directory that ends up holding the
//! configuration snapshot, data splits, BPE files, checkpoints, logs, the
//! active-learning journal and reports.

pub mod args;
pub mod commands;
pub mod config;
pub mod report;
pub mod run_dir;
pub mod server;

/// Parses `argv`, runs the mode and returns the process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code(&e)
        }
    }
}
