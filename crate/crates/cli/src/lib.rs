//! Command-line driver: dataset simulation, training, sampling, evaluation
//! and the draft-length benchmark. Every command records a [`RunManifest`]
//! that `tppsd replay` can re-execute.

pub mod args;
pub mod commands;
pub mod construct;
pub mod error;
pub mod manifest;

pub use args::{Cli, Command};
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Replay(a) => {
            let checks = commands::replay(a)?;
            let mut differing = 0;
            for c in &checks {
                let verdict = if c.identical { "identical" } else { "DIFFERS" };
                println!("{verdict} {} {}", c.role, c.path.display());
                differing += usize::from(!c.identical);
            }
            if differing > 0 {
                return Err(CliError::Data(format!("{differing} output(s) differ from the recorded run")));
            }
            Ok(())
        }
        cmd => commands::run_recorded(cmd, cli.manifest.as_deref()).map(|_| ()),
    }
}
