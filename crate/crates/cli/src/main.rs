//! `evtrack`: synthesize event data, bin it into frames, train and evaluate
//! CNN-recurrent pupil trackers, and explain their predictions.

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

mod args;
mod cmd;
mod dataset;
mod settings;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use settings::Failure;

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let result = settings::resolve(name, sub).and_then(|kv| match cli.command {
        Command::Synth(_) => cmd::synth::run(&kv),
        Command::Bin(_) => cmd::bin::run(&kv),
        Command::Train(_) => cmd::train::run(&kv),
        Command::Eval(_) => cmd::eval::run(&kv),
        Command::Explain(_) => cmd::explain::run(&kv),
        Command::GradCheck(_) => cmd::gradcheck::run(&kv),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Usage(_) => 2,
                Failure::Runtime(_) => 1,
            })
        }
    }
}
