mod args;
mod commands;
mod config;

use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: &Cli, out: &mut dyn Write) -> sdanet::Result<()> {
    if cli.sequential {
        sdanet::par::set_parallel(false);
    }
    match &cli.command {
        Command::Synth(a) => commands::synth(a, out),
        Command::Degrade(a) => commands::degrade_cmd(a, out),
        Command::Train(a) => commands::train_cmd(a, out),
        Command::Eval(a) => commands::eval(a, cli.tsv, out),
        Command::Ablate(a) => commands::ablate(a, cli.tsv, out),
        Command::Sweep(a) => commands::sweep(a, cli.tsv, out),
        Command::Gradcheck(a) => commands::gradcheck(a, cli.tsv, out),
    }
}

fn fail(e: &sdanet::Error) -> ExitCode {
    eprintln!("error[{}]: {e}", e.class());
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = Cli::parse_from(argv);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &mut out).and_then(|()| out.flush().map_err(Into::into)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
