mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use stylenerf_service::ServiceError;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::SynthScene(a) = &cli.command {
        return commands::synth_scene_cmd(a);
    }
    let config = commands::base_config(&cli.run)?;
    match &cli.command {
        Command::TrainAdain(a) => commands::train_adain_cmd(config, a),
        Command::Stylize(a) => commands::stylize_cmd(config, a),
        Command::TrainNerf(a) => commands::train_nerf_cmd(config, a),
        Command::BuildStylized(a) => commands::build_stylized_cmd(config, a),
        Command::TrainMultistyle(a) => commands::train_multistyle_cmd(config, a),
        Command::Render(a) => commands::render_cmd(config, a),
        Command::Interpolate(a) => commands::interpolate_cmd(config, a),
        Command::Serve(a) => commands::serve_cmd(config, a),
        Command::SynthScene(_) => unreachable!("handled above"),
    }
}

/// Validation failures are the caller's to fix; everything else is a runtime fault.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|cause| {
        cause
            .downcast_ref::<stylenerf_core::Error>()
            .is_some_and(stylenerf_core::Error::is_validation)
            || matches!(cause.downcast_ref::<ServiceError>(), Some(ServiceError::NoCheckpoint))
    });
    if validation {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {message}");
            ExitCode::from(exit_code(&e))
        }
    }
}
