use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rankserve_cli::commands::{
    self, BenchArgs, BuildCubeArgs, GenWorkloadArgs, ReplayArgs, ServiceArgs, TrainShedderArgs, TuneArgs,
};
use rankserve_cli::{server, CliError};

/// Ranking service with a staged event-driven pipeline.
#[derive(Parser)]
#[command(name = "rankserve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP scoring service.
    Serve(ServiceArgs),
    /// Replay a trace against a stack and print the metrics.
    Replay(ReplayArgs),
    /// Run every acceptance measurement and write the report.
    Bench(BenchArgs),
    /// Search the tuning space for a cheaper configuration.
    Tune(TuneArgs),
    /// Train the load-shedding model from a trace.
    TrainShedder(TrainShedderArgs),
    /// Generate a synthetic request trace.
    GenWorkload(GenWorkloadArgs),
    /// Build a cube directory, or a whole synthetic model generation.
    BuildCube(BuildCubeArgs),
}

fn serve(args: &ServiceArgs) -> Result<(), CliError> {
    let config = args.resolve()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(
        config,
        |addr| println!("listening on {addr}"),
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
    ))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (value, out) = match &cli.command {
        Command::Serve(a) => return serve(a),
        Command::Replay(a) => (commands::replay(a)?, a.out.clone()),
        Command::Bench(a) => (commands::bench(a)?, a.out.clone()),
        Command::Tune(a) => (commands::tune(a)?, None),
        Command::TrainShedder(a) => (commands::train_shedder(a)?, None),
        Command::GenWorkload(a) => (commands::gen_workload(a)?, None),
        Command::BuildCube(a) => (commands::build_cube(a)?, None),
    };
    let text = serde_json::to_string_pretty(&value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
