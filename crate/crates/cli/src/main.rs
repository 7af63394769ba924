use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use atc_cli::commands;
use atc_cli::options::{merge_config, Cli, Command, EvalConfig, RunConfig};
use atc_cli::report::{append_reports, Report};
use atc_cli::{exit_code, threads_from_env, UsageError};
use clap::Parser;

fn emit(reports: &[Report], path: Option<&PathBuf>) -> Result<()> {
    for r in reports {
        println!("{}", r.to_line());
    }
    if let Some(path) = path {
        append_reports(path, reports)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = threads_from_env()?;
    match cli.command {
        Command::Synth(args) => {
            let args = merge_config(&args, args.config.as_deref())?;
            let out_dir = args
                .out_dir
                .clone()
                .ok_or_else(|| UsageError("--out-dir is required".into()))?;
            let report = commands::synth(&args.to_config()?, &out_dir)?;
            emit(&[report], args.report.as_ref())
        }
        Command::Zeroshot(args) => {
            let args = merge_config(&args, args.config.as_deref())?;
            let (text, queries) = args.resolve()?;
            emit(&commands::zeroshot(&text, &queries)?, args.report.as_ref())
        }
        Command::Train(args) => {
            let run = RunConfig::from_args(&merge_config(&args, args.config.as_deref())?)?;
            let (_, reports) = commands::train_run(&run, threads)?;
            emit(&reports, run.report.as_ref())
        }
        Command::Eval(args) => {
            let args = merge_config(&args, args.config.as_deref())?;
            emit(
                &commands::eval(&EvalConfig::from_args(&args)?, threads)?,
                args.report.as_ref(),
            )
        }
        Command::Sweep(args) => {
            let args = merge_config(&args, args.config.as_deref())?;
            let (cfg, param, values) = args.resolve()?;
            emit(&commands::sweep(&cfg, param, &values, threads)?, args.report.as_ref())
        }
        Command::Ablate(args) => {
            let (run_args, modes) = args.resolve()?;
            let run = RunConfig::from_args(&run_args)?;
            emit(&commands::ablate(&run, &modes, threads)?, run.report.as_ref())
        }
        Command::Gradcheck(args) => {
            let args = merge_config(&args, args.config.as_deref())?;
            let report = commands::gradcheck(
                args.seed.unwrap_or(0),
                args.count.unwrap_or(5),
                args.corrupt_backward.unwrap_or(false),
            )?;
            emit(std::slice::from_ref(&report), args.report.as_ref())?;
            match commands::gradcheck_failures(&report.gradcheck) {
                Some(failure) => Err(failure.into()),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { atc_cli::EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
