//! `mcvit` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use mcvit::commands;
use mcvit::error::CliError;

const USAGE: &str = "\
mcvit — memory-consolidated video transformer toolkit

Usage:
  mcvit run --config <file>          run a forward variant on a tensor file
  mcvit bench --config <file>        write the analytic cost sweep CSV
  mcvit train --config <file>        fine-tune on the synthetic task
  mcvit consolidate --method <m> --k <K> --input <in> --output <out>
                    [--seed <n>] [--iters <n>]
                                     consolidate a rank-2 token file
  mcvit gradcheck --config <file>    finite-difference gradient check

Exit codes: 0 ok, 1 check failure, 2 bad config, 3 io/shape error,
4 numeric divergence. MCVIT_THREADS caps worker parallelism.";

struct Args {
    flags: Vec<(String, String)>,
}

impl Args {
    fn parse(args: &[String]) -> Result<Self, CliError> {
        let mut flags = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let key = args[i]
                .strip_prefix("--")
                .ok_or_else(|| CliError::config(format!("unexpected argument {:?}", args[i])))?;
            let value = args
                .get(i + 1)
                .ok_or_else(|| CliError::config(format!("--{key} needs a value")))?;
            flags.push((key.to_string(), value.clone()));
            i += 2;
        }
        Ok(Args { flags })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.flags
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::config(format!("missing --{key}")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::config(format!("--{key}: cannot parse {v:?}"))),
        }
    }
}

fn dispatch() -> Result<(), CliError> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = argv.first() else {
        eprintln!("{USAGE}");
        return Err(CliError::config("no subcommand"));
    };
    let args = Args::parse(&argv[1..])?;
    match command.as_str() {
        "run" => commands::cmd_run(&PathBuf::from(args.required("config")?)),
        "bench" => commands::cmd_bench(&PathBuf::from(args.required("config")?)),
        "train" => commands::cmd_train(&PathBuf::from(args.required("config")?)),
        "gradcheck" => commands::cmd_gradcheck(&PathBuf::from(args.required("config")?)),
        "consolidate" => {
            let method = args.required("method")?.to_string();
            let k: usize = args
                .parsed("k")?
                .ok_or_else(|| CliError::config("missing --k"))?;
            let input = PathBuf::from(args.required("input")?);
            let output = PathBuf::from(args.required("output")?);
            let seed: u64 = args.parsed("seed")?.unwrap_or(0);
            let iters: usize = args.parsed("iters")?.unwrap_or(5);
            commands::cmd_consolidate(&method, k, &input, &output, seed, iters)
        }
        "--help" | "help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => {
            eprintln!("{USAGE}");
            Err(CliError::config(format!("unknown subcommand {other:?}")))
        }
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("mcvit: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
