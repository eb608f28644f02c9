use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use siliconpoll_cli::{
    cmd_eval, cmd_infer, cmd_poll, cmd_pool, cmd_simulate, CliError, Overrides, RunConfig, SimConfig, EXIT_CONFIG,
};

#[derive(Parser)]
#[command(name = "siliconpoll", version, about = "Poll social-media users through a language model and post-stratify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory holding stage artifacts.
    #[arg(long, default_value = "out")]
    output: PathBuf,
    /// Overrides the configured run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long)]
    threads: Option<usize>,
    /// Keep responses with highly speculative answers.
    #[arg(long, conflicts_with = "exclude_speculative")]
    include_speculative: bool,
    /// Drop responses with highly speculative answers.
    #[arg(long)]
    exclude_speculative: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the subject pool from the configured queries.
    Pool(Common),
    /// Filter, apply quotas and annotate the pool.
    Poll(Common),
    /// Fit the model and post-stratify.
    Infer(Common),
    /// Score estimates against truth and pollsters.
    Eval(Common),
    /// Write a synthetic world and a run config for it.
    Simulate {
        /// Simulation settings (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        /// Also run every stage and write end_to_end.json.
        #[arg(long)]
        run: bool,
    },
}

fn threads(n: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |c: &Common| {
        threads(c.threads)?;
        let o = Overrides {
            seed: c.seed,
            include_speculative: match (c.include_speculative, c.exclude_speculative) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            },
        };
        RunConfig::load(&c.config, &o)
    };
    match cli.command {
        Command::Pool(c) => {
            let n = cmd_pool(&load(&c)?, &c.output)?;
            println!("pool: {n} users");
        }
        Command::Poll(c) => {
            let counts = cmd_poll(&load(&c)?, &c.output)?;
            println!("poll: {} accepted of {}", counts.accepted, counts.pool);
        }
        Command::Infer(c) => {
            let t = cmd_infer(&load(&c)?, &c.output)?;
            println!("infer: {} observations", t.observations);
        }
        Command::Eval(c) => {
            let r = cmd_eval(&load(&c)?, &c.output)?;
            for (level, m) in &r.levels {
                println!("{level}: n={} bias={:.4} rmse={:.4}", m.n, m.bias, m.rmse);
            }
        }
        Command::Simulate {
            config,
            output,
            seed,
            threads: t,
            run,
        } => {
            threads(t)?;
            let sim = match config {
                Some(p) => SimConfig::load(&p)?,
                None => SimConfig::default(),
            };
            if let Some(r) = cmd_simulate(&sim, seed, &output, run)? {
                println!(
                    "national margin: truth {:.4}, raw {:.4}, estimate {:.4} [{:.4}, {:.4}]",
                    r.national.truth, r.national.raw, r.national.estimate.q50, r.national.estimate.q05, r.national.estimate.q95
                );
            } else {
                println!("wrote {}", output.join("run.toml").display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
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
