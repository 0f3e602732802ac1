use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use localel_cli::{cmd_plotdata, cmd_run, cmd_trace, parse_config, CliError, PlotKind};

#[derive(Parser)]
#[command(
    name = "localel",
    version,
    about = "Empirical likelihood with a local one-step refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo study and write metrics and raw estimates.
    Run(Common),
    /// Write the local iteration trace for one replication.
    Trace(Common),
    /// Write QQ, density or likelihood-profile data.
    Plotdata {
        #[arg(value_enum)]
        kind: Kind,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Qq,
    Density,
    Profile,
}

#[derive(Args)]
struct Common {
    /// Configuration file; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    reps: Option<usize>,
    /// Worker threads; 0 uses every available processor.
    #[arg(long, value_name = "N", default_value_t = 0)]
    workers: usize,
    /// Override a configuration key; repeatable, later values win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(r) = self.reps {
            o.push(format!("reps={r}"));
        }
        if let Some(d) = &self.out {
            o.push(format!("output_dir={}", d.display()));
        }
        o
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (common, kind) = match &cli.command {
        Command::Run(c) | Command::Trace(c) => (c, None),
        Command::Plotdata { kind, common } => (common, Some(*kind)),
    };
    let cfg = parse_config(common.config.as_deref(), &common.overrides())?;
    let dir = cfg.output_dir.display().to_string();
    match (&cli.command, kind) {
        (Command::Run(_), _) => {
            let r = cmd_run(&cfg, common.workers)?;
            let failed: usize = r.failures.iter().sum();
            Ok(format!(
                "wrote {} replications x {} methods to {dir} ({failed} failed fits)",
                cfg.reps,
                cfg.methods.len()
            ))
        }
        (Command::Trace(_), _) => {
            let fit = cmd_trace(&cfg, common.workers)?;
            Ok(format!(
                "wrote {} iterations to {dir}/trace.csv (converged: {})",
                fit.iterations(),
                fit.converged
            ))
        }
        (_, Some(k)) => {
            let kind = match k {
                Kind::Qq => PlotKind::Qq,
                Kind::Density => PlotKind::Density,
                Kind::Profile => PlotKind::Profile,
            };
            let files = cmd_plotdata(&cfg, kind)?;
            Ok(format!("wrote {} files to {dir}", files.len()))
        }
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            eprintln!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
