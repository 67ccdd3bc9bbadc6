use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnlab::config::{load_config, ScenarioSet};
use attnlab::figures::{reproduce, FIGURE_IDS};
use attnlab::harness::{emit_csv_many, ErrorReport, ReportRow};
use attnlab::oracles::{argmin_oracle, moment_oracle, taylor_oracle, OracleReport};
use attnlab::params_io::{params_to_string, write_params};
use attnlab::{figures, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnlab", version, about = "Attention temperature experiments under distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of evaluation prompts per point.
    #[arg(long)]
    n_prompts: Option<usize>,
    /// Worker threads for Monte Carlo (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Config override, `path.to.field=value`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        if let Some(seed) = self.seed {
            out.push(format!("seed={seed}"));
        }
        if let Some(n) = self.n_prompts {
            out.push(format!("n_prompts={n}"));
        }
        out
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    Moments,
    Taylor,
    Argmin,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario in a config file and write one CSV.
    Run {
        config: PathBuf,
        /// Output CSV path (default: the config's `output`, else `<id>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a bundled figure recipe.
    Reproduce {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(FIGURE_IDS))]
        figure: String,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check closed forms against brute force.
    Oracle {
        which: Oracle,
        /// Draws, score vectors or curves (default per oracle: 1e6, 1e3, 20).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain on a config's training distribution and write the parameters.
    Pretrain {
        config: PathBuf,
        /// Context length (default: first entry of the grid).
        #[arg(long)]
        l: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("--threads: {e}")))?;
    }
    Ok(())
}

fn print_row(row: &ReportRow) {
    println!("{}", row.summary());
}

fn run_set_to(set: &ScenarioSet, out: &Path) -> Result<()> {
    let reports: Vec<ErrorReport> = figures::run_set(set, print_row)?;
    for r in &reports {
        for s in &r.skipped {
            println!("l={} {}: skipped ({})", s.l, s.tau_policy, s.reason);
        }
    }
    emit_csv_many(&reports.iter().collect::<Vec<_>>(), out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run_oracles(which: Oracle, trials: Option<usize>, seed: u64) -> Result<bool> {
    if trials == Some(0) {
        return Err(Error::InvalidArgument("--trials must be >= 1".into()));
    }
    let selected: &[Oracle] = match which {
        Oracle::All => &[Oracle::Moments, Oracle::Taylor, Oracle::Argmin],
        Oracle::Moments => &[Oracle::Moments],
        Oracle::Taylor => &[Oracle::Taylor],
        Oracle::Argmin => &[Oracle::Argmin],
    };
    let mut ok = true;
    for o in selected {
        let report: OracleReport = match o {
            Oracle::Moments => moment_oracle(trials.unwrap_or(1_000_000), seed)?,
            Oracle::Taylor => taylor_oracle(trials.unwrap_or(1000), seed)?,
            Oracle::Argmin => argmin_oracle(trials.unwrap_or(20), seed)?,
            Oracle::All => unreachable!(),
        };
        println!("{report}");
        ok &= report.passed;
    }
    Ok(ok)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, out, common } => {
            init_threads(common.threads)?;
            let set = load_config(&config, &common.overrides())?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from(set.output.clone().unwrap_or_else(|| format!("{}.csv", set.id)))
            });
            run_set_to(&set, &out)?;
        }
        Command::Reproduce { figure, out, common } => {
            init_threads(common.threads)?;
            let path = reproduce(&figure, &common.overrides(), &out, print_row)?;
            println!("wrote {}", path.display());
        }
        Command::Oracle { which, trials, seed } => return run_oracles(which, trials, seed),
        Command::Pretrain { config, l, out, common } => {
            init_threads(common.threads)?;
            let set = load_config(&config, &common.overrides())?;
            let scenario = &set.scenarios[0];
            let l = l.unwrap_or(scenario.l_grid[0]);
            if l < 2 {
                return Err(Error::InvalidArgument(format!("--l must be >= 2, got {l}")));
            }
            let params = scenario.pretrain_at(l)?;
            match out {
                Some(path) => {
                    write_params(&params, &path)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{}", params_to_string(&params)),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
