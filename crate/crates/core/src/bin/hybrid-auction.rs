use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hybrid_auction::config::{ExperimentConfig, Profile};
use hybrid_auction::runner::{cmd_eval, cmd_gen, cmd_report, cmd_train, cmd_vcg, Layout, RunError};

const AFTER_HELP: &str = "\
Configuration is a flat TOML file; any key can be overridden with an
environment variable named HAUCTION_<KEY> (for example HAUCTION_CAP=2).
Command-line flags override both.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.";

#[derive(Parser)]
#[command(name = "hybrid-auction", version, about = "Learned and VCG mechanisms for hybrid sponsored-search auctions", after_help = AFTER_HELP)]
struct Cli {
    /// Configuration file (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset size profile.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    /// Worker threads (0 = one per core). Does not change results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Continue an interrupted training run or regret search.
    #[arg(long, global = true)]
    resume: bool,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Full,
    Fast,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and test sets.
    Gen,
    /// Train the learned mechanism.
    Train,
    /// Evaluate the trained mechanism on the test set.
    Eval,
    /// Evaluate the VCG baseline on the test set.
    Vcg,
    /// Aggregate evaluation reports into one table.
    Report {
        /// Directory holding reports (defaults to --out).
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, RunError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| RunError::Usage(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut config = ExperimentConfig::parse_with_process_env(&text)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(p) = cli.profile {
        config.profile = match p {
            ProfileArg::Full => Profile::Full,
            ProfileArg::Fast => Profile::Fast,
        };
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), RunError> {
    if let Command::Report { dir } = &cli.command {
        print!("{}", cmd_report(dir.as_ref().unwrap_or(&cli.out))?);
        return Ok(());
    }
    let config = load_config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build_global()
        .map_err(|e| RunError::Usage(format!("cannot start worker pool: {e}")))?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::Gen => {
            let m = cmd_gen(&config, &layout, cli.force)?;
            println!("generated {} training and {} test samples (hash {})", m.train_count, m.test_count, m.config_hash);
        }
        Command::Train => {
            let ck = cmd_train(&config, &layout, cli.resume, cli.force)?;
            println!("trained to iteration {}; checkpoint at {}", ck.state.iteration, layout.checkpoint().display());
        }
        Command::Eval | Command::Vcg => {
            let report = if matches!(cli.command, Command::Eval) { cmd_eval(&config, &layout, cli.resume)? } else { cmd_vcg(&config, &layout)? };
            println!("{}\n{}", hybrid_auction::eval::CSV_HEADER, report.csv_row());
        }
        Command::Report { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
