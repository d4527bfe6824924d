//! Command-line driver: data generation, staged training, evaluation, reports.
//!
//! Exit codes: 0 success, 2 usage, 3 config or component mismatch, 4 anything
//! else. Failures print one line, `error[<category>]: <message>`.

mod commands;
mod plot;
mod report;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use adaptive_depth::Error;
use clap::{Args, Parser, Subcommand};

use commands::RunOptions;

#[derive(Parser, Debug)]
#[command(name = "adaptive-depth", version, about = "Adaptive depth sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `models.sampler.levels=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Start from untrained weights when an earlier stage's checkpoint is absent.
    #[arg(long)]
    allow_fresh: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic driving dataset.
    GenData(RunArgs),
    /// Pretrain the completion network on random or scanline masks.
    TrainCompletion(RunArgs),
    /// Train a sampler against a frozen completion network, or fine-tune both.
    TrainSampler(RunArgs),
    /// Learn a single input-independent mask.
    TrainFixed(RunArgs),
    /// Train the next-frame prediction network on stored reconstructions.
    TrainPrednet(RunArgs),
    /// Densify a sparse dataset with a completion network.
    GenPseudoGt(RunArgs),
    /// Run the online sample/complete loop over test sequences.
    RunE2e(RunArgs),
    /// Evaluate a baseline or the lower-bound sampler.
    Eval(RunArgs),
    /// Evaluate a sampler with a completion network it was not trained with.
    MixMatch(RunArgs),
    /// Summarize every trace under a run directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory searched recursively for trace_*.csv and hist_*.csv.
    run_dir: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave out frames with a smaller index from the comparison table.
    #[arg(long, default_value_t = 0)]
    from_frame: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Component { .. } => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let (args, run): (RunArgs, fn(toml::Table, &RunOptions) -> Result<(), Error>) = match cli.command {
        Command::Report(r) => {
            let out = r.out.unwrap_or_else(|| r.run_dir.join("report"));
            let summary = report::report(&r.run_dir, &out, r.from_frame)?;
            for (name, m) in summary.methods {
                println!("{name:<14} rmse {:.4}  mae {:.4}  frames {}", m.rmse, m.mae, m.frames);
            }
            return Ok(());
        }
        Command::GenData(a) => (a, commands::gen_data),
        Command::TrainCompletion(a) => (a, commands::train_completion),
        Command::TrainSampler(a) => (a, commands::train_sampler),
        Command::TrainFixed(a) => (a, commands::train_fixed),
        Command::TrainPrednet(a) => (a, commands::train_prednet_cmd),
        Command::GenPseudoGt(a) => (a, commands::gen_pseudo_gt),
        Command::RunE2e(a) => (a, commands::run_e2e),
        Command::Eval(a) => (a, commands::eval),
        Command::MixMatch(a) => (a, commands::mix_match),
    };
    let table = settings::resolve_table(args.config.as_deref(), &args.set, args.seed)?;
    let opts = RunOptions {
        out: args.out,
        allow_fresh: args.allow_fresh,
    };
    run(table, &opts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
