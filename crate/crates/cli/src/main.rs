use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use negcut_cli::commands::parse_query;
use negcut_cli::{cmd_ablate, cmd_eval, cmd_train, cmd_visualize, load_config, CliResult, VisualizeArgs};

/// Unpaired image translation with adversarial contrastive negatives.
///
/// Exit codes: 0 success, 2 configuration error, 3 runtime failure or NaN
/// abort, 4 I/O error. The output root defaults to $NEGCUT_OUT_DIR, then
/// `runs`.
#[derive(Parser)]
#[command(name = "negcut", version)]
struct Cli {
    /// TOML experiment config; unspecified fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-key override such as `train.tau=0.1`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root (the run directory is `<out>/<run_name>`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train {
        /// Continue from a checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fréchet distance and correspondence of a checkpoint's translations.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score a folder of already translated images instead.
        #[arg(long, value_name = "DIR")]
        generated: Option<PathBuf>,
        /// Where to write the JSON record (default `<run dir>/eval.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Similarity maps for query pixels and the negative-hardness histogram.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Query pixel `ROW,COL` in image coordinates; repeatable.
        #[arg(long = "query", value_parser = parse_query, required = true)]
        queries: Vec<(usize, usize)>,
        /// Tap layer index (0-based position in the tap list).
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        tau: Option<f64>,
        /// Compare the source embedding with itself.
        #[arg(long)]
        self_similarity: bool,
    },
    /// Train and evaluate every cell of the ablation grid.
    Ablate,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out_dir={}", toml_string(&out.display().to_string())));
    }
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Train { resume } => {
            let dir = cmd_train(&cfg, resume.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Eval {
            checkpoint,
            generated,
            report,
        } => {
            let record = cmd_eval(&cfg, checkpoint.as_deref(), generated.as_deref(), report.as_deref())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&record).expect("record serializes")
            );
        }
        Command::Visualize {
            checkpoint,
            image,
            queries,
            layer,
            tau,
            self_similarity,
        } => {
            let files = cmd_visualize(
                &cfg,
                &VisualizeArgs {
                    checkpoint: &checkpoint,
                    image: &image,
                    queries: &queries,
                    layer,
                    tau,
                    self_similarity,
                },
            )?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Ablate => {
            let rows = cmd_ablate(&cfg)?;
            print!("{}", negcut_cli::commands::ablation_markdown(&rows));
        }
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("negcut: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
