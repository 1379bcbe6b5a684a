use std::path::PathBuf;
use std::process::ExitCode;

use camlabel::commands;
use camlabel::{exit_code, CampaignConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "camlabel", version, about = "Model-assisted defect labeling from click annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; fields left out take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample crops around the clicks and split them per class.
    BuildDataset(Common),
    /// Train one classifier per class.
    Train(Common),
    /// Generate instance proposals for the review images.
    Propose(Common),
    /// Serve proposals for review and log the decisions.
    Serve(Common),
    /// Turn logged decisions into click labels for the next round.
    DeriveLabels(Common),
    /// Time-saving report from saving-band counts.
    Report(Common),
    /// Write synthetic scenes with clicks and ground truth.
    Synth(Common),
    /// Print the effective config.
    Config(Common),
}

fn run(cmd: Command) -> anyhow::Result<()> {
    let (Command::BuildDataset(c)
    | Command::Train(c)
    | Command::Propose(c)
    | Command::Serve(c)
    | Command::DeriveLabels(c)
    | Command::Report(c)
    | Command::Synth(c)
    | Command::Config(c)) = &cmd;
    let cfg = CampaignConfig::load(c.config.as_deref(), &c.set, c.seed)?;
    match cmd {
        Command::Synth(_) => {
            let s = commands::synth(&cfg)?;
            println!("{} images, {} instances, {} click labels in {}", s.images, s.instances, s.labels, cfg.synth_dir().display());
        }
        Command::BuildDataset(_) => print!("{}", commands::build_dataset(&cfg)?.table()),
        Command::Train(_) => {
            for s in commands::train_all(&cfg)? {
                let test = s.test_f_measure.map_or("-".to_string(), |f| format!("{f:.3}"));
                println!("{}: best epoch {}, val F1 {:.3}, test F1 {test}", s.defect_class, s.best_epoch, s.val_f_measure);
            }
        }
        Command::Propose(_) => {
            let s = commands::propose_all(&cfg)?;
            println!("{} images -> {}", s.images, cfg.proposals_path().display());
            for (class, n) in s.per_class {
                println!("{class}: {n}");
            }
        }
        Command::Serve(_) => commands::serve(&cfg)?,
        Command::DeriveLabels(_) => {
            let s = commands::derive_labels(&cfg)?;
            println!("{} events -> {} labels, {} new in {}", s.events, s.derived, s.added, cfg.labels_path().display());
            for w in s.warnings {
                println!("warning: {w}");
            }
        }
        Command::Report(_) => print!("{}", commands::report(&cfg)?.to_csv()),
        Command::Config(_) => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
