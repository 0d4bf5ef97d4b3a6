use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use npg::config::{ExperimentConfig, RawConfig, Recipe};
use npg::error::{CliError, CliResult};
use npg::provider::make_provider;
use npg::{list_recipes, run_recipe, write_artifacts};

#[derive(Parser, Debug)]
#[command(name = "npg", about = "Run NPG / Q-NPG experiment recipes")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Config file of `key = value` lines. Without it the recipe's bundled
    /// defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    recipe: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for traces, report.json and summary.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rollout threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print recipe names with descriptions.
    ListRecipes,
}

fn load(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut raw = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            RawConfig::parse(&text)?
        }
        None => {
            let name = cli
                .recipe
                .as_deref()
                .ok_or_else(|| CliError::usage("recipe", "pass --recipe or --config"))?;
            let recipe =
                Recipe::parse(name).ok_or_else(|| CliError::usage("recipe", format!("unknown recipe `{name}`")))?;
            RawConfig::parse(recipe.default_config())?
        }
    };
    raw.apply_env(std::env::vars())?;
    if let Some(r) = &cli.recipe {
        raw.set("recipe", r.clone())?;
    }
    if let Some(s) = cli.seed {
        raw.set("seed", s.to_string())?;
    }
    if let Some(o) = &cli.out {
        raw.set("out", o.display().to_string())?;
    }
    if let Some(w) = cli.workers {
        raw.set("workers", w.to_string())?;
    }
    ExperimentConfig::from_raw(&raw)
}

fn execute(cli: &Cli) -> CliResult<bool> {
    let cfg = load(cli)?;
    let provider = make_provider(cfg.workers);
    let report = run_recipe(&cfg, provider.as_ref())?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    if let Some(dir) = &cfg.out {
        write_artifacts(&cfg, &report, dir)?;
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(Command::ListRecipes) = cli.command {
        print!("{}", list_recipes());
        return ExitCode::SUCCESS;
    }
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
