use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynaprompt::harness::{
    self, config_with_overrides, gradcheck, sweep_buffer_size, sweep_order, RunConfig, GRADCHECK_REL_TOL,
};
use dynaprompt::stream::{collapse_stream, PRESET_NAMES};

#[derive(Parser)]
#[command(
    name = "dynaprompt",
    version,
    about = "Test-time prompt tuning experiments on a toy classifier"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply to missing fields
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `strategy.alpha=0.01` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy over a stream, writing steps.csv and summary.json
    Run,
    /// Sweep the buffer size
    SweepM {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        sizes: Vec<usize>,
    },
    /// Rerun the stream under shuffled sample orders
    SweepOrder {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
        orders: Vec<u64>,
    },
    /// Compare the analytic entropy gradient with finite differences
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
    },
    /// List stream presets, or print one as JSON
    Presets { name: Option<String> },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> dynaprompt::Result<RunConfig> {
    let base = match &common.config {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|source| dynaprompt::Error::Io {
            path: path.clone(),
            source,
        })?),
        None => None,
    };
    let mut cfg = config_with_overrides(base.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.run_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn write_json(value: &impl serde::Serialize, dir: Option<&Path>, file: &str) -> dynaprompt::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match dir {
        Some(dir) => {
            let io = |path: &Path| {
                let path = path.to_path_buf();
                move |source| dynaprompt::Error::Io { path, source }
            };
            std::fs::create_dir_all(dir).map_err(io(dir))?;
            let path = dir.join(file);
            std::fs::write(&path, &text).map_err(io(&path))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> dynaprompt::Result<ExitCode> {
    match &cli.command {
        Command::Run => {
            let cfg = load_config(&cli.common)?;
            let result = harness::run(&cfg)?;
            let blocks: Vec<String> = result.block_accuracies.iter().map(|a| format!("{a:.3}")).collect();
            println!(
                "{} mean_accuracy {:.4} blocks [{}]",
                cfg.strategy.kind,
                result.mean_accuracy,
                blocks.join(" ")
            );
            match &cfg.output_dir {
                Some(dir) => println!("wrote {}", dir.display()),
                None => print!("{}", harness::summary_json(&result)?),
            }
        }
        Command::SweepM { sizes } => {
            let cfg = load_config(&cli.common)?;
            let points = sweep_buffer_size(&cfg, sizes)?;
            write_json(&points, cfg.output_dir.as_deref(), "sweep_m.json")?;
        }
        Command::SweepOrder { orders } => {
            let cfg = load_config(&cli.common)?;
            let points = sweep_order(&cfg, orders)?;
            write_json(&points, cfg.output_dir.as_deref(), "sweep_order.json")?;
        }
        Command::Gradcheck { trials, epsilon } => {
            let mut cfg = load_config(&cli.common)?;
            // problems are drawn from the model seed
            cfg.model.seed = cli.common.seed.unwrap_or(cfg.model.seed);
            let report = gradcheck(&cfg.model, *trials, *epsilon)?;
            write_json(&report, cfg.output_dir.as_deref(), "gradcheck.json")?;
            if !report.passed {
                eprintln!(
                    "gradcheck failed: {} of {} trials at or above relative error {GRADCHECK_REL_TOL:e}",
                    report.failed_trials, report.trials
                );
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Presets { name: Some(name) } => {
            println!("{}", serde_json::to_string_pretty(&collapse_stream(name)?)?);
        }
        Command::Presets { name: None } => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
