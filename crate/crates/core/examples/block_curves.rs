//! Prints per-block accuracy of every strategy on the `collapse-v1` stream.
//!
//!     cargo run --release --example block_curves -- [run_seed]

use dynaprompt::harness::run_all_strategies;
use dynaprompt::RunConfig;

fn main() -> dynaprompt::Result<()> {
    let run_seed = std::env::args()
        .nth(1)
        .map_or(0, |s| s.parse().expect("run_seed must be an integer"));
    let cfg = RunConfig {
        run_seed,
        ..RunConfig::default()
    };
    for r in run_all_strategies(&cfg)? {
        let blocks: Vec<String> = r.block_accuracies.iter().map(|a| format!("{a:.2}")).collect();
        println!(
            "{:<11} mean {:.4}  blocks {}",
            r.config_echo.strategy.kind.as_str(),
            r.mean_accuracy,
            blocks.join(" ")
        );
    }
    Ok(())
}
