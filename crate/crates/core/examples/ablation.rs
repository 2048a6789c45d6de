//! Desk-scale strategy comparison on the pathological 8-class setup.
//!
//! Usage: cargo run --release -p fedprompt-core --example ablation -- [seed...]
//! Knobs via environment: SEPARATION, NOISE, INIT_STD, PROMPT_STD, ROUNDS,
//! EPOCHS, STRATEGIES (comma list), DP_EPSILON, HELDOUT.

use std::time::Instant;

use fedprompt_core::config::{ExperimentConfig, PartitionMode};
use fedprompt_core::data::SyntheticSpec;
use fedprompt_core::experiment::run;
use fedprompt_core::federation::{Strategy, TrainConfig};
use fedprompt_core::model::BackboneConfig;

fn env<T: std::str::FromStr>(key: &str) -> Option<T> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2] } else { seeds };
    let strategies: Vec<Strategy> = std::env::var("STRATEGIES")
        .unwrap_or_else(|_| "shared-only,shared-ccmp".into())
        .split(',')
        .map(|s| serde_json::from_str(&format!("\"{s}\"")))
        .collect::<Result<_, _>>()?;
    for seed in seeds {
        for &strategy in &strategies {
            let mut data = SyntheticSpec::new(8);
            data.separation = env("SEPARATION").unwrap_or(data.separation);
            data.noise = env("NOISE").unwrap_or(data.noise);
            let mut model = BackboneConfig::default();
            model.init_std = env("INIT_STD").unwrap_or(model.init_std);
            let mut train = TrainConfig::new(12, env("ROUNDS").unwrap_or(30));
            train.strategy = strategy;
            train.local_epochs = env("EPOCHS").unwrap_or(train.local_epochs);
            train.prompt_init_std = env("PROMPT_STD").unwrap_or(train.prompt_init_std);
            train.dp_epsilon = env("DP_EPSILON");
            let config = ExperimentConfig {
                seed,
                data,
                partition: PartitionMode::Pathological { classes_per_client: 2 },
                model,
                train,
                heldout_fraction: env("HELDOUT"),
                workers: env("WORKERS").unwrap_or(1),
                output_dir: None,
            };
            let start = Instant::now();
            let out = run(&config)?;
            if env::<u8>("TRACE").is_some() {
                for row in out.metrics.iter().step_by(5) {
                    println!("  round {:>3} mean {:.3} worst {:.3}", row.round, row.mean_acc, row.worst_acc);
                }
            }
            let r = &out.report;
            println!(
                "seed {seed} {:<22} mean {:.3} worst {:.3} heldout {} loss {:.3} ({:.1}s)",
                strategy.name(),
                r.participating.mean,
                r.participating.worst,
                r.heldout.as_ref().map_or("-".into(), |h| format!("{:.3}", h.mean)),
                out.logs.last().map_or(f64::NAN, |l| l.train_loss),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
