use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fedprompt_core::config::ExperimentConfig;
use fedprompt_core::data::label_entropy;
use fedprompt_core::eval::EvalReport;
use fedprompt_core::experiment::{reevaluate, run, write_partition, write_run};
use fedprompt_core::gradcheck::{run_gradcheck, GradcheckSpec, TOLERANCE};
use fedprompt_core::CoreError;

const WORKERS_ENV: &str = "FEDPROMPT_WORKERS";

#[derive(Parser)]
#[command(name = "fedprompt", version, about = "Federated prompt tuning experiments on a frozen ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config and write the run directory.
    Run(ConfigArgs),
    /// Compare autodiff gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the client partition and label histograms without training.
    Partition(ConfigArgs),
    /// Re-evaluate a saved run directory.
    Eval {
        /// Run directory written by `fedprompt run`.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; falls back to `output_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    shared_prompts: usize,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Partition(args) => cmd_partition(&args),
        Command::Eval { out } => cmd_eval(&out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            match e {
                CoreError::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load(args: &ConfigArgs) -> Result<(ExperimentConfig, PathBuf), CoreError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        config.workers = raw
            .trim()
            .parse()
            .ok()
            .filter(|&w| w > 0)
            .ok_or_else(|| CoreError::config(WORKERS_ENV, format!("`{raw}` is not a positive integer")))?;
    }
    let out = match (&args.out, &config.output_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => return Err(CoreError::config("output_dir", "pass --out or set output_dir in the config")),
    };
    config.output_dir = Some(out.clone());
    config.validate()?;
    Ok((config, out))
}

fn summary(label: &str, r: &EvalReport) {
    println!("{label:<14} mean {:.4}  worst {:.4}  clients {}", r.mean, r.worst, r.per_client.len());
}

fn cmd_run(args: &ConfigArgs) -> Result<ExitCode, CoreError> {
    let (config, out) = load(args)?;
    let start = Instant::now();
    let outcome = run(&config)?;
    write_run(&out, &config, &outcome)?;
    let r = &outcome.report;
    println!(
        "{} seed {} rounds {} ({:.1}s) -> {}",
        r.strategy,
        r.seed,
        r.rounds,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    summary("participating", &r.participating);
    if let Some(h) = &r.heldout {
        summary("heldout", h);
    }
    if r.backbone_checksum_start != r.backbone_checksum_end {
        eprintln!("error: backbone changed during training");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode, CoreError> {
    let spec = GradcheckSpec {
        seed: args.seed,
        dim: args.dim,
        layers: args.layers,
        heads: args.heads,
        classes: args.classes,
        shared_prompts: args.shared_prompts,
        batch: args.batch,
        inject_fault: args.inject_fault,
        ..GradcheckSpec::default()
    };
    let start = Instant::now();
    let report = run_gradcheck(&spec)?;
    for b in &report.blocks {
        println!("{:<4} params {:>5}  max rel error {:.3e}", b.block, b.params, b.max_rel_error);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "max rel error {:.3e} (tolerance {TOLERANCE:e}) {verdict} in {:.2}s",
        report.max_rel_error,
        start.elapsed().as_secs_f64()
    );
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_partition(args: &ConfigArgs) -> Result<ExitCode, CoreError> {
    let (config, out) = load(args)?;
    let partition = write_partition(&out, &config)?;
    println!("client  samples  entropy  histogram");
    for (k, h) in partition.histograms.iter().enumerate() {
        println!(
            "{k:>6}  {:>7}  {:>7.4}  {h:?}",
            partition.shards[k].len(),
            label_entropy(h)
        );
    }
    // write_partition refuses to return anything but a disjoint cover.
    println!("disjoint cover: yes -> {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(dir: &Path) -> Result<ExitCode, CoreError> {
    let (part, held) = reevaluate(dir)?;
    summary("participating", &part);
    if let Some(h) = &held {
        summary("heldout", h);
    }
    let path = dir.join("eval_report.json");
    let json = serde_json::json!({ "participating": part, "heldout": held });
    std::fs::write(&path, serde_json::to_string_pretty(&json).map_err(CoreError::from)?)
        .map_err(|e| CoreError::io(&path, e))?;
    Ok(ExitCode::SUCCESS)
}
