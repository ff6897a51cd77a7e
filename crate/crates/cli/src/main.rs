use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lfis_cli::compare::compare;
use lfis_cli::config::{BuildSpec, Family, Method, ModelSource, RunConfig};
use lfis_cli::run::{run_experiment, write_outputs};
use lfis_core::lfqgs::TabuRule;

#[derive(Parser)]
#[command(name = "lfis", version, about = "Large-flip importance sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded model and write it as JSON.
    Build {
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, num_args = 3, value_names = ["NX", "NY", "NZ"])]
        dims: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coupling scale override for cube lattices.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sampler or estimator for every requested inverse temperature.
    Run(RunArgs),
    /// Join two summaries on inverse temperature.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(value_enum)]
    method: Option<Method>,
    /// Model JSON file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "beta", num_args = 1..)]
    betas: Vec<f64>,
    /// Final inverse temperature of the EDA schedule (alias of --beta).
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma_min: Option<usize>,
    #[arg(long)]
    gamma_max: Option<usize>,
    #[arg(long, value_parser = parse_tabu)]
    tabu: Option<TabuRule>,
    #[arg(long = "kernel-beta", num_args = 1..)]
    kernel_betas: Vec<f64>,
    #[arg(long)]
    polish_flips: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    resample_threshold: Option<f64>,
    #[arg(long)]
    moves_per_level: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "oracle-log-z", num_args = 1..)]
    oracle_log_z: Vec<f64>,
    /// Compute log Z by enumeration for the error columns.
    #[arg(long)]
    exact_oracle: bool,
    /// Emit energy level distributions.
    #[arg(long)]
    histogram: bool,
    /// Worker threads; output does not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write records.csv.
    #[arg(long)]
    csv: bool,
}

fn parse_tabu(s: &str) -> Result<TabuRule, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown tabu rule `{s}` (masked-previous or masked-assumed)"))
}

fn run(args: RunArgs) -> Result<()> {
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    let base = match &args.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    let mut betas = args.betas;
    betas.extend(args.beta_max);
    let flags = RunConfig {
        method: args.method,
        model: args.model.map(ModelSource::File),
        betas,
        reps: args.reps,
        seed: args.seed,
        n: args.n,
        t: args.t,
        steps: args.steps,
        gamma_min: args.gamma_min,
        gamma_max: args.gamma_max,
        tabu: args.tabu,
        order: None,
        kernel_betas: args.kernel_betas,
        polish_flips: args.polish_flips,
        beta_start: args.beta_start,
        particles: args.particles,
        resample_threshold: args.resample_threshold,
        moves_per_level: args.moves_per_level,
        oracle_log_z: args.oracle_log_z,
        exact_oracle: args.exact_oracle.then_some(true),
        histogram: args.histogram.then_some(true),
    };
    let config = base.layered(flags).resolve()?;
    let model = config.model.as_ref().expect("resolved").load()?;
    let output = run_experiment(&model, &config)?;
    write_outputs(&args.out, &output, args.csv)?;
    eprintln!(
        "{} records written to {}",
        output.records.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Build { family, m, dims, seed, scale, out } => {
            let dims = dims.map(|d| [d[0], d[1], d[2]]);
            let model = BuildSpec { family, m, dims, seed, scale }.build()?;
            model
                .write_file(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "{} variables, {} edges, digest {}",
                model.num_variables(),
                model.edges().len(),
                model.digest()
            );
        }
        Command::Run(args) => run(args)?,
        Command::Compare { a, b, out } => {
            let read = |p: &PathBuf| -> Result<serde_json::Value> {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            };
            let report = compare(&read(&a)?, &read(&b)?)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
