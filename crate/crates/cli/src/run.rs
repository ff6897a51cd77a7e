use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use lfis_core::baselines::{eda_run, smc_run, Schedule, SmcConfig};
use lfis_core::lfis::{lfis_pipeline, LfisConfig, LEVEL_TOLERANCE};
use lfis_core::lfqgs::{lfqgs_collect, LfqgsConfig, LfqgsTrajectory};
use lfis_core::nfw::{nfw_run, RunStatus};
use lfis_core::numeric::{mean_and_variance, median, CompensatedSum};
use lfis_core::oracle::{exact_energy_distribution, exact_log_partition, exact_mean_energy, merge_levels, EnergyLevel};
use lfis_core::{PairwiseModel, SeedTree, SpinState, Temperature};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{Method, RunConfig};

/// Per-replication records and the per-temperature summary of one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<Value>,
    pub summary: Value,
}

#[derive(Default)]
struct RepResult {
    fields: Map<String, Value>,
    log_z: Option<f64>,
    energy: Option<f64>,
    levels: Option<Vec<EnergyLevel>>,
    moved_levels: Option<Vec<EnergyLevel>>,
    residual_mass: f64,
    tabu_violations: Option<usize>,
}

/// Replication `r` at temperature index `b` draws from
/// `SeedTree::new(seed).child(b).child(r)`.
pub fn rep_stream(seed: u64, beta_index: usize, rep: usize) -> SeedTree {
    SeedTree::new(seed).child(beta_index as u64).child(rep as u64)
}

/// Runs a resolved configuration against a model.
pub fn run_experiment(model: &PairwiseModel, config: &RunConfig) -> Result<RunOutput> {
    let config = config.clone().resolve()?;
    let method = config.method.expect("resolved");
    let seed = config.seed.expect("resolved");
    let reps = config.reps.expect("resolved");
    let digest = model.digest();
    let config_value = serde_json::to_value(&config)?;

    let mut records = Vec::new();
    let mut results = Vec::new();
    for (bi, &b) in config.betas.iter().enumerate() {
        let beta = Temperature::new(b)?;
        let oracle = match (config.oracle_log_z.get(bi), config.exact_oracle) {
            (Some(&z), _) => Some(z),
            (None, Some(true)) => Some(exact_log_partition(model, beta)?),
            _ => None,
        };
        let reps_out: Vec<RepResult> = (0..reps)
            .into_par_iter()
            .map(|r| run_rep(model, &config, method, beta, rep_stream(seed, bi, r)))
            .collect::<Result<_>>()?;

        for (r, rep) in reps_out.iter().enumerate() {
            let mut rec = Map::new();
            rec.insert("method".into(), json!(method.name()));
            rec.insert("beta".into(), json!(b));
            rec.insert("rep".into(), json!(r));
            rec.insert("seed".into(), json!(seed));
            rec.insert("stream".into(), json!([bi, r]));
            rec.insert("model_digest".into(), json!(digest));
            for (k, v) in &rep.fields {
                rec.insert(k.clone(), v.clone());
            }
            if let (Some(z), Some(est)) = (oracle, rep.log_z) {
                rec.insert("oracle_log_z".into(), json!(z));
                rec.insert("error".into(), json!(est - z));
            }
            rec.insert("config".into(), config_value.clone());
            records.push(Value::Object(rec));
        }
        results.push(summarise(b, oracle, &reps_out));
    }
    let summary = json!({
        "method": method.name(),
        "model_digest": digest,
        "num_variables": model.num_variables(),
        "seed": seed,
        "config": config_value,
        "results": results,
    });
    Ok(RunOutput { records, summary })
}

fn run_rep(model: &PairwiseModel, config: &RunConfig, method: Method, beta: Temperature, stream: SeedTree) -> Result<RepResult> {
    let mut out = RepResult::default();
    let f = &mut out.fields;
    match method {
        Method::Exact => {
            let log_z = exact_log_partition(model, beta)?;
            let mean_energy = exact_mean_energy(model, beta)?;
            f.insert("log_Z".into(), json!(log_z));
            f.insert("mean_energy".into(), json!(mean_energy));
            if config.histogram == Some(true) {
                let hist = exact_energy_distribution(model, beta)?;
                out.residual_mass = hist.residual_mass;
                f.insert("residual_mass".into(), json!(hist.residual_mass));
                out.levels = Some(hist.levels);
            }
            out.log_z = Some(log_z);
            out.energy = Some(mean_energy);
        }
        Method::Nfw => {
            let mut rng = stream.rng();
            let x0 = SpinState::uniform(model, &mut rng);
            let traj = nfw_run(model, beta, x0, config.t.expect("resolved"), &mut rng)?;
            let final_energy = traj.energies().last().expect("nonempty");
            let min_energy = traj.energies().fold(f64::INFINITY, f64::min);
            let length = traj.effective_length();
            let weighted: f64 = traj
                .energies()
                .zip(traj.times.windows(2))
                .map(|(e, w)| e * (w[1] - w[0]) as f64)
                .sum();
            f.insert("flips".into(), json!(traj.flips.len()));
            f.insert("effective_length".into(), json!(length));
            f.insert("final_energy".into(), json!(final_energy));
            f.insert("min_energy".into(), json!(min_energy));
            if length > 0 {
                f.insert("time_mean_energy".into(), json!(weighted / length as f64));
            }
            f.insert(
                "status".into(),
                json!(match traj.status {
                    RunStatus::Completed => "completed",
                    RunStatus::Absorbing => "absorbing",
                }),
            );
            out.energy = Some(final_energy);
        }
        Method::Eda => {
            let mut rng = stream.rng();
            let steps = config.steps.expect("resolved");
            let schedule = Schedule::Linear {
                start: config.beta_start.expect("resolved"),
                end: beta.beta(),
                steps,
            };
            let x0 = SpinState::uniform(model, &mut rng);
            let res = eda_run(model, &schedule, x0, steps, false, &mut rng)?;
            f.insert("final_energy".into(), json!(res.energy));
            out.energy = Some(res.energy);
        }
        Method::Lfqgs => {
            let mut rng = stream.rng();
            let cfg = lfqgs_config(model, config);
            let x0 = SpinState::uniform(model, &mut rng);
            let (traj, set) = lfqgs_collect(model, beta, x0, config.t.expect("resolved"), cfg, &mut rng)?;
            let selected = lfis_core::lfis::select_state(&set, beta, 0, &mut rng)?;
            let violations = tabu_violations(&traj);
            f.insert("selected_energy".into(), json!(selected.energy));
            f.insert("min_energy".into(), json!(set.energies().fold(f64::INFINITY, f64::min)));
            f.insert("final_energy".into(), json!(model.energy(&traj.final_state())?));
            f.insert("distinct_states".into(), json!(set.len()));
            f.insert("moves".into(), json!(traj.moves.len()));
            f.insert("tabu_violations".into(), json!(violations));
            out.tabu_violations = Some(violations);
            out.energy = Some(selected.energy);
        }
        Method::Lfis => {
            let cfg = LfisConfig {
                sequences: config.n.expect("resolved"),
                samples: config.t.expect("resolved"),
                gamma_min: config.gamma_min,
                gamma_max: config.gamma_max,
                rule: config.tabu.unwrap_or_default(),
                order: config.order.clone(),
                kernel_betas: config.kernel_betas.clone(),
                polish_flips: config.polish_flips.unwrap_or(0),
                ..LfisConfig::new(0, 0)
            };
            let res = lfis_pipeline(model, beta, &cfg, stream)?;
            let est = &res.estimate;
            let energy = est.expectation("energy").expect("energy functional");
            f.insert("log_Z_hat".into(), json!(est.log_z_hat));
            f.insert("log_W".into(), json!(est.log_w));
            f.insert("N".into(), json!(est.n));
            f.insert("T".into(), json!(cfg.samples));
            f.insert("ess".into(), json!(est.ess));
            f.insert("expectations".into(), json!({ "energy": energy }));
            f.insert("sweep_order_digest".into(), json!(res.sweep_order_digest));
            let (mean_distinct, _) = mean_and_variance(&res.distinct_counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
                .unwrap_or((0.0, 0.0));
            f.insert("mean_distinct_states".into(), json!(mean_distinct));
            if !res.warnings.is_empty() {
                f.insert("warnings".into(), json!(res.warnings));
            }
            if config.histogram == Some(true) {
                let weights = est.normalized_weights();
                out.moved_levels = Some(merge_levels(
                    res.moved.iter().zip(&weights).map(|(s, &w)| (s.energy, w)).collect(),
                    LEVEL_TOLERANCE,
                ));
                f.insert(
                    "selected_energies".into(),
                    json!(res.selected.iter().map(|s| s.energy).collect::<Vec<_>>()),
                );
                out.levels = Some(res.selection_levels);
            }
            out.log_z = Some(est.log_z_hat);
            out.energy = Some(energy);
        }
        Method::Smc => {
            let mut rng = stream.rng();
            let cfg = SmcConfig {
                particles: config.particles.expect("resolved"),
                steps: config.steps.expect("resolved"),
                resample_threshold: config.resample_threshold.expect("resolved"),
                moves_per_level: config.moves_per_level.expect("resolved"),
            };
            let res = smc_run(model, beta, cfg, &mut rng)?;
            let energy = res.population.mean_energy();
            f.insert("log_Z_hat".into(), json!(res.log_z_hat));
            f.insert("resamples".into(), json!(res.resamples));
            f.insert("mean_energy".into(), json!(energy));
            out.log_z = Some(res.log_z_hat);
            out.energy = Some(energy);
        }
    }
    Ok(out)
}

fn lfqgs_config(model: &PairwiseModel, config: &RunConfig) -> LfqgsConfig {
    let d = LfqgsConfig::default_for(model.num_variables());
    LfqgsConfig {
        gamma_min: config.gamma_min.unwrap_or(d.gamma_min),
        gamma_max: config.gamma_max.unwrap_or(d.gamma_max),
        rule: config.tabu.unwrap_or(d.rule),
    }
}

/// Repeated `(variable, value)` pairs within any recorded move.
pub fn tabu_violations(traj: &LfqgsTrajectory) -> usize {
    traj.moves
        .iter()
        .map(|m| {
            let mut seen = HashSet::with_capacity(m.flips.len());
            m.flips.iter().filter(|p| !seen.insert(**p)).count()
        })
        .sum()
}

/// Mean, sample variance (divisor `n - 1`) and median.
fn stats(xs: &[f64]) -> Value {
    let (mean, pop) = mean_and_variance(xs).expect("nonempty");
    let n = xs.len() as f64;
    let variance = if xs.len() > 1 { pop * n / (n - 1.0) } else { 0.0 };
    json!({ "mean": mean, "variance": variance, "median": median(xs).expect("nonempty") })
}

/// Levels pooled across replications below this mass go into the residual.
pub const SUMMARY_MASS_FLOOR: f64 = 1e-12;

/// Pools per-replication levels with equal weight and lumps levels below
/// [`SUMMARY_MASS_FLOOR`] into a residual mass.
fn pooled(levels: impl Iterator<Item = Vec<EnergyLevel>>, reps: usize) -> (Vec<EnergyLevel>, f64) {
    let merged = merge_levels(
        levels
            .flat_map(|ls| ls.into_iter().map(|l| (l.energy, l.mass / reps as f64)))
            .collect(),
        LEVEL_TOLERANCE,
    );
    let (kept, dropped): (Vec<_>, Vec<_>) = merged.into_iter().partition(|l| l.mass >= SUMMARY_MASS_FLOOR);
    let residual: CompensatedSum = dropped.iter().map(|l| l.mass).collect();
    (kept, residual.value())
}

fn summarise(beta: f64, oracle: Option<f64>, reps: &[RepResult]) -> Value {
    let mut s = Map::new();
    s.insert("beta".into(), json!(beta));
    s.insert("reps".into(), json!(reps.len()));
    let log_z: Vec<f64> = reps.iter().filter_map(|r| r.log_z).collect();
    if !log_z.is_empty() {
        s.insert("log_Z_hat".into(), stats(&log_z));
        if let Some(z) = oracle {
            s.insert("oracle_log_z".into(), json!(z));
            let errors: Vec<f64> = log_z.iter().map(|e| (e - z).abs()).collect();
            s.insert("abs_error".into(), stats(&errors));
        }
    }
    let energies: Vec<f64> = reps.iter().filter_map(|r| r.energy).collect();
    if !energies.is_empty() {
        s.insert("energy".into(), stats(&energies));
    }
    if reps.iter().all(|r| r.levels.is_some()) && !reps.is_empty() {
        let (levels, dropped) = pooled(reps.iter().map(|r| r.levels.clone().unwrap()), reps.len());
        s.insert("levels".into(), json!(levels));
        let residual: f64 = reps.iter().map(|r| r.residual_mass).sum::<f64>() / reps.len() as f64;
        s.insert("residual_mass".into(), json!(residual + dropped));
    }
    if reps.iter().all(|r| r.moved_levels.is_some()) && !reps.is_empty() {
        let (levels, dropped) = pooled(reps.iter().map(|r| r.moved_levels.clone().unwrap()), reps.len());
        s.insert("moved_levels".into(), json!(levels));
        s.insert("moved_residual_mass".into(), json!(dropped));
    }
    if reps.iter().all(|r| r.tabu_violations.is_some()) && !reps.is_empty() {
        let total: usize = reps.iter().filter_map(|r| r.tabu_violations).sum();
        s.insert("tabu_violations".into(), json!(total));
    }
    Value::Object(s)
}

/// Writes `records.jsonl`, `summary.json` and optionally `records.csv`
/// into `dir`.
pub fn write_outputs(dir: &Path, output: &RunOutput, csv: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut lines = Vec::new();
    for rec in &output.records {
        serde_json::to_writer(&mut lines, rec)?;
        lines.push(b'\n');
    }
    fs::write(dir.join("records.jsonl"), lines)?;
    fs::write(dir.join("summary.json"), summary_bytes(output)?)?;
    if csv {
        let mut f = fs::File::create(dir.join("records.csv"))?;
        writeln!(f, "method,beta,rep,log_Z_hat,error,energy")?;
        for rec in &output.records {
            let get = |k: &str| rec.get(k).map(|v| v.to_string()).unwrap_or_default();
            let energy = ["selected_energy", "final_energy", "mean_energy"]
                .iter()
                .find_map(|k| rec.get(*k))
                .or_else(|| rec.pointer("/expectations/energy"))
                .map(|v| v.to_string())
                .unwrap_or_default();
            let log_z = rec.get("log_Z_hat").or_else(|| rec.get("log_Z")).map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                f,
                "{},{},{},{},{},{}",
                rec["method"].as_str().unwrap_or_default(),
                get("beta"),
                get("rep"),
                log_z,
                get("error"),
                energy
            )?;
        }
    }
    Ok(())
}

/// The summary as written to disk: pretty JSON with a trailing newline.
pub fn summary_bytes(output: &RunOutput) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(&output.summary)?;
    bytes.push(b'\n');
    Ok(bytes)
}
