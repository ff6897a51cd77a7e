use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use lfis_core::lfqgs::TabuRule;
use lfis_core::model::{build_cube_lattice, build_cube_lattice_with_scale, build_ising_dense};
use lfis_core::PairwiseModel;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    IsingDense,
    Cube,
}

/// A seeded builder invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildSpec {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; 3]>,
    pub seed: u64,
    /// Overrides the default `1/sqrt(M)` coupling scale (cube only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl BuildSpec {
    pub fn build(&self) -> Result<PairwiseModel> {
        Ok(match self.family {
            Family::IsingDense => {
                if self.dims.is_some() || self.scale.is_some() {
                    bail!("ising-dense takes --m only");
                }
                let m = self.m.context("ising-dense needs --m")?;
                build_ising_dense(m, self.seed)?
            }
            Family::Cube => {
                if self.m.is_some() {
                    bail!("cube takes --dims, not --m");
                }
                let dims = self.dims.context("cube needs --dims NX NY NZ")?;
                match self.scale {
                    Some(s) => build_cube_lattice_with_scale(dims, self.seed, s)?,
                    None => build_cube_lattice(dims, self.seed)?,
                }
            }
        })
    }
}

/// Where a run gets its model from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    File(PathBuf),
    Build(BuildSpec),
}

impl ModelSource {
    pub fn load(&self) -> Result<PairwiseModel> {
        match self {
            ModelSource::File(p) => {
                PairwiseModel::read_file(p).with_context(|| format!("reading model {}", p.display()))
            }
            ModelSource::Build(spec) => spec.build(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Nfw,
    Eda,
    Lfqgs,
    Lfis,
    Smc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Nfw => "nfw",
            Method::Eda => "eda",
            Method::Lfqgs => "lfqgs",
            Method::Lfis => "lfis",
            Method::Smc => "smc",
        }
    }
}

/// Everything that determines a run's output. Every field is optional so a
/// config file and command-line flags can be layered; [`RunConfig::resolve`]
/// fills in defaults and checks what the method needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSource>,
    /// Target inverse temperatures (the final one of the schedule for EDA).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub betas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// LFIS sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Samples per sequence (LFIS, LFQGS) or flips (NFW).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// Annealing levels (SMC) or flips (EDA).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_min: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabu: Option<TabuRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kernel_betas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polish_flips: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moves_per_level: Option<usize>,
    /// Known `log Z` per entry of `betas`, for error columns.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub oracle_log_z: Vec<f64>,
    /// Compute the oracle by enumeration instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_oracle: Option<bool>,
    /// Emit energy distributions (exact levels, LFIS selection levels).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<bool>,
}

impl RunConfig {
    /// Fields set in `over` replace those in `self`.
    pub fn layered(self, over: RunConfig) -> RunConfig {
        fn pick<T>(base: Option<T>, over: Option<T>) -> Option<T> {
            over.or(base)
        }
        fn pick_vec<T>(base: Vec<T>, over: Vec<T>) -> Vec<T> {
            if over.is_empty() {
                base
            } else {
                over
            }
        }
        RunConfig {
            method: pick(self.method, over.method),
            model: pick(self.model, over.model),
            betas: pick_vec(self.betas, over.betas),
            reps: pick(self.reps, over.reps),
            seed: pick(self.seed, over.seed),
            n: pick(self.n, over.n),
            t: pick(self.t, over.t),
            steps: pick(self.steps, over.steps),
            gamma_min: pick(self.gamma_min, over.gamma_min),
            gamma_max: pick(self.gamma_max, over.gamma_max),
            tabu: pick(self.tabu, over.tabu),
            order: pick(self.order, over.order),
            kernel_betas: pick_vec(self.kernel_betas, over.kernel_betas),
            polish_flips: pick(self.polish_flips, over.polish_flips),
            beta_start: pick(self.beta_start, over.beta_start),
            particles: pick(self.particles, over.particles),
            resample_threshold: pick(self.resample_threshold, over.resample_threshold),
            moves_per_level: pick(self.moves_per_level, over.moves_per_level),
            oracle_log_z: pick_vec(self.oracle_log_z, over.oracle_log_z),
            exact_oracle: pick(self.exact_oracle, over.exact_oracle),
            histogram: pick(self.histogram, over.histogram),
        }
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills defaults and validates. The result is what gets recorded.
    pub fn resolve(mut self) -> Result<RunConfig> {
        let method = self.method.context("no method given")?;
        if self.model.is_none() {
            bail!("no model given (use --model or a config file)");
        }
        if self.betas.is_empty() {
            bail!("no inverse temperature given (use --beta)");
        }
        if let Some(b) = self.betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            bail!("invalid inverse temperature {b}");
        }
        if !self.oracle_log_z.is_empty() && self.oracle_log_z.len() != self.betas.len() {
            bail!(
                "{} oracle values for {} temperatures",
                self.oracle_log_z.len(),
                self.betas.len()
            );
        }
        self.seed.get_or_insert(0);
        let reps = *self.reps.get_or_insert(1);
        if reps == 0 {
            bail!("--reps must be at least 1");
        }
        if method == Method::Exact {
            self.reps = Some(1);
        }
        let need = |v: Option<usize>, flag: &str| -> Result<usize> {
            match v {
                Some(0) => bail!("{flag} must be positive"),
                Some(x) => Ok(x),
                None => bail!("{} needs {flag}", method.name()),
            }
        };
        match method {
            Method::Exact => {}
            Method::Nfw | Method::Lfqgs => {
                need(self.t, "--t")?;
            }
            Method::Eda => {
                need(self.steps, "--steps")?;
                self.beta_start.get_or_insert(0.001);
            }
            Method::Lfis => {
                need(self.n, "--n")?;
                need(self.t, "--t")?;
                self.polish_flips.get_or_insert(0);
            }
            Method::Smc => {
                need(self.steps, "--steps")?;
                need(self.particles.or(self.n), "--particles")?;
                let p = self.particles.or(self.n);
                self.particles = p;
                self.n = None;
                self.resample_threshold.get_or_insert(0.5);
                self.moves_per_level.get_or_insert(1);
            }
        }
        if matches!(method, Method::Lfqgs | Method::Lfis) {
            self.tabu.get_or_insert(TabuRule::default());
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_values() {
        let file: RunConfig = serde_json::from_str(r#"{"betas":[5.0],"n":100,"t":10,"seed":3}"#).unwrap();
        let flags = RunConfig {
            n: Some(7),
            ..Default::default()
        };
        let c = file.layered(flags);
        assert_eq!(c.n, Some(7));
        assert_eq!(c.t, Some(10));
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.betas, vec![5.0]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn resolve_fills_defaults_and_checks_requirements() {
        let base = RunConfig {
            method: Some(Method::Smc),
            model: Some(ModelSource::File("m.json".into())),
            betas: vec![1.0],
            steps: Some(10),
            n: Some(20),
            ..Default::default()
        };
        let r = base.clone().resolve().unwrap();
        assert_eq!(r.particles, Some(20));
        assert_eq!(r.resample_threshold, Some(0.5));
        assert_eq!(r.reps, Some(1));
        let mut bad = base.clone();
        bad.steps = None;
        assert!(bad.resolve().is_err());
        let mut bad = base;
        bad.betas = vec![-1.0];
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn model_source_parses_both_forms() {
        let a: ModelSource = serde_json::from_str(r#""m25.json""#).unwrap();
        assert_eq!(a, ModelSource::File("m25.json".into()));
        let b: ModelSource = serde_json::from_str(r#"{"family":"cube","dims":[2,2,2],"seed":1}"#).unwrap();
        assert!(matches!(b, ModelSource::Build(_)));
        assert_eq!(b.load().unwrap().num_variables(), 8);
    }
}
