//! Comparison methods: annealed sequential Monte Carlo for `log Z`, and
//! event-driven annealing (re-exported from [`crate::nfw`]).
//!
//! The SMC estimator starts from uniform particles, whose base measure has
//! log-volume `M log q`, and cools linearly from `beta = 0` to the target over
//! `steps` levels. At level `t` each particle's log-weight gains
//! `-(beta_t - beta_{t-1}) E(x)`, then every particle takes random-site Gibbs
//! steps at `beta_t`. When the effective sample size drops below
//! `threshold * N` the population is resampled systematically and the log of
//! the mean weight is folded into the running estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PairwiseModel, SpinState, Temperature, Walker};
use crate::nfw::gibbs_step;
use crate::numeric::{log_sum_exp, CompensatedSum, LogWeightedMean};

pub use crate::nfw::{eda_run, EdaOutcome, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub particles: usize,
    pub steps: usize,
    #[serde(default = "default_threshold")]
    pub resample_threshold: f64,
    /// Random-site Gibbs steps per particle per level.
    #[serde(default = "default_moves")]
    pub moves_per_level: usize,
}

fn default_threshold() -> f64 {
    0.5
}

fn default_moves() -> usize {
    1
}

impl SmcConfig {
    pub fn new(particles: usize, steps: usize) -> Self {
        SmcConfig {
            particles,
            steps,
            resample_threshold: default_threshold(),
            moves_per_level: default_moves(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::param("SMC needs at least two particles"));
        }
        if self.steps < 1 {
            return Err(Error::param("SMC needs at least one annealing level"));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::param("resample threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ParticlePopulation {
    pub states: Vec<SpinState>,
    pub energies: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub beta: f64,
    /// Running `log Z` estimate, log-mean of the current weights excluded.
    pub log_normalizer: f64,
}

impl ParticlePopulation {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Self-normalised mean energy.
    pub fn mean_energy(&self) -> f64 {
        let mut acc = LogWeightedMean::default();
        for (&lw, &e) in self.log_weights.iter().zip(&self.energies) {
            acc.add(lw, e);
        }
        acc.mean()
    }
}

#[derive(Clone, Debug)]
pub struct SmcOutcome {
    pub population: ParticlePopulation,
    pub log_z_hat: f64,
    pub resamples: usize,
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

fn ess_fraction(log_weights: &[f64]) -> f64 {
    let lw = log_sum_exp(log_weights);
    let sq: CompensatedSum = log_weights.iter().map(|&x| (2.0 * (x - lw)).exp()).collect();
    1.0 / sq.value() / log_weights.len() as f64
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers
/// into the cumulative normalised weights. Returns ancestor indices.
pub fn systematic_resample<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = log_weights.len();
    let lw = log_sum_exp(log_weights);
    let u0 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut k = 0;
    for i in 0..n {
        let target = u0 + i as f64 / n as f64;
        while k < n - 1 && cumulative + (log_weights[k] - lw).exp() <= target {
            cumulative += (log_weights[k] - lw).exp();
            k += 1;
        }
        out.push(k);
    }
    out
}

/// Annealed SMC estimate of `log Z` at `beta_target`.
pub fn smc_run<R: Rng + ?Sized>(
    model: &PairwiseModel,
    beta_target: Temperature,
    config: SmcConfig,
    rng: &mut R,
) -> Result<SmcOutcome> {
    config.validate()?;
    let n = config.particles;
    let target = beta_target.beta();
    let mut walkers = (0..n)
        .map(|_| Walker::new(model, SpinState::uniform(model, rng)))
        .collect::<Result<Vec<_>>>()?;
    let mut log_weights = vec![0.0; n];
    let mut log_normalizer = model.num_variables() as f64 * (model.domain_size() as f64).ln();
    let mut resamples = 0;
    let mut lp = Vec::new();
    let mut previous = 0.0;
    for t in 1..=config.steps {
        let beta = target * t as f64 / config.steps as f64;
        let step = beta - previous;
        if step != 0.0 {
            for (lw, w) in log_weights.iter_mut().zip(&walkers) {
                *lw -= step * w.energy();
            }
        }
        previous = beta;
        for w in walkers.iter_mut() {
            for _ in 0..config.moves_per_level {
                gibbs_step(w, beta, &mut lp, rng);
            }
        }
        if t < config.steps && ess_fraction(&log_weights) < config.resample_threshold {
            log_normalizer += log_mean_exp(&log_weights);
            let ancestors = systematic_resample(&log_weights, rng);
            walkers = ancestors.iter().map(|&a| walkers[a].clone()).collect();
            log_weights.iter_mut().for_each(|lw| *lw = 0.0);
            resamples += 1;
        }
    }
    let log_z_hat = log_normalizer + log_mean_exp(&log_weights);
    let energies = walkers.iter().map(|w| w.energy()).collect();
    Ok(SmcOutcome {
        population: ParticlePopulation {
            states: walkers.into_iter().map(Walker::into_state).collect(),
            energies,
            log_weights,
            beta: target,
            log_normalizer,
        },
        log_z_hat,
        resamples,
    })
}
