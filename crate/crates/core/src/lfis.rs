//! Large-flip importance sampling.
//!
//! For each of `N` independent LFQGS sequences one state `Y` is selected from
//! the sequence's distinct visited states with probability proportional to
//! `exp(-beta E)`, and moved by one fixed-order Gibbs sweep to `Y~`. The
//! proposal density of every moved state is the equal-weight mixture of the
//! `N` sweep kernels anchored at the selected states,
//!
//! ```text
//! mu(y) = (1/N) sum_j K(y | Y_j),
//! ```
//!
//! which is normalised by construction. Importance weights
//! `w_i = exp(-beta E(Y~_i)) / mu(Y~_i)` then give `Z ~ W / N` with
//! `W = sum_i w_i`, and self-normalised expectations.
//!
//! The mixture costs `N^2` kernel evaluations. A kernel density splits each
//! local energy into a part from variables earlier in the sweep order (taken
//! from the target) and a part from later ones (taken from the source), so
//! [`SweepDensityTable`] precomputes both halves per state and evaluates a
//! pair in `O(M q)` instead of `O(M * degree)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lfqgs::{lfqgs_collect, DistinctStateSet, LfqgsConfig, TabuRule};
use crate::model::{log_conditional, PairwiseModel, SpinState, Temperature, Walker};
use crate::nfw::{nfw_run, sample_from_log_probs};
use crate::numeric::{sample_log_categorical, softplus, CompensatedSum, LogSumExp};
use crate::oracle::{merge_levels, EnergyLevel};
use crate::rng::SeedTree;

/// A fixed visiting order for the sweep kernel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SweepOrder {
    order: Vec<usize>,
    position: Vec<usize>,
}

impl SweepOrder {
    pub fn identity(num_variables: usize) -> Self {
        SweepOrder {
            order: (0..num_variables).collect(),
            position: (0..num_variables).collect(),
        }
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut position = vec![usize::MAX; order.len()];
        for (k, &i) in order.iter().enumerate() {
            if i >= order.len() || position[i] != usize::MAX {
                return Err(Error::param("sweep order is not a permutation"));
            }
            position[i] = k;
        }
        Ok(SweepOrder { order, position })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.order
    }

    /// Rank of variable `i` in the order.
    pub fn position(&self, i: usize) -> usize {
        self.position[i]
    }

    /// First 16 bytes of SHA-256 over the order as little-endian `u64`s, hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &i in &self.order {
            h.update((i as u64).to_le_bytes());
        }
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check(&self, model: &PairwiseModel) -> Result<()> {
        if self.len() != model.num_variables() {
            return Err(Error::DimensionMismatch {
                expected: model.num_variables(),
                got: self.len(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for SweepOrder {
    type Error = Error;
    fn try_from(order: Vec<usize>) -> Result<Self> {
        SweepOrder::new(order)
    }
}

impl From<SweepOrder> for Vec<usize> {
    fn from(o: SweepOrder) -> Self {
        o.order
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectedSample {
    pub state: SpinState,
    /// Index of the source sequence.
    pub sequence: usize,
    /// Index of the state within the sequence's distinct set.
    pub member: usize,
    pub energy: f64,
    pub log_unnorm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovedSample {
    pub state: SpinState,
    pub origin: SpinState,
    pub sequence: usize,
    pub energy: f64,
    pub log_unnorm: f64,
    /// `log K(state | origin)` as recorded by the sweep that produced it.
    pub log_sweep: f64,
    pub log_mixture: f64,
    pub log_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub n: usize,
    pub log_weights: Vec<f64>,
    pub log_w: f64,
    pub log_z_hat: f64,
    pub ess: f64,
    /// Self-normalised estimates, in the order the functionals were given.
    pub expectations: Vec<(String, f64)>,
}

impl WeightedEstimate {
    pub fn normalized_weights(&self) -> Vec<f64> {
        normalized(&self.log_weights, self.log_w)
    }

    pub fn expectation(&self, name: &str) -> Option<f64> {
        self.expectations
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

fn normalized(log_weights: &[f64], log_w: f64) -> Vec<f64> {
    log_weights.iter().map(|&lw| (lw - log_w).exp()).collect()
}

/// Selection probabilities `exp(-beta E_k) / sum exp(-beta E)` over a
/// distinct-state set, in member order.
pub fn selection_weights(states: &DistinctStateSet, beta: Temperature) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Err(Error::Empty("distinct state set"));
    }
    let b = beta.beta();
    let lw: Vec<f64> = states.energies().map(|e| -b * e).collect();
    let mut lse = LogSumExp::new();
    lw.iter().for_each(|&x| lse.add(x));
    Ok(normalized(&lw, lse.value()))
}

/// Draws one member of the set with probability proportional to
/// `exp(-beta E)`.
pub fn select_state<R: Rng + ?Sized>(
    states: &DistinctStateSet,
    beta: Temperature,
    sequence: usize,
    rng: &mut R,
) -> Result<SelectedSample> {
    if states.is_empty() {
        return Err(Error::Empty("distinct state set"));
    }
    let b = beta.beta();
    let lw: Vec<f64> = states.energies().map(|e| -b * e).collect();
    let mut scratch = Vec::with_capacity(lw.len());
    let member = sample_log_categorical(&lw, &mut scratch, rng).ok_or(Error::Empty("selection mass"))?;
    let energy = states.members()[member].energy;
    Ok(SelectedSample {
        state: states.state(member),
        sequence,
        member,
        energy,
        log_unnorm: if b == 0.0 { 0.0 } else { -b * energy },
    })
}

/// One Gibbs sweep in `order` starting from `y`. Returns the new state and
/// `log K(new | y)`, the sum of the log conditionals of the values drawn.
pub fn sweep_kernel_apply<R: Rng + ?Sized>(
    model: &PairwiseModel,
    beta: Temperature,
    y: &SpinState,
    order: &SweepOrder,
    rng: &mut R,
) -> Result<(SpinState, f64)> {
    order.check(model)?;
    let mut walker = Walker::new(model, y.clone())?;
    let log_k = sweep_walker(&mut walker, beta.beta(), order, rng);
    Ok((walker.into_state(), log_k))
}

fn sweep_walker<R: Rng + ?Sized>(walker: &mut Walker<'_>, beta: f64, order: &SweepOrder, rng: &mut R) -> f64 {
    let mut lp = vec![0.0; walker.model().domain_size()];
    let mut acc = CompensatedSum::new();
    for &i in order.as_slice() {
        walker.log_conditional(beta, i, &mut lp);
        let v = sample_from_log_probs(&lp, rng);
        acc.add(lp[v]);
        walker.flip(i, v);
    }
    acc.value()
}

/// `log K(y_new | y_old)`: the sweep from `y_old` forced onto the values of
/// `y_new`.
pub fn sweep_kernel_density(
    model: &PairwiseModel,
    beta: Temperature,
    y_new: &SpinState,
    y_old: &SpinState,
    order: &SweepOrder,
) -> Result<f64> {
    order.check(model)?;
    model.check_state(y_new)?;
    let mut walker = Walker::new(model, y_old.clone())?;
    let mut lp = vec![0.0; model.domain_size()];
    let mut acc = CompensatedSum::new();
    for &i in order.as_slice() {
        walker.log_conditional(beta.beta(), i, &mut lp);
        let v = y_new.get(i);
        acc.add(lp[v]);
        walker.flip(i, v);
    }
    Ok(acc.value())
}

/// `log((1/N) sum_j K(target | sources[j]))`, evaluated kernel by kernel.
pub fn mixture_log_density(
    model: &PairwiseModel,
    beta: Temperature,
    target: &SpinState,
    sources: &[SpinState],
    order: &SweepOrder,
) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::Empty("mixture sources"));
    }
    let mut terms = sources
        .iter()
        .map(|s| sweep_kernel_density(model, beta, target, s, order))
        .collect::<Result<Vec<_>>>()?;
    Ok(sorted_log_sum_exp(&mut terms) - (sources.len() as f64).ln())
}

fn sorted_log_sum_exp(terms: &mut [f64]) -> f64 {
    terms.sort_by(|a, b| a.total_cmp(b));
    let mut lse = LogSumExp::new();
    // Largest first, so the running maximum never moves.
    terms.iter().rev().for_each(|&x| lse.add(x));
    lse.value()
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.total_cmp(b));
    compensated(terms.into_iter())
}

/// Per-state halves of the sweep-order local energies.
///
/// For variable `i`, `lower[i][v]` sums the couplings to variables swept
/// before `i` and `upper[i][v]` those swept after. A kernel `K(y | x)` reads
/// `lower` from `y` and `upper` from `x`.
pub struct SweepDensityTable {
    num_variables: usize,
    domain_size: usize,
    targets: Vec<TargetRow>,
    sources: Vec<SourceRow>,
}

struct TargetRow {
    values: Vec<u8>,
    lower: Vec<f64>,
}

struct SourceRow {
    beta: f64,
    upper: Vec<f64>,
}

fn split_local_energies(model: &PairwiseModel, order: &SweepOrder, state: &SpinState) -> (Vec<f64>, Vec<f64>) {
    let q = model.domain_size();
    let m = model.num_variables();
    let scale = model.coupling_scale();
    let mut lower = vec![0.0; m * q];
    let mut upper = vec![0.0; m * q];
    for i in 0..m {
        let pi = order.position(i);
        model.for_each_neighbor(i, |j, c| {
            let b = state.get(j);
            let row = if order.position(j) < pi { &mut lower } else { &mut upper };
            for v in 0..q {
                row[i * q + v] += c * model.pair_energy(v, b);
            }
        });
        for v in 0..q {
            lower[i * q + v] *= scale;
            upper[i * q + v] *= scale;
        }
    }
    (lower, upper)
}

impl SweepDensityTable {
    /// `sources[j]` is swept at inverse temperature `betas[j]`.
    pub fn new(
        model: &PairwiseModel,
        order: &SweepOrder,
        targets: &[SpinState],
        sources: &[SpinState],
        betas: &[f64],
    ) -> Result<Self> {
        order.check(model)?;
        if betas.len() != sources.len() {
            return Err(Error::DimensionMismatch {
                expected: sources.len(),
                got: betas.len(),
            });
        }
        for s in targets.iter().chain(sources) {
            model.check_state(s)?;
        }
        let targets = targets
            .par_iter()
            .map(|y| TargetRow {
                values: y.indices().to_vec(),
                lower: split_local_energies(model, order, y).0,
            })
            .collect();
        let sources = sources
            .par_iter()
            .zip(betas.par_iter())
            .map(|(x, &beta)| SourceRow {
                beta,
                upper: split_local_energies(model, order, x).1,
            })
            .collect();
        Ok(SweepDensityTable {
            num_variables: model.num_variables(),
            domain_size: model.domain_size(),
            targets,
            sources,
        })
    }

    /// `log K(targets[t] | sources[s])`.
    pub fn log_kernel(&self, t: usize, s: usize) -> f64 {
        let target = &self.targets[t];
        let source = &self.sources[s];
        let q = self.domain_size;
        let beta = source.beta;
        let mut acc = 0.0;
        if q == 2 {
            for i in 0..self.num_variables {
                let v = target.values[i] as usize;
                let e0 = target.lower[2 * i] + source.upper[2 * i];
                let e1 = target.lower[2 * i + 1] + source.upper[2 * i + 1];
                let d = if v == 0 { e0 - e1 } else { e1 - e0 };
                acc -= softplus(beta * d);
            }
        } else {
            let mut e = vec![0.0; q];
            let mut lp = vec![0.0; q];
            for i in 0..self.num_variables {
                for v in 0..q {
                    e[v] = target.lower[i * q + v] + source.upper[i * q + v];
                }
                log_conditional(beta, &e, &mut lp);
                acc += lp[target.values[i] as usize];
            }
        }
        acc
    }

    /// `log((1/S) sum_s K(targets[t] | sources[s]))`. Terms are summed in
    /// sorted order, so the result does not depend on the source order.
    pub fn log_mixture(&self, t: usize) -> f64 {
        let mut terms: Vec<f64> = (0..self.sources.len()).map(|s| self.log_kernel(t, s)).collect();
        sorted_log_sum_exp(&mut terms) - (self.sources.len() as f64).ln()
    }

    /// Mixture log-densities of every target, in target order.
    pub fn log_mixtures(&self) -> Vec<f64> {
        (0..self.targets.len())
            .into_par_iter()
            .map(|t| self.log_mixture(t))
            .collect()
    }
}

/// A named state functional for [`importance_estimate`].
pub type Functional<'a> = (&'a str, &'a (dyn Fn(&SpinState) -> f64 + Sync));

/// Self-normalised importance estimates from moved samples.
pub fn importance_estimate(samples: &[MovedSample], functionals: &[Functional<'_>]) -> Result<WeightedEstimate> {
    if samples.is_empty() {
        return Err(Error::Empty("importance samples"));
    }
    let log_weights: Vec<f64> = samples.iter().map(|s| s.log_weight).collect();
    let log_w = sorted_log_sum_exp(&mut log_weights.clone());
    if !log_w.is_finite() {
        return Err(Error::param(format!("total importance weight is degenerate (log W = {log_w})")));
    }
    let w = normalized(&log_weights, log_w);
    let sum_sq = sorted_sum(w.iter().map(|x| x * x).collect());
    let n = samples.len();
    let ess = (1.0 / sum_sq).clamp(1.0, n as f64);

    // Weighted means are taken relative to h at the heaviest sample, so a
    // constant functional comes back exactly. Ties and sums are resolved by
    // value, never by position.
    let expectations = functionals
        .iter()
        .map(|(name, h)| {
            let values: Vec<f64> = samples.iter().map(|s| h(&s.state)).collect();
            let h0 = log_weights
                .iter()
                .zip(&values)
                .max_by(|a, b| a.0.total_cmp(b.0).then(b.1.total_cmp(a.1)))
                .map(|(_, &v)| v)
                .unwrap_or(0.0);
            let shift = sorted_sum(w.iter().zip(&values).map(|(wk, hk)| wk * (hk - h0)).collect());
            (name.to_string(), h0 + shift)
        })
        .collect();
    Ok(WeightedEstimate {
        n,
        log_weights,
        log_w,
        log_z_hat: log_w - (n as f64).ln(),
        ess,
        expectations,
    })
}

fn compensated(it: impl Iterator<Item = f64>) -> f64 {
    it.collect::<CompensatedSum>().value()
}

fn default_pair_work_budget() -> f64 {
    1e10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfisConfig {
    /// Number of sequences `N`.
    pub sequences: usize,
    /// States per sequence `T`.
    pub samples: usize,
    /// LF size bounds; `floor(M/8)` and `floor(M/6)` (at least 1) when unset.
    #[serde(default)]
    pub gamma_min: Option<usize>,
    #[serde(default)]
    pub gamma_max: Option<usize>,
    #[serde(default)]
    pub rule: TabuRule,
    /// Sweep order; identity when unset.
    #[serde(default)]
    pub order: Option<Vec<usize>>,
    /// Inverse temperatures of the sweep kernels. Sample `i` is swept at
    /// `kernel_betas[i % len]`; empty means the target temperature.
    #[serde(default)]
    pub kernel_betas: Vec<f64>,
    /// Plain NFW flips applied to each selected state before its sweep.
    #[serde(default)]
    pub polish_flips: usize,
    /// Warn when `N^2 * M * q` exceeds this.
    #[serde(default = "default_pair_work_budget")]
    pub pair_work_budget: f64,
}

impl LfisConfig {
    pub fn new(sequences: usize, samples: usize) -> Self {
        LfisConfig {
            sequences,
            samples,
            gamma_min: None,
            gamma_max: None,
            rule: TabuRule::default(),
            order: None,
            kernel_betas: Vec::new(),
            polish_flips: 0,
            pair_work_budget: default_pair_work_budget(),
        }
    }

    pub fn lfqgs_config(&self, num_variables: usize) -> LfqgsConfig {
        let d = LfqgsConfig::default_for(num_variables);
        LfqgsConfig {
            gamma_min: self.gamma_min.unwrap_or(d.gamma_min),
            gamma_max: self.gamma_max.unwrap_or(d.gamma_max),
            rule: self.rule,
        }
    }

    pub fn sweep_order(&self, num_variables: usize) -> Result<SweepOrder> {
        match &self.order {
            Some(o) => SweepOrder::new(o.clone()),
            None => Ok(SweepOrder::identity(num_variables)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LfisOutput {
    pub estimate: WeightedEstimate,
    pub selected: Vec<SelectedSample>,
    pub moved: Vec<MovedSample>,
    /// Pooled selection distribution over energies: each sequence contributes
    /// its exact selection probabilities with total mass `1/N`.
    pub selection_levels: Vec<EnergyLevel>,
    pub distinct_counts: Vec<usize>,
    pub sweep_order_digest: String,
    pub warnings: Vec<String>,
}

/// Relative tolerance for merging equal energies into one level.
pub const LEVEL_TOLERANCE: f64 = 1e-9;

struct SequenceResult {
    selected: SelectedSample,
    anchor: SpinState,
    moved: SpinState,
    log_sweep: f64,
    levels: Vec<(f64, f64)>,
    distinct: usize,
}

/// The full estimator: `N` LFQGS sequences from uniform initial states, one
/// selection and one sweep per sequence, the `N x N` mixture and the
/// importance estimates (with the energy as the default functional).
///
/// Sequence `l` draws all of its randomness from `seeds.child(l)`, so the
/// output does not depend on the number of worker threads.
pub fn lfis_pipeline(
    model: &PairwiseModel,
    beta: Temperature,
    config: &LfisConfig,
    seeds: SeedTree,
) -> Result<LfisOutput> {
    let m = model.num_variables();
    let n = config.sequences;
    if n < 1 {
        return Err(Error::param("LFIS needs at least one sequence"));
    }
    if config.samples < 1 {
        return Err(Error::param("LFIS needs at least one sample per sequence"));
    }
    let lf = config.lfqgs_config(m);
    let order = config.sweep_order(m)?;
    order.check(model)?;
    let kernel_betas: Vec<f64> = if config.kernel_betas.is_empty() {
        vec![beta.beta()]
    } else {
        config
            .kernel_betas
            .iter()
            .map(|&b| Temperature::new(b).map(|t| t.beta()))
            .collect::<Result<_>>()?
    };

    let mut warnings = Vec::new();
    let pair_work = (n as f64).powi(2) * m as f64 * model.domain_size() as f64;
    if pair_work > config.pair_work_budget {
        warnings.push(format!(
            "mixture evaluation needs about {pair_work:.3e} operations (budget {:.3e})",
            config.pair_work_budget
        ));
    }

    let sequences: Vec<SequenceResult> = (0..n)
        .into_par_iter()
        .map(|l| {
            let mut rng = seeds.child(l as u64).rng();
            let x0 = SpinState::uniform(model, &mut rng);
            let (_, set) = lfqgs_collect(model, beta, x0, config.samples, lf, &mut rng)?;
            let selected = select_state(&set, beta, l, &mut rng)?;
            let levels = selection_weights(&set, beta)?
                .into_iter()
                .zip(set.energies())
                .map(|(p, e)| (e, p / n as f64))
                .collect();
            let anchor = if config.polish_flips > 0 {
                nfw_run(model, beta, selected.state.clone(), config.polish_flips, &mut rng)?.final_state()
            } else {
                selected.state.clone()
            };
            let kb = Temperature::new(kernel_betas[l % kernel_betas.len()])?;
            let (moved, log_sweep) = sweep_kernel_apply(model, kb, &anchor, &order, &mut rng)?;
            Ok(SequenceResult {
                selected,
                anchor,
                moved,
                log_sweep,
                levels: merge_pairs(levels),
                distinct: set.len(),
            })
        })
        .collect::<Result<_>>()?;

    let anchors: Vec<SpinState> = sequences.iter().map(|s| s.anchor.clone()).collect();
    let targets: Vec<SpinState> = sequences.iter().map(|s| s.moved.clone()).collect();
    let betas: Vec<f64> = (0..n).map(|l| kernel_betas[l % kernel_betas.len()]).collect();
    let table = SweepDensityTable::new(model, &order, &targets, &anchors, &betas)?;
    let log_mixtures = table.log_mixtures();

    let b = beta.beta();
    let moved: Vec<MovedSample> = sequences
        .iter()
        .zip(log_mixtures)
        .map(|(s, log_mixture)| {
            let energy = model.energy_unchecked(&s.moved);
            let log_unnorm = if b == 0.0 { 0.0 } else { -b * energy };
            MovedSample {
                state: s.moved.clone(),
                origin: s.anchor.clone(),
                sequence: s.selected.sequence,
                energy,
                log_unnorm,
                log_sweep: s.log_sweep,
                log_mixture,
                log_weight: log_unnorm - log_mixture,
            }
        })
        .collect();

    let energy = |x: &SpinState| model.energy_unchecked(x);
    let estimate = importance_estimate(&moved, &[("energy", &energy)])?;
    if estimate.ess < 2.0 && n > 1 {
        warnings.push(format!("effective sample size is {:.3} of {n}", estimate.ess));
    }
    let selection_levels = merge_levels(
        sequences
            .iter()
            .flat_map(|s| s.levels.iter().map(|l| (l.0, l.1)))
            .collect(),
        LEVEL_TOLERANCE,
    );
    Ok(LfisOutput {
        estimate,
        distinct_counts: sequences.iter().map(|s| s.distinct).collect(),
        selected: sequences.into_iter().map(|s| s.selected).collect(),
        moved,
        selection_levels,
        sweep_order_digest: order.digest(),
        warnings,
    })
}

fn merge_pairs(pairs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    merge_levels(pairs, LEVEL_TOLERANCE)
        .into_iter()
        .map(|l| (l.energy, l.mass))
        .collect()
}
