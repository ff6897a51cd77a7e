//! Event-driven single-site machinery.
//!
//! One step of the random-site Gibbs kernel picks `i` uniformly and
//! resamples `x_i` from its conditional. Writing `zeta_i(v) = pi_i(v | rest) / M`
//! for the probability that the step picks `i` and lands on `v`, the step
//! changes the state with probability `p_flip = sum_i sum_{v != x_i} zeta_i(v)`,
//! and, given that it does, lands on `(i, v)` with probability
//! `nu(i, v) = zeta_i(v) / p_flip`. The N-Fold Way replaces the runs of
//! rejected steps by a geometric waiting time and draws every change from
//! `nu` directly.
//!
//! All candidate masses are handled as log-weights; `nu` is normalised by a
//! max-shifted scan, so a deep local minimum at large `beta` cannot underflow
//! the flip choice even when `p_flip` itself is astronomically small.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{PairwiseModel, SpinState, Temperature, Walker};
use crate::numeric::{softplus, CompensatedSum};

/// Below this change probability the chain is treated as absorbed.
pub const ABSORBING_P_FLIP: f64 = 1e-300;

/// The candidate masses of one event-driven step from a fixed state.
///
/// Arrays are indexed `i * q + v`. `zeta`, `alpha` and `p_flip` describe the
/// unconstrained Gibbs step; `nu` is the change-conditional over the
/// candidates that are allowed (all of them, unless a tabu mask was applied),
/// with exact zeros on the stay entries `(i, x_i)` and on masked entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FlipDistribution {
    pub num_variables: usize,
    pub domain_size: usize,
    pub zeta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub p_flip: f64,
    pub nu: Vec<f64>,
}

impl FlipDistribution {
    pub fn zeta(&self, i: usize, v: usize) -> f64 {
        self.zeta[i * self.domain_size + v]
    }

    pub fn nu(&self, i: usize, v: usize) -> f64 {
        self.nu[i * self.domain_size + v]
    }

    /// `1 - K_G(x | x)`: the change probability computed from the stay
    /// masses rather than from the `alpha_i`.
    pub fn p_flip_from_kernel(&self, state: &SpinState) -> f64 {
        let q = self.domain_size;
        let stay: CompensatedSum = (0..self.num_variables)
            .map(|i| self.zeta[i * q + state.get(i)])
            .collect();
        1.0 - stay.value()
    }
}

/// Reusable buffers for event-driven steps.
#[derive(Clone, Debug, Default)]
pub(crate) struct EventScratch {
    pub(crate) log_w: Vec<f64>,
    cumulative: Vec<f64>,
    lp: Vec<f64>,
}

impl EventScratch {
    /// Fills `log_w[i * q + v] = log zeta_i(v)` for every allowed change,
    /// `-inf` elsewhere. Returns the log of the total allowed mass.
    pub(crate) fn fill(&mut self, walker: &Walker<'_>, beta: f64, mask: Option<&[bool]>) -> f64 {
        let model = walker.model();
        let m = model.num_variables();
        let q = model.domain_size();
        let log_m = (m as f64).ln();
        let state = walker.state();
        self.log_w.clear();
        self.log_w.resize(m * q, f64::NEG_INFINITY);
        let mut max = f64::NEG_INFINITY;
        if q == 2 {
            for i in 0..m {
                let cur = state.get(i);
                let other = 1 - cur;
                if mask.is_some_and(|mk| mk[2 * i + other]) {
                    continue;
                }
                let eps = walker.local(i);
                let lw = -log_m - softplus(beta * (eps[other] - eps[cur]));
                self.log_w[2 * i + other] = lw;
                max = max.max(lw);
            }
        } else {
            self.lp.resize(q, 0.0);
            for i in 0..m {
                walker.log_conditional(beta, i, &mut self.lp);
                let cur = state.get(i);
                for v in 0..q {
                    if v == cur || mask.is_some_and(|mk| mk[i * q + v]) {
                        continue;
                    }
                    let lw = self.lp[v] - log_m;
                    self.log_w[i * q + v] = lw;
                    max = max.max(lw);
                }
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        self.cumulative.clear();
        let mut total = 0.0;
        for &lw in &self.log_w {
            total += (lw - max).exp();
            self.cumulative.push(total);
        }
        max + total.ln()
    }

    /// Draws a candidate `(i, v)` from the weights of the last `fill`.
    pub(crate) fn sample<R: Rng + ?Sized>(&self, q: usize, rng: &mut R) -> (usize, usize) {
        let total = *self.cumulative.last().expect("fill before sample");
        let target = rng.random::<f64>() * total;
        let mut k = self.cumulative.partition_point(|&c| c <= target);
        k = k.min(self.log_w.len() - 1);
        while self.log_w[k] == f64::NEG_INFINITY {
            // Only reachable through rounding at the right edge.
            k -= 1;
        }
        (k / q, k % q)
    }
}

pub(crate) fn build_flip_distribution(
    walker: &Walker<'_>,
    beta: f64,
    mask: Option<&[bool]>,
) -> FlipDistribution {
    let model = walker.model();
    let m = model.num_variables();
    let q = model.domain_size();
    let state = walker.state();
    let mut zeta = vec![0.0; m * q];
    let mut alpha = vec![0.0; m];
    let mut lp = vec![0.0; q];
    for i in 0..m {
        walker.log_conditional(beta, i, &mut lp);
        let mut a = CompensatedSum::new();
        for v in 0..q {
            let z = lp[v].exp() / m as f64;
            zeta[i * q + v] = z;
            if v != state.get(i) {
                a.add(z);
            }
        }
        alpha[i] = a.value();
    }
    let p_flip = alpha.iter().copied().collect::<CompensatedSum>().value();

    let mut scratch = EventScratch::default();
    let log_total = scratch.fill(walker, beta, mask);
    let nu = if log_total == f64::NEG_INFINITY {
        vec![0.0; m * q]
    } else {
        scratch
            .log_w
            .iter()
            .map(|&lw| (lw - log_total).exp())
            .collect()
    };
    FlipDistribution {
        num_variables: m,
        domain_size: q,
        zeta,
        alpha,
        p_flip,
        nu,
    }
}

pub fn flip_distribution(
    model: &PairwiseModel,
    beta: Temperature,
    state: &SpinState,
) -> Result<FlipDistribution> {
    let walker = Walker::new(model, state.clone())?;
    Ok(build_flip_distribution(&walker, beta.beta(), None))
}

/// One random-site Gibbs step on a walker. Returns the chosen site.
pub(crate) fn gibbs_step<R: Rng + ?Sized>(
    walker: &mut Walker<'_>,
    beta: f64,
    lp: &mut Vec<f64>,
    rng: &mut R,
) -> usize {
    let model = walker.model();
    let q = model.domain_size();
    let i = rng.random_range(0..model.num_variables());
    lp.resize(q, 0.0);
    walker.log_conditional(beta, i, lp);
    let v = sample_from_log_probs(lp, rng);
    walker.flip(i, v);
    i
}

/// Samples from normalised log-probabilities by inversion.
#[inline]
pub(crate) fn sample_from_log_probs<R: Rng + ?Sized>(lp: &[f64], rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (v, &l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return v;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last
    // value that carries mass.
    lp.iter().rposition(|l| *l > f64::NEG_INFINITY).unwrap_or(0)
}

/// Random-site Gibbs step: picks `i` uniformly and resamples `x_i` from its
/// conditional.
pub fn gibbs_random_site_step<R: Rng + ?Sized>(
    model: &PairwiseModel,
    beta: Temperature,
    state: &SpinState,
    rng: &mut R,
) -> Result<SpinState> {
    let mut walker = Walker::new(model, state.clone())?;
    let mut lp = Vec::new();
    gibbs_step(&mut walker, beta.beta(), &mut lp, rng);
    Ok(walker.into_state())
}

/// `tau >= 1` with `P(tau = k) = (1 - p)^(k-1) p`, by inversion.
pub fn sample_geometric<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<u64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param(format!(
            "geometric success probability must be in (0, 1], got {p}"
        )));
    }
    if p == 1.0 {
        return Ok(1);
    }
    let u = 1.0 - rng.random::<f64>();
    let tau = (u.ln() / (-p).ln_1p()).ceil();
    Ok(if tau >= u64::MAX as f64 {
        u64::MAX
    } else {
        (tau as u64).max(1)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// `p_flip` fell below [`ABSORBING_P_FLIP`] before the requested flips.
    Absorbing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlipEvent {
    pub variable: usize,
    /// Domain index assumed by `variable`.
    pub value: u8,
    /// Waiting time in Monte Carlo steps (1 when times are not sampled).
    pub tau: u64,
    /// Energy after the flip.
    pub energy: f64,
}

/// Flip-indexed history of an N-Fold Way run. `times[n]` is the Monte Carlo
/// time at which the `n`-th flipped state appears (`times[0] = 0`); state
/// `n` occupies times `times[n] .. times[n + 1] - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NfwTrajectory {
    pub initial: SpinState,
    pub initial_energy: f64,
    pub flips: Vec<FlipEvent>,
    pub times: Vec<u64>,
    pub status: RunStatus,
}

impl NfwTrajectory {
    /// Length of the equivalent direct Gibbs run.
    pub fn effective_length(&self) -> u64 {
        *self.times.last().expect("times is never empty")
    }

    pub fn final_state(&self) -> SpinState {
        let mut x = self.initial.clone();
        for f in &self.flips {
            x.set(f.variable, f.value as usize);
        }
        x
    }

    pub fn energies(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.initial_energy).chain(self.flips.iter().map(|f| f.energy))
    }

    /// One JSON object per flip: `{n, i, new_value, tau, energy}`.
    pub fn write_json_lines<W: Write>(&self, model: &PairwiseModel, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line {
            n: usize,
            i: usize,
            new_value: i32,
            tau: u64,
            energy: f64,
        }
        for (n, f) in self.flips.iter().enumerate() {
            let line = Line {
                n: n + 1,
                i: f.variable,
                new_value: model.domain()[f.value as usize],
                tau: f.tau,
                energy: f.energy,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

enum Stop {
    Flips(usize),
    Time(u64),
}

fn nfw_drive<R: Rng + ?Sized>(
    model: &PairwiseModel,
    beta: Temperature,
    x0: SpinState,
    stop: Stop,
    rng: &mut R,
) -> Result<NfwTrajectory> {
    let mut walker = Walker::new(model, x0)?;
    let q = model.domain_size();
    let mut scratch = EventScratch::default();
    let mut traj = NfwTrajectory {
        initial: walker.state().clone(),
        initial_energy: walker.energy(),
        flips: Vec::new(),
        times: vec![0],
        status: RunStatus::Completed,
    };
    let log_threshold = ABSORBING_P_FLIP.ln();
    loop {
        let done = match stop {
            Stop::Flips(t) => traj.flips.len() >= t,
            Stop::Time(horizon) => traj.effective_length() >= horizon,
        };
        if done {
            break;
        }
        let log_p_flip = scratch.fill(&walker, beta.beta(), None);
        if !(log_p_flip >= log_threshold) {
            traj.status = RunStatus::Absorbing;
            break;
        }
        let tau = sample_geometric(log_p_flip.exp().min(1.0), rng)?;
        let (i, v) = scratch.sample(q, rng);
        walker.flip(i, v);
        let now = traj.effective_length().saturating_add(tau);
        traj.times.push(now);
        traj.flips.push(FlipEvent {
            variable: i,
            value: v as u8,
            tau,
            energy: walker.energy(),
        });
    }
    Ok(traj)
}

/// N-Fold Way: `flips` changes, each drawn from `nu` of the current state,
/// with geometric waiting times.
pub fn nfw_run<R: Rng + ?Sized>(
    model: &PairwiseModel,
    beta: Temperature,
    x0: SpinState,
    flips: usize,
    rng: &mut R,
) -> Result<NfwTrajectory> {
    nfw_drive(model, beta, x0, Stop::Flips(flips), rng)
}

/// Runs the N-Fold Way until the effective length reaches `horizon`.
pub fn nfw_run_until<R: Rng + ?Sized>(
    model: &PairwiseModel,
    beta: Temperature,
    x0: SpinState,
    horizon: u64,
    rng: &mut R,
) -> Result<NfwTrajectory> {
    nfw_drive(model, beta, x0, Stop::Time(horizon), rng)
}

/// The trajectory read off in Monte Carlo time, truncated at `max_steps`.
/// The final flipped state has no holding time and is never emitted, so the
/// full expansion has exactly `effective_length()` entries.
pub struct Expanded<'a> {
    traj: &'a NfwTrajectory,
    current: SpinState,
    next_flip: usize,
    time: u64,
    limit: u64,
}

pub fn expand_trajectory(traj: &NfwTrajectory, max_steps: u64) -> Expanded<'_> {
    Expanded {
        traj,
        current: traj.initial.clone(),
        next_flip: 0,
        time: 0,
        limit: traj.effective_length().min(max_steps),
    }
}

impl Expanded<'_> {
    /// Visits maximal runs `(state, repeat count)` without materialising
    /// individual steps.
    pub fn for_each_run(mut self, mut f: impl FnMut(&SpinState, u64)) {
        while self.time < self.limit {
            let end = self.traj.times[self.next_flip + 1].min(self.limit);
            f(&self.current, end - self.time);
            self.time = end;
            if self.time == self.traj.times[self.next_flip + 1] {
                let flip = self.traj.flips[self.next_flip];
                self.current.set(flip.variable, flip.value as usize);
                self.next_flip += 1;
            }
        }
    }
}

impl Iterator for Expanded<'_> {
    type Item = SpinState;

    fn next(&mut self) -> Option<SpinState> {
        if self.time >= self.limit {
            return None;
        }
        let out = self.current.clone();
        self.time += 1;
        if self.time == self.traj.times[self.next_flip + 1] {
            let flip = self.traj.flips[self.next_flip];
            self.current.set(flip.variable, flip.value as usize);
            self.next_flip += 1;
        }
        Some(out)
    }
}

/// Inverse-temperature schedule `n -> gamma_n` for `n = 1 ..= len`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant { beta: f64, steps: usize },
    /// `start` at `n = 1` to `end` at `n = steps`, linearly.
    Linear { start: f64, end: f64, steps: usize },
    Explicit { betas: Vec<f64> },
}

impl Schedule {
    pub fn len(&self) -> usize {
        match self {
            Schedule::Constant { steps, .. } | Schedule::Linear { steps, .. } => *steps,
            Schedule::Explicit { betas } => betas.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn beta_at(&self, n: usize) -> f64 {
        match self {
            Schedule::Constant { beta, .. } => *beta,
            Schedule::Linear { start, end, steps } => {
                if *steps <= 1 {
                    *end
                } else {
                    start + (end - start) * (n - 1) as f64 / (*steps - 1) as f64
                }
            }
            Schedule::Explicit { betas } => betas[n - 1],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Schedule::Constant { beta, .. } => beta.is_finite() && *beta >= 0.0,
            Schedule::Linear { start, end, .. } => {
                start.is_finite() && end.is_finite() && *start >= 0.0 && *end >= 0.0
            }
            Schedule::Explicit { betas } => betas.iter().all(|b| b.is_finite() && *b >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param("schedule values must be finite and >= 0"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdaOutcome {
    pub state: SpinState,
    pub energy: f64,
    /// Per-flip record when requested; `tau` is always 1.
    pub trace: Option<Vec<FlipEvent>>,
}

/// Event-driven annealing: `flips` changes, the `n`-th drawn from `nu` at
/// inverse temperature `schedule.beta_at(n)`. Waiting times are not sampled.
pub fn eda_run<R: Rng + ?Sized>(
    model: &PairwiseModel,
    schedule: &Schedule,
    x0: SpinState,
    flips: usize,
    keep_trace: bool,
    rng: &mut R,
) -> Result<EdaOutcome> {
    schedule.validate()?;
    if schedule.len() < flips {
        return Err(Error::param(format!(
            "schedule has {} entries but {flips} flips were requested",
            schedule.len()
        )));
    }
    let mut walker = Walker::new(model, x0)?;
    let q = model.domain_size();
    let mut scratch = EventScratch::default();
    let mut trace = keep_trace.then(|| Vec::with_capacity(flips));
    for n in 1..=flips {
        let log_total = scratch.fill(&walker, schedule.beta_at(n), None);
        if log_total == f64::NEG_INFINITY {
            return Err(Error::param("no flip candidate carries mass"));
        }
        let (i, v) = scratch.sample(q, rng);
        walker.flip(i, v);
        if let Some(t) = trace.as_mut() {
            t.push(FlipEvent {
                variable: i,
                value: v as u8,
                tau: 1,
                energy: walker.energy(),
            });
        }
    }
    Ok(EdaOutcome {
        energy: walker.energy(),
        state: walker.into_state(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_ising_dense;
    use crate::rng::SeedTree;

    fn t(b: f64) -> Temperature {
        Temperature::new(b).unwrap()
    }

    /// Expands the random-site kernel over every `(i, v)` outcome and
    /// conditions on a change, with no shared code path.
    fn brute_force_nu(model: &PairwiseModel, beta: f64, x: &SpinState) -> Vec<f64> {
        let m = model.num_variables();
        let q = model.domain_size();
        let mut mass = vec![0.0; m * q];
        for i in 0..m {
            let energies: Vec<f64> = (0..q)
                .map(|v| {
                    let mut y = x.clone();
                    y.set(i, v);
                    model.energy(&y).unwrap()
                })
                .collect();
            let z: f64 = energies.iter().map(|e| (-beta * e).exp()).sum();
            for v in 0..q {
                if v != x.get(i) {
                    mass[i * q + v] = (-beta * energies[v]).exp() / z / m as f64;
                }
            }
        }
        let total: f64 = mass.iter().sum();
        mass.iter().map(|w| w / total).collect()
    }

    #[test]
    fn single_variable_flip_distribution() {
        let model = PairwiseModel::ising(1, 1.0, []).unwrap();
        let d = flip_distribution(&model, t(2.0), &SpinState::constant(1, 0)).unwrap();
        assert!((d.p_flip - 0.5).abs() < 1e-15);
        assert_eq!(d.nu, vec![0.0, 1.0]);
    }

    #[test]
    fn free_model_flip_distribution_is_uniform() {
        let q = 3usize;
        let m = 4usize;
        let model = PairwiseModel::new(m, vec![0, 1, 2], 1.0, [], crate::model::PairPotential::SpinProduct).unwrap();
        let x = SpinState::from_indices(vec![0, 1, 2, 1]);
        let d = flip_distribution(&model, t(5.0), &x).unwrap();
        for a in &d.alpha {
            assert!((a - (q as f64 - 1.0) / (q * m) as f64).abs() < 1e-15);
        }
        assert!((d.p_flip - 2.0 / 3.0).abs() < 1e-15);
        for i in 0..m {
            for v in 0..q {
                let expect = if v == x.get(i) { 0.0 } else { 1.0 / ((q - 1) * m) as f64 };
                assert!((d.nu(i, v) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nu_matches_kernel_expansion() {
        let model = build_ising_dense(5, 31).unwrap();
        let mut rng = SeedTree::new(2).rng();
        for _ in 0..20 {
            let x = SpinState::uniform(&model, &mut rng);
            let d = flip_distribution(&model, t(3.0), &x).unwrap();
            let oracle = brute_force_nu(&model, 3.0, &x);
            for (a, b) in d.nu.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn flip_distribution_invariants_on_random_states() {
        let model = build_ising_dense(20, 4).unwrap();
        let mut rng = SeedTree::new(8).rng();
        for k in 0..1000 {
            let beta = [0.0, 0.5, 2.0, 5.0, 20.0][k % 5];
            let x = SpinState::uniform(&model, &mut rng);
            let d = flip_distribution(&model, t(beta), &x).unwrap();
            let total: f64 = d.zeta.iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!((d.p_flip - d.p_flip_from_kernel(&x)).abs() < 1e-10);
            assert!((0.0..=1.0).contains(&d.p_flip));
            assert!((d.nu.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for i in 0..20 {
                assert_eq!(d.nu(i, x.get(i)), 0.0);
            }
        }
    }

    #[test]
    fn gibbs_step_changes_at_most_one_site() {
        let model = build_ising_dense(6, 1).unwrap();
        let mut rng = SeedTree::new(3).rng();
        let x = SpinState::uniform(&model, &mut rng);
        let mut ones = 0;
        let n = 20_000;
        for _ in 0..n {
            let y = gibbs_random_site_step(&model, t(0.0), &x, &mut rng).unwrap();
            assert!(x.hamming(&y) <= 1);
            ones += y.get(0);
        }
        // Site 0 keeps its value unless picked; when picked the value is uniform.
        let expected = if x.get(0) == 1 { 1.0 - 0.5 / 6.0 } else { 0.5 / 6.0 };
        assert!((ones as f64 / n as f64 - expected).abs() < 0.01);
    }

    #[test]
    fn gibbs_step_follows_strong_field() {
        let model = PairwiseModel::ising(2, 1.0, [(0, 1, 5.0)]).unwrap();
        let mut rng = SeedTree::new(4).rng();
        let x = SpinState::from_indices(vec![0, 1]);
        for _ in 0..200 {
            let y = gibbs_random_site_step(&model, t(50.0), &x, &mut rng).unwrap();
            assert!(y.get(0) == y.get(1), "aligned with the dominant value");
        }
    }

    #[test]
    fn gibbs_marginals_match_oracle() {
        let model = build_ising_dense(3, 17).unwrap();
        let beta = t(1.5);
        let exact = crate::oracle::exact_marginals(&model, beta).unwrap();
        // A field-free model has unbiased marginals; add a variable with
        // asymmetric couplings via a chain of two-point statistics instead.
        let mut rng = SeedTree::new(5).rng();
        let mut w = Walker::new(&model, SpinState::uniform(&model, &mut rng)).unwrap();
        let mut lp = Vec::new();
        let mut counts = [[0u64; 2]; 3];
        let mut same01 = 0u64;
        let steps = 1_000_000;
        for _ in 0..steps {
            gibbs_step(&mut w, beta.beta(), &mut lp, &mut rng);
            for (i, c) in counts.iter_mut().enumerate() {
                c[w.state().get(i)] += 1;
            }
            same01 += (w.state().get(0) == w.state().get(1)) as u64;
        }
        for i in 0..3 {
            assert!((counts[i][1] as f64 / steps as f64 - exact[i][1]).abs() < 0.005);
        }
        let exact_same = crate::oracle::exact_expectation(&model, beta, |x| (x.get(0) == x.get(1)) as u8 as f64).unwrap();
        assert!((same01 as f64 / steps as f64 - exact_same).abs() < 0.005);
    }

    #[test]
    fn geometric_edge_cases_and_moments() {
        let mut rng = SeedTree::new(6).rng();
        assert!(sample_geometric(0.0, &mut rng).is_err());
        assert!(sample_geometric(-0.1, &mut rng).is_err());
        assert!(sample_geometric(f64::NAN, &mut rng).is_err());
        for _ in 0..100 {
            assert_eq!(sample_geometric(1.0, &mut rng).unwrap(), 1);
        }
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_geometric(0.5, &mut rng).unwrap() as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.01);
        let tail = (0..n).filter(|_| sample_geometric(0.01, &mut rng).unwrap() > 100).count() as f64 / n as f64;
        assert!((tail - 0.99f64.powi(100)).abs() < 0.01);
        assert!(sample_geometric(1e-300, &mut rng).unwrap() > 1);
    }

    #[test]
    fn nfw_zero_flips() {
        let model = build_ising_dense(4, 1).unwrap();
        let x0 = SpinState::constant(4, 1);
        let traj = nfw_run(&model, t(1.0), x0.clone(), 0, &mut SeedTree::new(1).rng()).unwrap();
        assert_eq!(traj.times, vec![0]);
        assert!(traj.flips.is_empty());
        assert_eq!(traj.final_state(), x0);
        assert_eq!(expand_trajectory(&traj, 100).count(), 0);
    }

    #[test]
    fn nfw_trajectory_invariants() {
        let model = build_ising_dense(10, 2).unwrap();
        let mut rng = SeedTree::new(2).rng();
        let x0 = SpinState::uniform(&model, &mut rng);
        let traj = nfw_run(&model, t(2.0), x0, 500, &mut rng).unwrap();
        assert_eq!(traj.status, RunStatus::Completed);
        assert_eq!(traj.flips.len(), 500);
        assert_eq!(traj.times[0], 0);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        let mut x = traj.initial.clone();
        for f in &traj.flips {
            let before = x.clone();
            x.set(f.variable, f.value as usize);
            assert_eq!(before.hamming(&x), 1);
            assert!((model.energy(&x).unwrap() - f.energy).abs() < 1e-9);
        }
        let expanded: Vec<_> = expand_trajectory(&traj, u64::MAX).collect();
        assert_eq!(expanded.len() as u64, traj.effective_length());
        let mut runs = 0u64;
        expand_trajectory(&traj, u64::MAX).for_each_run(|_, k| runs += k);
        assert_eq!(runs, traj.effective_length());

        let mut lines = Vec::new();
        traj.write_json_lines(&model, &mut lines).unwrap();
        let text = String::from_utf8(lines).unwrap();
        assert_eq!(text.lines().count(), 500);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["n"], 1);
        assert!(first["new_value"] == 1 || first["new_value"] == -1);
    }

    fn hand_trajectory(times: Vec<u64>) -> NfwTrajectory {
        let flips = (0..times.len() - 1)
            .map(|k| FlipEvent {
                variable: k % 2,
                value: 1,
                tau: times[k + 1] - times[k],
                energy: 0.0,
            })
            .collect();
        NfwTrajectory {
            initial: SpinState::constant(2, 0),
            initial_energy: 0.0,
            flips,
            times,
            status: RunStatus::Completed,
        }
    }

    #[test]
    fn expansion_replicates_states() {
        let traj = hand_trajectory(vec![0, 3, 5]);
        let x0 = SpinState::from_indices(vec![0, 0]);
        let x1 = SpinState::from_indices(vec![1, 0]);
        let seq: Vec<_> = expand_trajectory(&traj, 100).collect();
        assert_eq!(seq, vec![x0.clone(), x0.clone(), x0.clone(), x1.clone(), x1.clone()]);
        let seq: Vec<_> = expand_trajectory(&traj, 4).collect();
        assert_eq!(seq.len(), 4);
        let unit = hand_trajectory(vec![0, 1, 2]);
        let seq: Vec<_> = expand_trajectory(&unit, 100).collect();
        assert_eq!(seq, vec![x0, x1]);
    }

    #[test]
    fn absorbing_state_is_reported() {
        // Two strongly aligned spins at huge beta: p_flip ~ exp(-2 * 1e4).
        let model = PairwiseModel::ising(2, 1.0, [(0, 1, 10.0)]).unwrap();
        let traj = nfw_run(&model, t(1000.0), SpinState::constant(2, 1), 5, &mut SeedTree::new(1).rng()).unwrap();
        assert_eq!(traj.status, RunStatus::Absorbing);
        assert!(traj.flips.is_empty());
    }

    #[test]
    fn eda_validates_schedule() {
        let model = build_ising_dense(5, 1).unwrap();
        let x0 = SpinState::constant(5, 0);
        let mut rng = SeedTree::new(1).rng();
        let short = Schedule::Constant { beta: 1.0, steps: 3 };
        assert!(eda_run(&model, &short, x0.clone(), 4, false, &mut rng).is_err());
        let neg = Schedule::Explicit { betas: vec![1.0, -1.0] };
        assert!(eda_run(&model, &neg, x0.clone(), 2, false, &mut rng).is_err());
        let ok = Schedule::Linear { start: 0.001, end: 20.0, steps: 100 };
        assert_eq!(ok.beta_at(1), 0.001);
        assert_eq!(ok.beta_at(100), 20.0);
        let out = eda_run(&model, &ok, x0, 100, true, &mut rng).unwrap();
        assert_eq!(out.trace.as_ref().unwrap().len(), 100);
        assert!((model.energy(&out.state).unwrap() - out.energy).abs() < 1e-9);
    }

    #[test]
    fn eda_at_zero_temperature_randomises_sites() {
        let model = build_ising_dense(5, 9).unwrap();
        let sched = Schedule::Constant { beta: 0.0, steps: 200 };
        let runs = 20_000;
        let mut ones = [0usize; 5];
        for r in 0..runs {
            let mut rng = SeedTree::new(10).child(r).rng();
            let out = eda_run(&model, &sched, SpinState::constant(5, 0), 200, false, &mut rng).unwrap();
            for (i, o) in ones.iter_mut().enumerate() {
                *o += out.state.get(i);
            }
        }
        for o in ones {
            assert!((o as f64 / runs as f64 - 0.5).abs() < 0.015);
        }
    }

    #[test]
    fn eda_constant_schedule_matches_nfw_flip_law() {
        // Distribution of the first three flipped sites, NFW vs constant EDA.
        let model = build_ising_dense(4, 23).unwrap();
        let beta = 1.0;
        let x0 = SpinState::from_indices(vec![0, 1, 1, 0]);
        let sched = Schedule::Constant { beta, steps: 3 };
        let runs = 60_000u64;
        let mut a = std::collections::HashMap::new();
        let mut b = std::collections::HashMap::new();
        for r in 0..runs {
            let mut rng = SeedTree::new(1).child(r).rng();
            let traj = nfw_run(&model, t(beta), x0.clone(), 3, &mut rng).unwrap();
            let key: Vec<usize> = traj.flips.iter().map(|f| f.variable).collect();
            *a.entry(key).or_insert(0u64) += 1;
            let mut rng = SeedTree::new(2).child(r).rng();
            let out = eda_run(&model, &sched, x0.clone(), 3, true, &mut rng).unwrap();
            let key: Vec<usize> = out.trace.unwrap().iter().map(|f| f.variable).collect();
            *b.entry(key).or_insert(0u64) += 1;
        }
        for (key, &ca) in &a {
            let pa = ca as f64 / runs as f64;
            let pb = *b.get(key).unwrap_or(&0) as f64 / runs as f64;
            let se = (pa * (1.0 - pa) / runs as f64).sqrt() * 2f64.sqrt();
            assert!((pa - pb).abs() < 5.0 * se + 1e-4, "{key:?}: {pa} vs {pb}");
        }
    }
}
