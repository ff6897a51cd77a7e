//! Brute-force ground truth for small models.
//!
//! States are visited in reflected `q`-ary Gray order so consecutive states
//! differ in one variable and energies update in `O(degree)`. The state space
//! is split on the high-order variables into independent chunks that are
//! enumerated in parallel and merged in a fixed order, so results do not
//! depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PairwiseModel, SpinState, Temperature, Walker};
use crate::numeric::{CompensatedSum, LogSumExp, LogWeightedMean};

pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1 << 26;

/// Target number of chunks when splitting on high-order variables.
const MAX_CHUNKS: usize = 64;
/// Below this many states everything runs as one chunk.
const SPLIT_THRESHOLD: f64 = 4096.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLevel {
    pub energy: f64,
    pub mass: f64,
}

/// Energy distribution in two views: distinct levels with their masses, and
/// equal-width bins over `[min E, max E]`. Levels whose mass falls below the
/// configured floor are lumped into `residual_mass` instead of being listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyHistogram {
    pub levels: Vec<EnergyLevel>,
    pub residual_mass: f64,
    pub bin_edges: Vec<f64>,
    pub bin_masses: Vec<f64>,
}

impl EnergyHistogram {
    pub fn total_mass(&self) -> f64 {
        let s: CompensatedSum = self
            .levels
            .iter()
            .map(|l| l.mass)
            .chain(std::iter::once(self.residual_mass))
            .collect();
        s.value()
    }

    /// Bins weighted energies onto this histogram's edges. Energies outside
    /// the range are clamped into the end bins.
    pub fn bin_weighted(&self, weighted: &[(f64, f64)]) -> Vec<f64> {
        bin_onto(&self.bin_edges, weighted)
    }

    /// Total-variation distance between this distribution's levels and an
    /// approximate distribution over energy levels. The lumped residual mass
    /// is counted in full, which makes this an upper bound when it is nonzero.
    pub fn total_variation_levels(&self, approx: &[EnergyLevel], tolerance: f64) -> f64 {
        total_variation(&self.levels, approx, tolerance) + 0.5 * self.residual_mass
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistributionOptions {
    pub bins: usize,
    /// Levels with mass below this are lumped into the residual.
    pub mass_floor: f64,
    /// Energies closer than `tolerance * max(1, |E|)` form one level.
    pub level_tolerance: f64,
}

impl Default for DistributionOptions {
    fn default() -> Self {
        DistributionOptions {
            bins: 100,
            mass_floor: 1e-18,
            level_tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Enumerator {
    pub budget: u64,
}

impl Default for Enumerator {
    fn default() -> Self {
        Enumerator {
            budget: DEFAULT_ENUMERATION_BUDGET,
        }
    }
}

impl Enumerator {
    pub fn with_budget(budget: u64) -> Self {
        Enumerator { budget }
    }

    fn check_budget(&self, model: &PairwiseModel) -> Result<()> {
        let states = (model.domain_size() as f64).powi(model.num_variables() as i32);
        if states > self.budget as f64 {
            return Err(Error::BudgetExceeded {
                states,
                budget: self.budget,
            });
        }
        Ok(())
    }

    /// Folds `visit(acc, state, energy)` over every state of the model.
    /// Chunk accumulators are combined left to right with `merge`.
    pub fn fold<A, I, V, G>(&self, model: &PairwiseModel, init: I, visit: V, merge: G) -> Result<A>
    where
        A: Send,
        I: Fn() -> A + Sync,
        V: Fn(&mut A, &SpinState, f64) + Sync,
        G: Fn(A, A) -> A,
    {
        self.check_budget(model)?;
        let m = model.num_variables();
        let q = model.domain_size();
        let total = (q as f64).powi(m as i32);

        let mut fixed = 0;
        if total >= SPLIT_THRESHOLD {
            while fixed + 1 < m && q.pow(fixed as u32 + 1) <= MAX_CHUNKS {
                fixed += 1;
            }
        }
        let free = m - fixed;
        let chunks = q.pow(fixed as u32);

        let parts: Vec<Result<A>> = (0..chunks)
            .into_par_iter()
            .map(|prefix| {
                let mut digits = vec![0u8; m];
                let mut p = prefix;
                for d in digits[free..].iter_mut() {
                    *d = (p % q) as u8;
                    p /= q;
                }
                let mut walker = Walker::new(model, SpinState::from_indices(digits))?;
                let mut acc = init();
                visit(&mut acc, walker.state(), walker.energy());
                gray_walk(&mut walker, free, q, |w| visit(&mut acc, w.state(), w.energy()));
                Ok(acc)
            })
            .collect();
        let mut iter = parts.into_iter();
        let first = iter.next().expect("at least one chunk")?;
        iter.try_fold(first, |acc, part| Ok(merge(acc, part?)))
    }

    pub fn log_partition(&self, model: &PairwiseModel, beta: Temperature) -> Result<f64> {
        Ok(self.log_partitions(model, &[beta])?[0])
    }

    /// `log Z(beta)` for several temperatures in one pass.
    pub fn log_partitions(&self, model: &PairwiseModel, betas: &[Temperature]) -> Result<Vec<f64>> {
        let accs = self.fold(
            model,
            || vec![LogSumExp::new(); betas.len()],
            |acc, _, e| {
                for (a, b) in acc.iter_mut().zip(betas) {
                    a.add(-b.beta() * e);
                }
            },
            |a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect(),
        )?;
        Ok(accs.iter().map(LogSumExp::value).collect())
    }

    /// `E_pi[h(X)]` by enumeration.
    pub fn expectation<H>(&self, model: &PairwiseModel, beta: Temperature, h: H) -> Result<f64>
    where
        H: Fn(&SpinState) -> f64 + Sync,
    {
        let acc = self.fold(
            model,
            LogWeightedMean::default,
            |acc, x, e| acc.add(-beta.beta() * e, h(x)),
            LogWeightedMean::merge,
        )?;
        Ok(acc.mean())
    }

    /// `E_pi[E(X)]` by enumeration.
    pub fn mean_energy(&self, model: &PairwiseModel, beta: Temperature) -> Result<f64> {
        let acc = self.fold(
            model,
            LogWeightedMean::default,
            |acc, _, e| acc.add(-beta.beta() * e, e),
            LogWeightedMean::merge,
        )?;
        Ok(acc.mean())
    }

    /// Single-site marginals `P(x_i = v)`, indexed `[i][v]`.
    pub fn marginals(&self, model: &PairwiseModel, beta: Temperature) -> Result<Vec<Vec<f64>>> {
        let m = model.num_variables();
        let q = model.domain_size();
        let (parts, total) = self.fold(
            model,
            || (vec![LogSumExp::new(); m * q], LogSumExp::new()),
            |(acc, tot), x, e| {
                let lw = -beta.beta() * e;
                tot.add(lw);
                for i in 0..m {
                    acc[i * q + x.get(i)].add(lw);
                }
            },
            |(a, ta), (b, tb)| (a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect(), ta.merge(tb)),
        )?;
        let lz = total.value();
        Ok((0..m)
            .map(|i| (0..q).map(|v| (parts[i * q + v].value() - lz).exp()).collect())
            .collect())
    }

    /// Smallest and largest energy over the state space.
    pub fn energy_range(&self, model: &PairwiseModel) -> Result<(f64, f64)> {
        self.fold(
            model,
            || (f64::INFINITY, f64::NEG_INFINITY),
            |acc, _, e| {
                acc.0 = acc.0.min(e);
                acc.1 = acc.1.max(e);
            },
            |a, b| (a.0.min(b.0), a.1.max(b.1)),
        )
    }

    pub fn energy_distribution(
        &self,
        model: &PairwiseModel,
        beta: Temperature,
        options: DistributionOptions,
    ) -> Result<EnergyHistogram> {
        if options.bins == 0 {
            return Err(Error::param("histogram needs at least one bin"));
        }
        let b = beta.beta();
        let (lz, min_e, max_e) = self.fold(
            model,
            || (LogSumExp::new(), f64::INFINITY, f64::NEG_INFINITY),
            |acc, _, e| {
                acc.0.add(-b * e);
                acc.1 = acc.1.min(e);
                acc.2 = acc.2.max(e);
            },
            |x, y| (x.0.merge(y.0), x.1.min(y.1), x.2.max(y.2)),
        )?;
        let lz = lz.value();
        let edges = bin_edges(min_e, max_e, options.bins);
        let bins = options.bins;

        struct Acc {
            kept: Vec<(f64, f64)>,
            residual: CompensatedSum,
            bins: Vec<CompensatedSum>,
        }
        let acc = self.fold(
            model,
            || Acc {
                kept: Vec::new(),
                residual: CompensatedSum::new(),
                bins: vec![CompensatedSum::new(); bins],
            },
            |acc, _, e| {
                let mass = (-b * e - lz).exp();
                acc.bins[bin_index(&edges, e)].add(mass);
                if mass >= options.mass_floor {
                    acc.kept.push((e, mass));
                } else {
                    acc.residual.add(mass);
                }
            },
            |mut x, y| {
                x.kept.extend(y.kept);
                x.residual.add(y.residual.value());
                for (a, c) in x.bins.iter_mut().zip(&y.bins) {
                    a.add(c.value());
                }
                x
            },
        )?;
        Ok(EnergyHistogram {
            levels: merge_levels(acc.kept, options.level_tolerance),
            residual_mass: acc.residual.value(),
            bin_edges: edges,
            bin_masses: acc.bins.iter().map(CompensatedSum::value).collect(),
        })
    }
}

/// Steps a walker through all `q^free` settings of variables `0..free`
/// (reflected Gray order), calling `f` after every step. The starting
/// setting is not reported.
fn gray_walk(walker: &mut Walker<'_>, free: usize, q: usize, mut f: impl FnMut(&Walker<'_>)) {
    if free == 0 {
        return;
    }
    let mut dirs = vec![1i64; free];
    let total = q.pow(free as u32);
    for s in 1..total {
        let mut j = 0;
        let mut r = s;
        while r % q == 0 {
            r /= q;
            j += 1;
        }
        let cur = walker.state().get(j) as i64;
        let next = cur + dirs[j];
        walker.flip(j, next as usize);
        if next == 0 || next == q as i64 - 1 {
            dirs[j] = -dirs[j];
        }
        f(walker);
    }
}

fn bin_edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
    let width = if max > min { (max - min) / bins as f64 } else { 1.0 };
    (0..=bins).map(|k| min + width * k as f64).collect()
}

fn bin_index(edges: &[f64], e: f64) -> usize {
    let bins = edges.len() - 1;
    let width = edges[1] - edges[0];
    let k = ((e - edges[0]) / width).floor();
    if k.is_nan() || k < 0.0 {
        0
    } else {
        (k as usize).min(bins - 1)
    }
}

fn bin_onto(edges: &[f64], weighted: &[(f64, f64)]) -> Vec<f64> {
    let mut out = vec![CompensatedSum::new(); edges.len() - 1];
    for &(e, w) in weighted {
        out[bin_index(edges, e)].add(w);
    }
    out.iter().map(CompensatedSum::value).collect()
}

/// Sorts `(energy, mass)` pairs and merges energies within tolerance into
/// single levels.
pub fn merge_levels(mut pairs: Vec<(f64, f64)>, tolerance: f64) -> Vec<EnergyLevel> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut levels: Vec<EnergyLevel> = Vec::new();
    let mut mass = CompensatedSum::new();
    for (e, w) in pairs {
        match levels.last_mut() {
            Some(last) if (e - last.energy).abs() <= tolerance * last.energy.abs().max(1.0) => {
                mass.add(w);
                last.mass = mass.value();
            }
            _ => {
                mass = CompensatedSum::new();
                mass.add(w);
                levels.push(EnergyLevel { energy: e, mass: w });
            }
        }
    }
    levels
}

/// `0.5 * sum |p - q|` over the union of two sorted level lists, matching
/// levels whose energies agree within tolerance.
pub fn total_variation(a: &[EnergyLevel], b: &[EnergyLevel], tolerance: f64) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut acc = CompensatedSum::new();
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => {
                let tol = tolerance * x.energy.abs().max(1.0);
                if (x.energy - y.energy).abs() <= tol {
                    acc.add((x.mass - y.mass).abs());
                    i += 1;
                    j += 1;
                } else if x.energy < y.energy {
                    acc.add(x.mass);
                    i += 1;
                } else {
                    acc.add(y.mass);
                    j += 1;
                }
            }
            (Some(x), None) => {
                acc.add(x.mass);
                i += 1;
            }
            (None, Some(y)) => {
                acc.add(y.mass);
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    0.5 * acc.value()
}

/// Total-variation distance between two binned distributions on the same
/// edges.
pub fn total_variation_bins(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn exact_log_partition(model: &PairwiseModel, beta: Temperature) -> Result<f64> {
    Enumerator::default().log_partition(model, beta)
}

pub fn exact_expectation<H>(model: &PairwiseModel, beta: Temperature, h: H) -> Result<f64>
where
    H: Fn(&SpinState) -> f64 + Sync,
{
    Enumerator::default().expectation(model, beta, h)
}

pub fn exact_mean_energy(model: &PairwiseModel, beta: Temperature) -> Result<f64> {
    Enumerator::default().mean_energy(model, beta)
}

pub fn exact_energy_distribution(model: &PairwiseModel, beta: Temperature) -> Result<EnergyHistogram> {
    Enumerator::default().energy_distribution(model, beta, DistributionOptions::default())
}

pub fn exact_marginals(model: &PairwiseModel, beta: Temperature) -> Result<Vec<Vec<f64>>> {
    Enumerator::default().marginals(model, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ising_dense, PairPotential};
    use std::collections::HashSet;

    fn t(b: f64) -> Temperature {
        Temperature::new(b).unwrap()
    }

    /// Independent route: decode every index as a base-q number and
    /// evaluate the energy from scratch.
    fn naive_log_z(model: &PairwiseModel, beta: f64) -> f64 {
        let m = model.num_variables();
        let q = model.domain_size();
        let mut terms = Vec::new();
        for code in 0..q.pow(m as u32) {
            let mut c = code;
            let x = SpinState::from_indices(
                (0..m)
                    .map(|_| {
                        let d = (c % q) as u8;
                        c /= q;
                        d
                    })
                    .collect(),
            );
            terms.push(-beta * model.energy(&x).unwrap());
        }
        crate::numeric::log_sum_exp(&terms)
    }

    #[test]
    fn gray_walk_visits_every_state_once() {
        for (m, q) in [(1usize, 2usize), (3, 2), (2, 3), (3, 4), (13, 2)] {
            let domain = (0..q as i32).collect();
            let model = PairwiseModel::new(m, domain, 1.0, [], PairPotential::SpinProduct).unwrap();
            let seen = Enumerator::default()
                .fold(
                    &model,
                    HashSet::new,
                    |acc, x, _| {
                        assert!(acc.insert(x.clone()), "revisited {x:?}");
                    },
                    |mut a, b| {
                        for x in b {
                            assert!(a.insert(x));
                        }
                        a
                    },
                )
                .unwrap();
            assert_eq!(seen.len(), q.pow(m as u32));
        }
    }

    #[test]
    fn free_spins_give_m_log_2() {
        for m in [5, 15] {
            let model = PairwiseModel::ising(m, 1.0, []).unwrap();
            for beta in [0.0, 1.0, 20.0] {
                let lz = exact_log_partition(&model, t(beta)).unwrap();
                assert!((lz - m as f64 * 2f64.ln()).abs() < 1e-9);
            }
        }
        let dense = build_ising_dense(12, 3).unwrap();
        let lz = exact_log_partition(&dense, t(0.0)).unwrap();
        assert!((lz - 12.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn two_spin_log_partition() {
        let model = PairwiseModel::ising(2, 1.0 / 2f64.sqrt(), [(0, 1, 1.0)]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let expected = (2.0 * s.exp() + 2.0 * (-s).exp()).ln();
        let lz = exact_log_partition(&model, t(1.0)).unwrap();
        assert!((lz - expected).abs() < 1e-12);
        assert!((lz - 1.61786).abs() < 1e-4);
    }

    #[test]
    fn gray_enumeration_matches_naive_route() {
        let model = build_ising_dense(14, 21).unwrap();
        for beta in [0.5, 5.0, 20.0] {
            let a = exact_log_partition(&model, t(beta)).unwrap();
            let b = naive_log_z(&model, beta);
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        let domain = vec![-1, 0, 1];
        let mut rng = crate::rng::SeedTree::new(5).rng();
        let edges: Vec<_> = (0..6)
            .flat_map(|i| (i + 1..6).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)))
            .collect();
        let q3 = PairwiseModel::new(6, domain, 0.5, edges, PairPotential::SpinProduct).unwrap();
        let a = exact_log_partition(&q3, t(2.0)).unwrap();
        assert!((a - naive_log_z(&q3, 2.0)).abs() < 1e-10);
    }

    #[test]
    fn budget_is_enforced() {
        let model = build_ising_dense(12, 1).unwrap();
        let err = Enumerator::with_budget(1000).log_partition(&model, t(1.0));
        assert!(matches!(err, Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn expectation_identities() {
        let model = build_ising_dense(8, 4).unwrap();
        let one = exact_expectation(&model, t(3.0), |_| 1.0).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let c = exact_expectation(&model, t(3.0), |_| -2.5).unwrap();
        assert!((c + 2.5).abs() < 1e-12);
        let free = PairwiseModel::ising(6, 1.0, []).unwrap();
        let mean = exact_expectation(&free, t(2.0), |x| free.domain()[x.get(0)] as f64).unwrap();
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn mean_energy_is_minus_dlogz_dbeta() {
        let model = build_ising_dense(12, 8).unwrap();
        let beta = 2.0;
        let h = 1e-4;
        let mean_e = exact_expectation(&model, t(beta), |x| model.energy(x).unwrap()).unwrap();
        let lz = Enumerator::default()
            .log_partitions(&model, &[t(beta + h), t(beta - h)])
            .unwrap();
        let fd = -(lz[0] - lz[1]) / (2.0 * h);
        assert!((mean_e - fd).abs() < 1e-5, "{mean_e} vs {fd}");
    }

    #[test]
    fn log_partition_bounds() {
        let model = build_ising_dense(10, 12).unwrap();
        let (min_e, _) = Enumerator::default().energy_range(&model).unwrap();
        for beta in [0.0, 0.3, 1.0, 4.0, 20.0] {
            let lz = exact_log_partition(&model, t(beta)).unwrap();
            assert!(-beta * min_e <= lz + 1e-12);
            assert!(lz <= 10.0 * 2f64.ln() - beta * min_e + 1e-12);
        }
    }

    #[test]
    fn energy_distribution_small_cases() {
        let single = PairwiseModel::ising(1, 1.0, []).unwrap();
        let h = exact_energy_distribution(&single, t(3.0)).unwrap();
        assert_eq!(h.levels.len(), 1);
        assert_eq!(h.levels[0].energy, 0.0);
        assert!((h.levels[0].mass - 1.0).abs() < 1e-15);

        let pair = PairwiseModel::ising(2, 1.0 / 2f64.sqrt(), [(0, 1, 1.0)]).unwrap();
        let h = exact_energy_distribution(&pair, t(0.0)).unwrap();
        assert_eq!(h.levels.len(), 2);
        assert!((h.levels[0].energy + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((h.levels[0].mass - 0.5).abs() < 1e-15);
        assert!((h.levels[1].mass - 0.5).abs() < 1e-15);
        assert!((h.total_mass() - 1.0).abs() < 1e-12);
        assert!((h.bin_masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_distribution_normalised_and_degenerate_at_beta_zero() {
        let model = build_ising_dense(12, 5).unwrap();
        let h = exact_energy_distribution(&model, t(4.0)).unwrap();
        assert!((h.total_mass() - 1.0).abs() < 1e-12);
        assert!(h.levels.iter().all(|l| l.mass >= 0.0));
        // Zero field: every level is a mirror pair, so masses at beta = 0
        // are multiples of 2 / 2^M.
        let h0 = exact_energy_distribution(&model, t(0.0)).unwrap();
        let unit = 2.0 / 4096.0;
        for l in &h0.levels {
            let k = l.mass / unit;
            assert!((k - k.round()).abs() < 1e-9 && k.round() >= 1.0);
        }
        assert_eq!(h0.residual_mass, 0.0);
        assert!(h0.total_variation_levels(&h0.levels, 1e-9) < 1e-15);
    }

    #[test]
    fn marginals_sum_to_one() {
        let model = build_ising_dense(5, 2).unwrap();
        let m = exact_marginals(&model, t(1.0)).unwrap();
        for row in &m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Zero field: each spin is unbiased.
            assert!((row[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn total_variation_basics() {
        let a = vec![EnergyLevel { energy: -1.0, mass: 0.5 }, EnergyLevel { energy: 1.0, mass: 0.5 }];
        let b = vec![EnergyLevel { energy: -1.0, mass: 1.0 }];
        assert!((total_variation(&a, &b, 1e-9) - 0.5).abs() < 1e-15);
        assert_eq!(total_variation(&a, &a, 1e-9), 0.0);
        let merged = merge_levels(vec![(1.0, 0.25), (-1.0, 0.5), (1.0 + 1e-12, 0.25)], 1e-9);
        assert_eq!(merged.len(), 2);
        assert!((merged[1].mass - 0.5).abs() < 1e-15);
    }
}
