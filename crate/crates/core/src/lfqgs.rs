//! Large-flip quasi-Gibbs sampling.
//!
//! The flip sequence is cut into consecutive large-flip (LF) moves whose
//! sizes are drawn uniformly from `[gamma_min, gamma_max]` at each move
//! onset. Within a move every flip is drawn from the change-conditional of
//! the current state, except that `(variable, value)` pairs recorded in the
//! move's tabu set carry zero mass. The tabu set is cleared when the next
//! move starts. The process is neither Markov nor stationary; its visited
//! states are only used as raw material for the importance sampler in
//! [`crate::lfis`].
//!
//! A run is stored as its initial state plus the ordered `(variable, value)`
//! pairs of each move, which is enough to replay every visited state.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PairwiseModel, SpinState, Temperature, Walker};
use crate::nfw::{build_flip_distribution, EventScratch, FlipDistribution};
use crate::rng::splitmix64;

/// Which pair a flip `(i: a -> b)` adds to the tabu set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TabuRule {
    /// Forbid `(i, b)`: no pair may be assumed twice within a move. For
    /// binary variables this still lets `i` flip straight back once.
    MaskedAssumed,
    /// Forbid `(i, a)`: a changed variable may not return to a value it
    /// left during the current move.
    #[default]
    MaskedPrevious,
}

/// Forbidden `(variable, value)` pairs of the current LF move.
#[derive(Clone, Debug)]
pub struct TabuSet {
    domain_size: usize,
    mask: Vec<bool>,
    members: Vec<(usize, u8)>,
}

impl TabuSet {
    pub fn new(num_variables: usize, domain_size: usize) -> Self {
        TabuSet {
            domain_size,
            mask: vec![false; num_variables * domain_size],
            members: Vec::new(),
        }
    }

    pub fn for_model(model: &PairwiseModel) -> Self {
        Self::new(model.num_variables(), model.domain_size())
    }

    /// Returns false if the pair was already present.
    pub fn insert(&mut self, i: usize, v: usize) -> bool {
        let slot = &mut self.mask[i * self.domain_size + v];
        if *slot {
            return false;
        }
        *slot = true;
        self.members.push((i, v as u8));
        true
    }

    #[inline]
    pub fn contains(&self, i: usize, v: usize) -> bool {
        self.mask[i * self.domain_size + v]
    }

    /// `O(len)`.
    pub fn clear(&mut self) {
        for &(i, v) in &self.members {
            self.mask[i * self.domain_size + v as usize] = false;
        }
        self.members.clear();
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[(usize, u8)] {
        &self.members
    }

    pub(crate) fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// One LF move: its drawn size and the pairs actually taken. The last move
/// of a run may be shorter than `gamma`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfMoveRecord {
    pub gamma: usize,
    pub flips: Vec<(usize, u8)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LfqgsTrajectory {
    pub initial: SpinState,
    pub moves: Vec<LfMoveRecord>,
}

impl LfqgsTrajectory {
    pub fn flip_count(&self) -> usize {
        self.moves.iter().map(|m| m.flips.len()).sum()
    }

    /// Number of states in the sequence, the initial one included.
    pub fn sample_count(&self) -> usize {
        self.flip_count() + 1
    }

    /// Every visited state in flip order, starting with the initial one.
    pub fn states(&self) -> impl Iterator<Item = SpinState> + '_ {
        let mut x = self.initial.clone();
        std::iter::once(x.clone()).chain(self.moves.iter().flat_map(|m| m.flips.iter()).map(
            move |&(i, v)| {
                x.set(i, v as usize);
                x.clone()
            },
        ))
    }

    pub fn final_state(&self) -> SpinState {
        let mut x = self.initial.clone();
        for &(i, v) in self.moves.iter().flat_map(|m| m.flips.iter()) {
            x.set(i, v as usize);
        }
        x
    }

    /// `{"x0": [...], "moves": [{"gamma": g, "flips": [[i, value], ...]}, ...]}`
    /// with domain values (not indices).
    pub fn to_json(&self, model: &PairwiseModel) -> Result<String> {
        let d = model.domain();
        let file = TrajectoryFile {
            x0: self.initial.indices().iter().map(|&v| d[v as usize]).collect(),
            moves: self
                .moves
                .iter()
                .map(|m| MoveFile {
                    gamma: m.gamma,
                    flips: m.flips.iter().map(|&(i, v)| (i, d[v as usize])).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str, model: &PairwiseModel) -> Result<Self> {
        let file: TrajectoryFile = serde_json::from_str(s)?;
        let lookup = |value: i32| -> Result<u8> {
            model
                .domain()
                .iter()
                .position(|&d| d == value)
                .map(|p| p as u8)
                .ok_or_else(|| Error::Format(format!("value {value} is not in the domain")))
        };
        let initial = SpinState::from_indices(file.x0.iter().map(|&v| lookup(v)).collect::<Result<_>>()?);
        model.check_state(&initial)?;
        let moves = file
            .moves
            .into_iter()
            .map(|m| {
                let flips = m
                    .flips
                    .into_iter()
                    .map(|(i, v)| {
                        if i >= model.num_variables() {
                            return Err(Error::Format(format!("flip of unknown variable {i}")));
                        }
                        Ok((i, lookup(v)?))
                    })
                    .collect::<Result<_>>()?;
                Ok(LfMoveRecord { gamma: m.gamma, flips })
            })
            .collect::<Result<_>>()?;
        Ok(LfqgsTrajectory { initial, moves })
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    x0: Vec<i32>,
    moves: Vec<MoveFile>,
}

#[derive(Serialize, Deserialize)]
struct MoveFile {
    gamma: usize,
    flips: Vec<(usize, i32)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfqgsConfig {
    pub gamma_min: usize,
    pub gamma_max: usize,
    #[serde(default)]
    pub rule: TabuRule,
}

impl LfqgsConfig {
    /// `[floor(M/8), floor(M/6)]`, each clamped below at 1.
    pub fn default_for(num_variables: usize) -> Self {
        LfqgsConfig {
            gamma_min: (num_variables / 8).max(1),
            gamma_max: (num_variables / 6).max(1),
            rule: TabuRule::default(),
        }
    }

    fn validate(&self, model: &PairwiseModel) -> Result<()> {
        if self.gamma_min < 1 || self.gamma_min > self.gamma_max {
            return Err(Error::param(format!(
                "LF size interval [{}, {}] is empty or starts below 1",
                self.gamma_min, self.gamma_max
            )));
        }
        let candidates = (model.domain_size() - 1) * model.num_variables();
        if self.gamma_max > candidates {
            return Err(Error::param(format!(
                "gamma_max = {} exceeds the {candidates} flip candidates",
                self.gamma_max
            )));
        }
        Ok(())
    }
}

/// Uniform integer in `[gamma_min, gamma_max]`.
pub fn sample_lf_size<R: Rng + ?Sized>(gamma_min: usize, gamma_max: usize, rng: &mut R) -> Result<usize> {
    if gamma_min < 1 || gamma_min > gamma_max {
        return Err(Error::param(format!(
            "LF size interval [{gamma_min}, {gamma_max}] is empty or starts below 1"
        )));
    }
    Ok(rng.random_range(gamma_min..=gamma_max))
}

/// The change-conditional with tabu pairs removed and the remainder
/// renormalised. `zeta`, `alpha` and `p_flip` are those of the unconstrained
/// Gibbs step.
pub fn tabu_flip_distribution(
    model: &PairwiseModel,
    beta: Temperature,
    state: &SpinState,
    tabu: &TabuSet,
) -> Result<FlipDistribution> {
    if tabu.mask().len() != model.num_variables() * model.domain_size() {
        return Err(Error::param("tabu set does not match the model shape"));
    }
    let walker = Walker::new(model, state.clone())?;
    let dist = build_flip_distribution(&walker, beta.beta(), Some(tabu.mask()));
    if dist.nu.iter().all(|&p| p == 0.0) {
        return Err(Error::ExhaustedNeighborhood {
            flips: 0,
            partial: Box::new(LfqgsTrajectory {
                initial: state.clone(),
                moves: Vec::new(),
            }),
        });
    }
    Ok(dist)
}

/// Runs the sampler for `samples` states (`samples - 1` flips).
pub fn lfqgs_run<R: Rng + ?Sized>(
    model: &PairwiseModel,
    beta: Temperature,
    x0: SpinState,
    samples: usize,
    config: LfqgsConfig,
    rng: &mut R,
) -> Result<LfqgsTrajectory> {
    lfqgs_run_observed(model, beta, x0, samples, config, rng, |_, _| {})
}

/// As [`lfqgs_run`], calling `visit(walker, n)` on the initial state
/// (`n = 0`) and after every flip `n`.
pub fn lfqgs_run_observed<R, F>(
    model: &PairwiseModel,
    beta: Temperature,
    x0: SpinState,
    samples: usize,
    config: LfqgsConfig,
    rng: &mut R,
    mut visit: F,
) -> Result<LfqgsTrajectory>
where
    R: Rng + ?Sized,
    F: FnMut(&Walker<'_>, usize),
{
    if samples < 1 {
        return Err(Error::param("an LFQGS run needs at least one sample"));
    }
    config.validate(model)?;
    let q = model.domain_size();
    let mut walker = Walker::new(model, x0)?;
    let mut traj = LfqgsTrajectory {
        initial: walker.state().clone(),
        moves: Vec::new(),
    };
    let mut tabu = TabuSet::for_model(model);
    let mut scratch = EventScratch::default();
    let total = samples - 1;
    let mut done = 0;
    visit(&walker, 0);
    while done < total {
        let gamma = sample_lf_size(config.gamma_min, config.gamma_max, rng)?;
        tabu.clear();
        let mut record = LfMoveRecord {
            gamma,
            flips: Vec::with_capacity(gamma.min(total - done)),
        };
        while record.flips.len() < gamma && done < total {
            let log_total = scratch.fill(&walker, beta.beta(), Some(tabu.mask()));
            if log_total == f64::NEG_INFINITY {
                traj.moves.push(record);
                return Err(Error::ExhaustedNeighborhood {
                    flips: done,
                    partial: Box::new(traj),
                });
            }
            let (i, v) = scratch.sample(q, rng);
            let previous = walker.state().get(i);
            walker.flip(i, v);
            match config.rule {
                TabuRule::MaskedAssumed => tabu.insert(i, v),
                TabuRule::MaskedPrevious => tabu.insert(i, previous),
            };
            record.flips.push((i, v as u8));
            done += 1;
            visit(&walker, done);
        }
        traj.moves.push(record);
    }
    Ok(traj)
}

/// Bit-packed copy of a state (`ceil(log2 q)` bits per variable).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PackedState {
    words: Vec<u64>,
}

fn bits_per_value(q: usize) -> usize {
    (usize::BITS - (q - 1).leading_zeros()) as usize
}

impl PackedState {
    pub fn pack(state: &SpinState, domain_size: usize) -> Self {
        let bits = bits_per_value(domain_size);
        let per_word = 64 / bits;
        let mut words = vec![0u64; state.len().div_ceil(per_word)];
        for (k, &v) in state.indices().iter().enumerate() {
            words[k / per_word] |= (v as u64) << ((k % per_word) * bits);
        }
        PackedState { words }
    }

    pub fn unpack(&self, num_variables: usize, domain_size: usize) -> SpinState {
        let bits = bits_per_value(domain_size);
        let per_word = 64 / bits;
        let mask = (1u64 << bits) - 1;
        SpinState::from_indices(
            (0..num_variables)
                .map(|k| ((self.words[k / per_word] >> ((k % per_word) * bits)) & mask) as u8)
                .collect(),
        )
    }

    /// 128-bit content digest.
    pub fn digest(&self) -> u128 {
        let mut a = 0x243f_6a88_85a3_08d3u64;
        let mut b = 0x1319_8a2e_0370_7344u64;
        for (k, &w) in self.words.iter().enumerate() {
            a = splitmix64(a ^ w);
            b = splitmix64(b ^ w.rotate_left(17) ^ (k as u64));
        }
        ((a as u128) << 64) | b as u128
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistinctState {
    pub packed: PackedState,
    pub energy: f64,
    /// Flip index of the first visit (0 for the initial state).
    pub first_visit: usize,
}

/// The distinct states of one sequence, keyed by a 128-bit digest with full
/// comparison on digest collisions.
#[derive(Clone, Debug)]
pub struct DistinctStateSet {
    num_variables: usize,
    domain_size: usize,
    members: Vec<DistinctState>,
    /// Digest to the first member with that digest; further members with the
    /// same digest are chained through `chain`.
    index: HashMap<u128, usize>,
    chain: Vec<Option<usize>>,
    visits: usize,
}

impl DistinctStateSet {
    pub fn new(num_variables: usize, domain_size: usize) -> Self {
        DistinctStateSet {
            num_variables,
            domain_size,
            members: Vec::new(),
            index: HashMap::new(),
            chain: Vec::new(),
            visits: 0,
        }
    }

    /// Records a visit. Returns true if the state was new.
    pub fn visit(&mut self, state: &SpinState, energy: f64, flip_index: usize) -> bool {
        self.visits += 1;
        let packed = PackedState::pack(state, self.domain_size);
        let digest = packed.digest();
        let mut slot = self.index.get(&digest).copied();
        let mut last = None;
        while let Some(k) = slot {
            if self.members[k].packed == packed {
                return false;
            }
            last = Some(k);
            slot = self.chain[k];
        }
        let id = self.members.len();
        self.members.push(DistinctState {
            packed,
            energy,
            first_visit: flip_index,
        });
        self.chain.push(None);
        match last {
            Some(k) => self.chain[k] = Some(id),
            None => {
                self.index.insert(digest, id);
            }
        }
        true
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Total number of visits recorded (revisits included).
    pub fn visits(&self) -> usize {
        self.visits
    }

    pub fn members(&self) -> &[DistinctState] {
        &self.members
    }

    pub fn state(&self, k: usize) -> SpinState {
        self.members[k]
            .packed
            .unpack(self.num_variables, self.domain_size)
    }

    pub fn energies(&self) -> impl Iterator<Item = f64> + '_ {
        self.members.iter().map(|m| m.energy)
    }
}

/// Replays a trajectory and collects its distinct states with energies.
pub fn distinct_states(model: &PairwiseModel, traj: &LfqgsTrajectory) -> Result<DistinctStateSet> {
    let mut set = DistinctStateSet::new(model.num_variables(), model.domain_size());
    let mut walker = Walker::new(model, traj.initial.clone())?;
    set.visit(walker.state(), walker.energy(), 0);
    let mut n = 0;
    for m in &traj.moves {
        for &(i, v) in &m.flips {
            if i >= model.num_variables() || v as usize >= model.domain_size() {
                return Err(Error::InvalidIndex {
                    index: i,
                    num_variables: model.num_variables(),
                });
            }
            walker.flip(i, v as usize);
            n += 1;
            set.visit(walker.state(), walker.energy(), n);
        }
    }
    Ok(set)
}

/// Runs LFQGS and collects the distinct states in the same pass.
pub fn lfqgs_collect<R: Rng + ?Sized>(
    model: &PairwiseModel,
    beta: Temperature,
    x0: SpinState,
    samples: usize,
    config: LfqgsConfig,
    rng: &mut R,
) -> Result<(LfqgsTrajectory, DistinctStateSet)> {
    let mut set = DistinctStateSet::new(model.num_variables(), model.domain_size());
    let traj = lfqgs_run_observed(model, beta, x0, samples, config, rng, |w, n| {
        set.visit(w.state(), w.energy(), n);
    })?;
    Ok((traj, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ising_dense, PairPotential};
    use crate::nfw::flip_distribution;
    use crate::rng::SeedTree;
    use std::collections::HashSet;

    fn t(b: f64) -> Temperature {
        Temperature::new(b).unwrap()
    }

    #[test]
    fn lf_sizes() {
        let mut rng = SeedTree::new(1).rng();
        assert_eq!(sample_lf_size(1, 1, &mut rng).unwrap(), 1);
        assert_eq!(sample_lf_size(3, 3, &mut rng).unwrap(), 3);
        assert!(sample_lf_size(0, 3, &mut rng).is_err());
        assert!(sample_lf_size(4, 3, &mut rng).is_err());
        let cfg = LfqgsConfig::default_for(1000);
        assert_eq!((cfg.gamma_min, cfg.gamma_max), (125, 166));
        let mut seen = HashSet::new();
        for _ in 0..5000 {
            let g = sample_lf_size(cfg.gamma_min, cfg.gamma_max, &mut rng).unwrap();
            assert!((125..=166).contains(&g));
            seen.insert(g);
        }
        assert_eq!(seen.len(), 42);
        assert_eq!(LfqgsConfig::default_for(5).gamma_min, 1);
        assert_eq!(LfqgsConfig::default_for(25).gamma_min, 3);
        assert_eq!(LfqgsConfig::default_for(25).gamma_max, 4);
    }

    #[test]
    fn empty_tabu_matches_plain_distribution() {
        let model = build_ising_dense(8, 3).unwrap();
        let mut rng = SeedTree::new(2).rng();
        let x = SpinState::uniform(&model, &mut rng);
        let tabu = TabuSet::for_model(&model);
        let a = tabu_flip_distribution(&model, t(2.0), &x, &tabu).unwrap();
        let b = flip_distribution(&model, t(2.0), &x).unwrap();
        for (p, q) in a.nu.iter().zip(&b.nu) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn single_survivor() {
        let model = PairwiseModel::ising(2, 1.0, [(0, 1, 0.3)]).unwrap();
        let x = SpinState::from_indices(vec![0, 1]);
        let mut tabu = TabuSet::for_model(&model);
        tabu.insert(0, 1);
        let d = tabu_flip_distribution(&model, t(1.0), &x, &tabu).unwrap();
        assert_eq!(d.nu(1, 0), 1.0);
        assert_eq!(d.nu(0, 1), 0.0);
        tabu.insert(1, 0);
        assert!(matches!(
            tabu_flip_distribution(&model, t(1.0), &x, &tabu),
            Err(Error::ExhaustedNeighborhood { .. })
        ));
    }

    #[test]
    fn masking_equals_renormalised_brute_force() {
        let model = build_ising_dense(6, 12).unwrap();
        let mut rng = SeedTree::new(5).rng();
        for _ in 0..50 {
            let x = SpinState::uniform(&model, &mut rng);
            let mut tabu = TabuSet::for_model(&model);
            while tabu.len() < 3 {
                let i = rng.random_range(0..6);
                tabu.insert(i, 1 - x.get(i));
            }
            let d = tabu_flip_distribution(&model, t(3.0), &x, &tabu).unwrap();
            let plain = flip_distribution(&model, t(3.0), &x).unwrap();
            let masked: Vec<f64> = (0..12)
                .map(|k| if tabu.contains(k / 2, k % 2) { 0.0 } else { plain.nu[k] })
                .collect();
            let z: f64 = masked.iter().sum();
            for (a, b) in d.nu.iter().zip(&masked) {
                assert!((a - b / z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn run_shapes_and_replay() {
        let model = build_ising_dense(25, 1).unwrap();
        let mut rng = SeedTree::new(3).rng();
        let x0 = SpinState::uniform(&model, &mut rng);
        let one = lfqgs_run(&model, t(5.0), x0.clone(), 1, LfqgsConfig::default_for(25), &mut rng).unwrap();
        assert!(one.moves.is_empty());
        assert_eq!(one.sample_count(), 1);
        assert!(lfqgs_run(&model, t(5.0), x0.clone(), 0, LfqgsConfig::default_for(25), &mut rng).is_err());

        let mut energies = Vec::new();
        let traj = lfqgs_run_observed(&model, t(5.0), x0.clone(), 1000, LfqgsConfig::default_for(25), &mut rng, |w, n| {
            assert_eq!(n, energies.len());
            energies.push(w.energy());
        })
        .unwrap();
        assert_eq!(traj.flip_count(), 999);
        assert!(traj.moves.iter().all(|m| (3..=4).contains(&m.gamma)));
        assert!(traj.moves[..traj.moves.len() - 1].iter().all(|m| m.flips.len() == m.gamma));
        for (x, e) in traj.states().zip(&energies) {
            assert!((model.energy(&x).unwrap() - e).abs() < 1e-9);
        }
        let json = traj.to_json(&model).unwrap();
        assert_eq!(LfqgsTrajectory::from_json(&json, &model).unwrap(), traj);
    }

    #[test]
    fn tabu_soundness_within_moves() {
        let model = build_ising_dense(25, 2).unwrap();
        for rule in [TabuRule::MaskedAssumed, TabuRule::MaskedPrevious] {
            let cfg = LfqgsConfig { gamma_min: 5, gamma_max: 25, rule };
            let mut rng = SeedTree::new(4).rng();
            let x0 = SpinState::uniform(&model, &mut rng);
            let traj = lfqgs_run(&model, t(5.0), x0, 3000, cfg, &mut rng).unwrap();
            let mut x = traj.initial.clone();
            for mv in &traj.moves {
                let mut seen = HashSet::new();
                let mut assumed = HashSet::new();
                for &(i, v) in &mv.flips {
                    assert!(seen.insert((i, v)), "duplicate pair in a move");
                    if rule == TabuRule::MaskedPrevious {
                        // A variable never returns to a value it left in this move.
                        assert!(!assumed.contains(&(i, v)));
                        assumed.insert((i, x.get(i) as u8));
                    } else {
                        // After (i, b), b is never re-assumed by i in this move.
                        assumed.insert((i, v));
                    }
                    x.set(i, v as usize);
                }
            }
        }
    }

    #[test]
    fn q_ary_exhaustion() {
        // One variable, three values, no couplings: under masked-previous
        // each flip forbids the value just left, so the third flip has no
        // candidate left.
        let model = PairwiseModel::new(1, vec![0, 1, 2], 1.0, [], PairPotential::SpinProduct).unwrap();
        let cfg = LfqgsConfig { gamma_min: 2, gamma_max: 2, rule: TabuRule::MaskedPrevious };
        let mut rng = SeedTree::new(1).rng();
        let ok = lfqgs_run(&model, t(1.0), SpinState::constant(1, 0), 3, cfg, &mut rng).unwrap();
        assert_eq!(ok.flip_count(), 2);
        // Under masked-assumed, a move of size 2 with both other values
        // taken leaves nothing; force it by allowing a size-2 move from a
        // state where one alternative is already tabu.
        let mut tabu = TabuSet::for_model(&model);
        tabu.insert(0, 1);
        tabu.insert(0, 2);
        let err = tabu_flip_distribution(&model, t(1.0), &SpinState::constant(1, 0), &tabu).unwrap_err();
        assert!(matches!(err, Error::ExhaustedNeighborhood { .. }));

        // Within the validated size bound a run never exhausts: under
        // masked-previous a full-size move flips every variable exactly q - 1
        // times.
        let two = PairwiseModel::new(2, vec![0, 1, 2], 1.0, [], PairPotential::SpinProduct).unwrap();
        let cfg = LfqgsConfig { gamma_min: 4, gamma_max: 4, rule: TabuRule::MaskedPrevious };
        for s in 0..50 {
            let mut rng = SeedTree::new(s).rng();
            let traj = lfqgs_run(&two, t(0.0), SpinState::constant(2, 0), 13, cfg, &mut rng).unwrap();
            for mv in &traj.moves {
                assert_eq!(mv.flips.iter().filter(|f| f.0 == 0).count(), 2);
                assert_eq!(mv.flips.iter().filter(|f| f.0 == 1).count(), 2);
            }
        }
        let too_big = LfqgsConfig { gamma_min: 5, gamma_max: 5, rule: TabuRule::MaskedPrevious };
        let mut rng = SeedTree::new(1).rng();
        assert!(lfqgs_run(&two, t(0.0), SpinState::constant(2, 0), 13, too_big, &mut rng).is_err());
    }

    #[test]
    fn unit_moves_start_from_the_plain_distribution() {
        // With gamma = 1 the tabu set is empty at every onset, so each flip
        // is drawn from the unconstrained change-conditional.
        let model = build_ising_dense(6, 7).unwrap();
        let cfg = LfqgsConfig { gamma_min: 1, gamma_max: 1, rule: TabuRule::MaskedAssumed };
        let mut rng = SeedTree::new(9).rng();
        let traj = lfqgs_run(&model, t(2.0), SpinState::constant(6, 0), 50, cfg, &mut rng).unwrap();
        assert!(traj.moves.iter().all(|m| m.flips.len() == 1 && m.gamma == 1));
    }

    #[test]
    fn distinct_state_collection() {
        let model = build_ising_dense(10, 5).unwrap();
        let mut rng = SeedTree::new(6).rng();
        let x0 = SpinState::uniform(&model, &mut rng);
        let (traj, collected) =
            lfqgs_collect(&model, t(3.0), x0, 400, LfqgsConfig::default_for(10), &mut rng).unwrap();
        let replayed = distinct_states(&model, &traj).unwrap();
        assert_eq!(collected.len(), replayed.len());
        assert_eq!(collected.visits(), 400);
        let naive: HashSet<SpinState> = traj.states().collect();
        assert_eq!(naive.len(), replayed.len());
        assert!(replayed.len() <= 400);
        for k in 0..replayed.len() {
            let x = replayed.state(k);
            assert!(naive.contains(&x));
            assert!((model.energy(&x).unwrap() - replayed.members()[k].energy).abs() < 1e-9);
            assert_eq!(collected.members()[k].packed, replayed.members()[k].packed);
        }
    }

    #[test]
    fn distinct_counts_for_hand_trajectories() {
        let model = PairwiseModel::ising(3, 1.0, [(0, 1, 1.0)]).unwrap();
        let walk = LfqgsTrajectory {
            initial: SpinState::constant(3, 0),
            moves: vec![LfMoveRecord { gamma: 3, flips: vec![(0, 1), (1, 1), (2, 1)] }],
        };
        assert_eq!(distinct_states(&model, &walk).unwrap().len(), 4);
        let back = LfqgsTrajectory {
            initial: SpinState::constant(3, 0),
            moves: vec![LfMoveRecord { gamma: 3, flips: vec![(0, 1), (0, 0), (2, 1)] }],
        };
        assert_eq!(distinct_states(&model, &back).unwrap().len(), 3);
    }

    #[test]
    fn packing_round_trips() {
        let mut rng = SeedTree::new(7).rng();
        for q in [2usize, 3, 4, 5, 16, 17, 255] {
            let domain: Vec<i32> = (0..q as i32).collect();
            let model = PairwiseModel::new(70, domain, 1.0, [], PairPotential::SpinProduct).unwrap();
            let x = SpinState::uniform(&model, &mut rng);
            let p = PackedState::pack(&x, q);
            assert_eq!(p.unpack(70, q), x);
        }
        let a = PackedState::pack(&SpinState::constant(64, 0), 2);
        let mut y = SpinState::constant(64, 0);
        y.set(63, 1);
        assert_ne!(a.digest(), PackedState::pack(&y, 2).digest());
    }
}
