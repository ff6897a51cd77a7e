//! Discrete pairwise Markov random fields.
//!
//! A model has `M` variables, each taking one of `q` domain values
//! `D_0 .. D_{q-1}`, and a symmetric set of pairwise couplings `J_ij`. The
//! energy of a state is
//!
//! ```text
//! E(x) = coupling_scale * sum_{i<j} J_ij * phi(x_i, x_j)
//! ```
//!
//! where `phi(a, b) = -D_a * D_b` for the spin-product interaction (the Ising
//! case with `D = {-1, +1}`), or `phi(a, b) = -table[a][b]` for a shared
//! symmetric table. States store value *indices* into the domain.
//!
//! Couplings are kept twice: as a canonical edge list (`i < j`, sorted) that
//! defines the energy summation order, and as either a dense matrix or an
//! adjacency list for the `O(degree)` neighbour walks used by the samplers.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::rng::SeedTree;

pub const MAX_DOMAIN_SIZE: usize = 256;

/// Stream index used by [`build_ising_dense`].
const DENSE_STREAM: u64 = 0x1d;
/// Stream index used by [`build_cube_lattice`].
const CUBE_STREAM: u64 = 0xc0be;

/// Inverse temperature `beta >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(beta: f64) -> Result<Self> {
        if beta.is_finite() && beta >= 0.0 {
            Ok(Temperature(beta))
        } else {
            Err(Error::param(format!(
                "inverse temperature must be finite and >= 0, got {beta}"
            )))
        }
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

/// An assignment of every variable, stored as indices into the model domain.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinState {
    values: Vec<u8>,
}

impl SpinState {
    pub fn from_indices(values: Vec<u8>) -> Self {
        SpinState { values }
    }

    /// All variables at domain index `value`.
    pub fn constant(num_variables: usize, value: u8) -> Self {
        SpinState {
            values: vec![value; num_variables],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(model: &PairwiseModel, rng: &mut R) -> Self {
        let q = model.domain_size();
        SpinState {
            values: (0..model.num_variables())
                .map(|_| rng.random_range(0..q) as u8)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.values[i] as usize
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: usize) {
        self.values[i] = value as u8;
    }

    pub fn indices(&self) -> &[u8] {
        &self.values
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming(&self, other: &SpinState) -> usize {
        self.values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// The per-edge interaction shape, scaled by each edge's `J_ij`.
#[derive(Clone, Debug, PartialEq)]
pub enum PairPotential {
    /// `phi(a, b) = -D_a * D_b`.
    SpinProduct,
    /// `phi(a, b) = -table[a * q + b]`; the table must be symmetric.
    Table(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub coupling: f64,
}

#[derive(Clone, Debug)]
enum Couplings {
    Dense(Vec<f64>),
    Sparse(Vec<Vec<(usize, f64)>>),
}

/// Where a model came from. Carried into model files and result records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<String>,
}

#[derive(Clone, Debug)]
pub struct PairwiseModel {
    num_variables: usize,
    domain: Vec<i32>,
    coupling_scale: f64,
    edges: Vec<Edge>,
    potential: PairPotential,
    /// `phi[a * q + b]`, unscaled.
    phi: Vec<f64>,
    couplings: Couplings,
    provenance: Provenance,
}

impl PairwiseModel {
    /// Builds a model from `(i, j, J_ij)` triples. Endpoints may be given in
    /// either order; self-loops and repeated pairs are rejected.
    pub fn new(
        num_variables: usize,
        domain: Vec<i32>,
        coupling_scale: f64,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
        potential: PairPotential,
    ) -> Result<Self> {
        if num_variables == 0 {
            return Err(Error::param("a model needs at least one variable"));
        }
        let q = domain.len();
        if !(2..=MAX_DOMAIN_SIZE).contains(&q) {
            return Err(Error::param(format!(
                "domain size must be in 2..={MAX_DOMAIN_SIZE}, got {q}"
            )));
        }
        if !(coupling_scale.is_finite() && coupling_scale > 0.0) {
            return Err(Error::param(format!(
                "coupling_scale must be finite and > 0, got {coupling_scale}"
            )));
        }
        let phi = match &potential {
            PairPotential::SpinProduct => {
                let mut phi = vec![0.0; q * q];
                for a in 0..q {
                    for b in 0..q {
                        phi[a * q + b] = -(domain[a] as f64) * (domain[b] as f64);
                    }
                }
                phi
            }
            PairPotential::Table(table) => {
                if table.len() != q * q {
                    return Err(Error::param(format!(
                        "pair table has {} entries, expected {}",
                        table.len(),
                        q * q
                    )));
                }
                for a in 0..q {
                    for b in 0..q {
                        let t = table[a * q + b];
                        if !t.is_finite() || t != table[b * q + a] {
                            return Err(Error::param("pair table must be finite and symmetric"));
                        }
                    }
                }
                table.iter().map(|t| -t).collect()
            }
        };

        let mut canonical = Vec::new();
        for (a, b, coupling) in edges {
            if a >= num_variables || b >= num_variables {
                return Err(Error::InvalidIndex {
                    index: a.max(b),
                    num_variables,
                });
            }
            if a == b {
                return Err(Error::param(format!("self-coupling on variable {a}")));
            }
            if !coupling.is_finite() {
                return Err(Error::param(format!("non-finite coupling on ({a}, {b})")));
            }
            canonical.push(Edge {
                i: a.min(b),
                j: a.max(b),
                coupling,
            });
        }
        canonical.sort_by_key(|e| (e.i, e.j));
        if canonical
            .windows(2)
            .any(|w| (w[0].i, w[0].j) == (w[1].i, w[1].j))
        {
            return Err(Error::param("duplicate edge"));
        }

        let pairs = num_variables * (num_variables - 1) / 2;
        let couplings = if pairs > 0 && 2 * canonical.len() >= pairs {
            let mut dense = vec![0.0; num_variables * num_variables];
            for e in &canonical {
                dense[e.i * num_variables + e.j] = e.coupling;
                dense[e.j * num_variables + e.i] = e.coupling;
            }
            Couplings::Dense(dense)
        } else {
            let mut adj = vec![Vec::new(); num_variables];
            for e in &canonical {
                adj[e.i].push((e.j, e.coupling));
                adj[e.j].push((e.i, e.coupling));
            }
            Couplings::Sparse(adj)
        };

        Ok(PairwiseModel {
            num_variables,
            domain,
            coupling_scale,
            edges: canonical,
            potential,
            phi,
            couplings,
            provenance: Provenance::default(),
        })
    }

    /// Binary `{-1, +1}` model with the spin-product interaction.
    pub fn ising(
        num_variables: usize,
        coupling_scale: f64,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        Self::new(
            num_variables,
            vec![-1, 1],
            coupling_scale,
            edges,
            PairPotential::SpinProduct,
        )
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn num_variables(&self) -> usize {
        self.num_variables
    }

    pub fn domain_size(&self) -> usize {
        self.domain.len()
    }

    pub fn domain(&self) -> &[i32] {
        &self.domain
    }

    pub fn coupling_scale(&self) -> f64 {
        self.coupling_scale
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn potential(&self) -> &PairPotential {
        &self.potential
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.couplings, Couplings::Dense(_))
    }

    /// `J_ij` (zero when there is no edge).
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        match &self.couplings {
            Couplings::Dense(d) => d[i * self.num_variables + j],
            Couplings::Sparse(adj) => adj[i]
                .iter()
                .find(|(k, _)| *k == j)
                .map_or(0.0, |&(_, c)| c),
        }
    }

    pub fn degree(&self, i: usize) -> usize {
        match &self.couplings {
            Couplings::Dense(d) => {
                let m = self.num_variables;
                d[i * m..(i + 1) * m].iter().filter(|c| **c != 0.0).count()
            }
            Couplings::Sparse(adj) => adj[i].len(),
        }
    }

    /// Calls `f(j, J_ij)` for each neighbour of `i`. Dense models may report
    /// zero couplings.
    #[inline]
    pub fn for_each_neighbor(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        match &self.couplings {
            Couplings::Dense(d) => {
                let m = self.num_variables;
                for (j, &c) in d[i * m..(i + 1) * m].iter().enumerate() {
                    if c != 0.0 {
                        f(j, c);
                    }
                }
            }
            Couplings::Sparse(adj) => {
                for &(j, c) in &adj[i] {
                    f(j, c);
                }
            }
        }
    }

    /// Unscaled interaction `phi(a, b)` between domain indices.
    #[inline]
    pub fn pair_energy(&self, a: usize, b: usize) -> f64 {
        self.phi[a * self.domain.len() + b]
    }

    pub fn check_state(&self, state: &SpinState) -> Result<()> {
        if state.len() != self.num_variables {
            return Err(Error::DimensionMismatch {
                expected: self.num_variables,
                got: state.len(),
            });
        }
        let q = self.domain_size();
        if let Some(&v) = state.indices().iter().find(|&&v| v as usize >= q) {
            return Err(Error::InvalidValue {
                value: v as usize,
                domain_size: q,
            });
        }
        Ok(())
    }

    fn check_site(&self, i: usize) -> Result<()> {
        if i >= self.num_variables {
            return Err(Error::InvalidIndex {
                index: i,
                num_variables: self.num_variables,
            });
        }
        Ok(())
    }

    fn check_value(&self, v: usize) -> Result<()> {
        if v >= self.domain_size() {
            return Err(Error::InvalidValue {
                value: v,
                domain_size: self.domain_size(),
            });
        }
        Ok(())
    }

    /// `E(x)`, summed over the canonical edge list with compensation.
    pub fn energy(&self, state: &SpinState) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.energy_unchecked(state))
    }

    pub(crate) fn energy_unchecked(&self, state: &SpinState) -> f64 {
        let sum: CompensatedSum = self
            .edges
            .iter()
            .map(|e| e.coupling * self.pair_energy(state.get(e.i), state.get(e.j)))
            .collect();
        self.coupling_scale * sum.value()
    }

    /// Fills `out[v]` with the energy terms involving variable `i` when it
    /// takes value `v`, the rest of `state` held fixed.
    pub(crate) fn local_energies_into(&self, state: &SpinState, i: usize, out: &mut [f64]) {
        let q = self.domain_size();
        out.iter_mut().for_each(|o| *o = 0.0);
        self.for_each_neighbor(i, |j, c| {
            let b = state.get(j);
            for (v, o) in out.iter_mut().enumerate() {
                *o += c * self.phi[v * q + b];
            }
        });
        for o in out.iter_mut() {
            *o *= self.coupling_scale;
        }
    }

    /// `E(x with x_i := new_value) - E(x)`, in `O(degree(i))`.
    pub fn delta_energy(&self, state: &SpinState, i: usize, new_value: usize) -> Result<f64> {
        self.check_state(state)?;
        self.check_site(i)?;
        self.check_value(new_value)?;
        let old = state.get(i);
        if old == new_value {
            return Ok(0.0);
        }
        let q = self.domain_size();
        let mut acc = 0.0;
        self.for_each_neighbor(i, |j, c| {
            let b = state.get(j);
            acc += c * (self.phi[new_value * q + b] - self.phi[old * q + b]);
        });
        Ok(self.coupling_scale * acc)
    }

    /// `log pi~(x) = -beta * E(x)`.
    pub fn log_unnorm(&self, beta: Temperature, state: &SpinState) -> Result<f64> {
        let e = self.energy(state)?;
        Ok(if beta.beta() == 0.0 { 0.0 } else { -beta.beta() * e })
    }

    /// Local conditional `pi_i(. | x_rest)` as a probability vector over the
    /// domain.
    pub fn conditional(&self, beta: Temperature, state: &SpinState, i: usize) -> Result<Vec<f64>> {
        self.check_state(state)?;
        self.check_site(i)?;
        let q = self.domain_size();
        let mut eps = vec![0.0; q];
        self.local_energies_into(state, i, &mut eps);
        let mut lp = vec![0.0; q];
        log_conditional(beta.beta(), &eps, &mut lp);
        Ok(lp.into_iter().map(f64::exp).collect())
    }

    /// Spin-product local field `h_i = coupling_scale * sum_j J_ij D_{x_j}`.
    /// For `{-1, +1}` domains `pi_i(+1 | rest) = 1 / (1 + exp(-2 beta h_i))`.
    pub fn local_field(&self, state: &SpinState, i: usize) -> Result<f64> {
        self.check_state(state)?;
        self.check_site(i)?;
        let mut acc = 0.0;
        self.for_each_neighbor(i, |j, c| acc += c * self.domain[state.get(j)] as f64);
        Ok(self.coupling_scale * acc)
    }

    /// Hex SHA-256 prefix over the energy-defining content (not provenance).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_variables as u64).to_le_bytes());
        h.update((self.domain.len() as u64).to_le_bytes());
        for d in &self.domain {
            h.update(d.to_le_bytes());
        }
        h.update(self.coupling_scale.to_bits().to_le_bytes());
        for p in &self.phi {
            h.update(p.to_bits().to_le_bytes());
        }
        for e in &self.edges {
            h.update((e.i as u64).to_le_bytes());
            h.update((e.j as u64).to_le_bytes());
            h.update(e.coupling.to_bits().to_le_bytes());
        }
        h.finalize()[..16]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_file_format(&self) -> ModelFile {
        ModelFile {
            m: self.num_variables,
            q: self.domain.len(),
            coupling_scale: self.coupling_scale,
            domain: self.domain.clone(),
            edges: self.edges.iter().map(|e| (e.i, e.j, e.coupling)).collect(),
            pair_table: match &self.potential {
                PairPotential::SpinProduct => None,
                PairPotential::Table(t) => Some(t.clone()),
            },
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_file_format(file: ModelFile) -> Result<Self> {
        if file.domain.len() != file.q {
            return Err(Error::Format(format!(
                "q = {} but the domain lists {} values",
                file.q,
                file.domain.len()
            )));
        }
        if let Some(&(i, j, _)) = file.edges.iter().find(|(i, j, _)| i >= j) {
            return Err(Error::Format(format!("edge ({i}, {j}) must satisfy i < j")));
        }
        let potential = match file.pair_table {
            None => PairPotential::SpinProduct,
            Some(t) => PairPotential::Table(t),
        };
        Ok(
            PairwiseModel::new(file.m, file.domain, file.coupling_scale, file.edges, potential)?
                .with_provenance(file.provenance),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file_format())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file_format(serde_json::from_str(s)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// On-disk model document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(rename = "M")]
    pub m: usize,
    pub q: usize,
    pub coupling_scale: f64,
    pub domain: Vec<i32>,
    pub edges: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_table: Option<Vec<f64>>,
    #[serde(flatten)]
    pub provenance: Provenance,
}

/// `out[v] = log pi(v)` for `pi(v) ∝ exp(-beta * local_energy[v])`.
#[inline]
pub fn log_conditional(beta: f64, local_energy: &[f64], out: &mut [f64]) {
    if local_energy.len() == 2 {
        let d = beta * (local_energy[0] - local_energy[1]);
        // log pi(0) = -log(1 + e^{d}), log pi(1) = -log(1 + e^{-d})
        out[0] = -crate::numeric::softplus(d);
        out[1] = -crate::numeric::softplus(-d);
        return;
    }
    let min = local_energy.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, &e) in out.iter_mut().zip(local_energy) {
        *o = -beta * (e - min);
        z += o.exp();
    }
    let lz = z.ln();
    for o in out.iter_mut() {
        *o -= lz;
    }
}

/// A state together with cached local energies `eps_i(v)` for every
/// variable and value, so that single-variable changes cost `O(degree)`.
#[derive(Clone, Debug)]
pub struct Walker<'m> {
    model: &'m PairwiseModel,
    state: SpinState,
    local: Vec<f64>,
    energy: f64,
    dphi: Vec<f64>,
}

impl<'m> Walker<'m> {
    pub fn new(model: &'m PairwiseModel, state: SpinState) -> Result<Self> {
        model.check_state(&state)?;
        let q = model.domain_size();
        let mut local = vec![0.0; model.num_variables() * q];
        for i in 0..model.num_variables() {
            model.local_energies_into(&state, i, &mut local[i * q..(i + 1) * q]);
        }
        let energy = model.energy_unchecked(&state);
        Ok(Walker {
            model,
            state,
            local,
            energy,
            dphi: vec![0.0; q],
        })
    }

    pub fn model(&self) -> &'m PairwiseModel {
        self.model
    }

    pub fn state(&self) -> &SpinState {
        &self.state
    }

    pub fn into_state(self) -> SpinState {
        self.state
    }

    /// Energy carried along incrementally.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    #[inline]
    pub fn local(&self, i: usize) -> &[f64] {
        let q = self.model.domain_size();
        &self.local[i * q..(i + 1) * q]
    }

    #[inline]
    pub fn delta(&self, i: usize, v: usize) -> f64 {
        let l = self.local(i);
        l[v] - l[self.state.get(i)]
    }

    /// Sets `x_i := v`, updating the energy and the neighbours' caches.
    pub fn flip(&mut self, i: usize, v: usize) {
        let old = self.state.get(i);
        if old == v {
            return;
        }
        let q = self.model.domain_size();
        self.energy += self.delta(i, v);
        self.state.set(i, v);
        let scale = self.model.coupling_scale();
        let phi = &self.model.phi;
        for (u, d) in self.dphi.iter_mut().enumerate() {
            *d = phi[u * q + v] - phi[u * q + old];
        }
        let local = &mut self.local;
        let dphi = &self.dphi;
        if q == 2 {
            let (d0, d1) = (dphi[0], dphi[1]);
            self.model.for_each_neighbor(i, |k, c| {
                let c = scale * c;
                local[2 * k] += c * d0;
                local[2 * k + 1] += c * d1;
            });
        } else {
            self.model.for_each_neighbor(i, |k, c| {
                let c = scale * c;
                for (u, d) in dphi.iter().enumerate() {
                    local[k * q + u] += c * d;
                }
            });
        }
    }

    /// Replaces the state wholesale and rebuilds the caches.
    pub fn reset(&mut self, state: SpinState) -> Result<()> {
        *self = Walker::new(self.model, state)?;
        Ok(())
    }

    /// `out[v] = log pi_i(v | x_rest)` at inverse temperature `beta`.
    #[inline]
    pub fn log_conditional(&self, beta: f64, i: usize, out: &mut [f64]) {
        log_conditional(beta, self.local(i), out);
    }
}

/// Fully connected binary spin glass: `J_ij ~ N(0, 1)` i.i.d. for `i < j`,
/// `coupling_scale = 1/sqrt(M)`.
pub fn build_ising_dense(num_variables: usize, seed: u64) -> Result<PairwiseModel> {
    if num_variables < 2 {
        return Err(Error::param(format!(
            "dense model needs M >= 2, got {num_variables}"
        )));
    }
    let mut rng = SeedTree::new(seed).child(DENSE_STREAM).rng();
    let mut edges = Vec::with_capacity(num_variables * (num_variables - 1) / 2);
    for i in 0..num_variables {
        for j in i + 1..num_variables {
            let coupling: f64 = rng.sample(StandardNormal);
            edges.push((i, j, coupling));
        }
    }
    Ok(
        PairwiseModel::ising(num_variables, 1.0 / (num_variables as f64).sqrt(), edges)?
            .with_provenance(Provenance {
                builder: Some("ising-dense".into()),
                seed: Some(seed),
                dims: None,
                boundary: None,
            }),
    )
}

/// `nx * ny * nz` cubic lattice with free boundaries and `J = ±1`
/// nearest-neighbour couplings, scaled by `1/sqrt(M)`.
pub fn build_cube_lattice(dims: [usize; 3], seed: u64) -> Result<PairwiseModel> {
    let m = dims.iter().product::<usize>();
    build_cube_lattice_with_scale(dims, seed, 1.0 / (m as f64).sqrt())
}

pub fn build_cube_lattice_with_scale(
    dims: [usize; 3],
    seed: u64,
    coupling_scale: f64,
) -> Result<PairwiseModel> {
    let [nx, ny, nz] = dims;
    let m = nx * ny * nz;
    if dims.contains(&0) || m < 2 {
        return Err(Error::param(format!("degenerate lattice dims {dims:?}")));
    }
    let index = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut rng = SeedTree::new(seed).child(CUBE_STREAM).rng();
    let mut edges = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = index(x, y, z);
                let mut neighbors = Vec::with_capacity(3);
                if x + 1 < nx {
                    neighbors.push(index(x + 1, y, z));
                }
                if y + 1 < ny {
                    neighbors.push(index(x, y + 1, z));
                }
                if z + 1 < nz {
                    neighbors.push(index(x, y, z + 1));
                }
                for j in neighbors {
                    let coupling = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    edges.push((i, j, coupling));
                }
            }
        }
    }
    Ok(PairwiseModel::ising(m, coupling_scale, edges)?.with_provenance(Provenance {
        builder: Some("cube".into()),
        seed: Some(seed),
        dims: Some(dims.to_vec()),
        boundary: Some("free".into()),
    }))
}
