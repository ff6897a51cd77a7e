//! Sampling and partition-function estimation for low-temperature discrete
//! pairwise Markov random fields.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: pairwise models, states, energies, local conditionals and
//!   the seeded spin-glass builders.
//! - [`oracle`]: brute-force enumeration for small models (exact `log Z`,
//!   expectations, energy distributions).
//! - [`nfw`]: event-driven single-site machinery: flip distributions, the
//!   N-Fold Way sampler, the random-site Gibbs kernel and event-driven
//!   annealing.
//! - [`lfqgs`]: the large-flip quasi-Gibbs sampler with its per-move tabu mask
//!   and compact trajectory history.
//! - [`lfis`]: selection, fixed-order sweep kernels, the mixture proposal and
//!   the importance estimators built on top of it.
//! - [`baselines`]: annealed sequential Monte Carlo.
//!
//! All energies, log-densities and weights are `f64`; anything that can
//! overflow is kept in the log domain.

pub mod baselines;
pub mod error;
pub mod lfis;
pub mod lfqgs;
pub mod model;
pub mod nfw;
pub mod numeric;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
pub use model::{PairwiseModel, SpinState, Temperature};
pub use rng::{SeedTree, SimRng};
