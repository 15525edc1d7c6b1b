//! Gated multimodal retrieval with hyperbolic alignment, spectral
//! knowledge-graph refinement and optimal-transport generation losses.
//!
//! The crate is organized bottom-up:
//!
//! - [`lorentz`]: hyperboloid geometry, exp/log maps and Riemannian SGD.
//! - [`alignment`]: per-modality affine encoders trained on geodesic distance,
//!   plus exhaustive top-k retrieval.
//! - [`spectral`]: knowledge graphs, Laplacian spectra, sweep-cut subgraph
//!   refinement and the Cheeger check.
//! - [`crm`]: confidence gating, relevance head and contrastive training.
//! - [`transport`] and [`generation`]: exact and entropic 2-Wasserstein,
//!   token losses, query dropout and a small linear generator.
//! - [`pipeline`]: two-phase training, inference, evaluation and the
//!   synthetic bundle generator.
//! - [`conformance`]: brute-force oracles used by the test suites. Production
//!   modules never import it.

pub mod alignment;
pub mod conformance;
pub mod crm;
pub mod error;
pub mod formats;
pub mod generation;
pub mod lorentz;
pub mod optim;
pub mod pipeline;
pub mod scorer;
pub mod spectral;
pub mod transport;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate's only RNG constructor; every stochastic step is seeded.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Logistic sigmoid, numerically safe at both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
