//! Deterministic simulator for privatized graph federated learning.
//!
//! P federated units (one server, K clients each) sit on a graph and run
//! local-SGD federated averaging with an inter-server diffusion step. The
//! communication links can be privatized with independent Laplace noise or
//! graph-homomorphic perturbations, and client uploads can be protected with
//! secret-sharing masks seeded by Diffie-Hellman exchange. A differential
//! privacy accountant relates the noise scale to the privacy loss epsilon(i).

pub use nalgebra;

pub mod diagnostics;
pub mod engine;
pub mod graph;
pub mod privacy;
pub mod rng;
pub mod tasks;

pub use engine::{run, RoundMetrics, RunOutput, TrainConfig};
pub use graph::{build_metropolis, second_eigenvalue_modulus, validate, CombinationMatrix, Topology};
pub use privacy::{PerturbationScheme, PrivacyAccount, SchemeKind};
pub use tasks::{FederatedDataset, Loss, LossKind, TaskKind};
