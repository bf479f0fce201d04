//! Neuro-vesicle simulation engine.
//!
//! A population of discrete, mobile vesicle entities lives on a neural
//! network's computational graph. Vesicles are emitted in response to local
//! activations and gradients, migrate along edges via type-specific
//! transition kernels, probabilistically dock at nodes, and release effects
//! that modulate activations, parameters, learning rules, and a per-node
//! external memory before decaying away.
//!
//! The crate provides:
//! - the particle engine ([`sim`]) with a reproducible event log,
//! - a mean-field density relaxation ([`density`]) and a particle/density
//!   consistency checker,
//! - a spiking-network overlay ([`snn`]) where vesicles gate three-factor
//!   plasticity,
//! - a REINFORCE policy overlay ([`rl`]) that controls the vesicle kernels,
//! - config parsing and the file-emitting runners used by the CLI
//!   ([`config`], [`runner`]).
//!
//! Determinism contract: every stochastic decision draws from a stream keyed
//! by `(seed, phase, entity, step)`, so a `(config, seed)` pair fully
//! determines every output byte.

pub mod config;
pub mod density;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod network;
pub mod release;
pub mod rl;
pub mod rng;
pub mod runner;
pub mod sim;
pub mod snn;
pub mod vesicle;

pub use config::ExperimentConfig;
pub use error::{NvError, Result};
pub use graph::{Graph, NodeId};
pub use network::NetworkState;
pub use release::{ExternalMemory, ReleaseFlags};
pub use rng::{EventRng, Phase, RngStream};
pub use sim::{CoupledSim, EventLog, StepReport};
pub use vesicle::{Vesicle, VesicleConfig, VesicleTypeRegistry};
