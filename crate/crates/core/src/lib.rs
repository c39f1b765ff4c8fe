//! Scene understanding as a stream of semantic graphs: detection error
//! accounting, temporal integration, attribute-level innovation, graph
//! smoothing and presence tracking, plus the bookkeeping that turns the
//! result into an information rate.

pub mod confusion;
mod dsu;
pub mod error;
pub mod format;
pub mod ged;
pub mod graph;
pub mod hmm;
pub mod integrator;
pub mod pipeline;
pub mod simkit;
pub mod subspace;

pub use error::{Error, Result};
