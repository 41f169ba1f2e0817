//! Simulation of quantum protocols on finite partially ordered position sets.
//!
//! The library models channels that move messages between wires anchored at
//! poset positions (truncated bosonic Fock spaces), validates causality of
//! such channels, composes them into multi-agent protocols, certifies the
//! acting-once and local-order conditions, and constructively rewrites
//! certified protocols into quantum circuits with quantum control of causal
//! order (QC-QCs).

pub mod certify;
pub mod compose;
pub mod extract;
pub mod fock;
pub mod linalg;
pub mod protocol;
#[cfg(test)]
pub(crate) mod testkit;
pub mod qcqc;
pub mod qmap;
pub mod spacetime;
pub mod transform;

pub use compose::{
    full_loop, labeled_choi, link_product, loop_compose, parallel, parallel_all, self_link,
    with_wire_order, LabeledChoi, WireMatch,
};
pub use fock::{enumerate_basis, FockBasis, WireKind, WireRole, WireSpec};
pub use protocol::{
    behavioural_equivalence, compose_protocol, compose_protocol_dense, compose_with_gadgets,
    gyni_value, outcome_distribution, protocol_from_json, protocol_to_json, validate_protocol,
    AgentOperation, AgentSpec, Composed, Correspondence, Distribution, EquivReport, Gadget,
    GadgetKind, ProcessRep, Protocol,
};
pub use qmap::{
    check_causality, check_pseudo_causality, choi_distance, CausalityReport, MapKind, QuantumMap,
    SequenceRep,
};
pub use spacetime::{
    CausalityFunction, Mask, RelabellingMap, Spacetime, SystemKind, SystemRelabel,
    ValidationReport,
};

/// Default tolerance for channel-equality checks (Frobenius distance of Choi
/// matrices) and isometry defects.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Singular values below this threshold are treated as zero when computing
/// ranks, supports, and ancilla truncations.
pub const RANK_TOL: f64 = 1e-10;

/// Hard cap on enumerated basis sizes; exceeding it is a resource error
/// rather than a silent slowdown.
pub const BASIS_CAP: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent input data (bad JSON, mismatched wires,
    /// invalid poset, unknown setting, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// A declared precondition of an operation does not hold for the given
    /// arguments (non-causal map handed to a loop, missing slicing, ...).
    #[error("precondition failed: {0}")]
    Precondition(String),
    /// A computation would exceed a configured resource cap.
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    /// A numerical decomposition did not meet its accuracy contract.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
    pub fn resource(msg: impl Into<String>) -> Self {
        Error::Resource(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
