//! Feedback-driven, multi-agent fuzzing engine for industrial control protocols.
//!
//! The crate is organised by agent role. [`protocol`] holds the declarative
//! frame model every other module builds on; [`campaign`] wires the agents
//! together over the [`bus`].

pub mod protocol;
pub mod bus;
pub mod campaign;
pub mod capture;
pub mod clock;
pub mod feedback;
pub mod harness;
pub mod kb;
pub mod metrics;
pub mod mutation;
pub mod rng;
pub mod seed;
