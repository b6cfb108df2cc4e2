//! Off-menu mechanism design for dynamic multi-agent environments: task
//! policies, coupling policies and off-switch functions evaluated on finite
//! state grids and history trees.
//!
//! The pipeline runs bottom-up: [`model::BaseGame`] and a task policy give a
//! [`tree::Model`]; [`carrier::CarrierTables`] and
//! [`persistence::Transforms`] are built on it; [`synthesis`] emits a
//! [`mechanism::Mechanism`]; [`equilibrium::ValueTables`] and [`verify`]
//! evaluate it. [`oracle`] recomputes the same quantities by brute force.
//!
//! Backward-induction layers and Monte Carlo paths run on rayon with the
//! default `parallel` feature; [`par::Exec::Sequential`] forces the
//! sequential path at runtime.

pub mod carrier;
pub mod equilibrium;
pub mod error;
pub mod instances;
pub mod mechanism;
pub mod model;
pub mod oracle;
pub mod par;
pub mod persistence;
pub mod pipeline;
pub mod regions;
pub mod report;
pub mod scenario;
pub mod synthesis;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
pub use pipeline::Analysis;
