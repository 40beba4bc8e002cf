//! Variational message passing for conjugate exponential-family models.
//!
//! Build a [`Graph`] from constants, stochastic nodes, mixtures and
//! sum-product nodes, observe data, then fit with [`run_vb`],
//! [`run_annealed`] or [`run_svi`].

// Negated float comparisons are used to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod expfam;
pub mod graph;
pub mod linalg;
pub mod models;
pub mod plates;
pub mod special;

pub use engine::{
    initialize_from_random, run_annealed, run_svi, run_vb, AnnealingSchedule, FitFailure, FitOptions, FitReport,
    FitResult, SviSchedule,
};
pub use error::{Error, Result};
pub use expfam::{FamilyId, MomentKind, MomentVector, NaturalParams, SlotKind};
pub use graph::{AxisMode, BroadcastPlan, Graph, NodeId, NodeKind};
pub use plates::{Field, Plates};
