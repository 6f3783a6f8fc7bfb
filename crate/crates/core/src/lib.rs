//! Expert-pruning workbench for sparse mixture-of-experts transformers.
//!
//! The pipeline has four stages:
//!
//! 1. [`model`] builds a deterministic toy SMoE transformer from a [`ModelSpec`]
//!    and exposes teacher-forced next-token distributions.
//! 2. [`criteria`] scores experts on calibration data and turns the scores into
//!    per-layer pruning orders.
//! 3. [`allocation`] describes the feasible set of layer-wise pruning budgets and
//!    [`search`] explores it with a budget-preserving evolutionary search.
//! 4. [`fitness`] scores candidates by their expected speculative acceptance
//!    against the full model, and [`specdec`] runs real speculative decoding
//!    to validate that proxy.

pub mod allocation;
pub mod artifact;
pub mod criteria;
pub mod error;
pub mod fitness;
pub mod model;
pub mod search;
pub mod specdec;

mod dist;

pub use allocation::{Allocation, BudgetSpec, Parity};
pub use criteria::{CalibrationSet, Criterion, ImportanceScores, PruningOrder};
pub use dist::NextTokenDistribution;
pub use error::{Error, ErrorKind, Result};
pub use fitness::{FitnessKind, FitnessValue, LogitCache, SearchSample};
pub use model::{MoEModel, ModelSpec, TokenSequence};
pub use search::{SearchConfig, SearchRun};
pub use specdec::{AcceptanceReport, SpecDecConfig};
