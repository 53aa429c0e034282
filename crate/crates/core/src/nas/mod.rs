//! Differentiable architecture search over a small cell space.

pub mod arch;
pub mod cell;
pub mod genotype;
pub mod ops;
pub mod search;

pub use arch::{derive_architecture, derive_cell, ArchParams, ArchSet};
pub use cell::{cell_forward, ArchVars, Cell, SupernetOptions, EDGES, NUM_EDGES};
pub use genotype::{DiscreteCell, Genotype, GenotypeEdge};
pub use ops::{mixed_edge_forward, Candidate, MixedEdge, OpKind, OperationSpace, NUM_OPS, OPERATION_SPACE};
pub use search::{bilevel_step, search, BilevelModel, BilevelOptimizers, SearchConfig, SearchEpoch, SearchOutcome, StepReport, Supernet};
