//! Structure-flow-sensitive points-to analysis for a small SSA IR.
//!
//! The pipeline: parse and validate ([`ir`]), compute byte layouts
//! ([`layout`]), run the inclusion-based pre-analysis ([`andersen`]),
//! place memory versions and build the value-flow graph ([`memssa`]),
//! then solve flow-sensitively ([`solver`]) in either the
//! structure-aware or the structure-blind mode. [`oracle`] is an
//! independent dense reference implementation used for differential
//! testing, [`alias`] evaluates alias queries, and [`gen`] produces
//! random well-formed programs.

pub mod andersen;
pub mod ir;
pub mod layout;
pub mod memssa;
pub mod objects;
pub mod singletons;
pub mod alias;
pub mod gen;
pub mod oracle;
pub mod pipeline;
pub mod solver;

pub use ir::parse::{parse_program, Diagnostic};
pub use ir::{FnId, IRProgram, Label, TypeId, TypeRef, VarId};
pub use layout::{compute_layouts, LayoutTable};
pub use objects::{ObjId, ObjSet, ObjectStore};
