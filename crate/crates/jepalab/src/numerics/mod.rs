//! Dense numeric substrate: tensors, a reverse-mode op tape, parameter
//! stores, and a finite-difference gradient-check oracle.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_f64, LossFn};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{NodeLookup, Param, ParamNodes, ParamStore, Scoped};
pub use tensor::{Scalar, Tensor};
