#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod fixtures;
pub mod hamiltonian;
pub mod io;
pub mod krylov;
pub mod linalg;
pub mod observables;
pub mod pauli;
pub mod relaxation;
pub mod sparse;
pub mod spin;
pub mod validation;

pub use dynamics::{CorrelationTensor, DynamicsOptions, MoleculeModel, PropagationMethod, TimeGrid};
pub use ensemble::{EnsembleSummary, RandomEnsembleSpec, RunConfig, TransferGrid};
pub use error::{Result, SpinError};
pub use hamiltonian::Orientation;
pub use io::ResultSeries;
pub use observables::{CrossingReport, PairDensity};
pub use relaxation::{GridKind, Mechanism, OrientationGrid};
pub use spin::{Axis, Operator, SpinSystem, SuperOperator};
