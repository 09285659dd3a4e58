//! Function-valued traits on phylogenies: OU simulation, IPCA basis
//! extraction, bagged hyperparameter estimation and ancestral reconstruction.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix it to `f64`.

pub mod ancestor;
pub mod dimred;
pub mod error;
pub mod gpr;
pub mod hyperest;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod simcore;
pub mod tree;

pub use error::{Error, Result};
pub use hyperest::PhyloSignal;
pub use scalar::Real;
pub use tree::NodeId;

pub type Tree = tree::Phylogeny<f64>;
pub type Gamma = simcore::GammaVector<f64>;
pub type Basis = simcore::BasisSet<f64>;
pub type Mixing = simcore::MixingMatrix<f64>;
pub type Dataset = simcore::FunctionalDataset<f64>;
pub type Kernel = gpr::KernelMatrix<f64>;
pub type Posterior = gpr::GaussianPosterior<f64>;
pub type FunctionPosterior = ancestor::FunctionValuedPosterior<f64>;
pub type Estimate = hyperest::GammaEstimate<f64>;
pub type Ipca = dimred::IpcaResult<f64>;
