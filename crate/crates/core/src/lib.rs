//! Static tensor graphs with reverse-mode differentiation, sensitivity
//! analysis and a calibrated Gaussian mechanism.
//!
//! A query is built as a [`Graph`] with bounded private inputs and
//! parameters. [`estimate_sensitivity`] bounds its L2 sensitivity, either by
//! interval propagation through the Jacobian or by global maximization of the
//! Jacobian's spectral norm. [`compile`] turns the graph into an executable
//! program and [`privatize`] runs it with clipping and Gaussian noise.

pub mod autodiff;
pub mod graph;
pub mod interval;
pub mod kernels;
pub mod lipschitz;
pub mod mechanism;
pub mod models;
pub mod runtime;
pub mod tensor;
pub mod testkit;

pub use autodiff::{higher_order, jacobian, AutodiffError, JacobianGraph};
pub use graph::{
    optimize, Bounds, BoundsSpec, Diagnostic, Fingerprint, Graph, GraphBuilder, GraphError, ModelError, ModelFile,
    Node, NodeId, NodeKind,
};
pub use interval::{ibp_sensitivity, propagate, IntervalError, IntervalTensor};
pub use lipschitz::{
    analysis_fingerprint, estimate_sensitivity, spectral_norm, LipschitzError, Method, OptimizerConfig,
    SensitivityConfig, SensitivityReport,
};
pub use mechanism::{calibrate_sigma, clip, privatize, MechanismError, MechanismOutput, PrivacyMode, PrivacyParams};
pub use runtime::{benchmark, compile, BenchRecord, CompiledProgram, Compiler, RuntimeError};
pub use tensor::{Shape, Tensor};
