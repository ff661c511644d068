//! # dscnet
//!
//! Deep subspace clustering built from scratch: a convolutional auto-encoder
//! with a bias-free linear *self-expressive* layer between encoder and
//! decoder, trained in two stages (auto-encoder pre-training, then joint
//! fine-tuning on the whole dataset as a single batch). The learned N×N
//! coefficient matrix is post-processed into a symmetric nonnegative affinity
//! matrix and fed to normalized spectral clustering.
//!
//! The crate is self-contained: dense float64 tensors, reverse-mode
//! differentiation for the fixed operation set the network needs, a symmetric
//! eigensolver, SVD, k-means, the Hungarian algorithm, and PGM/binary-matrix
//! I/O are all implemented here.
//!
//! ## Module map
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`tensor`] | dense row-major float64 tensors |
//! | [`linalg`] | symmetric eigendecomposition, thin SVD |
//! | [`autodiff`] | computation graph, stride-2 (de)convolutions, backward pass |
//! | [`model`] | network construction, parameter counting, composite loss |
//! | [`train`] | Adam, pre-training, fine-tuning |
//! | [`affinity`] | coefficient-to-affinity heuristics, closed-form least-squares self-expression |
//! | [`spectral`] | normalized spectral clustering, k-means |
//! | [`eval`] | clustering error with optimal label alignment |
//! | [`synth`] | union-of-subspaces synthetic data |
//! | [`dataio`] | PGM images, bilinear resize, binary matrix container |
//! | [`pipeline`] | run configuration, staged artifacts, manifest |
//!
//! ## Quick start
//!
//! ```
//! use dscnet::synth::{SynthSpec, Nonlinearity};
//! use dscnet::affinity::{solve_lsr, affinity_lowrank};
//! use dscnet::spectral::spectral_cluster;
//! use dscnet::eval::clustering_error;
//!
//! let spec = SynthSpec::uniform(3, 16, 2, 12, 0.0, Nonlinearity::None, 7);
//! let data = dscnet::synth::synth_subspaces(&spec).unwrap();
//! let c = solve_lsr(&data.raw, 1e-8, 1.0, false).unwrap();
//! let a = affinity_lowrank(&c, 3, 2, 1.0).unwrap();
//! let labels = spectral_cluster(&a, 3, 0, 10).unwrap();
//! let err = clustering_error(&labels.labels, &data.truth.labels).unwrap();
//! assert_eq!(err, 0.0);
//! ```
//!
//! Runnable walkthroughs live under `examples/`; the `dscnet` binary drives
//! the same pipeline from JSON configs (see `docs/formats.md`).

pub mod affinity;
pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
