//! Deformation-invariant K-means.
//!
//! K-means in which the distance from a sample to a centroid is the residual
//! left after warping the sample onto the centroid with an optimally fitted
//! thin-plate spline. Cluster assignment becomes insensitive to smooth
//! deformations of the images, and centroids are averages of the aligned
//! members rather than of raw pixels.
//!
//! The crate is organized bottom-up:
//!
//! * [`tps`]: spline systems over a fixed landmark grid.
//! * [`warp`]: images, bilinear rendering, residual gradients.
//! * [`optimizer`]: the two-stage per-pair warp fit.
//! * [`similarity`]: Euclidean, affine-invariant and deformation-invariant
//!   distances behind one interface.
//! * [`clustering`]: seeding, assignment, centroid updates, training.
//! * [`evaluation`]: matched accuracy and distortion-based model selection.
//! * [`datasets`]: IDX/PNG ingestion and synthetic warped-digit sets.

pub mod clustering;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod optimizer;
pub mod similarity;
pub mod tps;
pub mod warp;

pub use clustering::{kmeanspp_init, train, ClusterState, Clusterer, TestAssignment, TrainConfig};
pub use datasets::{LabeledDataset, Split};
pub use error::{Error, Result};
pub use evaluation::{clustering_accuracy, crossval_select, EvalReport, SweepRun};
pub use optimizer::{evaluate_distance, FitConfig, PreparedImage, WarpFit};
pub use similarity::{distance, warped_representation, MetricKind};
pub use tps::{KernelNorm, LandmarkSet, SystemCache, TpsParams, TpsSystem};
pub use warp::{bilinear_sample, low_pass, AffineParams, Image, WarpGradient, Warper};
