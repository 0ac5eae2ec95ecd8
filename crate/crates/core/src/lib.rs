//! Infinite-width kernels of convolutional networks whose filter weights are
//! spatially correlated, with a finite-width sampler to check them against and
//! a small Gaussian-process classification harness.

pub mod arch;
pub mod covariance;
pub mod data_io;
pub mod error;
pub mod geometry;
pub mod gp;
pub mod gram;
pub mod image;
pub mod mc;
pub mod moment;
pub mod propagate;
pub mod registry;
pub mod relu;

pub use arch::{plan_offsets, ArchitectureBuilder, ArchitectureSpec, Layer};
pub use covariance::{CovKind, CovSqrtFactor, WeightCovariance};
pub use error::{Error, Result};
pub use geometry::{ConvGeometry, Extent, Padding, PatchIndex, TapTable};
pub use gram::{gram_matrices, gram_matrix, pair_kernel, GramMatrix, GramMeta, KernelEvaluator};
pub use image::Image;
pub use moment::{input_moment, Offset, Representation, SecondMoment, SecondMomentPair};
pub use relu::{balanced_relu, relu_expectation, ArccosArgument};
pub use gp::{cv_accuracy, out_of_fold_predictions, predict_classes, default_sigma_grid, encode_targets, posterior_means, CvConfig, CvResult, RegressionTargets};
pub use mc::{empirical_kernel, finite_forward, mc_relu_expectation, sample_weights, sample_weights_into, EmpiricalMoment, FilterBank, FiniteNet, FiniteNetConfig, McEstimate, WeightSet};
pub use registry::{build_architecture, ArchOptions, LengthscaleTarget};
pub use data_io::{export_results, halve_kernel_dataset, load_cifar10_subset, load_kernel, save_kernel, ImageDataset, KernelHalf, SweepRecord};
