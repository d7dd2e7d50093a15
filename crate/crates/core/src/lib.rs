//! Dictionary-filtering super-resolution.
//!
//! The upscaler predicts, for every high-resolution pixel, coefficients over
//! a fixed bank of small filters; the weighted filter is then applied to the
//! bilinearly upsampled neighborhood of that pixel. The crate provides:
//!
//! * tensors, netpbm I/O, the convolutional primitives and PSNR/SSIM
//!   ([`tensor`], [`image`], [`ops`], [`metrics`]);
//! * the filter dictionary and the reference assembly/filtering loops
//!   ([`dictionary`]);
//! * a small coefficient predictor network ([`predictor`]);
//! * iterative LASSO selection that shrinks the dictionary and refits the
//!   predictor's last layer ([`pruning`]);
//! * a tiled, worker-pool filtering engine with a block/warp cost model
//!   ([`engine`]);
//! * feasible block-configuration enumeration and Gaussian-process Bayesian
//!   optimization over it ([`autotune`]);
//! * the end-to-end upscaling pipeline with stage timings ([`pipeline`]).

pub mod autotune;
pub mod dictionary;
pub mod engine;
pub mod error;
pub mod image;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod predictor;
pub mod pruning;
pub mod rng;
pub mod tensor;

pub use autotune::{FeasibleSet, GpModel, TuneResult};
pub use dictionary::{Dictionary, DictionaryParams, FootprintReport};
pub use engine::{BlockConfig, HardwareSpec, LatencyMeasurement};
pub use error::{Error, Result};
pub use image::ImageSpec;
pub use pipeline::StageTimings;
pub use predictor::PredictorWeights;
pub use pruning::{PruneConfig, PruneTrace, RegressionProblem, SelectionVector};
pub use rng::Rng;
pub use tensor::Tensor;
