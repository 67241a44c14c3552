//! Blind estimation of blur-kernel degradation from an unlabeled image corpus.
//!
//! The crate measures images in the frequency domain, searches the parameters of an
//! anisotropic Gaussian blur so that downsampled-and-blurred copies of the corpus
//! share the corpus' own frequency density, and then synthesizes HR/LR training pairs
//! with the recovered kernel.
//!
//! Module map:
//!
//! * [`imaging`]: luminance rasters, PNG and raw I/O, bicubic resampling, convolution, patches.
//! * [`spectral`]: Fourier magnitude, frequency-density profiles, frequency distance.
//! * [`kernel`]: Gaussian kernel parameterization, degradation generator, test kernels.
//! * [`fdc`]: the frequency density comparator and its curriculum training.
//! * [`wavelet`]: Haar transform and the least-squares high-band discriminator.
//! * [`estimator`]: direct (grid + coordinate descent) and adversarial/comparator estimators.
//! * [`harness`]: synthetic benchmark suite, PSNR/SSIM, plot data.
//! * [`corpus`]: procedural scale-invariant image corpus used for CI and benchmarks.

pub mod corpus;
pub mod error;
pub mod estimator;
pub mod fdc;
pub mod format;
pub mod harness;
pub mod imaging;
pub mod kernel;
pub mod nn;
pub mod par;
pub mod rng;
pub mod spectral;
pub mod wavelet;

pub use error::{Error, Result};
pub use imaging::ImagePlane;
pub use kernel::{BlurKernel, KernelParams};
pub use spectral::{DomainProfile, FrequencyProfile};

/// Version string written into manifests and reports.
pub const TOOL_VERSION: &str = concat!("freqadapt ", env!("CARGO_PKG_VERSION"));
