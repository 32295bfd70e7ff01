//! Analytic convolutional layers.
//!
//! Convolution kernels are sampled from closed-form kernel functions (Gabor,
//! Laplacian of Gaussian, TGD variants, ...) whose few parameters are learned
//! by backpropagation, mixed with ordinary per-weight kernels in a declared
//! arrangement.

pub mod acl;
pub mod arrangement;
pub mod conv;
pub mod dataio;
pub mod fitting;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod tensor;

pub use acl::{AclError, AclGradients, AclLayer};
pub use arrangement::{parse_pattern, Arrangement, Pattern, PatternError, RatioArrangement};
pub use conv::ConvHyper;
pub use kernels::{KernelError, KernelFamily, KernelSize, KernelSpec, WeightMatrix};
pub use tensor::Tensor4;
