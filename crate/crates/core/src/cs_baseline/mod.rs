//! Compressed-sensing baseline: SENSE data term with an l1 penalty on
//! Daubechies-4 wavelet coefficients.

mod pics;
mod wavelet;

pub use pics::{lipschitz_estimate, pics_reconstruct, pics_with_operator, PicsConfig, PicsResult, Step};
pub use wavelet::{dwt2, idwt2, soft_threshold};
