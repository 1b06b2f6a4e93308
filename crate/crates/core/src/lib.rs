//! Unrolled model-based MRI reconstruction trained with an unsupervised
//! patch-feature loss.
//!
//! The crate is generic over the scalar type ([`Real`], implemented for `f32`
//! and `f64`); the `*32` / `*64` aliases below name the common instantiations.

pub mod autodiff;
pub mod container;
pub mod cs_baseline;
pub mod data;
pub mod encode;
pub mod error;
pub mod eval;
pub mod featnet;
pub mod scalar;
pub mod ufloss;
pub mod unrolled;

pub use error::{Error, Result};
pub use scalar::Real;

use ndarray::{Array2, Array3};
use num_complex::Complex;

/// Complex 2D image `[H, W]`.
pub type CImage<T> = Array2<Complex<T>>;
/// Stack of complex images, e.g. multi-coil k-space `[C, H, W]`.
pub type CStack<T> = Array3<Complex<T>>;

pub type CImage32 = CImage<f32>;
pub type CImage64 = CImage<f64>;
pub type Encoding32 = encode::Encoding<f32>;
pub type Encoding64 = encode::Encoding<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type FeatNet32 = featnet::FeatNet<f32>;
pub type FeatNet64 = featnet::FeatNet<f64>;
pub type ReconNet32 = unrolled::ReconNet<f32>;
pub type ReconNet64 = unrolled::ReconNet<f64>;
