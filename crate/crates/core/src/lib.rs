//! Image-to-image translation with adaIN style swaps, used to adapt
//! segmentation models to a new imaging domain.

pub mod autodiff;
pub mod core_math;
pub mod error;
pub mod kernels;
pub mod scalar;
pub mod tensor;

pub mod networks;
pub mod params;
pub mod losses;
pub mod checkpoint;
pub mod data_pipeline;
pub mod translation;
pub mod segmentation;
pub mod baselines;
pub mod synth;
pub mod benchmark;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type RasterImage32 = data_pipeline::RasterImage<f32>;
pub type RasterImage64 = data_pipeline::RasterImage<f64>;
pub type TranslationState32 = translation::TranslationState<f32>;
pub type TranslationState64 = translation::TranslationState<f64>;
pub type SegModel32 = segmentation::SegModel<f32>;
pub type SegModel64 = segmentation::SegModel<f64>;
