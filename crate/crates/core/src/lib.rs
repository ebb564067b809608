//! Two-stage skeleton temporal action detection.
//!
//! Stage one encodes short skeleton windows, rendered from many virtual
//! cameras, with a graph convolution encoder ([`swgcn`]). Stage two freezes
//! that encoder and learns temporal and cross-view structure over the
//! resulting `views × windows × channels` feature grid with a multi-scale
//! selective state-space encoder ([`hydraview`]). [`evaluation`] scores the
//! per-window predictions with event-based mAP.
//!
//! Numerical code is generic over [`Real`]; the aliases below fix the scalar
//! to `f64`, which is what training and the gradient checks use.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod hydraview;
pub mod pipeline;
pub mod plot;
pub mod scalar;
pub mod swgcn;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type VirtualCamera = geometry::VirtualCamera<f64>;
pub type SkeletonWindow3D = geometry::SkeletonWindow3D<f64>;
pub type ProjectedWindow = geometry::ProjectedWindow<f64>;
pub type Swgcn = swgcn::Swgcn<f64>;
pub type HydraView = hydraview::HydraView<f64>;
pub type FeatureGrid = hydraview::FeatureGrid<f64>;
