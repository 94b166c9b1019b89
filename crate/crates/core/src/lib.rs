//! Semi-supervised image captioning with cross-modal prediction and relation
//! consistency, on a small reverse-mode autodiff engine.

pub mod augment;
pub mod checkpoint;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vocab;

pub use autodiff::{grad_check, GradCheck, Gradients, Graph, Op, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use model::{CaptionerConfig, CaptionerModel};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use vocab::Vocabulary;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = CaptionerModel<f32>;
pub type Model64 = CaptionerModel<f64>;
