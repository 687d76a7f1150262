//! Learning a single transformer policy that imitates LQR feedback across a
//! family of heterogeneous linear time-invariant systems.
//!
//! The crate is generic over the scalar type where numerics allow it
//! ([`scalar::Scalar`] is implemented for `f32` and `f64`); data generation,
//! training and evaluation run in `f64`.

pub mod catalog;
pub mod datagen;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod lqr;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod system;
pub mod tape;
pub mod tensor;
pub mod training;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type System64 = system::LtiSystem<f64>;
pub type Solution64 = lqr::LqrSolution<f64>;
pub type Params64 = model::TransformerParams<f64>;
pub type Params32 = model::TransformerParams<f32>;

/// Any error raised by the library, tagged by the phase it came from.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] tensor::ShapeError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    System(#[from] system::SystemError),
    #[error(transparent)]
    Catalog(#[from] catalog::CatalogError),
    #[error(transparent)]
    Lqr(#[from] lqr::LqrError),
    #[error(transparent)]
    Datagen(#[from] datagen::DatagenError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}
