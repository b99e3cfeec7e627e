//! Motion-decoupled gesture generation toolkit.

mod binio;
pub mod audio;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod motion;
pub mod sampler;
pub mod scalar;
pub mod signal;
pub mod tps;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Point = tps::Point2<f64>;
pub type Tps = tps::TpsTransform<f64>;
pub type Tps32 = tps::TpsTransform<f32>;
pub type Flow = flow::FlowField<f64>;
pub type Flow32 = flow::FlowField<f32>;
pub type Image = image::RasterImage<f64>;
pub type Sequence = motion::MotionSequence<f64>;
pub type Sequence32 = motion::MotionSequence<f32>;
pub type Schedule = diffusion::DiffusionSchedule<f64>;
pub type Mlp = diffusion::MlpDenoiser<f64>;
pub type Mlp32 = diffusion::MlpDenoiser<f32>;
pub type Clip = audio::AudioClip<f64>;
pub type Features = audio::AudioCondition<f64>;
pub type Summary = metrics::GaussianSummary<f64>;
