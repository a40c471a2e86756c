pub mod autograd;
pub mod captions;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod latent;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod preference;
pub mod rng;
pub mod schedules;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
