//! Text-conditioned generation of exposure brackets and their fusion into
//! linear HDR images.

mod error;

pub mod dit;
pub mod fusion;
pub mod io;
pub mod linear_image;
pub mod metrics;
pub mod radiance_codec;
pub mod scene;

pub use error::{Error, Result};
