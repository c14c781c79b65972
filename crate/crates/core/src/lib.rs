pub mod conv;
pub mod error;
pub mod harness;
pub mod io;
pub mod learning;
pub mod optimizer;
pub mod physics;
pub mod projector;
pub mod recon;
pub mod types;

pub use error::{Error, Result};
pub use types::{ChannelPair, FeatureStack, FilterBank, Grid, Image, Sinogram, SinogramKind};
