//! Cross-view localization: a BEV encoder and rendering head turn
//! trinocular camera windows into top-down images, which are registered
//! against a georeferenced aerial raster by normalized cross-correlation.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod mapstore;
pub mod model;
pub mod nncore;
pub mod registration;
pub mod renderer;
pub mod training;

pub use error::{Error, Result};
