pub mod bench;
pub mod clustering;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rendering;
pub mod scenegen;
pub mod seeds;
pub mod tracking;
pub mod training;

pub use error::{LiftError, Result};
