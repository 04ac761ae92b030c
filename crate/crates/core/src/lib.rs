pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod encoding;
pub mod error;
pub mod image;
pub mod linalg;
pub mod mesh;
pub mod metrics;
pub mod network;
pub mod ntk;
pub mod regress2d;
pub mod surface3d;

pub use error::{Error, Result};
