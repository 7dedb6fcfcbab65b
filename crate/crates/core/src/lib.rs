//! Skip-attention point cloud completion: a hierarchical set-abstraction
//! encoder, a folding decoder bridged to it by attention, Chamfer/EMD training
//! losses, and the small autodiff engine they are written in.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
