//! Sparse deformable Mamba for hyperspectral image classification.
//!
//! Everything runs on a small reverse-mode autograd tape ([`tensor`]).
//! Layers are plain functions over tape variables; weights live in
//! ordinary structs and are recorded on a fresh tape for every pass.

mod binio;
pub mod cli;
pub mod data;
pub mod error;
pub mod mamba;
pub mod model;
pub mod params;
pub mod sds;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
