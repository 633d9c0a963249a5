//! Image and parameter-file I/O. Linear light everywhere internally; sRGB
//! conversion happens only at PNG boundaries.

mod pfm;
mod png;

pub use pfm::{load_pfm, save_pfm};
pub use png::{linear_to_srgb, load_png_linear, save_png_srgb, srgb_to_linear};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("pfm: {0}")]
    Pfm(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
