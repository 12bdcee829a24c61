//! File formats and the command-line front end.

pub mod cli;
pub mod config;
pub mod image;
pub mod weights;

pub use config::KeyValues;
pub use image::{read_ppm, write_ppm};
pub use weights::{load_weights, save_weights};
