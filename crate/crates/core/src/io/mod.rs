//! File formats: PPM images, `key = value` configs and CSV traces.

pub mod config;
pub mod csv;
pub mod ppm;

pub use config::{parse as parse_config, render as render_config};
pub use ppm::{read_ppm, write_ppm, decode_ppm, encode_ppm};
