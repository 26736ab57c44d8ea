//! Cube ingestion, normalization, patches and splits.

pub mod cube;
pub mod patch;
pub mod split;
pub mod synth;

pub use cube::{label_map_bytes, load_cube, read_label_map, save_cube, HsiCube};
pub use patch::{extract_batch, extract_patch, normalize};
pub use split::{stratified_split, SampleSplit};
pub use synth::{class_signature, synthesize_cube, SynthSpec};
