//! Synthetic dataset generation, PGM I/O, manifests and splits.

pub mod manifest;
pub mod pgm;
pub mod synth;

pub use manifest::{load_manifest, load_sample, split, LoadedSample, Protocol, Sample, Split, SplitTag};
pub use pgm::{read_pgm, write_pgm, GrayImage};
pub use synth::{gen_dataset, SynthConfig, TextureProfile};
