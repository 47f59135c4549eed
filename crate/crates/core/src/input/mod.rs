//! Image and text preprocessing into token sequences.

pub mod image;
pub mod sequence;
pub mod shuffle;
pub mod tiling;
pub mod tokenizer;

pub use image::RawImage;
pub use sequence::{assemble_prompt, assemble_sample, random_distill_sample, ImageBlock, Modality, TokenSequence};
pub use shuffle::{pixel_shuffle, pixel_unshuffle, shuffle_indices};
pub use tiling::{dyn_process, patchify, select_grid, ImagePatches, TileSet};
pub use tokenizer::{detokenize, tokenize};
