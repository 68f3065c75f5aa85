//! Stereo-guided fence segmentation.
//!
//! The pipeline runs Canny on both frames of a stereo pair, finds the fence
//! parallax by scoring Fourier alignment of dual-subtracted edge maps, and
//! emits a guidance mask. A small convolutional segmenter consumes the image
//! (optionally with the guidance mask) and is trained with L1 plus the
//! directional connectivity loss on synthetic pseudo-stereo data.

pub mod dcl;
pub mod edges;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod imagecore;
pub mod segmenter;
pub mod synth;

pub use error::{Error, Result};
pub use imagecore::{BinaryMask, Field, GrayImage};
