//! Animatable human-avatar rendering pipeline on synthetic articulated-body
//! scenes: bidirectional skinning fields, a canonical SDF body, pixel-aligned
//! appearance blending, shading modulation, volume rendering, and the full
//! training loss stack, all differentiated end to end on the CPU.

pub mod autodiff;
pub mod appearance;
pub mod body;
pub mod camera;
pub mod dataset;
pub mod deform;
pub mod encodings;
pub mod nn;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod optim;
pub mod shading;
pub mod renderer;
pub mod par;

pub use error::{AvatarError, Result};
