//! Reverse-mode automatic differentiation over flat parameter vectors:
//! batched tape, parameter store, and a finite-difference checker.

pub mod buf;
pub mod check;
pub mod kernels;
pub mod params;
pub mod tape;

pub use buf::Buf;
pub use check::finite_diff_check;
pub use params::{Init, ParamStore, Segment};
pub use tape::{
    forward_backward, sigmoid, softplus, BinaryKind, CompSample, HashGridCfg, MapSrc, NodeId,
    RayComp, Tape, UnaryKind,
};
