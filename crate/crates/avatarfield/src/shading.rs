//! Pose- and view-dependent scalar shading factor modulating blended colors:
//! alpha = 2 sigmoid(raw) in (0, 2), identity at zero initialization.

use crate::autodiff::{NodeId, Tape, UnaryKind};

/// Maps raw shading logits (1 x N) to factors in (0, 2).
pub fn shading_factor(tape: &mut Tape, raw: NodeId) -> NodeId {
    let s = tape.unary(UnaryKind::Sigmoid, raw);
    tape.mul_const(s, 2.0)
}

/// Modulates blended colors by the per-point scalar factor and clamps the
/// result into [0, 1].
pub fn modulate(tape: &mut Tape, c_o: NodeId, alpha: NodeId) -> NodeId {
    let scaled = tape.broadcast_mul_row(c_o, alpha);
    tape.unary(UnaryKind::ClampMax1, scaled)
}

/// Value-side modulation.
pub fn modulate_values(c_o: &[f64; 3], alpha: f64) -> [f64; 3] {
    [
        (c_o[0] * alpha).min(1.0),
        (c_o[1] * alpha).min(1.0),
        (c_o[2] * alpha).min(1.0),
    ]
}
