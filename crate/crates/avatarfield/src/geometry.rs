//! Canonical geometry: Laplace-CDF density conversion, SDF normals from
//! spatial gradients, and normal transport into posed spaces via blended
//! bone rotations. The SDF network itself is assembled in `model`.

use nalgebra::Vector3;
use std::sync::Arc;

use crate::autodiff::{NodeId, Segment, Tape, UnaryKind};
use crate::error::{AvatarError, Result};

/// Density from signed distance: sigma = (1/b)(1/2 + sign(s)/2 (e^{-|s|/b} - 1)),
/// with sign(0) = 0. `raw_b` parameterizes b = exp(raw) so b stays positive.
pub fn sdf_to_density_node(tape: &mut Tape, s: NodeId, raw_b: Segment) -> NodeId {
    assert_eq!(raw_b.len, 1);
    let raw = tape.param_slice(raw_b);
    let b = tape.unary(UnaryKind::Exp, raw);
    let inv_b = tape.unary(UnaryKind::Recip, b);
    let abs_s = tape.unary(UnaryKind::Abs, s);
    let neg = tape.unary(UnaryKind::Neg, abs_s);
    let scaled = tape.broadcast_mul_scalar(neg, inv_b);
    let e = tape.unary(UnaryKind::Exp, scaled);
    let em1 = tape.add_const(e, -1.0);
    let sign = tape.unary(UnaryKind::Signum, s);
    let se = tape.mul(sign, em1);
    let half = tape.mul_const(se, 0.5);
    let inner = tape.add_const(half, 0.5);
    tape.broadcast_mul_scalar(inner, inv_b)
}

/// Value-side density law.
pub fn sdf_to_density(s: f64, b: f64) -> f64 {
    assert!(b > 0.0, "density scale must be positive");
    let sign = if s == 0.0 { 0.0 } else { s.signum() };
    (0.5 + 0.5 * sign * ((-s.abs() / b).exp() - 1.0)) / b
}

/// Unit normal from a spatial SDF gradient batch (3 x N).
pub fn sdf_normal_from_gradient(tape: &mut Tape, grad: NodeId) -> Result<NodeId> {
    tape.normalize_cols(grad)
}

/// Transports canonical normals with blended bone rotations and renormalizes:
/// n = normalize(sum_i w_i R_i n_c).
pub fn transport_normal_batch(
    tape: &mut Tape,
    n_c: NodeId,
    w: NodeId,
    rots: Arc<Vec<[f64; 9]>>,
) -> Result<NodeId> {
    let blended = tape.blend_vecs(rots, w, n_c);
    tape.normalize_cols(blended)
}

/// Value-side normal transport.
pub fn transport_normal(n_c: &Vector3<f64>, w: &[f64], rots: &[[f64; 9]]) -> Result<Vector3<f64>> {
    assert_eq!(w.len(), rots.len());
    let mut acc = Vector3::zeros();
    for (wi, r) in w.iter().zip(rots.iter()) {
        if *wi != 0.0 {
            acc += *wi
                * Vector3::new(
                    r[0] * n_c.x + r[1] * n_c.y + r[2] * n_c.z,
                    r[3] * n_c.x + r[4] * n_c.y + r[5] * n_c.z,
                    r[6] * n_c.x + r[7] * n_c.y + r[8] * n_c.z,
                );
        }
    }
    let nm = acc.norm();
    if nm < 1e-8 {
        return Err(AvatarError::DegenerateNormal { norm: nm });
    }
    Ok(acc / nm)
}
