//! Bidirectional skinning: backward skinning into the canonical pose via the
//! inverse blended bone transform, learnable forward skinning weights with a
//! nearest-vertex prior, and forward skinning into the observation pose.

use nalgebra::{Matrix3, Matrix4, Vector3};
use std::sync::Arc;

use crate::autodiff::{Buf, NodeId, Tape};
use crate::body::PosedBody;
use crate::error::{AvatarError, Result};

/// Floor applied to prior weights before the log inside the forward-weight
/// softmax. Small enough that pure-LBS round trips recover surface points to
/// 1e-6 while still keeping log finite.
pub const W_INIT_FLOOR: f64 = 1e-12;

/// Condition-number limit for the blended backward transform.
pub const BLEND_COND_LIMIT: f64 = 1e8;

/// Blended rigid transform sum w_i B_i as a 4x4, background identity included.
fn blended_matrix(weights: &[f64], mats: &[[f64; 12]]) -> Matrix4<f64> {
    assert_eq!(weights.len(), mats.len(), "weight/transform count mismatch");
    let mut m = Matrix4::zeros();
    for (w, rows) in weights.iter().zip(mats.iter()) {
        if *w != 0.0 {
            for r in 0..3 {
                for c in 0..4 {
                    m[(r, c)] += w * rows[r * 4 + c];
                }
            }
        }
    }
    m[(3, 3)] = 1.0;
    m
}

/// Inverts the blended transform, rejecting near-singular blends.
/// Returns the inverse as 3x4 rows.
pub fn invert_blend(weights: &[f64], mats: &[[f64; 12]]) -> Result<[f64; 12]> {
    let m = blended_matrix(weights, mats);
    let a = Matrix3::from_fn(|r, c| m[(r, c)]);
    let svd = a.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > BLEND_COND_LIMIT {
        return Err(AvatarError::DegenerateBlend { cond });
    }
    let inv = m
        .try_inverse()
        .ok_or(AvatarError::DegenerateBlend { cond })?;
    let mut rows = [0.0; 12];
    for r in 0..3 {
        for c in 0..4 {
            rows[r * 4 + c] = inv[(r, c)];
        }
    }
    Ok(rows)
}

fn apply_rows(rows: &[f64; 12], p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        rows[0] * p.x + rows[1] * p.y + rows[2] * p.z + rows[3],
        rows[4] * p.x + rows[5] * p.y + rows[6] * p.z + rows[7],
        rows[8] * p.x + rows[9] * p.y + rows[10] * p.z + rows[11],
    )
}

/// Rigid part of backward skinning for a batch of target-space points:
/// x = (sum_i w_i B_t^i)^-1 x_t per point, as plain data (poses and lookup
/// weights are not differentiated). The displacement is subtracted on-tape
/// by [`backward_skin_batch`].
pub fn backward_rigid_values(
    x_t: &[Vector3<f64>],
    weights: &[Vec<f64>],
    body_t: &PosedBody,
) -> Result<Vec<Vector3<f64>>> {
    let mats = body_t.blend_mats_with_background();
    x_t.iter()
        .zip(weights.iter())
        .map(|(x, w)| {
            let inv = invert_blend(w, &mats)?;
            Ok(apply_rows(&inv, x))
        })
        .collect()
}

/// Backward skinning on the tape: canonical point x_c = rigid(x_t) - delta_t.
pub fn backward_skin_batch(
    tape: &mut Tape,
    x_t: &[Vector3<f64>],
    weights: &[Vec<f64>],
    body_t: &PosedBody,
    delta_t: Option<NodeId>,
) -> Result<NodeId> {
    let rigid = backward_rigid_values(x_t, weights, body_t)?;
    let n = rigid.len();
    let mut data = vec![0.0; 3 * n];
    for (j, p) in rigid.iter().enumerate() {
        for a in 0..3 {
            data[a * n + j] = p[a];
        }
    }
    let rigid_node = tape.constant(Buf::from_vec(3, n, data));
    Ok(match delta_t {
        Some(d) => tape.sub(rigid_node, d),
        None => rigid_node,
    })
}

/// Single-point backward skinning; displacement given as a plain vector.
pub fn backward_skin(
    x_t: &Vector3<f64>,
    body_t: &PosedBody,
    weights: &[f64],
    delta_t: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let mats = body_t.blend_mats_with_background();
    let inv = invert_blend(weights, &mats)?;
    Ok(apply_rows(&inv, x_t) - delta_t)
}

/// Forward skinning weights: softmax(logits + log(max(w_init, floor))).
/// `logits` is a ((J+1) x N) node or None for the pure prior (ablation and
/// zero-initialized nets give the same result by softmax shift invariance).
pub fn forward_weights_batch(
    tape: &mut Tape,
    w_init: &[Vec<f64>],
    logits: Option<NodeId>,
) -> NodeId {
    let n = w_init.len();
    let nb = w_init[0].len();
    let mut logw = vec![0.0; nb * n];
    for (j, row) in w_init.iter().enumerate() {
        for (i, &w) in row.iter().enumerate() {
            logw[i * n + j] = w.max(W_INIT_FLOOR).ln();
        }
    }
    let prior = tape.constant(Buf::from_vec(nb, n, logw));
    let scores = match logits {
        Some(l) => tape.add(l, prior),
        None => prior,
    };
    tape.softmax_cols(scores, None)
}

/// Single-point forward weights with explicit logits.
pub fn forward_weights(w_init: &[f64], logits: &[f64]) -> Vec<f64> {
    assert_eq!(w_init.len(), logits.len());
    let scores: Vec<f64> = w_init
        .iter()
        .zip(logits.iter())
        .map(|(w, l)| w.max(W_INIT_FLOOR).ln() + l)
        .collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Forward skinning on the tape: x_o = sum_i w_f^i B_o^i x_c + delta_o.
pub fn forward_skin_batch(
    tape: &mut Tape,
    x_c: NodeId,
    w_f: NodeId,
    body_o: &PosedBody,
    delta_o: Option<NodeId>,
) -> NodeId {
    let mats = Arc::new(body_o.blend_mats_with_background());
    let skinned = tape.blend_points(mats, w_f, x_c);
    match delta_o {
        Some(d) => tape.add(skinned, d),
        None => skinned,
    }
}

/// Single-point forward skinning with plain values.
pub fn forward_skin(
    x_c: &Vector3<f64>,
    w_f: &[f64],
    body_o: &PosedBody,
    delta_o: &Vector3<f64>,
) -> Vector3<f64> {
    let mats = body_o.blend_mats_with_background();
    let mut acc = Vector3::zeros();
    for (w, rows) in w_f.iter().zip(mats.iter()) {
        if *w != 0.0 {
            acc += *w * apply_rows(rows, x_c);
        }
    }
    acc + delta_o
}
