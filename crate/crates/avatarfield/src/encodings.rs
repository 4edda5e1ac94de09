//! Positional encodings: Fourier features, multiresolution hash-grid
//! lookups, and the relative spatial keypoint encoding for observation-space
//! points. All builders record onto the tape so gradients reach both the
//! encoded inputs and any learnable tables.

use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Buf, HashGridCfg, NodeId, Segment, Tape, UnaryKind};
use crate::camera::Camera;
use crate::error::{AvatarError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub bands: usize,
    pub include_input: bool,
}

impl FourierConfig {
    pub fn new(bands: usize) -> Self {
        FourierConfig {
            bands,
            include_input: false,
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        in_dim * (2 * self.bands + usize::from(self.include_input))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointEncodingConfig {
    /// Gaussian bandwidth in canonical length units.
    pub eta: f64,
    /// Fourier bands applied to the per-joint depth difference.
    pub bands: usize,
}

impl Default for KeypointEncodingConfig {
    fn default() -> Self {
        KeypointEncodingConfig { eta: 0.1, bands: 6 }
    }
}

impl KeypointEncodingConfig {
    pub fn out_dim(&self, joints: usize) -> usize {
        joints * 2 * self.bands
    }
}

/// Fourier-encodes a (d x N) node: per coordinate, interleaved
/// [sin(2^l pi x); cos(2^l pi x)] for l = 0..bands, optionally with the raw
/// input rows appended.
pub fn fourier_encode(tape: &mut Tape, x: NodeId, cfg: &FourierConfig) -> NodeId {
    let enc = tape.fourier(x, cfg.bands);
    if cfg.include_input {
        tape.concat_rows(&[enc, x])
    } else {
        enc
    }
}

/// Value-side Fourier encoding for data-path consumers.
pub fn fourier_encode_values(x: &[f64], cfg: &FourierConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.out_dim(x.len()));
    for &v in x {
        for l in 0..cfg.bands {
            let arg = (1u64 << l) as f64 * std::f64::consts::PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    if cfg.include_input {
        out.extend_from_slice(x);
    }
    out
}

/// Hash-grid encoding of world-space canonical points (3 x N).
pub fn hashgrid_encode(
    tape: &mut Tape,
    x_c: NodeId,
    table: Segment,
    cfg: &Arc<HashGridCfg>,
    with_jvp: bool,
) -> NodeId {
    tape.hash_encode(x_c, table, cfg.clone(), with_jvp)
}

/// Relative spatial keypoint encoding for one input view.
///
/// For each joint k: the block is w_k * gamma(delta_k) with
/// delta_k = z(j_k) - z(x_o) (camera depths) and
/// w_k = exp(-|j_k - x_o|^2 / (2 eta^2)). Output is (J * 2 * bands) x N.
///
/// `strict` enforces the in-front-of-camera precondition and errors when any
/// point has depth <= 0; the batched pipeline disables it and masks invalid
/// views downstream instead.
pub fn keypoint_encode(
    tape: &mut Tape,
    x_o: NodeId,
    joints: &[Vector3<f64>],
    camera: &Camera,
    cfg: &KeypointEncodingConfig,
    strict: bool,
) -> Result<NodeId> {
    assert!(cfg.eta > 0.0, "keypoint bandwidth must be positive");
    let n = tape.val(x_o).cols;
    // Camera-space transform of the batch via a single-channel rigid blend.
    let r = camera.rotation_matrix();
    let t = camera.translation_vec();
    let mat = Arc::new(vec![[
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0], //
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1], //
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
    ]]);
    let ones = tape.constant(Buf::from_vec(1, n, vec![1.0; n]));
    let cam_pts = tape.blend_points(mat, ones, x_o);
    let depth = tape.slice_rows(cam_pts, 2, 1);
    if strict {
        if let Some(j) = tape.val(depth).data.iter().position(|&z| z <= 0.0) {
            return Err(AvatarError::validation(format!(
                "point {j} is at or behind the camera plane (depth {})",
                tape.val(depth).data[j]
            )));
        }
    }
    let inv_two_eta2 = -1.0 / (2.0 * cfg.eta * cfg.eta);
    let mut blocks = Vec::with_capacity(joints.len());
    for jk in joints {
        let (_, _, jz) = camera.project(jk);
        // delta = z(joint) - z(point)
        let neg_depth = tape.unary(UnaryKind::Neg, depth);
        let delta = tape.add_const(neg_depth, jz);
        let gamma = tape.fourier(delta, cfg.bands);
        // Squared distance to the joint.
        let jconst = tape.constant(Buf::from_vec(
            3,
            n,
            (0..3 * n).map(|i| jk[i / n]).collect(),
        ));
        let diff = tape.sub(x_o, jconst);
        let sq = tape.unary(UnaryKind::Square, diff);
        let d2 = tape.sum_over_rows(sq);
        let scaled = tape.mul_const(d2, inv_two_eta2);
        let w = tape.unary(UnaryKind::Exp, scaled);
        blocks.push(tape.broadcast_mul_row(gamma, w));
    }
    Ok(tape.concat_rows(&blocks))
}
