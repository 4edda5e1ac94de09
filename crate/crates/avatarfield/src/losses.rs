//! Training losses: color (l1 + frozen perceptual proxy), mask, normal
//! smoothness, SDF regularization (Eikonal + min-SDF mask), and displacement
//! magnitude, each pre-weighted by its balance factor.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Buf, NodeId, Tape, UnaryKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_vgg: f64,
    pub lambda_m: f64,
    pub lambda_n1: f64,
    pub lambda_n2: f64,
    pub lambda_s1: f64,
    pub lambda_s2: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 10.0,
            lambda_vgg: 0.5,
            lambda_m: 1e-3,
            lambda_n1: 1e-2,
            lambda_n2: 1e-5,
            lambda_s1: 1e-1,
            lambda_s2: 1e-4,
            lambda_d: 1e-2,
        }
    }
}

/// Sharpness of the min-SDF mask sigmoid, growing with training progress.
pub fn rho_schedule(iteration: usize) -> f64 {
    50.0 * (1.0 + iteration as f64 / 1000.0)
}

/// Per-term loss values for one iteration; `total` is the weighted sum
/// (weights are already folded into each term).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub color_l1: f64,
    pub color_proxy: f64,
    pub mask: f64,
    pub normal_smooth: f64,
    pub normal_vertex: f64,
    pub eikonal: f64,
    pub min_sdf_mask: f64,
    pub displacement: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.color_l1,
            self.color_proxy,
            self.mask,
            self.normal_smooth,
            self.normal_vertex,
            self.eikonal,
            self.min_sdf_mask,
            self.displacement,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Frozen two-layer random-filter conv features standing in for a pretrained
/// perceptual network: non-pixelwise image comparison with fixed kernels.
#[derive(Debug, Clone)]
pub struct PerceptualProxy {
    k0: Arc<Vec<f64>>,
    k1: Arc<Vec<f64>>,
    pub channels: usize,
}

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let channels = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f7879);
        let mut draw = |len: usize| -> Arc<Vec<f64>> {
            let bound = (6.0 / (9.0 * channels as f64)).sqrt();
            Arc::new((0..len).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        PerceptualProxy {
            k0: draw(channels * 3 * 9),
            k1: draw(channels * channels * 9),
            channels,
        }
    }

    /// Feature map of a (3 x h*w) image node.
    pub fn features(&self, tape: &mut Tape, img: NodeId, h: usize, w: usize) -> NodeId {
        let z0 = tape.conv2d_fixed(self.k0.clone(), img, 3, self.channels, h, w, 1);
        let a0 = tape.unary(UnaryKind::Tanh, z0);
        let z1 = tape.conv2d_fixed(self.k1.clone(), a0, self.channels, self.channels, h, w, 1);
        tape.unary(UnaryKind::Tanh, z1)
    }
}

/// Color loss over a rendered patch: weighted mean l1 plus the perceptual
/// proxy (mean squared feature difference). Returns (l1_term, proxy_term).
pub fn color_loss(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Buf,
    h: usize,
    w: usize,
    proxy: &PerceptualProxy,
    weights: &LossWeights,
) -> (NodeId, NodeId) {
    let pb = tape.val(pred);
    assert_eq!(pb.rows, 3, "patch must be rgb");
    assert_eq!(pb.cols, h * w, "patch shape mismatch");
    assert!(gt.rows == 3 && gt.cols == h * w, "ground-truth patch shape mismatch");
    let gt_node = tape.constant(gt.clone());
    let diff = tape.sub(pred, gt_node);
    let absd = tape.unary(UnaryKind::Abs, diff);
    let l1 = tape.mean_all(absd);
    let l1 = tape.mul_const(l1, weights.lambda_c);

    let fp = proxy.features(tape, pred, h, w);
    let fg = proxy.features(tape, gt_node, h, w);
    let fdiff = tape.sub(fp, fg);
    let fsq = tape.unary(UnaryKind::Square, fdiff);
    let proxy_term = tape.mean_all(fsq);
    let proxy_term = tape.mul_const(proxy_term, weights.lambda_vgg);
    (l1, proxy_term)
}

/// Mask loss: lambda_M * sum (M - M_hat)^2 over rays.
pub fn mask_loss(tape: &mut Tape, m_pred: NodeId, m_gt: &[f64], weights: &LossWeights) -> NodeId {
    let mb = tape.val(m_pred);
    assert_eq!(mb.rows, 1);
    assert_eq!(mb.cols, m_gt.len());
    let gt = tape.constant(Buf::from_vec(1, m_gt.len(), m_gt.to_vec()));
    let diff = tape.sub(m_pred, gt);
    let sq = tape.unary(UnaryKind::Square, diff);
    let s = tape.sum_all(sq);
    tape.mul_const(s, weights.lambda_m)
}

/// Normal smoothness: lambda * sum ||n(x) - n(x + eps)||^2 over a point set.
pub fn normal_smoothness_loss(
    tape: &mut Tape,
    normals: NodeId,
    normals_perturbed: NodeId,
    lambda: f64,
) -> NodeId {
    let diff = tape.sub(normals, normals_perturbed);
    let sq = tape.unary(UnaryKind::Square, diff);
    let s = tape.sum_all(sq);
    tape.mul_const(s, lambda)
}

/// Eikonal term: lambda_S1 * sum (||grad|| - 1)^2 over sample points.
/// `grad` is a (3 x N) spatial-gradient batch.
pub fn eikonal_loss(tape: &mut Tape, grad: NodeId, weights: &LossWeights) -> NodeId {
    let sq = tape.unary(UnaryKind::Square, grad);
    let sums = tape.sum_over_rows(sq);
    // Guarded sqrt: keeps the derivative finite if a gradient vanishes.
    let shifted = tape.add_const(sums, 1e-24);
    let norms = tape.unary(UnaryKind::Sqrt, shifted);
    let dev = tape.add_const(norms, -1.0);
    let dev2 = tape.unary(UnaryKind::Square, dev);
    let s = tape.sum_all(dev2);
    tape.mul_const(s, weights.lambda_s1)
}

/// Min-SDF mask term: lambda_S2 * sum BCE(sigmoid(-rho s_min), M_hat) over
/// rays, computed in the numerically stable softplus form.
pub fn min_sdf_mask_loss(
    tape: &mut Tape,
    s_min: NodeId,
    m_gt: &[f64],
    rho: f64,
    weights: &LossWeights,
) -> NodeId {
    let sb = tape.val(s_min);
    assert_eq!(sb.rows, 1);
    assert_eq!(sb.cols, m_gt.len());
    // BCE(sigmoid(-rho s), y) = softplus((2y - 1) rho s) for y in {0, 1}.
    let coef: Vec<f64> = m_gt.iter().map(|&y| (2.0 * y - 1.0) * rho).collect();
    let coef = tape.constant(Buf::from_vec(1, m_gt.len(), coef));
    let z = tape.mul(s_min, coef);
    let bce = tape.unary(UnaryKind::Softplus, z);
    let s = tape.sum_all(bce);
    tape.mul_const(s, weights.lambda_s2)
}

/// Displacement regularization: lambda_D * (sum ||d_t|| + sum ||d_o||),
/// l2 norms with a tiny guard so the gradient at zero displacement is zero.
pub fn displacement_loss(tape: &mut Tape, deltas: &[NodeId], weights: &LossWeights) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &d in deltas {
        let sq = tape.unary(UnaryKind::Square, d);
        let sums = tape.sum_over_rows(sq);
        let shifted = tape.add_const(sums, 1e-24);
        let norms = tape.unary(UnaryKind::Sqrt, shifted);
        let s = tape.sum_all(norms);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("at least one displacement set");
    tape.mul_const(total, weights.lambda_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn tape_store() -> ParamStore {
        ParamStore::new(0)
    }

    fn wob(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as f64) * 0.7177 + salt as f64) * 12.9898).sin() * 0.5 + 0.5)
            .collect()
    }

    #[test]
    fn identical_patches_give_zero_color_loss() {
        let p = tape_store();
        let mut t = Tape::new(&p);
        let (h, w) = (6, 6);
        let data = wob(3 * h * w, 1);
        let gt = Buf::from_vec(3, h * w, data.clone());
        let pred = t.constant(gt.clone());
        let proxy = PerceptualProxy::new(7);
        let (l1, pr) = color_loss(&mut t, pred, &gt, h, w, &proxy, &LossWeights::default());
        assert_eq!(t.scalar_value(l1), 0.0);
        assert_eq!(t.scalar_value(pr), 0.0);
    }

    #[test]
    fn constant_offset_gives_lambda_c_times_offset() {
        let p = tape_store();
        let mut t = Tape::new(&p);
        let (h, w) = (4, 4);
        let base = wob(3 * h * w, 2).iter().map(|v| v * 0.5).collect::<Vec<_>>();
        let gt = Buf::from_vec(3, h * w, base.clone());
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.1).collect();
        let pred = t.constant(Buf::from_vec(3, h * w, shifted));
        let proxy = PerceptualProxy::new(7);
        let (l1, _) = color_loss(&mut t, pred, &gt, h, w, &proxy, &LossWeights::default());
        assert!((t.scalar_value(l1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn proxy_is_permutation_sensitive() {
        // Shuffling pixels preserves the l1-per-pixel histogram but must
        // strictly increase the proxy term.
        let p = tape_store();
        let mut t = Tape::new(&p);
        let (h, w) = (6, 6);
        let data = wob(3 * h * w, 3);
        let gt = Buf::from_vec(3, h * w, data.clone());
        // Deterministic shuffle: reverse pixel order per channel.
        let mut shuffled = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for j in 0..h * w {
                shuffled[c * h * w + j] = data[c * h * w + (h * w - 1 - j)];
            }
        }
        let pred = t.constant(Buf::from_vec(3, h * w, shuffled));
        let proxy = PerceptualProxy::new(7);
        let (_, pr) = color_loss(&mut t, pred, &gt, h, w, &proxy, &LossWeights::default());
        assert!(t.scalar_value(pr) > 1e-6, "proxy term {}", t.scalar_value(pr));
    }

    #[test]
    fn mask_loss_examples() {
        let p = tape_store();
        let mut t = Tape::new(&p);
        let w = LossWeights::default();
        // Perfect mask.
        let m = t.constant(Buf::from_vec(1, 3, vec![1.0, 0.0, 1.0]));
        let l = mask_loss(&mut t, m, &[1.0, 0.0, 1.0], &w);
        assert_eq!(t.scalar_value(l), 0.0);
        // M = 0.5 against 1 over 4 rays: 4 * 0.25 * lambda_m.
        let m = t.constant(Buf::from_vec(1, 4, vec![0.5; 4]));
        let l = mask_loss(&mut t, m, &[1.0; 4], &w);
        assert!((t.scalar_value(l) - w.lambda_m).abs() < 1e-15);
        // All-background ray with zero density.
        let m = t.constant(Buf::from_vec(1, 2, vec![0.0, 0.0]));
        let l = mask_loss(&mut t, m, &[0.0, 0.0], &w);
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn plane_normals_give_zero_smoothness_loss() {
        let p = tape_store();
        let mut t = Tape::new(&p);
        // Constant normal field: n(x) == n(x + eps).
        let n = t.constant(Buf::from_vec(3, 5, vec![0.0; 15]));
        let l = normal_smoothness_loss(&mut t, n, n, 1e-2);
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn sphere_normal_smoothness_matches_tangential_displacement() {
        // Unit sphere at radius 1: n(x) - n(x+eps) ~ eps_tangential.
        let p = tape_store();
        let mut t = Tape::new(&p);
        let x = nalgebra::Vector3::new(1.0, 0.0, 0.0);
        let eps = nalgebra::Vector3::new(0.0, 0.006, -0.008); // wholly tangential
        let n0 = x.normalize();
        let n1 = (x + eps).normalize();
        let a = t.constant(Buf::from_vec(3, 1, n0.iter().cloned().collect()));
        let b = t.constant(Buf::from_vec(3, 1, n1.iter().cloned().collect()));
        let l = normal_smoothness_loss(&mut t, a, b, 1.0);
        let got = t.scalar_value(l);
        // Exact geometric oracle.
        let exact = (n0 - n1).norm_squared();
        assert!((got - exact).abs() < 1e-12);
        // First-order prediction |eps_tangential|^2 holds to O(|eps|^3).
        let expect = eps.norm_squared();
        assert!(
            (got - expect).abs() < 1e-3 * expect,
            "got {got}, expected ~{expect}"
        );
    }

    #[test]
    fn unit_gradient_field_has_zero_eikonal() {
        let p = tape_store();
        let mut t = Tape::new(&p);
        let g = t.constant(Buf::from_vec(
            3,
            4,
            vec![
                1.0, 0.0, 0.6, 0.0, //
                0.0, 1.0, 0.8, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        ));
        let l = eikonal_loss(&mut t, g, &LossWeights::default());
        assert!(t.scalar_value(l) < 1e-20);
    }

    #[test]
    fn min_sdf_bce_examples() {
        let p = tape_store();
        let w = LossWeights::default();
        let rho = rho_schedule(0);
        let mut t = Tape::new(&p);
        // s_min = 0: BCE = ln 2 per ray regardless of label.
        let s = t.constant(Buf::from_vec(1, 2, vec![0.0, 0.0]));
        let l = min_sdf_mask_loss(&mut t, s, &[1.0, 0.0], rho, &w);
        let expect = w.lambda_s2 * 2.0 * std::f64::consts::LN_2;
        assert!((t.scalar_value(l) - expect).abs() < 1e-12);
        // Foreground ray with deeply negative s_min saturates to ~0.
        let s = t.constant(Buf::from_vec(1, 1, vec![-10.0 / rho]));
        let l = min_sdf_mask_loss(&mut t, s, &[1.0], rho, &w);
        assert!(t.scalar_value(l) < w.lambda_s2 * 1e-4);
    }

    #[test]
    fn displacement_loss_examples() {
        let p = tape_store();
        let w = LossWeights::default();
        let mut t = Tape::new(&p);
        // All zero.
        let d = t.constant(Buf::zeros(3, 4));
        let l = displacement_loss(&mut t, &[d], &w);
        assert!(t.scalar_value(l) < 1e-12);
        // Single (3,4,0) displacement: lambda_d * 5.
        let d = t.constant(Buf::from_vec(3, 1, vec![3.0, 4.0, 0.0]));
        let l = displacement_loss(&mut t, &[d], &w);
        assert!((t.scalar_value(l) - 5.0 * w.lambda_d).abs() < 1e-9);
        // Homogeneity: scaling displacements by c scales the loss by c.
        let d1 = t.constant(Buf::from_vec(3, 2, vec![0.3, -0.1, 0.4, 0.2, 0.0, 0.7]));
        let l1 = displacement_loss(&mut t, &[d1], &w);
        let d3 = t.constant(Buf::from_vec(
            3,
            2,
            vec![0.9, -0.3, 1.2, 0.6, 0.0, 2.1],
        ));
        let l3 = displacement_loss(&mut t, &[d3], &w);
        assert!((t.scalar_value(l3) - 3.0 * t.scalar_value(l1)).abs() < 1e-9);
    }

    #[test]
    fn rho_schedule_is_nondecreasing() {
        let mut prev = 0.0;
        for it in (0..20_000).step_by(250) {
            let r = rho_schedule(it);
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(rho_schedule(0), 50.0);
        assert_eq!(rho_schedule(1000), 100.0);
    }

    #[test]
    fn displacement_gradient_at_zero_is_finite() {
        let mut p = ParamStore::new(9);
        let seg = p.register("d", 6, crate::autodiff::Init::Zeros);
        let mut t = Tape::new(&p);
        let d = t.param_slice(seg);
        let d = t.reshape(d, 3, 2);
        let l = displacement_loss(&mut t, &[d], &LossWeights::default());
        let g = t.backward(l).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }
}
