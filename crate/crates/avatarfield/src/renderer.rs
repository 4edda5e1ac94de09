//! Ray generation, bounding-box clipping, stratified and importance
//! sampling, and volume-rendering accumulation.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;

/// Margin added around the posed body box before slab clipping.
pub const BOX_MARGIN: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub near: f64,
    pub far: f64,
    /// False when the ray misses the body box: composited as background.
    pub hits_box: bool,
    /// Pixel coords (x, y) in the full image.
    pub pixel: (usize, usize),
}

/// Slab intersection with an axis-aligned box. Returns (near, far) with
/// near >= 1e-4 when the box is hit in front of the origin.
pub fn ray_box_intersect(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    box_min: &[f64; 3],
    box_max: &[f64; 3],
) -> Option<(f64, f64)> {
    let mut t0 = 1e-4f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < box_min[a] || origin[a] > box_max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((box_min[a] - origin[a]) * inv, (box_max[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// One ray per pixel of a square patch, clipped against the body box
/// expanded by [`BOX_MARGIN`]. Pixels walk the patch in row-major order.
pub fn generate_patch_rays(
    camera: &Camera,
    patch_corner: (usize, usize),
    patch_size: usize,
    body_box: &([f64; 3], [f64; 3]),
) -> Vec<Ray> {
    let mut expanded = *body_box;
    for a in 0..3 {
        expanded.0[a] -= BOX_MARGIN;
        expanded.1[a] += BOX_MARGIN;
    }
    let mut rays = Vec::with_capacity(patch_size * patch_size);
    for dy in 0..patch_size {
        for dx in 0..patch_size {
            let px = patch_corner.0 + dx;
            let py = patch_corner.1 + dy;
            let (origin, dir) = camera.pixel_ray(px as f64, py as f64);
            let hit = ray_box_intersect(&origin, &dir, &expanded.0, &expanded.1);
            let (near, far, hits_box) = match hit {
                Some((n, f)) => (n, f, true),
                None => (0.0, 0.0, false),
            };
            rays.push(Ray {
                origin,
                dir,
                near,
                far,
                hits_box,
                pixel: (px, py),
            });
        }
    }
    rays
}

/// One jittered sample per equal-length bin; without an rng the samples sit
/// at bin midpoints.
pub fn stratified_coarse(near: f64, far: f64, n: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    assert!(near < far, "stratified sampling requires near < far");
    assert!(n > 0);
    let bin = (far - near) / n as f64;
    match rng {
        Some(r) => (0..n)
            .map(|i| near + (i as f64 + r.gen_range(0.0..1.0)) * bin)
            .collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * bin).collect(),
    }
}

/// Inverse-CDF samples of the piecewise-constant coarse weight distribution.
/// Bin edges are midpoints between coarse depths, extended to [near, far].
/// All-zero weights fall back to stratified sampling.
pub fn importance_fine(
    coarse_depths: &[f64],
    coarse_weights: &[f64],
    near: f64,
    far: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    assert_eq!(coarse_depths.len(), coarse_weights.len());
    let k = coarse_depths.len();
    let total: f64 = coarse_weights.iter().map(|w| w.max(0.0)).sum();
    if total <= 0.0 || k == 0 {
        return stratified_coarse(near, far, n, Some(rng));
    }
    let mut edges = Vec::with_capacity(k + 1);
    edges.push(near);
    for i in 1..k {
        edges.push(0.5 * (coarse_depths[i - 1] + coarse_depths[i]));
    }
    edges.push(far);
    let mut cdf = Vec::with_capacity(k + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in coarse_weights {
        acc += w.max(0.0) / total;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Stratified u keeps the inverse-CDF samples well spread.
        let u = (i as f64 + rng.gen_range(0.0..1.0)) / n as f64;
        let mut bin = cdf.partition_point(|&c| c <= u).saturating_sub(1);
        bin = bin.min(k - 1);
        let (c0, c1) = (cdf[bin], cdf[bin + 1]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        out.push(edges[bin] + t * (edges[bin + 1] - edges[bin]));
    }
    out
}

/// Merges and sorts coarse and fine depths.
pub fn merge_depths(coarse: &[f64], fine: &[f64]) -> Vec<f64> {
    let mut all = Vec::with_capacity(coarse.len() + fine.len());
    all.extend_from_slice(coarse);
    all.extend_from_slice(fine);
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all
}

/// Value-side volume rendering: alpha compositing over ascending depths with
/// delta_k = t_{k+1} - t_k and a final delta of far - t_n. Returns (color,
/// accumulated mask).
pub fn composite_values(
    depths: &[f64],
    sigmas: &[f64],
    colors: &[[f64; 3]],
    far: f64,
) -> ([f64; 3], f64) {
    assert_eq!(depths.len(), sigmas.len());
    assert_eq!(depths.len(), colors.len());
    let n = depths.len();
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut m = 0.0;
    for i in 0..n {
        let delta = if i + 1 < n {
            depths[i + 1] - depths[i]
        } else {
            (far - depths[i]).max(0.0)
        };
        let alpha = 1.0 - (-sigmas[i] * delta).exp();
        let w = t * alpha;
        for r in 0..3 {
            c[r] += w * colors[i][r];
        }
        m += w;
        t *= 1.0 - alpha;
    }
    (c, m)
}

/// Dense-quadrature oracle for continuous density/color fields along a ray
/// parameterized by depth: alpha compositing with `steps` uniform substeps.
pub fn quadrature_oracle(
    near: f64,
    far: f64,
    steps: usize,
    sigma_fn: &dyn Fn(f64) -> f64,
    color_fn: &dyn Fn(f64) -> [f64; 3],
) -> ([f64; 3], f64) {
    let dt = (far - near) / steps as f64;
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut m = 0.0;
    for i in 0..steps {
        let mid = near + (i as f64 + 0.5) * dt;
        let alpha = 1.0 - (-sigma_fn(mid) * dt).exp();
        let w = t * alpha;
        let col = color_fn(mid);
        for r in 0..3 {
            c[r] += w * col[r];
        }
        m += w;
        t *= 1.0 - alpha;
    }
    (c, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn probe_camera() -> Camera {
        Camera::ring_camera(Vector3::new(0.0, 0.9, 0.0), 2.5, 0.3, 0.5, 70.0, 64, 64)
    }

    fn unit_box() -> ([f64; 3], [f64; 3]) {
        ([-0.5, 0.4, -0.5], [0.5, 1.4, 0.5])
    }

    #[test]
    fn center_ray_hits_box() {
        let cam = probe_camera();
        let rays = generate_patch_rays(&cam, (31, 31), 1, &unit_box());
        assert!(rays[0].hits_box);
        assert!(rays[0].near < rays[0].far);
    }

    #[test]
    fn ray_parallel_outside_face_is_background() {
        let o = Vector3::new(0.0, 5.0, -3.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert!(ray_box_intersect(&o, &d, &[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0]).is_none());
    }

    #[test]
    fn patch_32_gives_1024_rays() {
        let cam = probe_camera();
        let rays = generate_patch_rays(&cam, (10, 10), 32, &unit_box());
        assert_eq!(rays.len(), 1024);
        // Row-major order.
        assert_eq!(rays[0].pixel, (10, 10));
        assert_eq!(rays[1].pixel, (11, 10));
        assert_eq!(rays[32].pixel, (10, 11));
    }

    #[test]
    fn zero_jitter_gives_bin_midpoints() {
        let d = stratified_coarse(1.0, 3.0, 4, None);
        assert_eq!(d, vec![1.25, 1.75, 2.25, 2.75]);
    }

    #[test]
    fn stratified_depths_are_ascending_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = stratified_coarse(0.5, 2.5, 64, Some(&mut rng));
        assert_eq!(d.len(), 64);
        for w in d.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(d[0] >= 0.5 && *d.last().unwrap() <= 2.5);
    }

    #[test]
    fn single_nonzero_bin_captures_all_fine_samples() {
        let depths: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 + 0.125).collect();
        let mut weights = vec![0.0; 8];
        weights[3] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fine = importance_fine(&depths, &weights, 0.0, 2.0, 16, &mut rng);
        assert_eq!(fine.len(), 16);
        // Bin 3 spans midpoints around depth 0.875: [0.75, 1.0].
        for f in fine {
            assert!((0.75..=1.0).contains(&f), "sample {f} escaped the bin");
        }
    }

    #[test]
    fn uniform_weights_give_approximately_uniform_fine_samples() {
        let depths: Vec<f64> = (0..64).map(|i| 1.0 + (i as f64 + 0.5) / 32.0).collect();
        let weights = vec![1.0; 64];
        let (near, far) = (1.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut pooled = Vec::new();
        for _ in 0..100 {
            pooled.extend(importance_fine(&depths, &weights, near, far, 16, &mut rng));
        }
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov-Smirnov statistic against the uniform CDF.
        let n = pooled.len() as f64;
        let mut d_stat = 0.0f64;
        for (i, &x) in pooled.iter().enumerate() {
            let fu = (x - near) / (far - near);
            let fe_hi = (i as f64 + 1.0) / n;
            let fe_lo = i as f64 / n;
            d_stat = d_stat.max((fu - fe_lo).abs().max((fe_hi - fu).abs()));
        }
        let critical = 1.36 / n.sqrt(); // alpha = 0.05
        assert!(d_stat < critical, "KS statistic {d_stat} >= {critical}");
    }

    #[test]
    fn merged_depth_list_is_sorted_80() {
        let coarse = stratified_coarse(0.0, 1.0, 64, None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fine = importance_fine(&coarse, &vec![1.0; 64], 0.0, 1.0, 16, &mut rng);
        let merged = merge_depths(&coarse, &fine);
        assert_eq!(merged.len(), 80);
        for w in merged.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn opaque_sample_returns_its_color() {
        let ([r, g, b], m) = composite_values(&[0.5], &[1e9], &[[0.2, 0.7, 0.4]], 1.5);
        assert!((r - 0.2).abs() < 1e-12 && (g - 0.7).abs() < 1e-12 && (b - 0.4).abs() < 1e-12);
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_space_gives_zero() {
        let depths = stratified_coarse(0.0, 2.0, 16, None);
        let (c, m) = composite_values(&depths, &vec![0.0; 16], &vec![[1.0; 3]; 16], 2.0);
        assert_eq!(c, [0.0; 3]);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn constant_density_matches_closed_form_and_quadrature() {
        let (near, far, sigma) = (0.5, 2.5, 1.7);
        let depths = {
            let coarse = stratified_coarse(near, far, 64, None);
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let fine = importance_fine(&coarse, &vec![1.0; 64], near, far, 16, &mut rng);
            merge_depths(&coarse, &fine)
        };
        let n = depths.len();
        let (_, m) = composite_values(&depths, &vec![sigma; n], &vec![[1.0; 3]; n], far);
        let closed = 1.0 - (-sigma * (far - near)).exp();
        assert!((m - closed).abs() <= 1e-3, "mask {m} vs closed {closed}");
        let (_, mq) = quadrature_oracle(near, far, 10_000, &|_| sigma, &|_| [1.0; 3]);
        assert!((m - mq).abs() <= 1e-3);
        assert!((mq - closed).abs() <= 1e-4);
    }

    #[test]
    fn doubling_samples_does_not_worsen_oracle_error() {
        // Smooth Gaussian bump density, fixed seeds.
        let (near, far) = (0.0, 2.0);
        let sigma_fn = |t: f64| 3.0 * (-((t - 1.1) / 0.25).powi(2)).exp();
        let color_fn = |t: f64| [0.5 + 0.3 * (t * 2.0).sin(), 0.4, 0.6];
        let (cq, mq) = quadrature_oracle(near, far, 10_000, &sigma_fn, &color_fn);
        let run = |n_coarse: usize| {
            let depths = stratified_coarse(near, far, n_coarse, None);
            let sig: Vec<f64> = depths.iter().map(|&t| sigma_fn(t)).collect();
            let col: Vec<[f64; 3]> = depths.iter().map(|&t| color_fn(t)).collect();
            let (c, m) = composite_values(&depths, &sig, &col, far);
            let mut err = (m - mq).abs();
            for r in 0..3 {
                err = err.max((c[r] - cq[r]).abs());
            }
            err
        };
        let e64 = run(64);
        let e128 = run(128);
        let e256 = run(256);
        assert!(e128 <= e64 + 1e-9);
        assert!(e256 <= e128 + 1e-9);
    }
}
