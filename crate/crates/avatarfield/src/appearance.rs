//! Pixel-aligned appearance: per-view convolutional feature extraction,
//! perspective sampling of images and feature maps, mean/variance fusion
//! into a pooled geometry feature, and blend-weight prediction.

use std::sync::Arc;

use nalgebra::Vector3;

use crate::autodiff::{kernels, Buf, Init, NodeId, ParamStore, Segment, Tape, UnaryKind};
use crate::camera::Camera;
use crate::error::{AvatarError, Result};
use crate::nn::Mlp;

pub const F_GEO_CHANNELS: usize = 16;
pub const F_RGB_CHANNELS: usize = 8;
/// Per-view transformed keypoint+geometry feature width before pooling.
pub const FUSED_HALF: usize = 16;
/// Pooled geometry feature width: mean and variance halves.
pub const F_GEO_FUSED: usize = 2 * FUSED_HALF;
/// Global illumination feature width: 2x2 spatial quadrants x rgb channels.
pub const GLOBAL_ILLUM_DIM: usize = 4 * F_RGB_CHANNELS;

/// Depth below which a projected sample counts as invalid.
const MIN_DEPTH: f64 = 1e-4;

/// Three-layer conv stack: stride-2 first layer, ReLU between layers.
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub layers: Vec<(Segment, Segment)>,
    pub channels: Vec<usize>,
}

impl ConvStack {
    pub fn register(store: &mut ParamStore, name: &str, cout: usize) -> ConvStack {
        let channels = vec![3, 16, 16, cout];
        let mut layers = Vec::new();
        for l in 0..3 {
            let (ci, co) = (channels[l], channels[l + 1]);
            let w = store.register(
                &format!("{name}.k{l}"),
                co * ci * 9,
                Init::Xavier {
                    fan_in: ci * 9,
                    fan_out: co * 9,
                },
            );
            let b = store.register(&format!("{name}.c{l}"), co, Init::Zeros);
            layers.push((w, b));
        }
        ConvStack { channels, layers }
    }

    /// Applies the stack to a (3 x h*w) image node; output is at half
    /// resolution: ceil(h/2) x ceil(w/2).
    pub fn forward(&self, tape: &mut Tape, image: NodeId, h: usize, w: usize) -> NodeId {
        let (ho, wo) = kernels::conv_out_dim(h, w, 2);
        let z0 = self.apply_layer(tape, 0, image, h, w, 2);
        let a0 = tape.unary(UnaryKind::Relu, z0);
        let z1 = self.apply_layer(tape, 1, a0, ho, wo, 1);
        let a1 = tape.unary(UnaryKind::Relu, z1);
        self.apply_layer(tape, 2, a1, ho, wo, 1)
    }

    fn apply_layer(
        &self,
        tape: &mut Tape,
        l: usize,
        x: NodeId,
        h: usize,
        w: usize,
        stride: usize,
    ) -> NodeId {
        let (wseg, bseg) = self.layers[l];
        tape.conv2d(
            wseg,
            bseg,
            x,
            self.channels[l],
            self.channels[l + 1],
            h,
            w,
            stride,
        )
    }
}

/// One input view with its extracted feature maps on the tape.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub camera: Camera,
    pub image: Arc<Buf>,
    pub f_geo: NodeId,
    pub f_rgb: NodeId,
    pub map_h: usize,
    pub map_w: usize,
}

/// Runs both conv stacks over an input image held as fixed data.
pub fn extract_features(
    tape: &mut Tape,
    camera: &Camera,
    image: Arc<Buf>,
    geo_stack: &ConvStack,
    rgb_stack: &ConvStack,
) -> ViewBundle {
    let (h, w) = (camera.height, camera.width);
    assert_eq!(image.rows, 3);
    assert_eq!(image.cols, h * w);
    let img_node = tape.constant((*image).clone());
    let f_geo = geo_stack.forward(tape, img_node, h, w);
    let f_rgb = rgb_stack.forward(tape, img_node, h, w);
    let (mh, mw) = kernels::conv_out_dim(h, w, 2);
    ViewBundle {
        camera: camera.clone(),
        image,
        f_geo,
        f_rgb,
        map_h: mh,
        map_w: mw,
    }
}

/// Pixel-aligned samples of one view for a point batch, compacted over the
/// view's valid lanes and scattered back to full batch width.
#[derive(Debug, Clone)]
pub struct ViewSamples {
    pub color: NodeId,
    pub f_geo: NodeId,
    pub f_rgb: NodeId,
    /// 1.0 where the projection is valid for this view.
    pub valid: Vec<f64>,
    pub valid_count: usize,
}

/// Projects a point batch into one view and bilinearly samples the image and
/// both feature maps. Lanes with depth <= 0 or out-of-frame projections are
/// invalid: their samples are exactly zero.
pub fn project_and_sample(
    tape: &mut Tape,
    x_o: NodeId,
    bundle: &ViewBundle,
    x_o_values: &[Vector3<f64>],
) -> ViewSamples {
    let n = x_o_values.len();
    assert_eq!(tape.val(x_o).cols, n);
    let cam = &bundle.camera;
    let mut valid = vec![0.0; n];
    let mut idx = Vec::new();
    for (j, p) in x_o_values.iter().enumerate() {
        let (u, v, z) = cam.project(p);
        if z > MIN_DEPTH && cam.contains(u, v) {
            valid[j] = 1.0;
            idx.push(j);
        }
    }
    let valid_count = idx.len();
    if valid_count == 0 {
        let zero3 = tape.constant(Buf::zeros(3, n));
        let zg = tape.constant(Buf::zeros(F_GEO_CHANNELS, n));
        let zr = tape.constant(Buf::zeros(F_RGB_CHANNELS, n));
        return ViewSamples {
            color: zero3,
            f_geo: zg,
            f_rgb: zr,
            valid,
            valid_count,
        };
    }
    let idx = Arc::new(idx);
    let xv = tape.gather_cols(x_o, idx.clone());
    // Camera-space coords as a single-channel rigid blend.
    let r = cam.rotation_matrix();
    let t = cam.translation_vec();
    let mat = Arc::new(vec![[
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0], //
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1], //
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
    ]]);
    let ones = tape.constant(Buf::from_vec(1, idx.len(), vec![1.0; idx.len()]));
    let cam_pts = tape.blend_points(mat, ones, xv);
    let px = tape.slice_rows(cam_pts, 0, 1);
    let py = tape.slice_rows(cam_pts, 1, 1);
    let pz = tape.slice_rows(cam_pts, 2, 1);
    let inv_z = tape.unary(UnaryKind::Recip, pz);
    let k = &cam.intrinsics;
    let xz = tape.mul(px, inv_z);
    let yz = tape.mul(py, inv_z);
    let uscaled = tape.mul_const(xz, k[0][0]);
    let u = tape.add_const(uscaled, k[0][2]);
    let vscaled = tape.mul_const(yz, k[1][1]);
    let v = tape.add_const(vscaled, k[1][2]);
    let uv = tape.concat_rows(&[u, v]);
    // Half-resolution map alignment: map texel (i,j) sits at image (2i+0.5).
    let uv_shift = tape.add_const(uv, -0.5);
    let uv_map = tape.mul_const(uv_shift, 0.5);

    let color_v = tape.bilinear_sample(
        crate::autodiff::MapSrc::Fixed(bundle.image.clone()),
        cam.height,
        cam.width,
        uv,
    );
    let geo_v = tape.bilinear_sample(
        crate::autodiff::MapSrc::Node(bundle.f_geo),
        bundle.map_h,
        bundle.map_w,
        uv_map,
    );
    let rgb_v = tape.bilinear_sample(
        crate::autodiff::MapSrc::Node(bundle.f_rgb),
        bundle.map_h,
        bundle.map_w,
        uv_map,
    );
    ViewSamples {
        color: tape.scatter_cols(color_v, idx.clone(), n),
        f_geo: tape.scatter_cols(geo_v, idx.clone(), n),
        f_rgb: tape.scatter_cols(rgb_v, idx, n),
        valid,
        valid_count,
    }
}

/// Learnable pieces of the fusion/blending head.
#[derive(Debug, Clone)]
pub struct BlendHead {
    /// Single-layer transform of (keypoint encoding | f_geo^i).
    pub fuse_w: Segment,
    pub fuse_b: Segment,
    pub mlp: Mlp,
}

impl BlendHead {
    pub fn register(store: &mut ParamStore, keypoint_dim: usize) -> BlendHead {
        let fin = keypoint_dim + F_GEO_CHANNELS;
        let fuse_w = store.register(
            "blend.fuse_w",
            FUSED_HALF * fin,
            Init::Xavier {
                fan_in: fin,
                fan_out: FUSED_HALF,
            },
        );
        let fuse_b = store.register("blend.fuse_b", FUSED_HALF, Init::Zeros);
        let in_dim = F_GEO_CHANNELS + F_RGB_CHANNELS + 3 + 3 + F_GEO_FUSED;
        let mlp = Mlp::register(
            store,
            crate::nn::MlpSpec::new("blend.mlp", &[in_dim, 64, 64, 64, 1]),
        );
        BlendHead { fuse_w, fuse_b, mlp }
    }
}

pub struct FuseOutput {
    /// Blended color (3 x N).
    pub c_o: NodeId,
    /// Pooled geometry feature (32 x N).
    pub f_geo: NodeId,
    /// Per-view blend weights (V x N); invalid lanes are exactly zero.
    pub weights: NodeId,
}

/// Fuses per-view samples into the pooled geometry feature and blends the
/// sampled colors with predicted softmax weights.
///
/// `keypoint`: per-view spatial encodings; `direction`: the per-point unit
/// vector fed to the blend head (surface normal, or the view direction under
/// the normals ablation). Errors when any point has no valid view.
pub fn fuse_and_blend(
    tape: &mut Tape,
    head: &BlendHead,
    views: &[ViewSamples],
    keypoint: &[NodeId],
    direction: NodeId,
) -> Result<FuseOutput> {
    assert!(!views.is_empty());
    assert_eq!(views.len(), keypoint.len());
    let n = views[0].valid.len();
    // Per-point valid count over views.
    let mut count = vec![0.0; n];
    for v in views {
        for (c, m) in count.iter_mut().zip(v.valid.iter()) {
            *c += m;
        }
    }
    if let Some(j) = count.iter().position(|&c| c == 0.0) {
        return Err(AvatarError::NoVisibility { sample: j });
    }
    let inv_count = tape.constant(Buf::from_vec(1, n, count.iter().map(|c| 1.0 / c).collect()));

    // Per-view transforms, masked sums for mean/variance pooling.
    let mut transformed = Vec::with_capacity(views.len());
    let mut sum: Option<NodeId> = None;
    let mut sum_sq: Option<NodeId> = None;
    for (v, &kp) in views.iter().zip(keypoint.iter()) {
        let fin = tape.concat_rows(&[kp, v.f_geo]);
        let z = tape.linear(head.fuse_w, Some(head.fuse_b), fin, FUSED_HALF);
        let tv = tape.unary(UnaryKind::Softplus, z);
        let mask = tape.constant(Buf::from_vec(1, n, v.valid.clone()));
        let tv_masked = tape.broadcast_mul_row(tv, mask);
        let tv_sq = tape.unary(UnaryKind::Square, tv_masked);
        sum = Some(match sum {
            Some(s) => tape.add(s, tv_masked),
            None => tv_masked,
        });
        sum_sq = Some(match sum_sq {
            Some(s) => tape.add(s, tv_sq),
            None => tv_sq,
        });
        transformed.push(tv_masked);
    }
    let mean = tape.broadcast_mul_row(sum.unwrap(), inv_count);
    let e2 = tape.broadcast_mul_row(sum_sq.unwrap(), inv_count);
    let mean_sq = tape.unary(UnaryKind::Square, mean);
    let var = tape.sub(e2, mean_sq);
    let f_geo = tape.concat_rows(&[mean, var]);

    // Blend logits per view through the shared head.
    let mut logits = Vec::with_capacity(views.len());
    for v in views {
        let input = tape.concat_rows(&[v.f_geo, v.f_rgb, v.color, direction, f_geo]);
        logits.push(head.mlp.forward(tape, input));
    }
    let logit_mat = tape.concat_rows(&logits);
    let mut mask = vec![0.0; views.len() * n];
    for (vi, v) in views.iter().enumerate() {
        mask[vi * n..(vi + 1) * n].copy_from_slice(&v.valid);
    }
    let weights = tape.softmax_cols(logit_mat, Some(Arc::new(mask)));
    // c_o = sum_v w_v * c_v.
    let mut c_o: Option<NodeId> = None;
    for (vi, v) in views.iter().enumerate() {
        let wrow = tape.slice_rows(weights, vi, 1);
        let contrib = tape.broadcast_mul_row(v.color, wrow);
        c_o = Some(match c_o {
            Some(c) => tape.add(c, contrib),
            None => contrib,
        });
    }
    Ok(FuseOutput {
        c_o: c_o.unwrap(),
        f_geo,
        weights,
    })
}

/// Global illumination feature: per-view 2x2 quadrant mean pooling of the
/// rgb feature map, averaged across views (permutation-invariant).
pub fn global_illum(tape: &mut Tape, bundles: &[ViewBundle]) -> NodeId {
    assert!(!bundles.is_empty());
    let mut acc: Option<NodeId> = None;
    for b in bundles {
        let mut quads = Vec::with_capacity(4);
        for qy in 0..2 {
            for qx in 0..2 {
                let mut idx = Vec::new();
                for y in (qy * b.map_h / 2)..((qy + 1) * b.map_h / 2) {
                    for x in (qx * b.map_w / 2)..((qx + 1) * b.map_w / 2) {
                        idx.push(y * b.map_w + x);
                    }
                }
                let cnt = idx.len().max(1);
                let cols = tape.gather_cols(b.f_rgb, Arc::new(idx));
                let s = tape.sum_over_cols(cols);
                quads.push(tape.mul_const(s, 1.0 / cnt as f64));
            }
        }
        let pooled = tape.concat_rows(&quads);
        acc = Some(match acc {
            Some(a) => tape.add(a, pooled),
            None => pooled,
        });
    }
    tape.mul_const(acc.unwrap(), 1.0 / bundles.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn test_camera(w: usize, h: usize) -> Camera {
        Camera::ring_camera(Vector3::new(0.0, 0.0, 0.0), 3.0, 0.9, 0.35, 40.0, w, h)
    }

    fn uniform_image(w: usize, h: usize, rgb: [f64; 3]) -> Arc<Buf> {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            data[c * h * w..(c + 1) * h * w].fill(rgb[c]);
        }
        Arc::new(Buf::from_vec(3, h * w, data))
    }

    #[test]
    fn feature_maps_have_half_resolution() {
        for (w, h) in [(64usize, 64usize), (31, 17)] {
            let mut p = ParamStore::new(1);
            let geo = ConvStack::register(&mut p, "geo", F_GEO_CHANNELS);
            let rgb = ConvStack::register(&mut p, "rgb", F_RGB_CHANNELS);
            let cam = test_camera(w, h);
            let mut t = Tape::new(&p);
            let bundle =
                extract_features(&mut t, &cam, uniform_image(w, h, [0.5, 0.2, 0.9]), &geo, &rgb);
            assert_eq!(bundle.map_h, h.div_ceil(2));
            assert_eq!(bundle.map_w, w.div_ceil(2));
            assert_eq!(t.val(bundle.f_geo).rows, F_GEO_CHANNELS);
            assert_eq!(t.val(bundle.f_rgb).rows, F_RGB_CHANNELS);
        }
    }

    #[test]
    fn constant_image_gives_constant_interior_features() {
        let (w, h) = (32usize, 32usize);
        let mut p = ParamStore::new(2);
        let geo = ConvStack::register(&mut p, "geo", F_GEO_CHANNELS);
        let rgb = ConvStack::register(&mut p, "rgb", F_RGB_CHANNELS);
        let cam = test_camera(w, h);
        let mut t = Tape::new(&p);
        let bundle =
            extract_features(&mut t, &cam, uniform_image(w, h, [0.3, 0.3, 0.3]), &geo, &rgb);
        let fmap = t.val(bundle.f_geo);
        let (mh, mw) = (bundle.map_h, bundle.map_w);
        // Interior: away from the padded border by the receptive field (3).
        for c in 0..F_GEO_CHANNELS {
            let reference = fmap.at(c, 4 * mw + 4);
            for y in 3..mh - 3 {
                for x in 3..mw - 3 {
                    assert!(
                        (fmap.at(c, y * mw + x) - reference).abs() < 1e-12,
                        "non-constant interior at ({x},{y}) channel {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv_kernel_gradients_pass_fd() {
        // Small image, fixed seed chosen so no ReLU preactivation sits
        // within the FD step of its kink.
        let (w, h) = (8usize, 8usize);
        let build = |vals: Option<&[f64]>| {
            let mut p = ParamStore::new(12);
            let geo = ConvStack::register(&mut p, "geo", 4);
            if let Some(v) = vals {
                p.data_mut().copy_from_slice(v);
            }
            (p, geo)
        };
        let image: Vec<f64> = (0..3 * h * w)
            .map(|i| 0.5 + 0.4 * ((i as f64) * 0.37).sin())
            .collect();
        let (p, geo) = build(None);
        let eval = |ps: &ParamStore, stack: &ConvStack| {
            let mut t = Tape::new(ps);
            let img = t.constant(Buf::from_vec(3, h * w, image.clone()));
            let f = stack.forward(&mut t, img, h, w);
            let fb = t.val(f);
            let wsum = t.constant(Buf::from_vec(
                fb.rows,
                fb.cols,
                (0..fb.len()).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect(),
            ));
            let prod = t.mul(f, wsum);
            let loss = t.sum_all(prod);
            let margin = t.kink_margin();
            (t.scalar_value(loss), t.backward(loss).unwrap(), margin)
        };
        let (_, grad, margin) = eval(&p, &geo);
        assert!(margin > 1e-4, "relu margin too small for FD: {margin}");
        let f = |theta: &[f64]| {
            let (ps, stack) = build(Some(theta));
            Ok(eval(&ps, &stack).0)
        };
        let err = finite_diff_check(f, p.data(), 1e-5, &grad, None).unwrap();
        assert!(err <= 1e-4, "conv gradient FD error {err}");
    }

    fn sample_setup(
        points: &[Vector3<f64>],
    ) -> (ParamStore, ConvStack, ConvStack) {
        let mut p = ParamStore::new(3);
        let geo = ConvStack::register(&mut p, "geo", F_GEO_CHANNELS);
        let rgb = ConvStack::register(&mut p, "rgb", F_RGB_CHANNELS);
        let _ = points;
        (p, geo, rgb)
    }

    #[test]
    fn out_of_frame_point_is_invalid_with_zero_samples() {
        let cam = test_camera(16, 16);
        let behind = cam.center() - cam.rotation_matrix().transpose() * Vector3::new(0.0, 0.0, 2.0);
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), behind];
        let (p, geo, rgb) = sample_setup(&pts);
        let mut t = Tape::new(&p);
        let bundle = extract_features(&mut t, &cam, uniform_image(16, 16, [1.0, 1.0, 1.0]), &geo, &rgb);
        let x = t.constant(Buf::from_vec(
            3,
            2,
            (0..6).map(|i| pts[i % 2][i / 2]).collect(),
        ));
        let s = project_and_sample(&mut t, x, &bundle, &pts);
        assert_eq!(s.valid, vec![1.0, 0.0]);
        for r in 0..3 {
            assert_eq!(t.val(s.color).at(r, 1), 0.0);
        }
        for r in 0..F_GEO_CHANNELS {
            assert_eq!(t.val(s.f_geo).at(r, 1), 0.0);
        }
    }

    #[test]
    fn sample_on_pixel_center_returns_that_pixel() {
        let cam = test_camera(16, 16);
        // Build a ray through pixel (5, 9) and take a point on it.
        let (o, d) = cam.pixel_ray(5.0, 9.0);
        let pts = vec![o + d * 2.0];
        let (p, geo, rgb) = sample_setup(&pts);
        // Image with a distinctive value at pixel (5, 9).
        let (w, h) = (16usize, 16usize);
        let mut img = vec![0.1; 3 * h * w];
        for c in 0..3 {
            img[c * h * w + 9 * w + 5] = 0.9 - 0.2 * c as f64;
        }
        let mut t = Tape::new(&p);
        let bundle = extract_features(
            &mut t,
            &cam,
            Arc::new(Buf::from_vec(3, h * w, img)),
            &geo,
            &rgb,
        );
        let x = t.constant(Buf::from_vec(3, 1, pts[0].iter().cloned().collect()));
        let s = project_and_sample(&mut t, x, &bundle, &pts);
        assert_eq!(s.valid, vec![1.0]);
        assert!((t.val(s.color).at(0, 0) - 0.9).abs() < 1e-9);
        assert!((t.val(s.color).at(1, 0) - 0.7).abs() < 1e-9);
        assert!((t.val(s.color).at(2, 0) - 0.5).abs() < 1e-9);
    }

    fn mk_view_samples(
        t: &mut Tape,
        n: usize,
        color: [f64; 3],
        valid: Vec<f64>,
        salt: u64,
    ) -> ViewSamples {
        let wob = |len: usize, s: u64| -> Vec<f64> {
            (0..len)
                .map(|i| ((i as f64 * 0.61 + s as f64) * 12.9898).sin() * 0.5)
                .collect()
        };
        let mut cdata = vec![0.0; 3 * n];
        for c in 0..3 {
            for j in 0..n {
                cdata[c * n + j] = color[c] * valid[j];
            }
        }
        let color = t.constant(Buf::from_vec(3, n, cdata));
        let f_geo = t.constant(Buf::from_vec(F_GEO_CHANNELS, n, wob(F_GEO_CHANNELS * n, salt)));
        let f_rgb = t.constant(Buf::from_vec(F_RGB_CHANNELS, n, wob(F_RGB_CHANNELS * n, salt + 1)));
        let valid_count = valid.iter().filter(|&&v| v > 0.0).count();
        ViewSamples {
            color,
            f_geo,
            f_rgb,
            valid,
            valid_count,
        }
    }

    fn mk_keypoint(t: &mut Tape, dim: usize, n: usize, salt: u64) -> NodeId {
        t.constant(Buf::from_vec(
            dim,
            n,
            (0..dim * n)
                .map(|i| ((i as f64 + salt as f64) * 0.173).sin())
                .collect(),
        ))
    }

    #[test]
    fn single_valid_view_gets_weight_one_and_its_color() {
        let mut p = ParamStore::new(4);
        let head = BlendHead::register(&mut p, 12);
        let mut t = Tape::new(&p);
        let n = 3;
        let v0 = mk_view_samples(&mut t, n, [0.8, 0.2, 0.4], vec![1.0, 1.0, 1.0], 5);
        let v1 = mk_view_samples(&mut t, n, [0.1, 0.9, 0.3], vec![0.0, 0.0, 0.0], 7);
        // v1 fully invalid -> every point blends only v0... but v1 invalid
        // for ALL points means count still >= 1 from v0.
        let k0 = mk_keypoint(&mut t, 12, n, 1);
        let k1 = mk_keypoint(&mut t, 12, n, 2);
        let dir = t.constant(Buf::from_vec(3, n, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let out = fuse_and_blend(&mut t, &head, &[v0, v1], &[k0, k1], dir).unwrap();
        for j in 0..n {
            assert!((t.val(out.weights).at(0, j) - 1.0).abs() < 1e-12);
            assert_eq!(t.val(out.weights).at(1, j), 0.0);
            assert!((t.val(out.c_o).at(0, j) - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_view_colors_blend_to_that_color() {
        let mut p = ParamStore::new(5);
        let head = BlendHead::register(&mut p, 12);
        let mut t = Tape::new(&p);
        let n = 4;
        let c = [0.25, 0.5, 0.75];
        let views = vec![
            mk_view_samples(&mut t, n, c, vec![1.0; n], 11),
            mk_view_samples(&mut t, n, c, vec![1.0; n], 13),
            mk_view_samples(&mut t, n, c, vec![1.0; n], 17),
        ];
        let kps: Vec<NodeId> = (0..3).map(|i| mk_keypoint(&mut t, 12, n, 20 + i)).collect();
        let dir = t.constant(Buf::from_vec(3, n, vec![0.5; 3 * n]));
        let out = fuse_and_blend(&mut t, &head, &views, &kps, dir).unwrap();
        for j in 0..n {
            for (r, cv) in c.iter().enumerate() {
                assert!((t.val(out.c_o).at(r, j) - cv).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn variance_of_identical_views_is_zero_and_fusion_is_permutation_invariant() {
        let mut p = ParamStore::new(6);
        let head = BlendHead::register(&mut p, 12);
        let mut t = Tape::new(&p);
        let n = 3;
        // Identical per-view features -> variance half must vanish.
        let mk_same = |t: &mut Tape| mk_view_samples(t, n, [0.4, 0.4, 0.4], vec![1.0; n], 31);
        let (a, b) = (mk_same(&mut t), mk_same(&mut t));
        let kp = mk_keypoint(&mut t, 12, n, 3);
        let dir = t.constant(Buf::from_vec(3, n, vec![0.1; 3 * n]));
        let out = fuse_and_blend(&mut t, &head, &[a, b], &[kp, kp], dir).unwrap();
        for r in FUSED_HALF..F_GEO_FUSED {
            for j in 0..n {
                assert!(t.val(out.f_geo).at(r, j).abs() < 1e-12);
            }
        }
        // Permutation invariance of pooled features and blended color.
        let v0 = mk_view_samples(&mut t, n, [0.9, 0.1, 0.2], vec![1.0; n], 41);
        let v1 = mk_view_samples(&mut t, n, [0.2, 0.8, 0.5], vec![1.0; n], 43);
        let v2 = mk_view_samples(&mut t, n, [0.3, 0.3, 0.9], vec![1.0; n], 47);
        let k0 = mk_keypoint(&mut t, 12, n, 51);
        let k1 = mk_keypoint(&mut t, 12, n, 53);
        let k2 = mk_keypoint(&mut t, 12, n, 57);
        let dir2 = t.constant(Buf::from_vec(3, n, vec![0.2; 3 * n]));
        let fwd = fuse_and_blend(
            &mut t,
            &head,
            &[v0.clone(), v1.clone(), v2.clone()],
            &[k0, k1, k2],
            dir2,
        )
        .unwrap();
        let rev = fuse_and_blend(&mut t, &head, &[v2, v0, v1], &[k2, k0, k1], dir2).unwrap();
        for j in 0..n {
            for r in 0..F_GEO_FUSED {
                assert!(
                    (t.val(fwd.f_geo).at(r, j) - t.val(rev.f_geo).at(r, j)).abs() < 1e-12
                );
            }
            for r in 0..3 {
                assert!((t.val(fwd.c_o).at(r, j) - t.val(rev.c_o).at(r, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blended_color_stays_in_view_color_hull() {
        let mut p = ParamStore::new(7);
        let head = BlendHead::register(&mut p, 12);
        let mut t = Tape::new(&p);
        let n = 5;
        let colors = [[0.9, 0.05, 0.3], [0.2, 0.7, 0.6], [0.4, 0.5, 0.1]];
        let views: Vec<ViewSamples> = colors
            .iter()
            .enumerate()
            .map(|(i, c)| mk_view_samples(&mut t, n, *c, vec![1.0; n], 61 + i as u64))
            .collect();
        let kps: Vec<NodeId> = (0..3).map(|i| mk_keypoint(&mut t, 12, n, 70 + i)).collect();
        let dir = t.constant(Buf::from_vec(3, n, vec![0.3; 3 * n]));
        let out = fuse_and_blend(&mut t, &head, &views, &kps, dir).unwrap();
        for r in 0..3 {
            let lo = colors.iter().map(|c| c[r]).fold(f64::INFINITY, f64::min);
            let hi = colors.iter().map(|c| c[r]).fold(0.0f64, f64::max);
            for j in 0..n {
                let v = t.val(out.c_o).at(r, j);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_valid_views_is_an_error() {
        let mut p = ParamStore::new(8);
        let head = BlendHead::register(&mut p, 12);
        let mut t = Tape::new(&p);
        let n = 2;
        let v0 = mk_view_samples(&mut t, n, [0.5; 3], vec![1.0, 0.0], 81);
        let v1 = mk_view_samples(&mut t, n, [0.5; 3], vec![1.0, 0.0], 83);
        let kp = mk_keypoint(&mut t, 12, n, 85);
        let dir = t.constant(Buf::from_vec(3, n, vec![0.1; 3 * n]));
        let res = fuse_and_blend(&mut t, &head, &[v0, v1], &[kp, kp], dir);
        assert!(matches!(res, Err(AvatarError::NoVisibility { sample: 1 })));
    }

    #[test]
    fn global_illum_is_view_permutation_invariant() {
        let mut p = ParamStore::new(9);
        let geo = ConvStack::register(&mut p, "geo", F_GEO_CHANNELS);
        let rgb = ConvStack::register(&mut p, "rgb", F_RGB_CHANNELS);
        let cam = test_camera(16, 16);
        let mut t = Tape::new(&p);
        let imgs = [
            uniform_image(16, 16, [0.2, 0.6, 0.1]),
            uniform_image(16, 16, [0.9, 0.3, 0.5]),
        ];
        let b0 = extract_features(&mut t, &cam, imgs[0].clone(), &geo, &rgb);
        let b1 = extract_features(&mut t, &cam, imgs[1].clone(), &geo, &rgb);
        let l01 = global_illum(&mut t, &[b0.clone(), b1.clone()]);
        let l10 = global_illum(&mut t, &[b1, b0]);
        assert_eq!(t.val(l01).rows, GLOBAL_ILLUM_DIM);
        for i in 0..GLOBAL_ILLUM_DIM {
            assert!((t.val(l01).data[i] - t.val(l10).data[i]).abs() < 1e-12);
        }
    }
}
