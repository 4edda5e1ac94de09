//! The assembled avatar model: parameter layout for every learnable piece
//! and the per-batch forward graph from target-space rays to composited
//! colors, masks, and the auxiliary quantities the losses consume.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{
    extract_features, fuse_and_blend, global_illum, project_and_sample, BlendHead, ConvStack,
    ViewBundle, ViewSamples, F_GEO_FUSED, F_RGB_CHANNELS,
};
use crate::autodiff::{Buf, HashGridCfg, Init, NodeId, ParamStore, RayComp, Segment, Tape};
use crate::body::{
    nearest_vertex_weights, pose_body, Pose, PosedBody, Skeleton, SHAPE_DIM,
};
use crate::camera::Camera;
use crate::deform::{backward_skin_batch, forward_skin_batch, forward_weights_batch};
use crate::encodings::{
    fourier_encode_values, keypoint_encode, FourierConfig, KeypointEncodingConfig,
};
use crate::error::{AvatarError, Result};
use crate::geometry::sdf_to_density_node;
use crate::losses::PerceptualProxy;
use crate::nn::{broadcast_col, constant_col_batch, Mlp, MlpSpec};
use crate::renderer::{importance_fine, merge_depths, stratified_coarse, Ray};
use crate::shading::{modulate, shading_factor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_shading: bool,
    pub no_displacement: bool,
    pub no_learnable_skinning: bool,
    pub no_geo_feats: bool,
    pub no_identity: bool,
    pub normals_to_viewdirs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub idt_dim: usize,
    /// Nearest-vertex distance threshold separating body from background.
    pub tau: f64,
    pub hash_levels: usize,
    pub hash_table_size: usize,
    pub hash_feats: usize,
    pub hash_base_res: usize,
    pub hash_growth: f64,
    /// Fourier bands for displacement-field position input.
    pub gamma_x_bands: usize,
    /// Fourier bands for pose and view-direction inputs.
    pub gamma_pose_bands: usize,
    pub keypoint: KeypointEncodingConfig,
    pub n_subjects: usize,
    /// Iterations of the sphere-fit geometric initialization (0 disables).
    pub sphere_init_iters: usize,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn desk_default(n_subjects: usize) -> ModelConfig {
        ModelConfig {
            joints: 8,
            idt_dim: 16,
            tau: 0.1,
            hash_levels: 8,
            hash_table_size: 1 << 14,
            hash_feats: 2,
            hash_base_res: 16,
            hash_growth: 1.5,
            gamma_x_bands: 4,
            gamma_pose_bands: 4,
            keypoint: KeypointEncodingConfig { eta: 0.1, bands: 6 },
            n_subjects,
            sphere_init_iters: 200,
            ablation: AblationFlags::default(),
        }
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.joints + 3
    }

    fn hash_out(&self) -> usize {
        self.hash_levels * self.hash_feats
    }
}

/// Sphere radius targeted by the geometric initialization, in canonical units.
const INIT_SPHERE_RADIUS: f64 = 0.4;

pub struct AvatarModel {
    pub config: ModelConfig,
    pub skeleton: Skeleton,
    pub betas: Vec<[f64; SHAPE_DIM]>,
    pub params: ParamStore,
    /// Per-subject hash normalization over the subject's canonical box.
    pub hash_cfgs: Vec<Arc<HashGridCfg>>,
    pub canonical_bodies: Vec<PosedBody>,
    pub proxy: PerceptualProxy,
    pub hash_table: Segment,
    pub disp: Mlp,
    pub wfield: Mlp,
    pub sdf: Mlp,
    pub shade: Mlp,
    pub geo_stack: ConvStack,
    pub rgb_stack: ConvStack,
    pub blend: BlendHead,
    pub l_idt: Segment,
    pub raw_b: Segment,
}

impl AvatarModel {
    pub fn new(
        config: ModelConfig,
        skeleton: Skeleton,
        betas: Vec<[f64; SHAPE_DIM]>,
        seed: u64,
    ) -> AvatarModel {
        assert_eq!(betas.len(), config.n_subjects);
        assert_eq!(skeleton.joint_count(), config.joints);
        let mut params = ParamStore::new(seed);
        let table_len = config.hash_levels * config.hash_table_size * config.hash_feats;
        let hash_table = params.register("hash.table", table_len, Init::Uniform { bound: 1e-4 });

        let gx = FourierConfig::new(config.gamma_x_bands);
        let disp_in = gx.out_dim(3) + config.idt_dim + config.pose_dim();
        let disp = Mlp::register(
            &mut params,
            MlpSpec::new("disp", &[disp_in, 128, 128, 128, 3]).zero_last(),
        );

        let wfield_in = config.hash_out() + config.idt_dim;
        let wfield = Mlp::register(
            &mut params,
            MlpSpec::new(
                "wfield",
                &[wfield_in, 128, 128, 128, config.joints + 1],
            )
            .zero_last(),
        );

        let sdf_in = config.hash_out() + SHAPE_DIM + config.idt_dim + F_GEO_FUSED;
        let sdf = Mlp::register(
            &mut params,
            MlpSpec::new("sdf", &[sdf_in, 128, 128, 128, 128, 128, 1]).with_skip(2),
        );

        let geo_stack = ConvStack::register(&mut params, "feat.geo", crate::appearance::F_GEO_CHANNELS);
        let rgb_stack = ConvStack::register(&mut params, "feat.rgb", F_RGB_CHANNELS);
        let blend = BlendHead::register(&mut params, config.keypoint.out_dim(config.joints));

        let gp = FourierConfig::new(config.gamma_pose_bands);
        let shade_in =
            gp.out_dim(3) + gp.out_dim(config.pose_dim()) + 3 + config.idt_dim + 4 * F_RGB_CHANNELS;
        let shade = Mlp::register(
            &mut params,
            MlpSpec::new("shade", &[shade_in, 64, 64, 1]).zero_last(),
        );

        let l_idt = params.register(
            "l_idt",
            config.idt_dim * config.n_subjects,
            Init::Uniform { bound: 0.1 },
        );
        let raw_b = params.register("raw_b", 1, Init::Const(0.1f64.ln()));

        let canonical_bodies: Vec<PosedBody> = betas
            .iter()
            .map(|b| pose_body(&skeleton, b, &skeleton.canonical_pose))
            .collect();
        let hash_cfgs: Vec<Arc<HashGridCfg>> = canonical_bodies
            .iter()
            .zip(betas.iter())
            .map(|(body, beta)| {
                let radii: Vec<f64> = skeleton.scaled(beta).joints.iter().map(|j| j.radius).collect();
                let (mn, mx) = body.bounding_box(&radii, 0.1);
                Arc::new(HashGridCfg {
                    levels: config.hash_levels,
                    table_size: config.hash_table_size,
                    feats: config.hash_feats,
                    base_res: config.hash_base_res,
                    growth: config.hash_growth,
                    box_min: mn,
                    box_ext: [mx[0] - mn[0], mx[1] - mn[1], mx[2] - mn[2]],
                })
            })
            .collect();

        let proxy = PerceptualProxy::new(seed);
        let mut model = AvatarModel {
            config,
            skeleton,
            betas,
            params,
            hash_cfgs,
            canonical_bodies,
            proxy,
            hash_table,
            disp,
            wfield,
            sdf,
            shade,
            geo_stack,
            rgb_stack,
            blend,
            l_idt,
            raw_b,
        };
        if model.config.sphere_init_iters > 0 {
            model.sphere_fit_init();
        }
        model
    }

    pub fn idt_segment(&self, subject: usize) -> Segment {
        assert!(subject < self.config.n_subjects);
        Segment {
            offset: self.l_idt.offset + subject * self.config.idt_dim,
            len: self.config.idt_dim,
        }
    }

    /// Identity-code input for a subject: zeros under the identity ablation.
    fn idt_node(&self, tape: &mut Tape, subject: usize, n: usize) -> NodeId {
        if self.config.ablation.no_identity {
            tape.constant(Buf::zeros(self.config.idt_dim, n))
        } else {
            let col = tape.param_slice(self.idt_segment(subject));
            broadcast_col(tape, col, n)
        }
    }

    /// Nearest training subject by shape-coefficient distance.
    pub fn nearest_subject(&self, beta: &[f64; SHAPE_DIM]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, b) in self.betas.iter().enumerate() {
            let d: f64 = b.iter().zip(beta.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Supervised fit of the canonical SDF to a centered sphere, standing in
    /// for closed-form geometric initialization (hash-feature inputs admit
    /// no closed form). Runs once at construction.
    fn sphere_fit_init(&mut self) {
        let iters = self.config.sphere_init_iters;
        let cfg = self.hash_cfgs[0].clone();
        let center = [
            cfg.box_min[0] + cfg.box_ext[0] / 2.0,
            cfg.box_min[1] + cfg.box_ext[1] / 2.0,
            cfg.box_min[2] + cfg.box_ext[2] / 2.0,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed() ^ 0x5f17);
        let mut opt = crate::optim::Adam::new(1e-2, self.params.len());
        let batch = 256;
        for _ in 0..iters {
            let mut pts = vec![0.0; 3 * batch];
            let mut target = vec![0.0; batch];
            for j in 0..batch {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = cfg.box_min[a] + rng.gen_range(0.0..1.0) * cfg.box_ext[a];
                    pts[a * batch + j] = p[a];
                }
                let d = ((p[0] - center[0]).powi(2)
                    + (p[1] - center[1]).powi(2)
                    + (p[2] - center[2]).powi(2))
                .sqrt();
                target[j] = d - INIT_SPHERE_RADIUS;
            }
            let mut tape = Tape::new(&self.params);
            let x = tape.constant(Buf::from_vec(3, batch, pts));
            let s = self.sdf_probe_node(&mut tape, x, 0, batch);
            let t = tape.constant(Buf::from_vec(1, batch, target));
            let diff = tape.sub(s, t);
            let sq = tape.unary(crate::autodiff::UnaryKind::Square, diff);
            let loss = tape.mean_all(sq);
            let grad = tape.backward(loss).expect("sphere fit backward");
            opt.step(self.params.data_mut(), &grad);
        }
    }

    /// SDF with zero appearance features for geometry-only probes.
    fn sdf_probe_node(&self, tape: &mut Tape, x_c: NodeId, subject: usize, n: usize) -> NodeId {
        let hash = tape.hash_encode(x_c, self.hash_table, self.hash_cfgs[subject].clone(), false);
        let beta = constant_col_batch(tape, &self.betas[subject], n);
        let idt = self.idt_node(tape, subject, n);
        let fgeo = tape.constant(Buf::zeros(F_GEO_FUSED, n));
        let input = tape.concat_rows(&[hash, beta, idt, fgeo]);
        self.sdf.forward(tape, input)
    }

    /// Value-side geometry probe used by mesh extraction and tests.
    pub fn sdf_values_at(&self, points: &[Vector3<f64>], subject: usize) -> Vec<f64> {
        let n = points.len();
        let mut tape = Tape::new(&self.params);
        let mut data = vec![0.0; 3 * n];
        for (j, p) in points.iter().enumerate() {
            for a in 0..3 {
                data[a * n + j] = p[a];
            }
        }
        let x = tape.constant(Buf::from_vec(3, n, data));
        let s = self.sdf_probe_node(&mut tape, x, subject, n);
        tape.val(s).data.clone()
    }

    /// Spatial SDF gradients (zero f_geo path) at canonical points.
    pub fn sdf_gradients_at(&self, points: &[Vector3<f64>], subject: usize) -> Vec<Vector3<f64>> {
        let n = points.len();
        let mut tape = Tape::new(&self.params);
        let mut data = vec![0.0; 3 * n];
        for (j, p) in points.iter().enumerate() {
            for a in 0..3 {
                data[a * n + j] = p[a];
            }
        }
        let x = tape.constant(Buf::from_vec(3, n, data));
        let beta = constant_col_batch(&mut tape, &self.betas[subject], n);
        let idt = self.idt_node(&mut tape, subject, n);
        let fgeo = tape.constant(Buf::zeros(F_GEO_FUSED, n));
        let (_, g) = self.sdf_with_spatial_grad(&mut tape, x, subject, &[beta, idt, fgeo]);
        (0..n)
            .map(|j| {
                Vector3::new(
                    tape.val(g).at(0, j),
                    tape.val(g).at(1, j),
                    tape.val(g).at(2, j),
                )
            })
            .collect()
    }

    /// SDF forward plus its spatial gradient as tape values, via hash-grid
    /// JVPs and tangent streams through the network. `extras` are the
    /// non-spatial input blocks (beta, idt, f_geo) in order.
    fn sdf_with_spatial_grad(
        &self,
        tape: &mut Tape,
        x_c: NodeId,
        subject: usize,
        extras: &[NodeId],
    ) -> (NodeId, NodeId) {
        let n = tape.val(x_c).cols;
        let fdim = self.config.hash_out();
        let enc = tape.hash_encode(x_c, self.hash_table, self.hash_cfgs[subject].clone(), true);
        let feat = tape.slice_rows(enc, 0, fdim);
        let extra_dim: usize = extras.iter().map(|&e| tape.val(e).rows).sum();
        let zeros = tape.constant(Buf::zeros(extra_dim, n));
        let mut parts = vec![feat];
        parts.extend_from_slice(extras);
        let input = tape.concat_rows(&parts);
        let tangents: Vec<NodeId> = (0..3)
            .map(|a| {
                let jvp = tape.slice_rows(enc, (a + 1) * fdim, fdim);
                tape.concat_rows(&[jvp, zeros])
            })
            .collect();
        let (s, jvps) = self.sdf.forward_with_tangents(tape, input, &tangents);
        let g = tape.concat_rows(&jvps);
        (s, g)
    }
}

/// One input view: camera plus image data.
#[derive(Debug, Clone)]
pub struct InputView {
    pub camera: Camera,
    pub image: Arc<Buf>,
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Mask-only phase: zero appearance features, no colors or shading.
    pub warmup: bool,
    /// Keep colors only for samples whose compositing weight passes this
    /// threshold; None evaluates color everywhere (used by gradient checks).
    pub prune_threshold: Option<f64>,
    /// Points drawn from the weight-bearing set for the smoothness term.
    pub omega_subsample: usize,
    /// Canonical surface vertices per step for the vertex normal term.
    pub vertex_subsample: usize,
    /// Uniform perturbation half-range for normal smoothness.
    pub eps_range: f64,
    /// Jitter stream for stratified/importance sampling; None uses midpoints.
    pub jitter_seed: Option<u64>,
    /// Build normals/eikonal outputs for the losses.
    pub with_loss_geometry: bool,
}

impl RenderOptions {
    pub fn eval() -> RenderOptions {
        RenderOptions {
            n_coarse: 64,
            n_fine: 16,
            warmup: false,
            prune_threshold: Some(1e-4),
            omega_subsample: 0,
            vertex_subsample: 0,
            eps_range: 0.01,
            jitter_seed: None,
            with_loss_geometry: false,
        }
    }
}

pub struct RenderInputs<'a> {
    pub subject: usize,
    pub target_pose: &'a Pose,
    pub target_body: &'a PosedBody,
    pub obs_pose: &'a Pose,
    pub obs_body: &'a PosedBody,
    pub views: &'a [InputView],
    pub rays: &'a [Ray],
}

/// Everything the trainer needs from one rendered batch.
pub struct PipelineOutputs {
    /// (4 x R) coarse-pass composite: rows 0..3 color, row 3 mask.
    pub coarse: NodeId,
    /// (4 x R) union (coarse + fine) composite.
    pub fine: NodeId,
    /// Per-ray minimum SDF over union samples, with the ray indices it
    /// covers (rays with no foreground samples are skipped).
    pub s_min: Option<(NodeId, Vec<usize>)>,
    /// Spatial SDF gradients at the weight-bearing sample set.
    pub omega_grad: Option<NodeId>,
    /// Canonical normals at a subsample of those points and at perturbed
    /// positions, for the smoothness term.
    pub omega_normals: Option<(NodeId, NodeId)>,
    /// Same pair over canonical surface vertices.
    pub vertex_normals: Option<(NodeId, NodeId)>,
    /// Displacement batches (target-space and observation-space).
    pub deltas: Vec<NodeId>,
}

/// Per-batch deformation/geometry results for one sampling pass.
struct PointPass {
    /// Ray index and depth per foreground point.
    ray_of: Vec<usize>,
    depth_of: Vec<f64>,
    x_c: NodeId,
    x_o: Option<NodeId>,
    w_f: Option<NodeId>,
    /// Backward (target-space) weights per point, background included.
    w_b: Vec<Vec<f64>>,
    s: NodeId,
    sigma: NodeId,
    view_samples: Vec<ViewSamples>,
    keypoints: Vec<NodeId>,
    fgeo: Option<NodeId>,
    x_o_values: Vec<Vector3<f64>>,
    deltas: Vec<NodeId>,
}

impl AvatarModel {
    /// Extracts conv features for each input view plus the global
    /// illumination vector. Skipped wholesale during warmup.
    pub fn build_view_bundles(
        &self,
        tape: &mut Tape,
        views: &[InputView],
    ) -> (Vec<ViewBundle>, NodeId) {
        let bundles: Vec<ViewBundle> = views
            .iter()
            .map(|v| {
                extract_features(
                    tape,
                    &v.camera,
                    v.image.clone(),
                    &self.geo_stack,
                    &self.rgb_stack,
                )
            })
            .collect();
        let illum = global_illum(tape, &bundles);
        (bundles, illum)
    }

    /// Evaluates deformation, geometry, and (outside warmup) appearance
    /// fusion for a batch of target-space sample points.
    #[allow(clippy::too_many_arguments)]
    fn eval_points(
        &self,
        tape: &mut Tape,
        inputs: &RenderInputs,
        bundles: &[ViewBundle],
        opts: &RenderOptions,
        samples: Vec<(usize, f64, Vector3<f64>, Vec<f64>)>,
    ) -> Result<Option<PointPass>> {
        if samples.is_empty() {
            return Ok(None);
        }
        let n = samples.len();
        let subject = inputs.subject;
        let abl = &self.config.ablation;
        let ray_of: Vec<usize> = samples.iter().map(|s| s.0).collect();
        let depth_of: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let x_t: Vec<Vector3<f64>> = samples.iter().map(|s| s.2).collect();
        let w_b: Vec<Vec<f64>> = samples.iter().map(|s| s.3.clone()).collect();

        let idt = self.idt_node(tape, subject, n);
        let gx_cfg = FourierConfig::new(self.config.gamma_x_bands);

        // Target-space displacement from the shared field at (x_t, theta_t).
        let delta_t = if abl.no_displacement {
            None
        } else {
            let mut gx = vec![0.0; gx_cfg.out_dim(3) * n];
            for (j, p) in x_t.iter().enumerate() {
                for (r, v) in fourier_encode_values(&[p.x, p.y, p.z], &gx_cfg)
                    .into_iter()
                    .enumerate()
                {
                    gx[r * n + j] = v;
                }
            }
            let gx = tape.constant(Buf::from_vec(gx_cfg.out_dim(3), n, gx));
            let pose_t = constant_col_batch(tape, &inputs.target_pose.flatten(), n);
            let input = tape.concat_rows(&[gx, idt, pose_t]);
            Some(self.disp.forward(tape, input))
        };

        let x_c = backward_skin_batch(tape, &x_t, &w_b, inputs.target_body, delta_t)?;

        // Forward-weight prior from the canonical body at the canonical point.
        let x_c_vals: Vec<Vector3<f64>> = {
            let b = tape.val(x_c);
            (0..n)
                .map(|j| Vector3::new(b.at(0, j), b.at(1, j), b.at(2, j)))
                .collect()
        };
        let w_init: Vec<Vec<f64>> = x_c_vals
            .iter()
            .map(|p| nearest_vertex_weights(p, &self.canonical_bodies[subject], self.config.tau))
            .collect::<Result<_>>()?;

        let hash_feat =
            tape.hash_encode(x_c, self.hash_table, self.hash_cfgs[subject].clone(), false);
        let logits = if abl.no_learnable_skinning {
            None
        } else {
            let input = tape.concat_rows(&[hash_feat, idt]);
            Some(self.wfield.forward(tape, input))
        };
        let w_f = forward_weights_batch(tape, &w_init, logits);

        // Observation-space displacement at (x_c, theta_o).
        let delta_o = if abl.no_displacement {
            None
        } else {
            let gxc = tape.fourier(x_c, self.config.gamma_x_bands);
            let pose_o = constant_col_batch(tape, &inputs.obs_pose.flatten(), n);
            let input = tape.concat_rows(&[gxc, idt, pose_o]);
            Some(self.disp.forward(tape, input))
        };
        let x_o = forward_skin_batch(tape, x_c, w_f, inputs.obs_body, delta_o);
        let x_o_values: Vec<Vector3<f64>> = {
            let b = tape.val(x_o);
            (0..n)
                .map(|j| Vector3::new(b.at(0, j), b.at(1, j), b.at(2, j)))
                .collect()
        };

        // Appearance fusion (feature half only; blending happens later on
        // the weight-bearing subset).
        let (view_samples, keypoints, fgeo) = if opts.warmup {
            (Vec::new(), Vec::new(), None)
        } else {
            let mut vs = Vec::with_capacity(bundles.len());
            let mut kps = Vec::with_capacity(bundles.len());
            for b in bundles {
                vs.push(project_and_sample(tape, x_o, b, &x_o_values));
                kps.push(keypoint_encode(
                    tape,
                    x_o,
                    &inputs.obs_body.joints,
                    &b.camera,
                    &self.config.keypoint,
                    false,
                )?);
            }
            let fgeo = self.fuse_features(tape, &vs, &kps)?;
            (vs, kps, Some(fgeo))
        };

        let fgeo_for_sdf = match (&fgeo, abl.no_geo_feats) {
            (Some(f), false) => *f,
            _ => tape.constant(Buf::zeros(F_GEO_FUSED, n)),
        };
        let beta = constant_col_batch(tape, &self.betas[subject], n);
        let sdf_input = tape.concat_rows(&[hash_feat, beta, idt, fgeo_for_sdf]);
        let s = self.sdf.forward(tape, sdf_input);
        let sigma = sdf_to_density_node(tape, s, self.raw_b);

        let mut deltas = Vec::new();
        if let Some(d) = delta_t {
            deltas.push(d);
        }
        if let Some(d) = delta_o {
            deltas.push(d);
        }

        Ok(Some(PointPass {
            ray_of,
            depth_of,
            x_c,
            x_o: Some(x_o),
            w_f: Some(w_f),
            w_b,
            s,
            sigma,
            view_samples,
            keypoints,
            fgeo,
            x_o_values,
            deltas,
        }))
    }

    /// Mean/variance fusion of per-view transformed features (the pooled
    /// geometry feature consumed by the SDF and the blend head).
    fn fuse_features(
        &self,
        tape: &mut Tape,
        views: &[ViewSamples],
        keypoints: &[NodeId],
    ) -> Result<NodeId> {
        let n = views[0].valid.len();
        let mut count = vec![0.0; n];
        for v in views {
            for (c, m) in count.iter_mut().zip(v.valid.iter()) {
                *c += m;
            }
        }
        if let Some(j) = count.iter().position(|&c| c == 0.0) {
            return Err(AvatarError::NoVisibility { sample: j });
        }
        let inv_count =
            tape.constant(Buf::from_vec(1, n, count.iter().map(|c| 1.0 / c).collect()));
        let mut sum: Option<NodeId> = None;
        let mut sum_sq: Option<NodeId> = None;
        for (v, &kp) in views.iter().zip(keypoints.iter()) {
            let fin = tape.concat_rows(&[kp, v.f_geo]);
            let z = tape.linear(
                self.blend.fuse_w,
                Some(self.blend.fuse_b),
                fin,
                crate::appearance::FUSED_HALF,
            );
            let tv = tape.unary(crate::autodiff::UnaryKind::Softplus, z);
            let mask = tape.constant(Buf::from_vec(1, n, v.valid.clone()));
            let tv_masked = tape.broadcast_mul_row(tv, mask);
            let tv_sq = tape.unary(crate::autodiff::UnaryKind::Square, tv_masked);
            sum = Some(match sum {
                Some(s) => tape.add(s, tv_masked),
                None => tv_masked,
            });
            sum_sq = Some(match sum_sq {
                Some(s) => tape.add(s, tv_sq),
                None => tv_sq,
            });
        }
        let mean = tape.broadcast_mul_row(sum.unwrap(), inv_count);
        let e2 = tape.broadcast_mul_row(sum_sq.unwrap(), inv_count);
        let mean_sq = tape.unary(crate::autodiff::UnaryKind::Square, mean);
        let var = tape.sub(e2, mean_sq);
        Ok(tape.concat_rows(&[mean, var]))
    }

    /// Full batched render. See [`PipelineOutputs`].
    pub fn render_rays(
        &self,
        tape: &mut Tape,
        inputs: &RenderInputs,
        opts: &RenderOptions,
    ) -> Result<PipelineOutputs> {
        let nrays = inputs.rays.len();
        let (bundles, illum) = if opts.warmup {
            (Vec::new(), None)
        } else {
            let (b, l) = self.build_view_bundles(tape, inputs.views);
            (b, Some(l))
        };

        let mut rng = opts.jitter_seed.map(ChaCha8Rng::seed_from_u64);

        // Coarse depths per ray plus foreground classification.
        let mut coarse_depths: Vec<Vec<f64>> = Vec::with_capacity(nrays);
        let mut coarse_samples = Vec::new();
        for (ri, ray) in inputs.rays.iter().enumerate() {
            if !ray.hits_box {
                coarse_depths.push(Vec::new());
                continue;
            }
            let depths = stratified_coarse(ray.near, ray.far, opts.n_coarse, rng.as_mut());
            for &t in &depths {
                let p = ray.origin + ray.dir * t;
                let w = nearest_vertex_weights(&p, inputs.target_body, self.config.tau)?;
                if w[self.config.joints] < 1.0 {
                    coarse_samples.push((ri, t, p, w));
                }
            }
            coarse_depths.push(depths);
        }

        let coarse_pass = self.eval_points(tape, inputs, &bundles, opts, coarse_samples)?;

        // Importance sampling from coarse-weight values.
        let coarse_sigma_vals: Vec<f64> = match &coarse_pass {
            Some(p) => tape.val(p.sigma).data.clone(),
            None => Vec::new(),
        };
        let mut per_ray_coarse: Vec<Vec<(f64, Option<usize>)>> = vec![Vec::new(); nrays];
        if let Some(p) = &coarse_pass {
            for (col, (&ri, &t)) in p.ray_of.iter().zip(p.depth_of.iter()).enumerate() {
                per_ray_coarse[ri].push((t, Some(col)));
            }
        }
        let sigma_at =
            |entry: &Option<usize>| -> f64 { entry.map_or(0.0, |c| coarse_sigma_vals[c]) };

        let mut fine_samples = Vec::new();
        let mut fine_depths: Vec<Vec<f64>> = vec![Vec::new(); nrays];
        if opts.n_fine > 0 {
            for (ri, ray) in inputs.rays.iter().enumerate() {
                if !ray.hits_box {
                    continue;
                }
                // Weights over the full coarse depth list (background
                // samples carry zero density).
                let depths = &coarse_depths[ri];
                let mut fg_cols: Vec<Option<usize>> = vec![None; depths.len()];
                for (t, col) in &per_ray_coarse[ri] {
                    if let Some(k) = depths.iter().position(|d| d == t) {
                        fg_cols[k] = *col;
                    }
                }
                let mut weights = vec![0.0; depths.len()];
                let mut trans = 1.0;
                for k in 0..depths.len() {
                    let delta = if k + 1 < depths.len() {
                        depths[k + 1] - depths[k]
                    } else {
                        (ray.far - depths[k]).max(0.0)
                    };
                    let alpha = 1.0 - (-sigma_at(&fg_cols[k]) * delta).exp();
                    weights[k] = trans * alpha;
                    trans *= 1.0 - alpha;
                }
                let mut local_rng = match &mut rng {
                    Some(r) => ChaCha8Rng::seed_from_u64(r.gen()),
                    None => ChaCha8Rng::seed_from_u64(0x0f1e ^ ri as u64),
                };
                let fine =
                    importance_fine(depths, &weights, ray.near, ray.far, opts.n_fine, &mut local_rng);
                for &t in &fine {
                    let p = ray.origin + ray.dir * t;
                    let w = nearest_vertex_weights(&p, inputs.target_body, self.config.tau)?;
                    if w[self.config.joints] < 1.0 {
                        fine_samples.push((ri, t, p, w));
                    }
                }
                fine_depths[ri] = fine;
            }
        }
        let fine_pass = self.eval_points(tape, inputs, &bundles, opts, fine_samples)?;

        // Merge the two passes into a single column space.
        let n_coarse_pts = coarse_pass.as_ref().map_or(0, |p| p.ray_of.len());
        let merged = self.merge_passes(tape, coarse_pass, fine_pass);

        // Per-ray sample tables over the union depth list.
        let mut union_tables: Vec<Vec<(f64, Option<usize>)>> = vec![Vec::new(); nrays];
        let mut coarse_tables: Vec<Vec<(f64, Option<usize>)>> = vec![Vec::new(); nrays];
        if let Some(m) = &merged {
            for (col, (&ri, &t)) in m.ray_of.iter().zip(m.depth_of.iter()).enumerate() {
                union_tables[ri].push((t, Some(col)));
                if col < n_coarse_pts {
                    coarse_tables[ri].push((t, Some(col)));
                }
            }
        }
        for ri in 0..nrays {
            // Add background samples (no column) so deltas follow the full list.
            let mut merge_list = |table: &mut Vec<(f64, Option<usize>)>, depths: &[f64]| {
                for &t in depths {
                    if !table.iter().any(|(d, _)| *d == t) {
                        table.push((t, None));
                    }
                }
                table.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            };
            let all_union = merge_depths(&coarse_depths[ri], &fine_depths[ri]);
            merge_list(&mut union_tables[ri], &all_union);
            merge_list(&mut coarse_tables[ri], &coarse_depths[ri]);
        }

        let Some(m) = merged else {
            // No foreground anywhere: both composites are zero.
            let zero = tape.constant(Buf::zeros(4, nrays));
            return Ok(PipelineOutputs {
                coarse: zero,
                fine: zero,
                s_min: None,
                omega_grad: None,
                omega_normals: None,
                vertex_normals: None,
                deltas: Vec::new(),
            });
        };

        // Coarse composite: mask supervision for the sampling distribution.
        let coarse_rays = build_ray_comps(&coarse_tables, inputs, None);
        let coarse_node = tape.composite(m.sigma, None, Arc::new(coarse_rays));

        // Weight-bearing subset of union samples for color evaluation.
        let sigma_vals = tape.val(m.sigma).data.clone();
        let union_weights = composite_weight_values(&union_tables, inputs, &sigma_vals);
        let mut color_cols: Vec<usize> = Vec::new();
        if !opts.warmup {
            let mut keep = vec![false; sigma_vals.len()];
            for (ri, table) in union_tables.iter().enumerate() {
                let mut best: Option<(f64, usize)> = None;
                for (k, (_, col)) in table.iter().enumerate() {
                    if let Some(c) = col {
                        let w = union_weights[ri][k];
                        if best.map_or(true, |(bw, _)| w > bw) {
                            best = Some((w, *c));
                        }
                        match opts.prune_threshold {
                            Some(th) if w < th => {}
                            _ => keep[*c] = true,
                        }
                    }
                }
                if let Some((_, c)) = best {
                    keep[c] = true;
                }
            }
            color_cols = (0..keep.len()).filter(|&c| keep[c]).collect();
        }

        // Colors (and loss geometry) on the subset.
        let mut color_node = None;
        let mut col_index_of = vec![usize::MAX; sigma_vals.len()];
        let mut omega_grad = None;
        let mut omega_normals = None;
        let mut vertex_normals = None;
        if !opts.warmup && !color_cols.is_empty() {
            for (i, &c) in color_cols.iter().enumerate() {
                col_index_of[c] = i;
            }
            let (c_t, g) = self.shade_subset(tape, inputs, &m, &bundles, illum, &color_cols)?;
            color_node = Some(c_t);
            if opts.with_loss_geometry {
                omega_grad = Some(g);
                if opts.omega_subsample > 0 {
                    omega_normals = Some(self.omega_smoothness(
                        tape,
                        &m,
                        inputs.subject,
                        &color_cols,
                        opts,
                    )?);
                }
                if opts.vertex_subsample > 0 {
                    vertex_normals =
                        Some(self.vertex_smoothness(tape, inputs.subject, opts)?);
                }
            }
        }

        let union_rays = build_ray_comps(&union_tables, inputs, Some(&col_index_of));
        let fine_node = tape.composite(m.sigma, color_node, Arc::new(union_rays));

        // Min-SDF per ray over union foreground samples.
        let mut s_min = None;
        {
            let mut segs = Vec::new();
            let mut ray_ids = Vec::new();
            let mut cursor = 0;
            // Columns are ordered by pass construction; group per ray.
            let mut per_ray_cols: Vec<Vec<usize>> = vec![Vec::new(); nrays];
            for (col, &ri) in m.ray_of.iter().enumerate() {
                per_ray_cols[ri].push(col);
            }
            let mut gather_idx = Vec::new();
            for (ri, cols) in per_ray_cols.iter().enumerate() {
                if !cols.is_empty() {
                    segs.push((cursor, cols.len()));
                    ray_ids.push(ri);
                    gather_idx.extend_from_slice(cols);
                    cursor += cols.len();
                }
            }
            if !segs.is_empty() {
                let s_row = tape.gather_cols(m.s, Arc::new(gather_idx));
                let node = tape.min_per_segment(s_row, Arc::new(segs));
                s_min = Some((node, ray_ids));
            }
        }

        Ok(PipelineOutputs {
            coarse: coarse_node,
            fine: fine_node,
            s_min,
            omega_grad,
            omega_normals,
            vertex_normals,
            deltas: m.deltas,
        })
    }

    /// Concatenates coarse and fine passes into one column space. Coarse
    /// columns come first.
    fn merge_passes(
        &self,
        tape: &mut Tape,
        coarse: Option<PointPass>,
        fine: Option<PointPass>,
    ) -> Option<MergedPass> {
        let join = |tape: &mut Tape, a: Option<NodeId>, b: Option<NodeId>| -> Option<NodeId> {
            match (a, b) {
                (Some(x), Some(y)) => Some(tape.concat_cols(&[x, y])),
                (Some(x), None) => Some(x),
                (None, Some(y)) => Some(y),
                (None, None) => None,
            }
        };
        match (coarse, fine) {
            (None, None) => None,
            (Some(c), None) => Some(MergedPass::from_single(c, tape)),
            (None, Some(f)) => Some(MergedPass::from_single(f, tape)),
            (Some(c), Some(f)) => {
                let mut deltas = c.deltas.clone();
                deltas.extend_from_slice(&f.deltas);
                let view_samples = c
                    .view_samples
                    .iter()
                    .zip(f.view_samples.iter())
                    .map(|(a, b)| ViewSamples {
                        color: join(tape, Some(a.color), Some(b.color)).unwrap(),
                        f_geo: join(tape, Some(a.f_geo), Some(b.f_geo)).unwrap(),
                        f_rgb: join(tape, Some(a.f_rgb), Some(b.f_rgb)).unwrap(),
                        valid: a.valid.iter().chain(b.valid.iter()).cloned().collect(),
                        valid_count: a.valid_count + b.valid_count,
                    })
                    .collect();
                let mut ray_of = c.ray_of.clone();
                ray_of.extend_from_slice(&f.ray_of);
                let mut depth_of = c.depth_of.clone();
                depth_of.extend_from_slice(&f.depth_of);
                let mut w_b = c.w_b.clone();
                w_b.extend_from_slice(&f.w_b);
                Some(MergedPass {
                    ray_of,
                    depth_of,
                    x_c: join(tape, Some(c.x_c), Some(f.x_c)).unwrap(),
                    w_f: join(tape, c.w_f, f.w_f),
                    w_b,
                    s: join(tape, Some(c.s), Some(f.s)).unwrap(),
                    sigma: join(tape, Some(c.sigma), Some(f.sigma)).unwrap(),
                    view_samples,
                    keypoints: c
                        .keypoints
                        .iter()
                        .zip(f.keypoints.iter())
                        .map(|(&a, &b)| join(tape, Some(a), Some(b)).unwrap())
                        .collect(),
                    fgeo: join(tape, c.fgeo, f.fgeo),
                    deltas,
                })
            }
        }
    }

    /// Blending and shading for the weight-bearing columns. Returns the
    /// per-sample output color (3 x Nw) and the spatial SDF gradients at
    /// those canonical points (3 x Nw).
    fn shade_subset(
        &self,
        tape: &mut Tape,
        inputs: &RenderInputs,
        m: &MergedPass,
        _bundles: &[ViewBundle],
        illum: Option<NodeId>,
        cols: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let abl = self.config.ablation;
        let nw = cols.len();
        let idx = Arc::new(cols.to_vec());
        let x_c_sub = tape.gather_cols(m.x_c, idx.clone());
        let beta = constant_col_batch(tape, &self.betas[inputs.subject], nw);
        let idt = self.idt_node(tape, inputs.subject, nw);
        let fgeo_full = m.fgeo.expect("appearance runs outside warmup");
        let fgeo_sub = tape.gather_cols(fgeo_full, idx.clone());
        let fgeo_for_sdf = if abl.no_geo_feats {
            tape.constant(Buf::zeros(F_GEO_FUSED, nw))
        } else {
            fgeo_sub
        };

        // Spatial gradient of the SDF at the subset points.
        let (_, g) = self.sdf_with_spatial_grad(
            tape,
            x_c_sub,
            inputs.subject,
            &[beta, idt, fgeo_for_sdf],
        );
        let n_c = tape.normalize_cols(g)?;

        // Transport: backward weights for the target space, forward weights
        // for the observation space.
        let nb = self.config.joints + 1;
        let mut wb_data = vec![0.0; nb * nw];
        for (j, &c) in cols.iter().enumerate() {
            for i in 0..nb {
                wb_data[i * nw + j] = m.w_b[c][i];
            }
        }
        let wb_node = tape.constant(Buf::from_vec(nb, nw, wb_data));
        let rot_t = Arc::new(inputs.target_body.rotations_with_background());
        let blended_t = tape.blend_vecs(rot_t, wb_node, n_c);
        let n_t = tape.normalize_cols(blended_t)?;

        let direction = if abl.normals_to_viewdirs {
            // Per-sample target view direction.
            let mut d = vec![0.0; 3 * nw];
            for (j, &c) in cols.iter().enumerate() {
                let dir = inputs.rays[m.ray_of[c]].dir;
                for a in 0..3 {
                    d[a * nw + j] = dir[a];
                }
            }
            tape.constant(Buf::from_vec(3, nw, d))
        } else {
            let w_f_sub = tape.gather_cols(m.w_f.expect("forward weights"), idx.clone());
            let rot_o = Arc::new(inputs.obs_body.rotations_with_background());
            let blended_o = tape.blend_vecs(rot_o, w_f_sub, n_c);
            tape.normalize_cols(blended_o)?
        };

        // Blend head on the subset.
        let sub_views: Vec<ViewSamples> = m
            .view_samples
            .iter()
            .map(|v| ViewSamples {
                color: tape.gather_cols(v.color, idx.clone()),
                f_geo: tape.gather_cols(v.f_geo, idx.clone()),
                f_rgb: tape.gather_cols(v.f_rgb, idx.clone()),
                valid: cols.iter().map(|&c| v.valid[c]).collect(),
                valid_count: cols.iter().filter(|&&c| v.valid[c] > 0.0).count(),
            })
            .collect();
        let sub_kps: Vec<NodeId> = m
            .keypoints
            .iter()
            .map(|&k| tape.gather_cols(k, idx.clone()))
            .collect();
        let fused = fuse_and_blend(tape, &self.blend, &sub_views, &sub_kps, direction)?;
        let c_o = fused.c_o;

        if abl.no_shading {
            return Ok((c_o, g));
        }

        // Shading factor from view direction, target pose, transported
        // normal, identity code, and the global illumination feature.
        let gp = FourierConfig::new(self.config.gamma_pose_bands);
        let mut gv = vec![0.0; gp.out_dim(3) * nw];
        for (j, &c) in cols.iter().enumerate() {
            let dir = inputs.rays[m.ray_of[c]].dir;
            for (r, v) in fourier_encode_values(&[dir.x, dir.y, dir.z], &gp)
                .into_iter()
                .enumerate()
            {
                gv[r * nw + j] = v;
            }
        }
        let gv = tape.constant(Buf::from_vec(gp.out_dim(3), nw, gv));
        let pose_enc = fourier_encode_values(&inputs.target_pose.flatten(), &gp);
        let gpose = constant_col_batch(tape, &pose_enc, nw);
        let illum = illum.expect("global illumination outside warmup");
        let illum_b = broadcast_col(tape, illum, nw);
        let shade_in = tape.concat_rows(&[gv, gpose, n_t, idt, illum_b]);
        let raw = self.shade.forward(tape, shade_in);
        let alpha = shading_factor(tape, raw);
        let c_t = modulate(tape, c_o, alpha);
        Ok((c_t, g))
    }

    /// Canonical normals at an omega subsample and at perturbed points.
    fn omega_smoothness(
        &self,
        tape: &mut Tape,
        m: &MergedPass,
        subject: usize,
        cols: &[usize],
        opts: &RenderOptions,
    ) -> Result<(NodeId, NodeId)> {
        let take = opts.omega_subsample.min(cols.len());
        let stride = (cols.len() / take.max(1)).max(1);
        let sel: Vec<usize> = cols.iter().step_by(stride).take(take).cloned().collect();
        let n = sel.len();
        let idx = Arc::new(sel);
        let x_sub = tape.gather_cols(m.x_c, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.jitter_seed.unwrap_or(0) ^ 0xeb5,
        );
        let eps: Vec<f64> = (0..3 * n)
            .map(|_| rng.gen_range(-opts.eps_range..opts.eps_range))
            .collect();
        let eps_node = tape.constant(Buf::from_vec(3, n, eps));
        let x_eps = tape.add(x_sub, eps_node);
        let n0 = self.probe_normal(tape, x_sub, subject, n)?;
        let n1 = self.probe_normal(tape, x_eps, subject, n)?;
        Ok((n0, n1))
    }

    fn vertex_smoothness(
        &self,
        tape: &mut Tape,
        subject: usize,
        opts: &RenderOptions,
    ) -> Result<(NodeId, NodeId)> {
        let verts = &self.canonical_bodies[subject].vertices;
        let take = opts.vertex_subsample.min(verts.len());
        let stride = (verts.len() / take.max(1)).max(1);
        let sel: Vec<&Vector3<f64>> = verts.iter().step_by(stride).take(take).collect();
        let n = sel.len();
        let mut data = vec![0.0; 3 * n];
        for (j, v) in sel.iter().enumerate() {
            for a in 0..3 {
                data[a * n + j] = v[a];
            }
        }
        let x = tape.constant(Buf::from_vec(3, n, data));
        let mut rng = ChaCha8Rng::seed_from_u64(opts.jitter_seed.unwrap_or(0) ^ 0x7e47);
        let eps: Vec<f64> = (0..3 * n)
            .map(|_| rng.gen_range(-opts.eps_range..opts.eps_range))
            .collect();
        let eps_node = tape.constant(Buf::from_vec(3, n, eps));
        let x_eps = tape.add(x, eps_node);
        let n0 = self.probe_normal(tape, x, subject, n)?;
        let n1 = self.probe_normal(tape, x_eps, subject, n)?;
        Ok((n0, n1))
    }

    fn probe_normal(
        &self,
        tape: &mut Tape,
        x: NodeId,
        subject: usize,
        n: usize,
    ) -> Result<NodeId> {
        let beta = constant_col_batch(tape, &self.betas[subject], n);
        let idt = self.idt_node(tape, subject, n);
        let fgeo = tape.constant(Buf::zeros(F_GEO_FUSED, n));
        let (_, g) = self.sdf_with_spatial_grad(tape, x, subject, &[beta, idt, fgeo]);
        tape.normalize_cols(g)
    }
}

struct MergedPass {
    ray_of: Vec<usize>,
    depth_of: Vec<f64>,
    x_c: NodeId,
    w_f: Option<NodeId>,
    w_b: Vec<Vec<f64>>,
    s: NodeId,
    sigma: NodeId,
    view_samples: Vec<ViewSamples>,
    keypoints: Vec<NodeId>,
    fgeo: Option<NodeId>,
    deltas: Vec<NodeId>,
}

impl MergedPass {
    fn from_single(p: PointPass, _tape: &mut Tape) -> MergedPass {
        MergedPass {
            ray_of: p.ray_of,
            depth_of: p.depth_of,
            x_c: p.x_c,
            w_f: p.w_f,
            w_b: p.w_b,
            s: p.s,
            sigma: p.sigma,
            view_samples: p.view_samples,
            keypoints: p.keypoints,
            fgeo: p.fgeo,
            deltas: p.deltas,
        }
    }
}

/// Ray compositing tables from per-ray (depth, sigma-column) lists.
fn build_ray_comps(
    tables: &[Vec<(f64, Option<usize>)>],
    inputs: &RenderInputs,
    color_index: Option<&[usize]>,
) -> Vec<RayComp> {
    tables
        .iter()
        .enumerate()
        .map(|(ri, table)| {
            let far = inputs.rays[ri].far;
            let mut samples = Vec::new();
            for (k, (t, col)) in table.iter().enumerate() {
                let Some(c) = col else { continue };
                let delta = if k + 1 < table.len() {
                    table[k + 1].0 - t
                } else {
                    (far - t).max(0.0)
                };
                let color_col = color_index.and_then(|map| {
                    let m = map[*c];
                    (m != usize::MAX).then_some(m)
                });
                samples.push(crate::autodiff::CompSample {
                    sigma_col: *c,
                    color_col,
                    delta,
                });
            }
            RayComp { samples }
        })
        .collect()
}

/// Value-side compositing weights per (ray, table-entry).
fn composite_weight_values(
    tables: &[Vec<(f64, Option<usize>)>],
    inputs: &RenderInputs,
    sigma: &[f64],
) -> Vec<Vec<f64>> {
    tables
        .iter()
        .enumerate()
        .map(|(ri, table)| {
            let far = inputs.rays[ri].far;
            let mut trans = 1.0;
            let mut out = Vec::with_capacity(table.len());
            for (k, (t, col)) in table.iter().enumerate() {
                let delta = if k + 1 < table.len() {
                    table[k + 1].0 - t
                } else {
                    (far - t).max(0.0)
                };
                let s = col.map_or(0.0, |c| sigma[c]);
                let alpha = 1.0 - (-s * delta).exp();
                out.push(trans * alpha);
                trans *= 1.0 - alpha;
            }
            out
        })
        .collect()
}
