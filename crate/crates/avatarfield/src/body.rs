//! Parametric articulated body: skeleton forward kinematics, capsule surface
//! vertices with template skinning weights, shape coefficients, and
//! nearest-vertex weight lookup with background handling.
//!
//! Bone i is the capsule from joint i's position to its tip offset; the bone
//! moves rigidly with joint i's transform. Skinning weight vectors have J
//! foreground entries plus one trailing background entry where noted.

use nalgebra::{Isometry3, Rotation3, Translation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{AvatarError, Result};

pub const SHAPE_DIM: usize = 10;
/// Surface vertices per capsule: 5 rings of 6.
const RINGS: usize = 5;
const RING_VERTS: usize = 6;
pub const VERTS_PER_BONE: usize = RINGS * RING_VERTS;
/// Fraction of bone length over which base weights blend into the parent.
const BLEND_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest offset from the parent joint (root: from the body origin).
    pub offset: [f64; 3],
    /// Capsule tip offset in the joint's local frame.
    pub tip: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Per-joint axis-angle rotation.
    pub axis_angle: Vec<[f64; 3]>,
    pub root_translation: [f64; 3],
}

impl Pose {
    pub fn rest(joints: usize) -> Pose {
        Pose {
            axis_angle: vec![[0.0; 3]; joints],
            root_translation: [0.0; 3],
        }
    }

    /// Flattened (3J + 3) parameter vector: rotations then root translation.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.axis_angle.len() * 3 + 3);
        for aa in &self.axis_angle {
            v.extend_from_slice(aa);
        }
        v.extend_from_slice(&self.root_translation);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<JointSpec>,
    pub canonical_pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub beta: [f64; SHAPE_DIM],
}

impl BodyParams {
    pub fn neutral() -> Self {
        BodyParams {
            beta: [0.0; SHAPE_DIM],
        }
    }
}

/// Immutable posed body snapshot.
#[derive(Debug, Clone)]
pub struct PosedBody {
    pub vertices: Vec<Vector3<f64>>,
    /// V rows over J foreground bones; each row is on the simplex.
    pub weights: Vec<Vec<f64>>,
    pub joints: Vec<Vector3<f64>>,
    /// Rigid canonical-to-pose transform per bone.
    pub bone_transforms: Vec<Isometry3<f64>>,
}

impl PosedBody {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// 3x4 row-major rigid matrices, with an identity appended for the
    /// static background channel.
    pub fn blend_mats_with_background(&self) -> Vec<[f64; 12]> {
        let mut mats: Vec<[f64; 12]> = self.bone_transforms.iter().map(iso_to_rows).collect();
        mats.push([
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        ]);
        mats
    }

    /// Rotation parts as 3x3 row-major, background identity appended.
    pub fn rotations_with_background(&self) -> Vec<[f64; 9]> {
        let mut rots: Vec<[f64; 9]> = self
            .bone_transforms
            .iter()
            .map(|iso| {
                let r = iso.rotation.to_rotation_matrix();
                let mut m = [0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        m[i * 3 + j] = r[(i, j)];
                    }
                }
                m
            })
            .collect();
        rots.push([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        rots
    }

    /// Axis-aligned bounding box of capsule surfaces, expanded by `margin`.
    pub fn bounding_box(&self, radii: &[f64], margin: f64) -> ([f64; 3], [f64; 3]) {
        let mut mn = [f64::INFINITY; 3];
        let mut mx = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                mn[a] = mn[a].min(v[a]);
                mx[a] = mx[a].max(v[a]);
            }
        }
        let pad = radii.iter().cloned().fold(0.0f64, f64::max) + margin;
        for a in 0..3 {
            mn[a] -= pad;
            mx[a] += pad;
        }
        (mn, mx)
    }
}

impl Skeleton {
    /// Default 8-bone humanoid: torso, head, upper/lower arms, merged legs.
    /// Canonical pose raises the arms 45 degrees.
    pub fn default_humanoid() -> Skeleton {
        let joints = vec![
            JointSpec {
                name: "pelvis".into(),
                parent: None,
                offset: [0.0, 0.95, 0.0],
                tip: [0.0, 0.45, 0.0],
                radius: 0.14,
            },
            JointSpec {
                name: "chest".into(),
                parent: Some(0),
                offset: [0.0, 0.45, 0.0],
                tip: [0.0, 0.30, 0.0],
                radius: 0.10,
            },
            JointSpec {
                name: "l_shoulder".into(),
                parent: Some(1),
                offset: [0.16, -0.03, 0.0],
                tip: [0.26, 0.0, 0.0],
                radius: 0.055,
            },
            JointSpec {
                name: "l_elbow".into(),
                parent: Some(2),
                offset: [0.26, 0.0, 0.0],
                tip: [0.24, 0.0, 0.0],
                radius: 0.045,
            },
            JointSpec {
                name: "r_shoulder".into(),
                parent: Some(1),
                offset: [-0.16, -0.03, 0.0],
                tip: [-0.26, 0.0, 0.0],
                radius: 0.055,
            },
            JointSpec {
                name: "r_elbow".into(),
                parent: Some(4),
                offset: [-0.26, 0.0, 0.0],
                tip: [-0.24, 0.0, 0.0],
                radius: 0.045,
            },
            JointSpec {
                name: "l_leg".into(),
                parent: Some(0),
                offset: [0.10, -0.02, 0.0],
                tip: [0.02, -0.86, 0.0],
                radius: 0.07,
            },
            JointSpec {
                name: "r_leg".into(),
                parent: Some(0),
                offset: [-0.10, -0.02, 0.0],
                tip: [-0.02, -0.86, 0.0],
                radius: 0.07,
            },
        ];
        let quarter = std::f64::consts::FRAC_PI_4;
        let mut canonical = Pose::rest(joints.len());
        canonical.axis_angle[2] = [0.0, 0.0, quarter];
        canonical.axis_angle[4] = [0.0, 0.0, -quarter];
        Skeleton {
            joints,
            canonical_pose: canonical,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.joints.iter().enumerate() {
            match j.parent {
                None if i != 0 => {
                    return Err(AvatarError::validation(format!(
                        "joint {i} has no parent but is not the root"
                    )))
                }
                Some(p) if p >= i => {
                    return Err(AvatarError::validation(format!(
                        "joint {i} parent {p} violates topological order"
                    )))
                }
                _ => {}
            }
            if j.radius <= 0.0 {
                return Err(AvatarError::validation(format!("joint {i} radius must be positive")));
            }
        }
        if self.canonical_pose.axis_angle.len() != self.joints.len() {
            return Err(AvatarError::validation("canonical pose joint count mismatch"));
        }
        Ok(())
    }

    /// Shape-scaled copy: beta channels scale bone lengths and radii.
    /// Channel 0 scales all bone lengths by (1 + 0.25 b); the rest apply
    /// +-10% regional adjustments.
    pub fn scaled(&self, beta: &[f64; SHAPE_DIM]) -> Skeleton {
        let global_len = 1.0 + 0.25 * beta[0];
        let global_rad = 1.0 + 0.10 * beta[4];
        let arm_len = 1.0 + 0.10 * beta[1];
        let leg_len = 1.0 + 0.10 * beta[2];
        let torso_len = 1.0 + 0.10 * beta[3];
        let limb_rad = 1.0 + 0.10 * beta[5];
        let head = 1.0 + 0.10 * beta[6];
        let shoulder_w = 1.0 + 0.10 * beta[7];
        let hip_w = 1.0 + 0.10 * beta[8];
        let torso_rad = 1.0 + 0.10 * beta[9];
        let mut out = self.clone();
        for (i, j) in out.joints.iter_mut().enumerate() {
            let (len_scale, rad_scale, width_scale) = match i {
                0 => (torso_len, torso_rad, 1.0),
                1 => (head, head, 1.0),
                2 | 4 => (arm_len, limb_rad, shoulder_w),
                3 | 5 => (arm_len, limb_rad, 1.0),
                6 | 7 => (leg_len, limb_rad, hip_w),
                _ => (1.0, 1.0, 1.0),
            };
            for a in 0..3 {
                j.offset[a] *= global_len * len_scale * if a == 0 { width_scale } else { 1.0 };
                j.tip[a] *= global_len * len_scale;
            }
            j.radius *= global_rad * rad_scale;
        }
        out
    }

    fn global_transforms(&self, pose: &Pose) -> Vec<Isometry3<f64>> {
        assert_eq!(pose.axis_angle.len(), self.joints.len());
        let mut g: Vec<Isometry3<f64>> = Vec::with_capacity(self.joints.len());
        for (i, j) in self.joints.iter().enumerate() {
            let aa = Vector3::from_column_slice(&pose.axis_angle[i]);
            let rot = Rotation3::from_scaled_axis(aa);
            let local = Translation3::from(Vector3::from_column_slice(&j.offset))
                * Isometry3::from_parts(Translation3::identity(), rot.into());
            let giso = match j.parent {
                Some(p) => g[p] * local,
                None => {
                    Translation3::from(Vector3::from_column_slice(&pose.root_translation)) * local
                }
            };
            g.push(giso);
        }
        g
    }

    /// Capsule surface template in the canonical pose, with per-vertex blend
    /// weights over bones. Also returns the canonical tip positions.
    fn canonical_template(&self) -> (Vec<Vector3<f64>>, Vec<Vec<f64>>, Vec<Isometry3<f64>>) {
        let g = self.global_transforms(&self.canonical_pose);
        let nj = self.joints.len();
        let mut verts = Vec::with_capacity(nj * VERTS_PER_BONE);
        let mut weights = Vec::with_capacity(nj * VERTS_PER_BONE);
        for (i, spec) in self.joints.iter().enumerate() {
            let base = g[i].translation.vector;
            let tip_local = Vector3::from_column_slice(&spec.tip);
            let tip = g[i] * nalgebra::Point3::from(tip_local);
            let axis = tip.coords - base;
            let len = axis.norm().max(1e-9);
            let dir = axis / len;
            // Orthonormal ring frame around the bone axis.
            let helper = if dir.x.abs() < 0.9 {
                Vector3::new(1.0, 0.0, 0.0)
            } else {
                Vector3::new(0.0, 1.0, 0.0)
            };
            let e1 = dir.cross(&helper).normalize();
            let e2 = dir.cross(&e1);
            for ring in 0..RINGS {
                let u = (ring as f64 + 0.5) / RINGS as f64;
                for s in 0..RING_VERTS {
                    let ang = 2.0 * std::f64::consts::PI * s as f64 / RING_VERTS as f64;
                    let p = base
                        + dir * (u * len)
                        + (e1 * ang.cos() + e2 * ang.sin()) * spec.radius;
                    verts.push(p);
                    let mut w = vec![0.0; nj];
                    match spec.parent {
                        Some(parent) if u < BLEND_FRACTION => {
                            let t = smoothstep(u / BLEND_FRACTION);
                            let own = 0.5 + 0.5 * t;
                            w[i] = own;
                            w[parent] = 1.0 - own;
                        }
                        _ => w[i] = 1.0,
                    }
                    weights.push(w);
                }
            }
        }
        (verts, weights, g)
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn iso_to_rows(iso: &Isometry3<f64>) -> [f64; 12] {
    let r = iso.rotation.to_rotation_matrix();
    let t = iso.translation.vector;
    let mut m = [0.0; 12];
    for i in 0..3 {
        for j in 0..3 {
            m[i * 4 + j] = r[(i, j)];
        }
        m[i * 4 + 3] = t[i];
    }
    m
}

/// Forward kinematics plus linear blend skinning of the capsule template.
pub fn pose_body(skeleton: &Skeleton, beta: &[f64; SHAPE_DIM], pose: &Pose) -> PosedBody {
    let scaled = skeleton.scaled(beta);
    let (verts_c, weights, g_canon) = scaled.canonical_template();
    let g_pose = scaled.global_transforms(pose);
    let bone_transforms: Vec<Isometry3<f64>> = g_pose
        .iter()
        .zip(g_canon.iter())
        .map(|(gp, gc)| gp * gc.inverse())
        .collect();
    let vertices: Vec<Vector3<f64>> = verts_c
        .iter()
        .zip(weights.iter())
        .map(|(v, w)| {
            let mut acc = Vector3::zeros();
            for (b, &wv) in w.iter().enumerate() {
                if wv != 0.0 {
                    acc += wv * (bone_transforms[b] * nalgebra::Point3::from(*v)).coords;
                }
            }
            acc
        })
        .collect();
    let joints: Vec<Vector3<f64>> = g_pose.iter().map(|g| g.translation.vector).collect();
    PosedBody {
        vertices,
        weights,
        joints,
        bone_transforms,
    }
}

/// Skinning weights for an arbitrary point: the closest surface vertex's
/// weights when within `tau`, otherwise the background one-hot. Output has
/// J+1 entries (background last) and lies on the simplex. Equidistant
/// vertices resolve to the lowest index.
pub fn nearest_vertex_weights(x: &Vector3<f64>, body: &PosedBody, tau: f64) -> Result<Vec<f64>> {
    assert!(tau > 0.0, "distance threshold must be positive");
    if body.vertices.is_empty() {
        return Err(AvatarError::validation("posed body has no surface vertices"));
    }
    let (mut best, mut best_d2) = (0usize, f64::INFINITY);
    for (i, v) in body.vertices.iter().enumerate() {
        let d2 = (x - v).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    let nj = body.joint_count();
    let mut w = vec![0.0; nj + 1];
    if best_d2.sqrt() <= tau {
        w[..nj].copy_from_slice(&body.weights[best]);
        let fg: f64 = w[..nj].iter().sum();
        w[nj] = 1.0 - fg;
    } else {
        w[nj] = 1.0;
    }
    Ok(w)
}

/// Distance from a point to the nearest surface vertex.
pub fn nearest_vertex_distance(x: &Vector3<f64>, body: &PosedBody) -> f64 {
    body.vertices
        .iter()
        .map(|v| (x - v).norm_squared())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Gap between the closest vertex distance and the closest vertex with a
/// different weight row, used as a smoothness margin for FD checks.
pub fn nearest_vertex_margin(x: &Vector3<f64>, body: &PosedBody, tau: f64) -> f64 {
    let (mut best, mut best_d) = (0usize, f64::INFINITY);
    for (i, v) in body.vertices.iter().enumerate() {
        let d = (x - v).norm();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    let mut margin = (best_d - tau).abs();
    for (i, v) in body.vertices.iter().enumerate() {
        if body.weights[i] != body.weights[best] {
            margin = margin.min((x - v).norm() - best_d);
        }
    }
    margin
}
