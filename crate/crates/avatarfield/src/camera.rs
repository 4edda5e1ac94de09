//! Pinhole camera: intrinsics, world-to-camera extrinsics, projection and
//! ray generation. Pixel (i, j) has its center at continuous coords (i, j).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{AvatarError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Row-major 3x3 intrinsics.
    pub intrinsics: [[f64; 3]; 3],
    /// World-to-camera rotation (row-major) and translation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera on a ring looking at `target`, elevation in radians, y-up world.
    pub fn ring_camera(
        target: Vector3<f64>,
        radius: f64,
        azimuth: f64,
        elevation: f64,
        focal_px: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let eye = target
            + Vector3::new(
                radius * elevation.cos() * azimuth.sin(),
                radius * elevation.sin(),
                radius * elevation.cos() * azimuth.cos(),
            );
        // Look-at basis: camera z forward (towards target), y down-ish image axis.
        let fwd = (target - eye).normalize();
        let world_up = Vector3::new(0.0, 1.0, 0.0);
        let right = fwd.cross(&world_up).normalize();
        let down = fwd.cross(&right).normalize();
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let trans = -rot * eye;
        let k = Matrix3::new(
            focal_px,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            focal_px,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera {
            intrinsics: mat_to_rows(&k),
            rotation: mat_to_rows(&rot),
            translation: [trans.x, trans.y, trans.z],
            width,
            height,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rows_to_mat(&self.rotation)
    }

    pub fn intrinsics_matrix(&self) -> Matrix3<f64> {
        rows_to_mat(&self.intrinsics)
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.translation)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vec())
    }

    /// Camera-space coordinates of a world point (z is depth).
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * x + self.translation_vec()
    }

    /// Projects a world point to continuous pixel coords and depth.
    pub fn project(&self, x: &Vector3<f64>) -> (f64, f64, f64) {
        let p = self.to_camera(x);
        let k = &self.intrinsics;
        let u = k[0][0] * p.x / p.z + k[0][2];
        let v = k[1][1] * p.y / p.z + k[1][2];
        (u, v, p.z)
    }

    /// World-space ray through the center of pixel (px, py): unit direction.
    pub fn pixel_ray(&self, px: f64, py: f64) -> (Vector3<f64>, Vector3<f64>) {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((px - k[0][2]) / k[0][0], (py - k[1][2]) / k[1][1], 1.0);
        let dir = (self.rotation_matrix().transpose() * dir_cam).normalize();
        (self.center(), dir)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Checks focal positivity and rotation orthonormality.
    pub fn validate(&self) -> Result<()> {
        if self.intrinsics[0][0] <= 0.0 || self.intrinsics[1][1] <= 0.0 {
            return Err(AvatarError::validation("camera focal lengths must be positive"));
        }
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(AvatarError::validation(format!(
                "camera rotation is not orthonormal (deviation {err:.3e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(AvatarError::validation("camera rotation must have determinant 1"));
        }
        Ok(())
    }
}

fn mat_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[(r, c)];
        }
    }
    out
}

fn rows_to_mat(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| rows[r][c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_camera() -> Camera {
        Camera::ring_camera(Vector3::new(0.0, 0.9, 0.0), 2.5, 0.7, 0.5, 70.0, 64, 64)
    }

    #[test]
    fn ring_camera_is_valid_and_looks_at_target() {
        let cam = test_camera();
        cam.validate().unwrap();
        let (u, v, z) = cam.project(&Vector3::new(0.0, 0.9, 0.0));
        assert!(z > 0.0);
        assert!((u - 31.5).abs() < 1e-9 && (v - 31.5).abs() < 1e-9);
    }

    #[test]
    fn point_on_optical_axis_projects_to_principal_point() {
        let cam = test_camera();
        let center = cam.center();
        let fwd = cam.rotation_matrix().transpose() * Vector3::new(0.0, 0.0, 1.0);
        let (u, v, z) = cam.project(&(center + fwd));
        assert!((z - 1.0).abs() < 1e-12);
        assert!((u - cam.intrinsics[0][2]).abs() < 1e-9);
        assert!((v - cam.intrinsics[1][2]).abs() < 1e-9);
    }

    #[test]
    fn pixel_ray_reprojects_to_same_pixel() {
        let cam = test_camera();
        let (o, d) = cam.pixel_ray(10.25, 47.5);
        let (u, v, z) = cam.project(&(o + d * 2.0));
        assert!(z > 0.0);
        assert!((u - 10.25).abs() < 1e-9);
        assert!((v - 47.5).abs() < 1e-9);
    }

    #[test]
    fn corrupted_rotation_fails_validation() {
        let mut cam = test_camera();
        cam.rotation[0][0] += 0.05;
        assert!(cam.validate().is_err());
    }
}
