//! Pinhole cameras and per-pixel rays.
//!
//! Camera frame convention: x right, y up, the camera looks down −z. Pixel
//! `(col, row)` is sampled at its center `(col + 0.5, row + 0.5)` with rows
//! growing downwards.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOLERANCE: f64 = 1e-5;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, near: f64, far: f64) -> Result<Self> {
        let ray = Self {
            origin,
            direction,
            near,
            far,
        };
        ray.validate()?;
        Ok(ray)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.origin.iter().all(|v| v.is_finite()) && self.direction.iter().all(|v| v.is_finite())) {
            return Err(Error::validation("ray origin and direction must be finite"));
        }
        if (self.direction.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::validation(format!(
                "ray direction must be unit length, got norm {}",
                self.direction.norm()
            )));
        }
        if !(self.near >= 0.0 && self.far > self.near) {
            return Err(Error::validation(format!(
                "ray bounds must satisfy 0 <= near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Camera-to-world extrinsics plus pinhole intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, focal: f64, width: usize, height: usize) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            focal,
            width,
            height,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Builds a pose from a 4×4 camera-to-world matrix (last row ignored).
    pub fn from_matrix(matrix: &Matrix4<f64>, focal: f64, width: usize, height: usize) -> Result<Self> {
        let rotation = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = matrix.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation, focal, width, height)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Pose at `(azimuth, elevation)` degrees on a sphere of `radius`, looking at the origin with +z up.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, focal: f64, width: usize, height: usize) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::validation(format!("orbit radius must be positive, got {radius}")));
        }
        if !(elevation_deg.abs() < 90.0) {
            return Err(Error::validation(format!(
                "orbit elevation must lie strictly inside (-90, 90), got {elevation_deg}"
            )));
        }
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * radius;
        Self::look_at(eye, Vector3::zeros(), Vector3::z(), focal, width, height)
    }

    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let back = (eye - target).normalize();
        let right = up.cross(&back);
        if right.norm() < 1e-9 {
            return Err(Error::validation("look_at: up vector is parallel to the view axis"));
        }
        let right = right.normalize();
        let cam_up = back.cross(&right);
        let rotation = Matrix3::from_columns(&[right, cam_up, back]);
        Self::new(rotation, eye, focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())) {
            return Err(Error::validation("camera pose contains non-finite values"));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let deviation = (gram - Matrix3::identity()).abs().max();
        if deviation > ORTHONORMAL_TOLERANCE {
            return Err(Error::validation(format!(
                "camera rotation is not orthonormal (max |RᵀR − I| = {deviation:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(Error::validation(format!(
                "camera rotation must have determinant +1, got {det:.6}"
            )));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::validation(format!("focal length must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("camera resolution must be nonzero"));
        }
        Ok(())
    }

    /// Same pose at a different resolution, with the focal length scaled to keep the field of view.
    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Self {
            focal: self.focal * width as f64 / self.width as f64,
            width,
            height,
            ..self.clone()
        }
    }

    /// World-space direction of the camera's optical axis.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::new(0.0, 0.0, -1.0)
    }

    pub fn pixel_direction(&self, col: usize, row: usize) -> Vector3<f64> {
        let x = (col as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = -(row as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        (self.rotation * Vector3::new(x, y, -1.0)).normalize()
    }
}

/// One ray per pixel in row-major order.
pub fn generate_rays(pose: &CameraPose, near: f64, far: f64) -> Result<Vec<Ray>> {
    pose.validate()?;
    if !(near >= 0.0 && far > near) {
        return Err(Error::validation(format!(
            "ray bounds must satisfy 0 <= near < far, got near={near} far={far}"
        )));
    }
    let mut rays = Vec::with_capacity(pose.width * pose.height);
    for row in 0..pose.height {
        for col in 0..pose.width {
            rays.push(Ray {
                origin: pose.translation,
                direction: pose.pixel_direction(col, row),
                near,
                far,
            });
        }
    }
    Ok(rays)
}

/// `frames` poses evenly spaced in azimuth around the +z axis, at the mean
/// distance and mean elevation of `cameras`, looking at the origin.
/// Intrinsics come from the first camera.
pub fn orbit_sweep(cameras: &[CameraPose], frames: usize) -> Result<Vec<CameraPose>> {
    let first = cameras.first().ok_or_else(|| Error::validation("an orbit needs at least one reference camera"))?;
    let n = cameras.len() as f64;
    let radius = cameras.iter().map(|c| c.translation.norm()).sum::<f64>() / n;
    let elevation = cameras
        .iter()
        .map(|c| (c.translation.z / c.translation.norm()).asin().to_degrees())
        .sum::<f64>()
        / n;
    (0..frames)
        .map(|i| {
            let azimuth = 360.0 * i as f64 / frames as f64;
            CameraPose::orbit(azimuth, elevation, radius, first.focal, first.width, first.height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_pose(size: usize) -> CameraPose {
        CameraPose::new(Matrix3::identity(), Vector3::zeros(), 10.0, size, size).unwrap()
    }

    #[test]
    fn center_pixel_of_identity_pose_looks_down_negative_z() {
        let pose = identity_pose(5);
        let rays = generate_rays(&pose, 0.0, 1.0).unwrap();
        assert_eq!(rays.len(), 25);
        let center = rays[2 * 5 + 2];
        assert!((center.direction - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn translation_only_pose_shares_origin() {
        let t = Vector3::new(1.0, -2.0, 3.5);
        let pose = CameraPose::new(Matrix3::identity(), t, 8.0, 4, 3).unwrap();
        let rays = generate_rays(&pose, 0.5, 2.0).unwrap();
        assert_eq!(rays.len(), 12);
        assert!(rays.iter().all(|r| r.origin == t));
        assert!(rays.iter().all(|r| (r.direction.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn yaw_rotates_forward_axis() {
        // 90° about +y maps camera −z onto world −x.
        let rotation = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
        let pose = CameraPose::new(rotation, Vector3::zeros(), 10.0, 7, 7).unwrap();
        let rays = generate_rays(&pose, 0.0, 1.0).unwrap();
        let center = rays[3 * 7 + 3];
        assert!((center.direction - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn image_axes_follow_convention() {
        let pose = identity_pose(4);
        let top_left = pose.pixel_direction(0, 0);
        assert!(top_left.x < 0.0 && top_left.y > 0.0 && top_left.z < 0.0);
    }

    #[test]
    fn rejects_reflection_and_skew() {
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraPose::new(reflection, Vector3::zeros(), 1.0, 2, 2).unwrap_err().is_validation());
        let mut skew = Matrix3::identity();
        skew[(0, 1)] = 0.1;
        assert!(CameraPose::new(skew, Vector3::zeros(), 1.0, 2, 2).is_err());
    }

    #[test]
    fn orbit_looks_at_origin() {
        let pose = CameraPose::orbit(30.0, 20.0, 4.0, 50.0, 9, 9).unwrap();
        assert!((pose.translation.norm() - 4.0).abs() < 1e-12);
        let towards_origin = -pose.translation.normalize();
        assert!((pose.forward() - towards_origin).norm() < 1e-12);
        let rays = generate_rays(&pose, 2.0, 6.0).unwrap();
        assert!((rays[4 * 9 + 4].direction - towards_origin).norm() < 1e-9);
    }

    #[test]
    fn matrix_round_trip() {
        let pose = CameraPose::orbit(-75.0, 40.0, 3.0, 20.0, 8, 6).unwrap();
        let back = CameraPose::from_matrix(&pose.to_matrix(), 20.0, 8, 6).unwrap();
        assert_eq!(pose, back);
    }

    #[test]
    fn invalid_ray_bounds() {
        let pose = identity_pose(2);
        assert!(generate_rays(&pose, 2.0, 2.0).is_err());
        assert!(Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 2.0), 0.0, 1.0).is_err());
    }

    #[test]
    fn orbit_sweep_keeps_radius_and_elevation() {
        let cams: Vec<CameraPose> = [(0.0, 20.0, 3.0), (90.0, 40.0, 5.0)]
            .iter()
            .map(|(az, el, r)| CameraPose::orbit(*az, *el, *r, 7.0, 16, 12).unwrap())
            .collect();
        let sweep = orbit_sweep(&cams, 60).unwrap();
        assert_eq!(sweep.len(), 60);
        for pose in &sweep {
            assert!((pose.translation.norm() - 4.0).abs() < 1e-9);
            assert!(((pose.translation.z / 4.0).asin().to_degrees() - 30.0).abs() < 1e-9);
            assert_eq!((pose.focal, pose.width, pose.height), (7.0, 16, 12));
        }
        assert!((sweep[15].translation - Vector3::new(0.0, 4.0 * 30f64.to_radians().cos(), 2.0)).norm() < 1e-9);
        assert!(orbit_sweep(&[], 3).unwrap_err().is_validation());
    }
}
