use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera with a camera-to-world pose. The camera looks along its
/// local `-z` axis with `+y` up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Row-major 4x4 camera-to-world matrix.
    pub pose: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, pose: [[f64; 4]; 4], near: f64, far: f64) -> Result<Self> {
        let cam = Self { width, height, focal, pose, near, far };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "camera needs 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera needs positive focal length and size".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.pose[k][i] * self.pose[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-4 {
                    return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Camera that sits at `eye` and looks at `target`, with world `up`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        focal: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let cam_up = cross(back, right);
        let pose = [
            [right[0], cam_up[0], back[0], eye[0]],
            [right[1], cam_up[1], back[1], eye[1]],
            [right[2], cam_up[2], back[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Self::new(width, height, focal, pose, near, far)
    }

    pub fn origin(&self) -> Vec3 {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Unit world-space direction through continuous pixel coordinates
    /// `(u, v)` of the full-resolution image (pixel centers at `+0.5`).
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let local = [
            (u - 0.5 * self.width as f64) / self.focal,
            -(v - 0.5 * self.height as f64) / self.focal,
            -1.0,
        ];
        let r = &self.pose;
        normalize([
            r[0][0] * local[0] + r[0][1] * local[1] + r[0][2] * local[2],
            r[1][0] * local[0] + r[1][1] * local[1] + r[1][2] * local[2],
            r[2][0] * local[0] + r[2][1] * local[1] + r[2][2] * local[2],
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: [[f64; 4]; 4] =
        [[1., 0., 0., 0.], [0., 1., 0., 0.], [0., 0., 1., 3.], [0., 0., 0., 1.]];

    #[test]
    fn center_pixel_looks_down_negative_z() {
        let cam = Camera::new(64, 64, 80.0, IDENTITY, 1.0, 5.0).unwrap();
        let d = cam.direction(32.0, 32.0);
        assert!((d[0]).abs() < 1e-15 && (d[1]).abs() < 1e-15 && (d[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn look_at_points_toward_target() {
        let cam = Camera::look_at([0., -4., 1.], [0., 0., 0.], [0., 0., 1.], 32, 32, 40.0, 1.0, 6.0).unwrap();
        let d = cam.direction(16.0, 16.0);
        let want = normalize([0., 4., -1.]);
        for i in 0..3 {
            assert!((d[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_bounds_and_rotation() {
        assert!(Camera::new(8, 8, 10.0, IDENTITY, 2.0, 1.0).is_err());
        let mut skew = IDENTITY;
        skew[0][1] = 0.3;
        assert!(Camera::new(8, 8, 10.0, skew, 1.0, 2.0).is_err());
    }
}
