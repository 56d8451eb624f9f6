use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Pinhole camera: 3×3 intrinsic projection and 4×4 ego→camera transform.
///
/// Camera axes follow the optical convention: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub intrinsic: [[f64; 3]; 3],
    pub extrinsic: [[f64; 4]; 4],
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub z_near: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

impl CameraParams {
    /// Camera at `position` (ego frame) looking along `yaw` (left positive)
    /// and pitched down by `pitch_down`, with horizontal field of view `hfov`
    /// (radians) and square pixels.
    pub fn looking(
        position: Point3,
        yaw: f64,
        pitch_down: f64,
        hfov: f64,
        image_size: (usize, usize),
    ) -> Self {
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        let f = (w / 2.0) / (hfov / 2.0).tan();
        let forward = [
            yaw.cos() * pitch_down.cos(),
            yaw.sin() * pitch_down.cos(),
            -pitch_down.sin(),
        ];
        let right = [yaw.sin(), -yaw.cos(), 0.0];
        let down = cross(forward, right);
        let rot = [right, down, forward];
        let mut extrinsic = [[0.0; 4]; 4];
        for i in 0..3 {
            extrinsic[i][..3].copy_from_slice(&rot[i]);
            extrinsic[i][3] = -(0..3).map(|k| rot[i][k] * position[k]).sum::<f64>();
        }
        extrinsic[3][3] = 1.0;
        CameraParams {
            intrinsic: [[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]],
            extrinsic,
            image_size,
            z_near: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intrinsic[2] != [0.0, 0.0, 1.0] {
            return Err(Error::InvalidConfig(
                "intrinsic bottom row must be (0, 0, 1)".into(),
            ));
        }
        if self.extrinsic[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidConfig(
                "extrinsic bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3)
                    .map(|k| self.extrinsic[i][k] * self.extrinsic[j][k])
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(
                        "extrinsic rotation is not orthonormal".into(),
                    ));
                }
            }
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidConfig("empty image size".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    /// Projects an ego-frame point. `valid` requires depth beyond `z_near`
    /// and a pixel inside `[0, width) × [0, height)`.
    pub fn project(&self, point: Point3) -> Projection {
        let e = &self.extrinsic;
        let cam: [f64; 3] = std::array::from_fn(|i| {
            e[i][0] * point[0] + e[i][1] * point[1] + e[i][2] * point[2] + e[i][3]
        });
        let k = &self.intrinsic;
        let p: [f64; 3] =
            std::array::from_fn(|i| k[i][0] * cam[0] + k[i][1] * cam[1] + k[i][2] * cam[2]);
        let depth = p[2];
        let pixel = [p[0] / depth, p[1] / depth];
        let valid = depth > self.z_near
            && pixel[0] >= 0.0
            && pixel[0] < self.width() as f64
            && pixel[1] >= 0.0
            && pixel[1] < self.height() as f64;
        Projection {
            pixel,
            depth,
            valid,
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Free-function form of [`CameraParams::project`].
pub fn project_to_camera(point: Point3, cam: &CameraParams) -> Projection {
    cam.project(point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera() -> CameraParams {
        let mut extrinsic = [[0.0; 4]; 4];
        for (i, row) in extrinsic.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraParams {
            intrinsic: [[100.0, 0.0, 64.0], [0.0, 100.0, 32.0], [0.0, 0.0, 1.0]],
            extrinsic,
            image_size: (64, 128),
            z_near: 0.1,
        }
    }

    #[test]
    fn forward_point_hits_principal_point() {
        let p = identity_camera().project([0.0, 0.0, 5.0]);
        assert!(p.valid);
        assert_eq!(p.pixel, [64.0, 32.0]);
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        assert!(!identity_camera().project([0.0, 0.0, -5.0]).valid);
        assert!(!identity_camera().project([0.0, 0.0, 0.05]).valid);
        assert!(!identity_camera().project([100.0, 0.0, 1.0]).valid);
    }

    #[test]
    fn matches_matrix_chain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = CameraParams::looking([1.0, 0.3, 1.6], 0.4, 0.2, 1.6, (64, 128));
        cam.validate().unwrap();
        for _ in 0..100 {
            let x: [f64; 4] = [
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-2.0..2.0),
                1.0,
            ];
            // Homogeneous chain [K | 0] · E · x.
            let mut k4 = [[0.0; 4]; 3];
            for i in 0..3 {
                k4[i][..3].copy_from_slice(&cam.intrinsic[i]);
            }
            let mut ex = [0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    ex[i] += cam.extrinsic[i][j] * x[j];
                }
            }
            let mut p = [0.0; 3];
            for i in 0..3 {
                for j in 0..4 {
                    p[i] += k4[i][j] * ex[j];
                }
            }
            let got = cam.project([x[0], x[1], x[2]]);
            assert!((got.pixel[0] - p[0] / p[2]).abs() < 1e-9);
            assert!((got.pixel[1] - p[1] / p[2]).abs() < 1e-9);
            assert!((got.depth - p[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn looking_camera_sees_forward_ground() {
        let cam = CameraParams::looking([0.0, 0.0, 1.6], 0.0, 0.2, 1.7, (64, 128));
        let p = cam.project([5.0, 0.0, 0.0]);
        assert!(p.valid);
        assert!((p.pixel[0] - 64.0).abs() < 1e-9);
        assert!(p.pixel[1] > 32.0);
        assert!(!cam.project([-10.0, 0.0, 0.0]).valid);
    }

    #[test]
    fn validation() {
        let mut cam = identity_camera();
        cam.validate().unwrap();
        cam.extrinsic[0][0] = 2.0;
        assert!(cam.validate().is_err());
        let mut cam = identity_camera();
        cam.intrinsic[2][2] = 2.0;
        assert!(cam.validate().is_err());
    }
}
