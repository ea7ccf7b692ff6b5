use serde::{Deserialize, Serialize};

use super::BevGridSpec;
use crate::error::{Error, Result};

/// Points closer than this to the image plane (camera-frame depth, meters)
/// are treated as behind the camera.
pub const MIN_DEPTH: f64 = 0.1;

/// Pinhole camera with a rigid vehicle→camera extrinsic.
///
/// The camera frame is `x` right, `y` down, `z` along the optical axis; the
/// vehicle frame is `(forward, left, up)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4×4 vehicle→camera transform.
    pub extrinsic: [f64; 16],
    pub image_w: usize,
    pub image_h: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let e = &self.extrinsic;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extrinsic".into()));
        }
        let r = |i: usize, j: usize| e[i * 4 + j];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r(k, i) * r(k, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::InvalidArgument("extrinsic rotation is not orthonormal".into()));
                }
            }
        }
        let det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) - r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0))
            + r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
        if det < 0.0 {
            return Err(Error::InvalidArgument("extrinsic rotation is a reflection".into()));
        }
        if e[12..] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument("extrinsic last row must be [0 0 0 1]".into()));
        }
        Ok(())
    }

    /// A camera mounted `height` meters above the vehicle origin, rotated by
    /// `yaw` (positive to the left) and pitched down by `pitch`, with a
    /// horizontal field of view `hfov` (radians) and square pixels.
    pub fn mounted(yaw: f64, pitch: f64, height: f64, hfov: f64, image_w: usize, image_h: usize) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let fwd = [cy * cp, sy * cp, -sp];
        let right = [sy, -cy, 0.0];
        // down = forward × right
        let down = [
            fwd[1] * right[2] - fwd[2] * right[1],
            fwd[2] * right[0] - fwd[0] * right[2],
            fwd[0] * right[1] - fwd[1] * right[0],
        ];
        let rows = [right, down, fwd];
        let pos = [0.0, 0.0, height];
        let mut e = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                e[i * 4 + j] = rows[i][j];
            }
            e[i * 4 + 3] = -(0..3).map(|k| rows[i][k] * pos[k]).sum::<f64>();
        }
        e[15] = 1.0;
        let f = (image_w as f64 / 2.0) / (hfov / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (image_w as f64 - 1.0) / 2.0,
            cy: (image_h as f64 - 1.0) / 2.0,
            extrinsic: e,
            image_w,
            image_h,
        }
    }

    /// The standard trinocular rig: left, center, right at ±60° yaw.
    pub fn trinocular_rig(image_w: usize, image_h: usize) -> [CameraModel; 3] {
        let deg = std::f64::consts::PI / 180.0;
        [60.0, 0.0, -60.0].map(|yaw| Self::mounted(yaw * deg, 20.0 * deg, 1.6, 90.0 * deg, image_w, image_h))
    }

    /// Vehicle-frame point to camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[i * 4] * p[0] + e[i * 4 + 1] * p[1] + e[i * 4 + 2] * p[2] + e[i * 4 + 3];
        }
        out
    }

    /// Camera frame to vehicle frame.
    pub fn to_vehicle(&self, pc: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        let t = [e[3], e[7], e[11]];
        let d = [pc[0] - t[0], pc[1] - t[1], pc[2] - t[2]];
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|i| e[i * 4 + j] * d[i]).sum();
        }
        out
    }

    /// Pinhole projection of a camera-frame point; `None` if it is not in
    /// front of the camera.
    pub fn project_camera(&self, pc: [f64; 3]) -> Option<(f64, f64)> {
        (pc[2] > MIN_DEPTH).then(|| (self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u <= self.image_w as f64 - 0.5 && v <= self.image_h as f64 - 0.5
    }

    /// Vehicle-frame ray direction (unnormalized) through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        let dc = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let e = &self.extrinsic;
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|i| e[i * 4 + j] * dc[i]).sum();
        }
        out
    }

    /// Camera center in the vehicle frame.
    pub fn center(&self) -> [f64; 3] {
        self.to_vehicle([0.0; 3])
    }
}

/// Image-plane reference points of every BEV pillar sample, ordered
/// `(row, col, level)` with `level` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoints {
    pub cells: usize,
    pub levels: usize,
    /// `(u, v)` image pixels; meaningless where `valid` is false.
    pub uv: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl ProjectedPoints {
    /// Converts image pixels to the grid of a stride-`s` patch projection,
    /// where feature cell `j` covers pixels `[s*j, s*j + s - 1]`.
    pub fn to_feature_coords(&self, stride: usize) -> Vec<[f64; 2]> {
        let s = stride as f64;
        let off = (s - 1.0) / 2.0;
        self.uv.iter().map(|p| [(p[0] - off) / s, (p[1] - off) / s]).collect()
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }
}

/// Projects the center of every `l×w×h` grid cell into the camera image.
pub fn project_bev_points(spec: &BevGridSpec, cam: &CameraModel) -> Result<ProjectedPoints> {
    spec.validate()?;
    cam.validate()?;
    let heights = spec.pillar_heights();
    let n = spec.n_cells() * heights.len();
    let mut uv = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for r in 0..spec.cells_l {
        for c in 0..spec.cells_w {
            let (f, right) = spec.cell_to_metric(r as f64, c as f64);
            for &z in &heights {
                let pc = cam.to_camera([f, -right, z]);
                match cam.project_camera(pc) {
                    Some((u, v)) => {
                        uv.push([u, v]);
                        valid.push(cam.in_image(u, v));
                    }
                    None => {
                        uv.push([0.0, 0.0]);
                        valid.push(false);
                    }
                }
            }
        }
    }
    Ok(ProjectedPoints {
        cells: spec.n_cells(),
        levels: heights.len(),
        uv,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn forward_cam() -> CameraModel {
        CameraModel::mounted(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2, 224, 224)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = forward_cam();
        for z in [0.2, 5.0, 100.0] {
            let (u, v) = cam.project_camera([0.0, 0.0, z]).unwrap();
            assert_eq!((u, v), (cam.cx, cam.cy));
        }
        // a vehicle-frame point 5 m straight ahead is on the optical axis
        let pc = cam.to_camera([5.0, 0.0, 0.0]);
        let (u, v) = cam.project_camera(pc).unwrap();
        assert!((u - cam.cx).abs() < 1e-12 && (v - cam.cy).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let cam = forward_cam();
        assert!(cam.project_camera(cam.to_camera([-3.0, 0.0, 0.0])).is_none());
        assert!(cam.project_camera([0.0, 0.0, 0.05]).is_none());
    }

    #[test]
    fn rig_cameras_are_valid_and_see_the_ground() {
        for cam in CameraModel::trinocular_rig(224, 224) {
            cam.validate().unwrap();
            let pts = project_bev_points(&BevGridSpec::default(), &cam).unwrap();
            assert!(pts.any_valid());
            let c = cam.center();
            assert!((c[2] - 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_extrinsic_rejected() {
        let mut cam = forward_cam();
        cam.extrinsic[..3].fill(0.0);
        assert!(cam.validate().is_err());
        let mut cam = forward_cam();
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn projections_match_homogeneous_matrix_oracle() {
        let spec = BevGridSpec::default();
        let cam = CameraModel::trinocular_rig(224, 224)[1].clone();
        let pts = project_bev_points(&spec, &cam).unwrap();
        let k = [[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 10 {
            let (r, c, lvl) = (rng.random_range(0..28), rng.random_range(0..28), rng.random_range(0..5));
            let idx = (r * 28 + c) * 5 + lvl;
            let fwd = (13.5 - r as f64) * 0.916;
            let right = (c as f64 - 13.5) * 0.916;
            let hom = [fwd, -right, (lvl as f64 + 0.5) * 0.4, 1.0];
            // P = K [I|0] E
            let mut pc = [0.0; 3];
            for (i, p) in pc.iter_mut().enumerate() {
                *p = (0..4).map(|j| cam.extrinsic[i * 4 + j] * hom[j]).sum();
            }
            let mut uvw = [0.0; 3];
            for (i, v) in uvw.iter_mut().enumerate() {
                *v = (0..3).map(|j| k[i][j] * pc[j]).sum();
            }
            if uvw[2] <= MIN_DEPTH {
                assert!(!pts.valid[idx]);
                continue;
            }
            let (u, v) = (uvw[0] / uvw[2], uvw[1] / uvw[2]);
            assert!((pts.uv[idx][0] - u).abs() < 1e-9 && (pts.uv[idx][1] - v).abs() < 1e-9);
            assert_eq!(pts.valid[idx], u >= -0.5 && v >= -0.5 && u <= 223.5 && v <= 223.5);
            checked += 1;
        }
    }
}
