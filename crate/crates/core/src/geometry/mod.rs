//! SE(2) pose algebra, the vehicle-centric BEV grid, pinhole projection of
//! grid cells, and UTM ↔ raster pixel conversion.
//!
//! Conventions used throughout the crate:
//! - azimuth is measured clockwise from map north, in radians;
//! - the 2D vehicle frame is `(forward, right)`; the 3D vehicle frame is
//!   `(forward, left, up)`;
//! - BEV grid row 0 is the front-most row, columns increase to the right,
//!   the vehicle sits at the grid center;
//! - raster pixel `(0, 0)` is top-left, rows grow southward, columns eastward.

mod camera;
mod sample;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use camera::{project_bev_points, CameraModel, ProjectedPoints, MIN_DEPTH};
pub use sample::{bilinear_sample, bilinear_sample_points, bilinear_sample_points_vjp, SampleGrad};

use crate::error::{Error, Result};

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Vehicle pose in UTM meters with clockwise-from-north azimuth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub easting: f64,
    pub northing: f64,
    pub azimuth: f64,
}

impl Pose2 {
    /// Builds a pose, normalizing the azimuth. Panics on non-finite input;
    /// use [`Pose2::try_new`] for untrusted values.
    pub fn new(easting: f64, northing: f64, azimuth: f64) -> Self {
        Self::try_new(easting, northing, azimuth).expect("finite pose")
    }

    pub fn try_new(easting: f64, northing: f64, azimuth: f64) -> Result<Self> {
        if !(easting.is_finite() && northing.is_finite() && azimuth.is_finite()) {
            return Err(Error::NonFinite(format!("pose ({easting}, {northing}, {azimuth})")));
        }
        Ok(Self {
            easting,
            northing,
            azimuth: wrap_angle(azimuth),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.easting.is_finite() && self.northing.is_finite() && self.azimuth.is_finite()
    }

    /// Unit heading vector in `(east, north)`.
    pub fn heading(&self) -> (f64, f64) {
        (self.azimuth.sin(), self.azimuth.cos())
    }

    /// Vehicle-frame `(forward, right)` offset to world `(east, north)`.
    pub fn vehicle_to_world(&self, forward: f64, right: f64) -> (f64, f64) {
        let (s, c) = self.azimuth.sin_cos();
        (
            self.easting + forward * s + right * c,
            self.northing + forward * c - right * s,
        )
    }

    /// World `(east, north)` to vehicle-frame `(forward, right)`.
    pub fn world_to_vehicle(&self, easting: f64, northing: f64) -> (f64, f64) {
        let (s, c) = self.azimuth.sin_cos();
        let (de, dn) = (easting - self.easting, northing - self.northing);
        (de * s + dn * c, de * c - dn * s)
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }
}

/// Relative SE(2) motion in the previous vehicle frame:
/// `dx` forward, `dy` right, `dtheta` clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl PoseDelta {
    pub const IDENTITY: PoseDelta = PoseDelta {
        dx: 0.0,
        dy: 0.0,
        dtheta: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self {
            dx,
            dy,
            dtheta: wrap_angle(dtheta),
        }
    }

    /// Maps a point given in the current vehicle frame into the previous one.
    pub fn apply(&self, forward: f64, right: f64) -> (f64, f64) {
        let (s, c) = self.dtheta.sin_cos();
        (c * forward - s * right + self.dx, s * forward + c * right + self.dy)
    }

    /// The relative motion that undoes `self`.
    pub fn inverse(&self) -> PoseDelta {
        let (s, c) = self.dtheta.sin_cos();
        PoseDelta::new(
            -(c * self.dx + s * self.dy),
            -(-s * self.dx + c * self.dy),
            -self.dtheta,
        )
    }
}

/// Motion of `current` expressed in the `previous` vehicle frame.
pub fn pose_delta(current: &Pose2, previous: &Pose2) -> Result<PoseDelta> {
    if !current.is_finite() || !previous.is_finite() {
        return Err(Error::NonFinite("pose_delta input".into()));
    }
    let (dx, dy) = previous.world_to_vehicle(current.easting, current.northing);
    Ok(PoseDelta::new(dx, dy, current.azimuth - previous.azimuth))
}

/// Extent and discretization of the vehicle-centric BEV volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    /// Forward extent, meters.
    pub length: f64,
    /// Lateral extent, meters.
    pub width: f64,
    pub height: f64,
    pub cells_l: usize,
    pub cells_w: usize,
    pub cells_h: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self {
            length: 25.648,
            width: 25.648,
            height: 2.0,
            cells_l: 28,
            cells_w: 28,
            cells_h: 5,
        }
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.length, self.width, self.height]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
            && self.cells_l > 0
            && self.cells_w > 0
            && self.cells_h > 0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid BEV grid {self:?}")));
        }
        Ok(())
    }

    /// Cell size `(forward, lateral, vertical)` in meters.
    pub fn cell_size(&self) -> (f64, f64, f64) {
        (
            self.length / self.cells_l as f64,
            self.width / self.cells_w as f64,
            self.height / self.cells_h as f64,
        )
    }

    pub fn n_cells(&self) -> usize {
        self.cells_l * self.cells_w
    }

    /// Metric `(forward, right)` of a continuous cell coordinate.
    pub fn cell_to_metric(&self, row: f64, col: f64) -> (f64, f64) {
        let (cl, cw, _) = self.cell_size();
        (
            ((self.cells_l as f64 - 1.0) / 2.0 - row) * cl,
            (col - (self.cells_w as f64 - 1.0) / 2.0) * cw,
        )
    }

    pub fn metric_to_cell(&self, forward: f64, right: f64) -> (f64, f64) {
        let (cl, cw, _) = self.cell_size();
        (
            (self.cells_l as f64 - 1.0) / 2.0 - forward / cl,
            (self.cells_w as f64 - 1.0) / 2.0 + right / cw,
        )
    }

    /// Heights above ground of the pillar sample points (cell centers).
    pub fn pillar_heights(&self) -> Vec<f64> {
        let (_, _, ch) = self.cell_size();
        (0..self.cells_h).map(|k| (k as f64 + 0.5) * ch).collect()
    }
}

/// Per-cell source coordinates produced by [`warp_grid`].
///
/// Points are stored as `(x, y) = (col, row)` in continuous cell units,
/// row-major over the target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub rows: usize,
    pub cols: usize,
    pub points: Vec<[f64; 2]>,
    /// `false` where the source coordinate falls outside the source grid.
    pub in_range: Vec<bool>,
}

impl SampleGrid {
    pub fn identity(rows: usize, cols: usize) -> Self {
        let points = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| [c as f64, r as f64]))
            .collect();
        Self {
            rows,
            cols,
            points,
            in_range: vec![true; rows * cols],
        }
    }
}

/// SE(2) warp between two BEV grids of the same spec, in cell units.
#[derive(Debug, Clone, Copy)]
pub struct CellWarp {
    pub spec: BevGridSpec,
    pub delta: PoseDelta,
}

impl CellWarp {
    /// Source `(row, col)` for a target `(row, col)`.
    pub fn apply(&self, row: f64, col: f64) -> (f64, f64) {
        if self.delta == PoseDelta::IDENTITY {
            return (row, col);
        }
        let (f, r) = self.spec.cell_to_metric(row, col);
        let (f0, r0) = self.delta.apply(f, r);
        self.spec.metric_to_cell(f0, r0)
    }
}

/// For each target cell center, the coordinate in the source (previous)
/// grid it should be sampled from.
pub fn warp_grid(spec: &BevGridSpec, delta: &PoseDelta) -> SampleGrid {
    let warp = CellWarp {
        spec: *spec,
        delta: *delta,
    };
    let (l, w) = (spec.cells_l, spec.cells_w);
    let mut points = Vec::with_capacity(l * w);
    let mut in_range = Vec::with_capacity(l * w);
    for r in 0..l {
        for c in 0..w {
            let (sr, sc) = warp.apply(r as f64, c as f64);
            points.push([sc, sr]);
            let inside = |v: f64, n: usize| v >= -1e-9 && v <= (n - 1) as f64 + 1e-9;
            in_range.push(inside(sr, l) && inside(sc, w));
        }
    }
    SampleGrid {
        rows: l,
        cols: w,
        points,
        in_range,
    }
}

/// Georeference of a north-up raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    /// UTM easting of pixel `(0, 0)`.
    pub origin_easting: f64,
    /// UTM northing of pixel `(0, 0)`.
    pub origin_northing: f64,
    pub m_per_px: f64,
}

impl GeoTransform {
    pub fn new(origin_easting: f64, origin_northing: f64, m_per_px: f64) -> Result<Self> {
        let gt = Self {
            origin_easting,
            origin_northing,
            m_per_px,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_per_px.is_finite() && self.m_per_px > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "m_per_px must be positive, got {}",
                self.m_per_px
            )));
        }
        if !(self.origin_easting.is_finite() && self.origin_northing.is_finite()) {
            return Err(Error::NonFinite("raster origin".into()));
        }
        Ok(())
    }

    /// Continuous `(row, col)` of a UTM position.
    pub fn utm_to_pixel(&self, easting: f64, northing: f64) -> (f64, f64) {
        (
            (self.origin_northing - northing) / self.m_per_px,
            (easting - self.origin_easting) / self.m_per_px,
        )
    }

    pub fn pose_to_pixel(&self, p: &Pose2) -> (f64, f64) {
        self.utm_to_pixel(p.easting, p.northing)
    }

    /// UTM `(easting, northing)` of a continuous pixel position.
    pub fn pixel_to_utm(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_easting + col * self.m_per_px,
            self.origin_northing - row * self.m_per_px,
        )
    }

    /// Pixel count needed to cover `meters`, rounded up. Exact multiples of
    /// the resolution are not bumped by floating point noise.
    pub fn meters_to_px_ceil(&self, meters: f64) -> usize {
        let px = meters / self.m_per_px;
        (px - 1e-9).ceil().max(0.0) as usize
    }

    /// The transform of a sub-raster whose pixel `(0, 0)` is this raster's
    /// `(row0, col0)`.
    pub fn offset(&self, row0: i64, col0: i64) -> GeoTransform {
        let (e, n) = self.pixel_to_utm(row0 as f64, col0 as f64);
        GeoTransform {
            origin_easting: e,
            origin_northing: n,
            m_per_px: self.m_per_px,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Homogeneous vehicle→world matrix in `(forward, right)` coordinates.
    fn to_world(p: &Pose2) -> [[f64; 3]; 3] {
        let (s, c) = p.azimuth.sin_cos();
        [[s, c, p.easting], [c, -s, p.northing], [0.0, 0.0, 1.0]]
    }

    fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                let (c, d) = ((i + 1) % 3, (i + 2) % 3);
                out[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
            }
        }
        out
    }

    fn mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    #[test]
    fn identical_poses_give_zero_delta() {
        let p = Pose2::new(583_000.0, 4_477_000.0, 1.1);
        assert_eq!(pose_delta(&p, &p).unwrap(), PoseDelta::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn pure_translation_keeps_norm() {
        let prev = Pose2::new(0.0, 0.0, 0.0);
        let cur = Pose2::new(2.0, 0.0, 0.0);
        let d = pose_delta(&cur, &prev).unwrap();
        assert!((d.dx.hypot(d.dy) - 2.0).abs() < 1e-12);
        assert_eq!(d.dtheta, 0.0);
        // heading north, moving east is moving right
        assert!((d.dy - 2.0).abs() < 1e-12);
    }

    #[test]
    fn delta_matches_matrix_composition() {
        let prev = Pose2::new(100.0, 50.0, PI / 2.0);
        let cur = Pose2::new(100.0, 52.0, PI / 2.0);
        let d = pose_delta(&cur, &prev).unwrap();
        let m = mul3(&inv3(&to_world(&prev)), &to_world(&cur));
        assert!((d.dx - m[0][2]).abs() < 1e-12);
        assert!((d.dy - m[1][2]).abs() < 1e-12);
        assert!((d.dtheta - m[1][0].atan2(m[0][0])).abs() < 1e-12);
        // heading east, moving north is moving left
        assert!((d.dy + 2.0).abs() < 1e-12 && d.dx.abs() < 1e-12);
    }

    #[test]
    fn non_finite_pose_rejected() {
        assert!(Pose2::try_new(f64::NAN, 0.0, 0.0).is_err());
        let bad = Pose2 {
            easting: 0.0,
            northing: f64::INFINITY,
            azimuth: 0.0,
        };
        assert!(pose_delta(&bad, &Pose2::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-PI - 0.1) - (PI - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn default_grid_cell_size() {
        let (a, b, c) = BevGridSpec::default().cell_size();
        assert!((a - 0.916).abs() < 1e-12 && (b - 0.916).abs() < 1e-12 && (c - 0.4).abs() < 1e-12);
    }

    #[test]
    fn zero_warp_is_identity() {
        let spec = BevGridSpec::default();
        let g = warp_grid(&spec, &PoseDelta::IDENTITY);
        assert_eq!(g, SampleGrid::identity(28, 28));
    }

    #[test]
    fn one_cell_forward_shifts_one_row() {
        let spec = BevGridSpec::default();
        let (cl, _, _) = spec.cell_size();
        let g = warp_grid(&spec, &PoseDelta::new(cl, 0.0, 0.0));
        for r in 0..28 {
            for c in 0..28 {
                let p = g.points[r * 28 + c];
                assert!((p[0] - c as f64).abs() < 1e-12);
                assert!((p[1] - (r as f64 - 1.0)).abs() < 1e-12);
            }
        }
        assert!(!g.in_range[0] && g.in_range[28]);
    }

    #[test]
    fn warp_then_inverse_returns_cell_centers() {
        let spec = BevGridSpec::default();
        let d = PoseDelta::new(1.3, -0.7, 0.2);
        let fwd = CellWarp { spec, delta: d };
        let back = CellWarp {
            spec,
            delta: d.inverse(),
        };
        for r in 4..24 {
            for c in 4..24 {
                let (r1, c1) = back.apply(r as f64, c as f64);
                let (r2, c2) = fwd.apply(r1, c1);
                assert!((r2 - r as f64).abs() < 1e-9 && (c2 - c as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn paper_pixel_constants() {
        let gt = GeoTransform::new(0.0, 0.0, 0.229).unwrap();
        let (_, col) = gt.utm_to_pixel(25.648, 0.0);
        assert!((col - 112.0).abs() < 1e-9);
        let (_, col) = gt.utm_to_pixel(51.296, 0.0);
        assert!((col - 224.0).abs() < 1e-9);
        assert_eq!(gt.utm_to_pixel(0.0, 0.0), (0.0, 0.0));
        assert_eq!(gt.meters_to_px_ceil(200.0), 874);
        assert_eq!(gt.meters_to_px_ceil(100.0), 437);
        assert_eq!(gt.meters_to_px_ceil(0.0), 0);
        assert_eq!(gt.meters_to_px_ceil(51.296), 224);
    }

    #[test]
    fn geotransform_rejects_bad_resolution() {
        assert!(GeoTransform::new(0.0, 0.0, 0.0).is_err());
        assert!(GeoTransform::new(0.0, 0.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn pixel_round_trip(e in -1e6f64..1e6, n in -1e6f64..1e6, m in 0.05f64..2.0) {
            // local origin: absolute UTM northings (~4e6 m) are below 1e-9 m resolution in f64
            let gt = GeoTransform::new(1_234.5, 6_789.0, m).unwrap();
            let (r, c) = gt.utm_to_pixel(e * 1e-2, n * 1e-2);
            let (e2, n2) = gt.pixel_to_utm(r, c);
            prop_assert!((e2 - e * 1e-2).abs() < 1e-9);
            prop_assert!((n2 - n * 1e-2).abs() < 1e-9);
        }

        #[test]
        fn self_delta_is_zero(e in -1e5f64..1e5, n in -1e5f64..1e5, a in -10.0f64..10.0) {
            let p = Pose2::new(e, n, a);
            let d = pose_delta(&p, &p).unwrap();
            prop_assert_eq!(d, PoseDelta::new(0.0, 0.0, 0.0));
        }

        #[test]
        fn inverse_composes_to_identity(dx in -5.0f64..5.0, dy in -5.0f64..5.0, t in -3.0f64..3.0,
                                        f in -10.0f64..10.0, r in -10.0f64..10.0) {
            let d = PoseDelta::new(dx, dy, t);
            let (a, b) = d.apply(f, r);
            let (f2, r2) = d.inverse().apply(a, b);
            prop_assert!((f2 - f).abs() < 1e-9 && (r2 - r).abs() < 1e-9);
        }
    }
}
