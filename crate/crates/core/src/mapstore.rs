//! Georeferenced aerial rasters: loading, rotated crops for labels, and
//! north-up search regions for registration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GeoTransform, Pose2};
use crate::imaging::RgbImage;

/// Pixel size of a BEV label image.
pub const LABEL_PX: usize = 224;

/// JSON sidecar describing a raster's georeference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMeta {
    pub origin_easting: f64,
    pub origin_northing: f64,
    pub m_per_px: f64,
}

impl From<GeoTransform> for MapMeta {
    fn from(g: GeoTransform) -> Self {
        Self {
            origin_easting: g.origin_easting,
            origin_northing: g.origin_northing,
            m_per_px: g.m_per_px,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoRaster {
    pub image: RgbImage,
    pub geo: GeoTransform,
}

impl GeoRaster {
    pub fn new(image: RgbImage, geo: GeoTransform) -> Result<Self> {
        if image.rows == 0 || image.cols == 0 {
            return Err(Error::InvalidArgument("raster must be at least 1x1".into()));
        }
        geo.validate()?;
        Ok(Self { image, geo })
    }

    pub fn rows(&self) -> usize {
        self.image.rows
    }

    pub fn cols(&self) -> usize {
        self.image.cols
    }

    /// Ground extent `(east-west, north-south)` in meters.
    pub fn extent_m(&self) -> (f64, f64) {
        (
            self.cols() as f64 * self.geo.m_per_px,
            self.rows() as f64 * self.geo.m_per_px,
        )
    }

    pub fn contains(&self, p: &Pose2) -> bool {
        let (r, c) = self.geo.pose_to_pixel(p);
        r >= 0.0 && c >= 0.0 && r <= (self.rows() - 1) as f64 && c <= (self.cols() - 1) as f64
    }

    pub fn save(&self, image_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<()> {
        self.image.save_png(image_path)?;
        let json = serde_json::to_string_pretty(&MapMeta::from(self.geo))?;
        std::fs::write(meta_path, json)?;
        Ok(())
    }
}

/// Loads a PNG raster and its JSON sidecar.
pub fn load_map(image_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<GeoRaster> {
    let meta_path = meta_path.as_ref();
    let text = std::fs::read_to_string(meta_path).map_err(|e| Error::load(meta_path, e.to_string()))?;
    let meta: MapMeta = serde_json::from_str(&text).map_err(|e| Error::load(meta_path, e.to_string()))?;
    let geo = GeoTransform::new(meta.origin_easting, meta.origin_northing, meta.m_per_px)
        .map_err(|e| Error::load(meta_path, e.to_string()))?;
    let image = RgbImage::load_png(image_path.as_ref())?;
    GeoRaster::new(image, geo).map_err(|e| Error::load(image_path.as_ref(), e.to_string()))
}

/// `out_px × out_px` crop centered on `center`, rotated so the heading
/// points up, bilinear-resampled with zero fill outside the map.
pub fn crop_rotated(map: &GeoRaster, center: &Pose2, out_px: usize) -> RgbImage {
    crop_rotated_scaled(map, center, out_px, 1.0)
}

/// [`crop_rotated`] with `scale` map pixels per output pixel, so the crop
/// covers `out_px * scale` map pixels. Point-sampled, no prefiltering.
pub fn crop_rotated_scaled(map: &GeoRaster, center: &Pose2, out_px: usize, scale: f64) -> RgbImage {
    let (pr, pc) = map.geo.pose_to_pixel(center);
    let (s, c) = center.azimuth.sin_cos();
    let (s, c) = (s * scale, c * scale);
    let half = (out_px as f64 - 1.0) / 2.0;
    let n = out_px * out_px;
    let mut out = RgbImage::zeros(out_px, out_px);
    for i in 0..out_px {
        let bi = i as f64 - half;
        for j in 0..out_px {
            let bj = j as f64 - half;
            let di = bi * c + bj * s;
            let dj = -bi * s + bj * c;
            let px = map.image.sample(pr + di, pc + dj);
            let idx = i * out_px + j;
            for (ch, v) in px.into_iter().enumerate() {
                out.data[ch * n + idx] = v;
            }
        }
    }
    out
}

/// Training label: the rotated crop of [`LABEL_PX`] pixels at `pose`.
pub fn label_for_pose(map: &GeoRaster, pose: &Pose2) -> RgbImage {
    crop_rotated(map, pose, LABEL_PX)
}

/// North-up sub-raster used as the NCC search area.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchRegion {
    pub image: RgbImage,
    /// Georeference of the sub-raster itself.
    pub geo: GeoTransform,
}

/// Unrotated square crop of `ceil(extent_m / m_per_px)` pixels centered on
/// the prior position. The crop is aligned to whole map pixels (a pure copy)
/// and zero-filled beyond the map.
pub fn search_region(map: &GeoRaster, prior: &Pose2, extent_m: f64) -> Result<SearchRegion> {
    if !(extent_m.is_finite() && extent_m > 0.0) {
        return Err(Error::InvalidArgument(format!("search extent {extent_m}")));
    }
    let size = map.geo.meters_to_px_ceil(extent_m);
    let (pr, pc) = map.geo.pose_to_pixel(prior);
    let half = (size as f64 - 1.0) / 2.0;
    let r0 = (pr - half).round() as i64;
    let c0 = (pc - half).round() as i64;
    let mut image = RgbImage::zeros(size, size);
    let (mr, mc) = (map.rows() as i64, map.cols() as i64);
    for ch in 0..3 {
        let src = map.image.plane(ch);
        let dst = image.plane_mut(ch);
        for i in 0..size {
            let r = r0 + i as i64;
            if r < 0 || r >= mr {
                continue;
            }
            let lo = (-c0).clamp(0, size as i64) as usize;
            let hi = (mc - c0).clamp(0, size as i64) as usize;
            if lo >= hi {
                continue;
            }
            let srow = &src[r as usize * map.cols()..][..map.cols()];
            dst[i * size + lo..i * size + hi]
                .copy_from_slice(&srow[(c0 + lo as i64) as usize..(c0 + hi as i64) as usize]);
        }
    }
    Ok(SearchRegion {
        image,
        geo: map.geo.offset(r0, c0),
    })
}
