//! Sequences on disk, temporal window sampling with map-crop labels, and
//! procedurally generated synthetic worlds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{WindowFrame, VIEWS};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, CameraModel, GeoTransform, Pose2};
use crate::imaging::RgbImage;
use crate::mapstore::{crop_rotated_scaled, GeoRaster, LABEL_PX};
use crate::nncore::Tensor;
use crate::training::Example;

pub const POSES_FILE: &str = "poses.csv";
pub const CALIB_FILE: &str = "calib.json";
pub const FRAMES_DIR: &str = "frames";

/// One row of `poses.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub timestamp: f64,
    pub easting: f64,
    pub northing: f64,
    pub azimuth: f64,
}

impl PoseRow {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.easting, self.northing, self.azimuth)
    }
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<PoseRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    let rows: Vec<PoseRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::load(path, e.to_string()))?;
    for row in &rows {
        Pose2::try_new(row.easting, row.northing, row.azimuth)
            .map_err(|e| Error::load(path, format!("t={}: {e}", row.timestamp)))?;
    }
    Ok(rows)
}

pub fn write_poses(path: impl AsRef<Path>, rows: &[PoseRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Image file of one view at one timestamp, relative to the sequence root.
pub fn frame_file(timestamp: f64, view: &str) -> PathBuf {
    Path::new(FRAMES_DIR).join(format!("{timestamp:.3}_{view}.png"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    /// GNSS ground truth.
    pub pose: Pose2,
    /// Left, center and right images, relative to the sequence root.
    pub images: [PathBuf; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub root: PathBuf,
    /// Left, center, right.
    pub cameras: [CameraModel; 3],
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn new(root: impl Into<PathBuf>, cameras: [CameraModel; 3], frames: Vec<Frame>) -> Result<Self> {
        for c in &cameras {
            c.validate()?;
        }
        if let Some(w) = frames.windows(2).find(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::InvalidArgument(format!(
                "timestamps must be strictly increasing ({} then {})",
                w[0].timestamp, w[1].timestamp
            )));
        }
        Ok(Self {
            root: root.into(),
            cameras,
            frames,
        })
    }

    /// Reads `poses.csv` and `calib.json` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let calib_path = dir.join(CALIB_FILE);
        let text = std::fs::read_to_string(&calib_path).map_err(|e| Error::load(&calib_path, e.to_string()))?;
        let mut calib: BTreeMap<String, CameraModel> =
            serde_json::from_str(&text).map_err(|e| Error::load(&calib_path, e.to_string()))?;
        let mut take = |v: &str| {
            calib
                .remove(v)
                .ok_or_else(|| Error::load(&calib_path, format!("no camera `{v}`")))
        };
        let cameras = [take(VIEWS[0])?, take(VIEWS[1])?, take(VIEWS[2])?];
        let frames = read_poses(dir.join(POSES_FILE))?
            .into_iter()
            .map(|r| Frame {
                timestamp: r.timestamp,
                pose: r.pose(),
                images: VIEWS.map(|v| frame_file(r.timestamp, v)),
            })
            .collect();
        Self::new(dir, cameras, frames).map_err(|e| Error::load(dir, e.to_string()))
    }

    /// Writes `poses.csv` and `calib.json` under the root.
    pub fn write_manifest(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        let rows: Vec<PoseRow> = self
            .frames
            .iter()
            .map(|f| PoseRow {
                timestamp: f.timestamp,
                easting: f.pose.easting,
                northing: f.pose.northing,
                azimuth: f.pose.azimuth,
            })
            .collect();
        write_poses(self.root.join(POSES_FILE), &rows)?;
        let calib: BTreeMap<&str, &CameraModel> = VIEWS.iter().copied().zip(self.cameras.iter()).collect();
        std::fs::write(self.root.join(CALIB_FILE), serde_json::to_string_pretty(&calib)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The three views of frame `index` as `[3, 3, H, W]`.
    pub fn load_images(&self, index: usize) -> Result<Tensor<f32>> {
        let frame = self.frame(index)?;
        let (h, w) = (self.cameras[0].image_h, self.cameras[0].image_w);
        if self.cameras.iter().any(|c| c.image_h != h || c.image_w != w) {
            return Err(Error::InvalidArgument("views differ in image size".into()));
        }
        let mut data = Vec::with_capacity(9 * h * w);
        for rel in &frame.images {
            let path = self.root.join(rel);
            let img = RgbImage::load_png(&path)?;
            if (img.rows, img.cols) != (h, w) {
                return Err(Error::load(
                    &path,
                    format!("image is {}x{}, calibration says {h}x{w}", img.rows, img.cols),
                ));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::from_vec(&[3, 3, h, w], data)
    }

    fn frame(&self, index: usize) -> Result<&Frame> {
        self.frames.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("frame {index} out of range for {} frames", self.frames.len()))
        })
    }
}

/// Temporal window sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// How far back past frames may come from, seconds.
    pub span_s: f64,
    /// Past frames per sample; the current frame is added on top.
    pub past_frames: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            span_s: 5.0,
            past_frames: 5,
        }
    }
}

/// Size and ground coverage of a label image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub px: usize,
    /// Map pixels per label pixel.
    pub scale: f64,
}

impl Default for LabelSpec {
    fn default() -> Self {
        Self {
            px: LABEL_PX,
            scale: 1.0,
        }
    }
}

impl LabelSpec {
    /// A label of `px` pixels covering the same ground as the default one.
    pub fn for_render_size(px: usize) -> Self {
        Self {
            px,
            scale: LABEL_PX as f64 / px as f64,
        }
    }

    pub fn render(&self, map: &GeoRaster, pose: &Pose2) -> RgbImage {
        crop_rotated_scaled(map, pose, self.px, self.scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Frame indices, time-ordered, ending with the current frame.
    pub indices: Vec<usize>,
    pub pose: Pose2,
    pub label: RgbImage,
}

/// Frame indices for the window ending at `index`: up to `past_frames`
/// drawn uniformly without replacement from `[t - span, t)`, padded by
/// repeating the earliest one, then `index` itself. Deterministic in
/// `(index, seed)`.
pub fn select_window(seq: &Sequence, index: usize, cfg: &WindowConfig, seed: u64) -> Result<Vec<usize>> {
    let t = seq.frame(index)?.timestamp;
    let past: Vec<usize> = (0..index)
        .filter(|&i| seq.frames[i].timestamp >= t - cfg.span_s)
        .collect();
    let mut chosen = if past.len() <= cfg.past_frames {
        past
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let mut pick: Vec<usize> = rand::seq::index::sample(&mut rng, past.len(), cfg.past_frames)
            .into_iter()
            .map(|k| past[k])
            .collect();
        pick.sort_unstable();
        pick
    };
    if let Some(&first) = chosen.first() {
        while chosen.len() < cfg.past_frames {
            chosen.insert(0, first);
        }
    }
    chosen.push(index);
    Ok(chosen)
}

pub fn build_sample(
    seq: &Sequence,
    index: usize,
    cfg: &WindowConfig,
    map: &GeoRaster,
    label: &LabelSpec,
    seed: u64,
) -> Result<Sample> {
    let indices = select_window(seq, index, cfg, seed)?;
    let pose = seq.frames[index].pose;
    Ok(Sample {
        indices,
        pose,
        label: label.render(map, &pose),
    })
}

/// Loads the images of a sample into a training example.
pub fn load_example(seq: &Sequence, sample: &Sample) -> Result<Example> {
    let frames = sample
        .indices
        .iter()
        .map(|&i| {
            Ok(WindowFrame {
                images: seq.load_images(i)?,
                pose: seq.frames[i].pose,
                timestamp: seq.frames[i].timestamp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Example {
        frames,
        label: sample.label.to_tensor(),
    })
}

/// Procedural world parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Side of the square world, meters.
    pub size_m: f64,
    pub m_per_px: f64,
    /// Wavelength of the coarsest texture octave, meters.
    pub texture_scale: f64,
    /// Trajectory poses stay at least this far from the map border.
    pub margin_m: f64,
    pub frames: usize,
    pub dt: f64,
    /// Meters per second.
    pub speed: f64,
    pub origin_easting: f64,
    pub origin_northing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size_m: 600.0,
            m_per_px: 0.229,
            texture_scale: 16.0,
            margin_m: 100.0,
            frames: 100,
            dt: 0.5,
            speed: 8.0,
            origin_easting: 500_000.0,
            origin_northing: 4_480_000.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.size_m) && pos(self.m_per_px) && pos(self.texture_scale) && pos(self.dt) && self.speed >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid synthetic world {self:?}")));
        }
        if !(self.margin_m >= 0.0 && 2.0 * self.margin_m < self.size_m) {
            return Err(Error::InvalidArgument(format!(
                "margin {} m leaves no room in a {} m world",
                self.margin_m, self.size_m
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub map: GeoRaster,
    pub timestamps: Vec<f64>,
    pub trajectory: Vec<Pose2>,
}

/// Corruption applied to an oracle render.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleNoise {
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub sigma: f64,
    /// Constant added to every pixel.
    pub brightness: f64,
}

/// Builds a value-noise raster and a smooth trajectory inside it.
pub fn synth_world(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let px = (cfg.size_m / cfg.m_per_px).ceil() as usize;
    let image = synth_raster(cfg.seed, px, cfg.texture_scale / cfg.m_per_px);
    let geo = GeoTransform::new(
        cfg.origin_easting,
        cfg.origin_northing + px as f64 * cfg.m_per_px,
        cfg.m_per_px,
    )?;
    let map = GeoRaster::new(image, geo)?;
    let (timestamps, trajectory) = synth_trajectory(cfg, &map);
    Ok(SynthWorld {
        map,
        timestamps,
        trajectory,
    })
}

/// Multi-octave value noise, independently per channel, in `[0, 1]`.
/// `period_px` is the lattice spacing of the coarsest octave; octaves halve
/// it down to two pixels.
pub fn synth_raster(seed: u64, size_px: usize, period_px: f64) -> RgbImage {
    let mut octaves = Vec::new();
    let mut p = period_px.max(2.0);
    let mut amp = 1.0f32;
    while p >= 2.0 {
        octaves.push((p, amp));
        p /= 2.0;
        amp *= 0.6;
    }
    let mut img = RgbImage::zeros(size_px, size_px);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ch in 0..3 {
        let mut acc = vec![0.0f32; size_px * size_px];
        for &(period, amp) in &octaves {
            let lc = (size_px as f64 / period).ceil() as usize + 2;
            let lattice: Vec<f32> = (0..lc * lc).map(|_| rng.random::<f32>()).collect();
            let phase: (f64, f64) = (rng.random(), rng.random());
            acc.par_chunks_mut(size_px).enumerate().for_each(|(r, row)| {
                let y = r as f64 / period + phase.0;
                let (yi, ty) = (y.floor() as usize, smoothstep(y.fract()));
                for (c, out) in row.iter_mut().enumerate() {
                    let x = c as f64 / period + phase.1;
                    let (xi, tx) = (x.floor() as usize, smoothstep(x.fract()));
                    let l = |i: usize, j: usize| lattice[i * lc + j];
                    let top = l(yi, xi) + tx * (l(yi, xi + 1) - l(yi, xi));
                    let bot = l(yi + 1, xi) + tx * (l(yi + 1, xi + 1) - l(yi + 1, xi));
                    *out += amp * (top + ty * (bot - top));
                }
            });
        }
        let (lo, hi) = acc.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(f32::EPSILON);
        for (o, v) in img.plane_mut(ch).iter_mut().zip(acc) {
            *o = (v - lo) / span;
        }
    }
    img
}

fn smoothstep(t: f64) -> f32 {
    (t * t * (3.0 - 2.0 * t)) as f32
}

fn synth_trajectory(cfg: &SynthConfig, map: &GeoRaster) -> (Vec<f64>, Vec<Pose2>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let (w, h) = map.extent_m();
    let e0 = map.geo.origin_easting;
    let n0 = map.geo.origin_northing - h;
    let (elo, ehi) = (e0 + cfg.margin_m, e0 + w - cfg.margin_m);
    let (nlo, nhi) = (n0 + cfg.margin_m, n0 + h - cfg.margin_m);
    let (ec, nc) = ((elo + ehi) / 2.0, (nlo + nhi) / 2.0);
    let mut e = rng.random_range(elo..=ehi);
    let mut n = rng.random_range(nlo..=nhi);
    let mut az: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut turn = 0.0;
    let mut times = Vec::with_capacity(cfg.frames);
    let mut poses = Vec::with_capacity(cfg.frames);
    for k in 0..cfg.frames {
        times.push(k as f64 * cfg.dt);
        poses.push(Pose2::new(e, n, az));
        turn = 0.8 * turn + rng.random_range(-0.05..0.05);
        let step = cfg.speed * cfg.dt;
        let (de, dn) = (step * az.sin(), step * az.cos());
        if !(elo..=ehi).contains(&(e + de)) || !(nlo..=nhi).contains(&(n + dn)) {
            // steer back toward the middle
            az = (ec - e).atan2(nc - n);
            turn = 0.0;
        }
        az = wrap_angle(az + turn);
        e = (e + step * az.sin()).clamp(elo, ehi);
        n = (n + step * az.cos()).clamp(nlo, nhi);
    }
    (times, poses)
}

impl SynthWorld {
    /// Heading-up map crop at `pose`, optionally corrupted.
    pub fn oracle_render(&self, pose: &Pose2, label: &LabelSpec, noise: &OracleNoise, rng: &mut impl Rng) -> RgbImage {
        let mut img = label.render(&self.map, pose);
        if noise.sigma > 0.0 || noise.brightness != 0.0 {
            let normal = Normal::new(0.0, noise.sigma.max(0.0)).expect("finite sigma");
            for v in &mut img.data {
                *v += (noise.brightness + normal.sample(rng)) as f32;
            }
        }
        img
    }

    /// The training example for trajectory frame `index`, with camera
    /// images rendered in memory.
    pub fn example(
        &self,
        index: usize,
        cameras: &[CameraModel; 3],
        cfg: &WindowConfig,
        label: &LabelSpec,
        seed: u64,
    ) -> Result<Example> {
        let frames: Vec<Frame> = self
            .timestamps
            .iter()
            .zip(&self.trajectory)
            .map(|(&t, &pose)| Frame {
                timestamp: t,
                pose,
                images: VIEWS.map(|v| frame_file(t, v)),
            })
            .collect();
        let seq = Sequence::new("", cameras.clone(), frames)?;
        let indices = select_window(&seq, index, cfg, seed)?;
        let frames = indices
            .iter()
            .map(|&i| {
                let pose = self.trajectory[i];
                let mut data = Vec::new();
                for cam in cameras {
                    data.extend(render_camera(&self.map, &pose, cam).data);
                }
                Ok(WindowFrame {
                    images: Tensor::from_vec(&[3, 3, cameras[0].image_h, cameras[0].image_w], data)?,
                    pose,
                    timestamp: self.timestamps[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Example {
            frames,
            label: label.render(&self.map, &self.trajectory[index]).to_tensor(),
        })
    }

    /// Writes the map, its sidecar, rendered camera frames and the sequence
    /// manifest under `dir`.
    pub fn write_sequence(&self, dir: impl AsRef<Path>, cameras: [CameraModel; 3]) -> Result<Sequence> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join(FRAMES_DIR))?;
        self.map.save(dir.join("map.png"), dir.join("map.json"))?;
        let frames: Vec<Frame> = self
            .timestamps
            .iter()
            .zip(&self.trajectory)
            .map(|(&t, &pose)| Frame {
                timestamp: t,
                pose,
                images: VIEWS.map(|v| frame_file(t, v)),
            })
            .collect();
        frames.par_iter().try_for_each(|f| {
            for (cam, rel) in cameras.iter().zip(&f.images) {
                render_camera(&self.map, &f.pose, cam).save_png(dir.join(rel))?;
            }
            Ok::<_, Error>(())
        })?;
        let seq = Sequence::new(dir, cameras, frames)?;
        seq.write_manifest()?;
        Ok(seq)
    }
}

/// Sky color for camera rays that do not reach the ground.
pub const SKY: [f32; 3] = [0.6, 0.7, 0.9];

/// Camera image of a flat textured world: every pixel ray is intersected
/// with the ground plane and the map is sampled there.
pub fn render_camera(map: &GeoRaster, pose: &Pose2, cam: &CameraModel) -> RgbImage {
    let (h, w) = (cam.image_h, cam.image_w);
    let n = h * w;
    let origin = cam.center();
    let mut img = RgbImage::zeros(h, w);
    for v in 0..h {
        for u in 0..w {
            let d = cam.pixel_ray(u as f64, v as f64);
            let px = if d[2] < -1e-9 && origin[2] > 0.0 {
                let t = -origin[2] / d[2];
                let (fwd, left) = (origin[0] + t * d[0], origin[1] + t * d[1]);
                let (e, nn) = pose.vehicle_to_world(fwd, -left);
                let (r, c) = map.geo.utm_to_pixel(e, nn);
                map.image.sample(r, c)
            } else {
                SKY
            };
            for (ch, val) in px.into_iter().enumerate() {
                img.data[ch * n + v * w + u] = val;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(seed: u64) -> SynthWorld {
        synth_world(&SynthConfig {
            seed,
            size_m: 60.0,
            m_per_px: 0.25,
            texture_scale: 4.0,
            margin_m: 10.0,
            frames: 40,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn sequence(times: &[f64]) -> Sequence {
        let frames = times
            .iter()
            .map(|&t| Frame {
                timestamp: t,
                pose: Pose2::new(0.0, t, 0.0),
                images: VIEWS.map(|v| frame_file(t, v)),
            })
            .collect();
        Sequence::new("/nonexistent", CameraModel::trinocular_rig(8, 8), frames).unwrap()
    }

    #[test]
    fn rasters_differ_between_seeds() {
        let a = synth_raster(1, 64, 8.0);
        let b = synth_raster(2, 64, 8.0);
        let mad = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.data.len() as f32;
        assert!(mad > 0.05, "{mad}");
        assert_eq!(a, synth_raster(1, 64, 8.0));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn trajectory_respects_margin() {
        let w = small_world(3);
        for p in &w.trajectory {
            let (r, c) = w.map.geo.pose_to_pixel(p);
            let m = 10.0 / 0.25 - 1e-6;
            assert!(r >= m && c >= m && r <= w.map.rows() as f64 - m && c <= w.map.cols() as f64 - m);
        }
        assert!(w.timestamps.windows(2).all(|t| t[1] > t[0]));
    }

    #[test]
    fn window_takes_all_when_exactly_n() {
        let seq = sequence(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = select_window(&seq, 6, &WindowConfig::default(), 9).unwrap();
        assert_eq!(w, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn empty_past_gives_single_frame() {
        let seq = sequence(&[0.0, 10.0]);
        assert_eq!(select_window(&seq, 1, &WindowConfig::default(), 0).unwrap(), vec![1]);
        assert_eq!(select_window(&seq, 0, &WindowConfig::default(), 0).unwrap(), vec![0]);
    }

    #[test]
    fn short_past_is_padded_with_earliest() {
        let seq = sequence(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(
            select_window(&seq, 3, &WindowConfig::default(), 0).unwrap(),
            vec![0, 0, 0, 1, 2, 3]
        );
    }

    #[test]
    fn sampling_is_seeded_and_causal() {
        let times: Vec<f64> = (0..40).map(|k| k as f64 * 0.25).collect();
        let seq = sequence(&times);
        let cfg = WindowConfig::default();
        let a = select_window(&seq, 30, &cfg, 5).unwrap();
        assert_eq!(a, select_window(&seq, 30, &cfg, 5).unwrap());
        assert_eq!(a.len(), 6);
        assert!(a.windows(2).all(|w| w[1] > w[0]));
        for &i in &a[..5] {
            assert!(times[i] >= times[30] - 5.0 && times[i] < times[30]);
        }
        let differs = (0..20).any(|s| select_window(&seq, 30, &cfg, s).unwrap() != a);
        assert!(differs);
        assert!(select_window(&seq, 40, &cfg, 0).is_err());
    }

    #[test]
    fn unordered_frames_rejected() {
        let frames = [1.0, 1.0]
            .iter()
            .map(|&t| Frame {
                timestamp: t,
                pose: Pose2::new(0.0, 0.0, 0.0),
                images: VIEWS.map(|v| frame_file(t, v)),
            })
            .collect();
        assert!(Sequence::new(".", CameraModel::trinocular_rig(8, 8), frames).is_err());
    }

    #[test]
    fn sequence_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut world = small_world(4);
        world.timestamps.truncate(3);
        world.trajectory.truncate(3);
        let seq = world
            .write_sequence(dir.path(), CameraModel::trinocular_rig(16, 12))
            .unwrap();
        let back = Sequence::load(dir.path()).unwrap();
        assert_eq!(back.cameras, seq.cameras);
        assert_eq!(back.frames.len(), 3);
        for (a, b) in back.frames.iter().zip(&seq.frames) {
            assert_eq!(a.images, b.images);
            assert!(a.pose.distance(&b.pose) < 1e-9);
        }
        let imgs = back.load_images(2).unwrap();
        assert_eq!(imgs.shape(), &[3, 3, 12, 16]);
        let sample = build_sample(
            &back,
            2,
            &WindowConfig::default(),
            &world.map,
            &LabelSpec::for_render_size(16),
            0,
        )
        .unwrap();
        let ex = load_example(&back, &sample).unwrap();
        assert_eq!(ex.frames.len(), 6);
        assert_eq!(ex.label.shape(), &[3, 16, 16]);
    }

    #[test]
    fn camera_sees_ground_below_horizon_and_sky_above() {
        let w = small_world(5);
        let cam = &CameraModel::trinocular_rig(32, 32)[1];
        let img = render_camera(&w.map, &w.trajectory[0], cam);
        let n = 32 * 32;
        assert_eq!([0, 1, 2].map(|ch| img.data[ch * n]), SKY);
        let bottom = 31 * 32 + 16;
        assert_ne!([0, 1, 2].map(|ch| img.data[ch * n + bottom]), SKY);
    }

    #[test]
    fn noiseless_oracle_matches_label() {
        let w = small_world(6);
        let spec = LabelSpec { px: 32, scale: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = w.trajectory[3];
        assert_eq!(
            w.oracle_render(&p, &spec, &OracleNoise::default(), &mut rng),
            spec.render(&w.map, &p)
        );
    }
}
