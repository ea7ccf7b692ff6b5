//! Single-layer BEV encoder.
//!
//! Per frame: the three camera images are patch-projected into feature maps,
//! the learned BEV query attends to the propagated history (temporal stage),
//! and the result attends into the camera features (spatial stage). Between
//! frames the output is warped into the next vehicle frame.

mod spatial;
mod temporal;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use spatial::{spatial_attention, spatial_attention_backward, SpatialCache};
pub use temporal::{temporal_attention, temporal_attention_backward, TemporalCache};

use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_sample, bilinear_sample_points, bilinear_sample_points_vjp, pose_delta, project_bev_points, warp_grid,
    BevGridSpec, CameraModel, Pose2,
};
use crate::nncore::attention::PROJ_NAMES;
use crate::nncore::init::{kaiming_uniform, uniform};
use crate::nncore::{conv2d, conv2d_vjp, Conv2dSpec, Gradients, ParamStore, Real, Tensor};

/// Camera views in storage order.
pub const VIEWS: [&str; 3] = ["left", "center", "right"];

pub const QUERY: &str = "encoder.query";
pub const PATCH_W: &str = "encoder.patch.weight";
pub const PATCH_B: &str = "encoder.patch.bias";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub grid: BevGridSpec,
    /// Kernel size and stride of the patch projection.
    pub patch: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Sampling offsets are squashed into `±offset_limit` cells (pixels of
    /// the camera feature map for the spatial stage).
    pub offset_limit: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            grid: BevGridSpec::default(),
            patch: 8,
            image_h: 224,
            image_w: 224,
            offset_limit: 4.0,
        }
    }
}

impl EncoderConfig {
    /// Width-reduced variant for gradient checks and quick training runs:
    /// `d = 8`, an 8×8 grid over the same ground extent, 64×64 images.
    pub fn miniature() -> Self {
        Self {
            dim: 8,
            heads: 2,
            grid: BevGridSpec {
                cells_l: 8,
                cells_w: 8,
                ..BevGridSpec::default()
            },
            patch: 8,
            image_h: 64,
            image_w: 64,
            offset_limit: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} not divisible by patch stride {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if !(self.offset_limit.is_finite() && self.offset_limit > 0.0) {
            return Err(Error::InvalidArgument("offset_limit must be positive".into()));
        }
        Ok(())
    }

    /// Camera feature map extent `(rows, cols)`.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }
}

/// Adds freshly initialized encoder parameters to `store`. Offset networks
/// and both positional biases start at zero; the query is `U(-1, 1)`.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let (d, l, w, h, p) = (cfg.dim, cfg.grid.cells_l, cfg.grid.cells_w, cfg.grid.cells_h, cfg.patch);
    store.insert_param(PATCH_W, kaiming_uniform(&[d, 3, p, p], 3 * p * p, rng))?;
    store.insert_param(PATCH_B, Tensor::zeros(&[d]))?;
    store.insert_param(QUERY, uniform(&[d, l, w], 1.0, rng))?;
    store.insert_param(temporal::OFFSET_W, Tensor::zeros(&[2, d, 1, 1]))?;
    store.insert_param(temporal::OFFSET_B, Tensor::zeros(&[2]))?;
    store.insert_param(temporal::RPB, Tensor::zeros(&[cfg.heads, 2 * l - 1, 2 * w - 1]))?;
    init_attn(store, temporal::ATTN, d, rng)?;
    for view in VIEWS {
        let (ow, ob) = spatial::offset_names(view);
        store.insert_param(ow, Tensor::zeros(&[2 * h, d, 1, 1]))?;
        store.insert_param(ob, Tensor::zeros(&[2 * h]))?;
        store.insert_param(spatial::level_bias_name(view), Tensor::zeros(&[cfg.heads, h]))?;
    }
    init_attn(store, spatial::ATTN, d, rng)?;
    let nv = VIEWS.len();
    store.insert_param(spatial::FUSE_W, kaiming_uniform(&[d, nv * d, 1, 1], nv * d, rng))?;
    store.insert_param(spatial::FUSE_B, Tensor::zeros(&[d]))?;
    Ok(())
}

fn init_attn<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    for name in PROJ_NAMES {
        let t = if name.starts_with('w') {
            kaiming_uniform(&[d, d], d, rng)
        } else {
            Tensor::zeros(&[d])
        };
        store.insert_param(format!("{prefix}.{name}"), t)?;
    }
    Ok(())
}

/// Names of all offset-network tensors.
pub fn offset_param_names() -> Vec<String> {
    let mut names = vec![temporal::OFFSET_W.to_string(), temporal::OFFSET_B.to_string()];
    for view in VIEWS {
        let (w, b) = spatial::offset_names(view);
        names.push(w);
        names.push(b);
    }
    names
}

/// Projected pillar points of one camera in patch-feature coordinates,
/// `cells × cells_h` entries with the level index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGeometry {
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Precomputes the spatial-attention reference points for a rig given in
/// [`VIEWS`] order.
pub fn view_geometry(cfg: &EncoderConfig, cams: &[CameraModel]) -> Result<Vec<ViewGeometry>> {
    cfg.validate()?;
    if cams.len() != VIEWS.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} cameras, got {}",
            VIEWS.len(),
            cams.len()
        )));
    }
    cams.iter()
        .zip(VIEWS)
        .map(|(cam, view)| {
            if (cam.image_h, cam.image_w) != (cfg.image_h, cfg.image_w) {
                return Err(Error::InvalidArgument(format!(
                    "{view} camera is {}x{}, encoder expects {}x{}",
                    cam.image_h, cam.image_w, cfg.image_h, cfg.image_w
                )));
            }
            let proj = project_bev_points(&cfg.grid, cam)?;
            if !proj.any_valid() {
                log::warn!("{view} camera sees no BEV reference point; it will contribute zeros");
            }
            Ok(ViewGeometry {
                points: proj.to_feature_coords(cfg.patch),
                valid: proj.valid,
            })
        })
        .collect()
}

/// An encoded BEV feature and the pose/time it is expressed at.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature<T = f32> {
    /// `[dim, cells_l, cells_w]`
    pub data: Tensor<T>,
    pub anchor: Pose2,
    pub timestamp: f64,
}

/// Patch projection of all views: `[views, 3, H, W]` → `[views, dim, H/p, W/p]`.
pub fn patch_project<T: Real>(params: &ParamStore<T>, cfg: &EncoderConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let (nv, c, h, w) = images.dims4()?;
    if nv != VIEWS.len() || c != 3 {
        return Err(Error::Shape(format!(
            "images must be [3, 3, H, W], got {:?}",
            images.shape()
        )));
    }
    if h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by stride {}",
            cfg.patch
        )));
    }
    if (h, w) != (cfg.image_h, cfg.image_w) {
        return Err(Error::Shape(format!(
            "image {h}x{w}, encoder expects {}x{}",
            cfg.image_h, cfg.image_w
        )));
    }
    conv2d(
        images,
        params.get(PATCH_W)?,
        params.get(PATCH_B)?,
        Conv2dSpec::new(cfg.patch, 0),
    )
}

/// Sample coordinates that warp a feature anchored at `from` into the frame
/// of `to`.
pub fn propagation_points<T: Real>(spec: &BevGridSpec, from: &Pose2, to: &Pose2) -> Result<(Vec<T>, Vec<T>)> {
    let grid = warp_grid(spec, &pose_delta(to, from)?);
    Ok(grid.points.iter().map(|p| (T::of(p[0]), T::of(p[1]))).unzip())
}

/// Re-expresses `b` in the vehicle frame at `to`; cells whose source lies
/// outside the old grid are zero.
pub fn propagate<T: Real>(b: &BevFeature<T>, to: &Pose2, spec: &BevGridSpec) -> Result<BevFeature<T>> {
    let grid = warp_grid(spec, &pose_delta(to, &b.anchor)?);
    Ok(BevFeature {
        data: bilinear_sample(&b.data, &grid)?,
        anchor: *to,
        timestamp: b.timestamp,
    })
}

pub struct FrameCache<T> {
    images: Tensor<T>,
    feats: Tensor<T>,
    b_prev: Tensor<T>,
    pub temporal: TemporalCache<T>,
    b_temp: Tensor<T>,
    pub spatial: SpatialCache<T>,
}

/// One encoder step: `B_t = spatial(F_t, temporal(Q, B_prev))`.
pub fn encode_frame<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    views: &[ViewGeometry],
    images: &Tensor<T>,
    b_prev: &Tensor<T>,
) -> Result<(Tensor<T>, FrameCache<T>)> {
    let feats = patch_project(params, cfg, images)?;
    let (b_temp, tc) = temporal_attention(params, cfg, params.get(QUERY)?, b_prev)?;
    let (out, sc) = spatial_attention(params, cfg, views, &feats, &b_temp)?;
    Ok((
        out,
        FrameCache {
            images: images.clone(),
            feats,
            b_prev: b_prev.clone(),
            temporal: tc,
            b_temp,
            spatial: sc,
        },
    ))
}

/// Backward of [`encode_frame`]; returns the gradient for `b_prev`.
pub fn encode_frame_backward<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    cache: &FrameCache<T>,
    grad_out: &Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    let (g_btemp, g_feats) = spatial_attention_backward(
        params,
        cfg,
        &cache.feats,
        &cache.b_temp,
        &cache.spatial,
        grad_out,
        grads,
    )?;
    let (g_query, g_prev) = temporal_attention_backward(
        params,
        cfg,
        params.get(QUERY)?,
        &cache.b_prev,
        &cache.temporal,
        &g_btemp,
        grads,
    )?;
    grads.add(QUERY, g_query);
    let pg = conv2d_vjp(
        &cache.images,
        params.get(PATCH_W)?,
        params.get(PATCH_B)?,
        Conv2dSpec::new(cfg.patch, 0),
        &g_feats,
    )?;
    grads.add(PATCH_W, pg.weight);
    grads.add(PATCH_B, pg.bias);
    Ok(g_prev)
}

/// One time step of an encoder window.
#[derive(Debug, Clone)]
pub struct WindowFrame<T = f32> {
    /// `[3 views, 3, H, W]` in `[0, 1]`.
    pub images: Tensor<T>,
    pub pose: Pose2,
    pub timestamp: f64,
}

struct Propagation<T> {
    source: Tensor<T>,
    xs: Vec<T>,
    ys: Vec<T>,
}

pub struct WindowCache<T> {
    pub frames: Vec<FrameCache<T>>,
    props: Vec<Option<Propagation<T>>>,
}

/// Encodes a time-ordered window oldest to newest, propagating the feature
/// between consecutive frames. The first frame attends to the query itself.
pub fn encode_window<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    views: &[ViewGeometry],
    frames: &[WindowFrame<T>],
) -> Result<(BevFeature<T>, WindowCache<T>)> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("empty encoder window".into()));
    }
    if frames.windows(2).any(|p| p[1].timestamp < p[0].timestamp) {
        return Err(Error::InvalidArgument("window frames are not time-ordered".into()));
    }
    let (d, l, w) = (cfg.dim, cfg.grid.cells_l, cfg.grid.cells_w);
    let mut cache = WindowCache {
        frames: Vec::with_capacity(frames.len()),
        props: Vec::with_capacity(frames.len()),
    };
    let mut prev: Option<BevFeature<T>> = None;
    for f in frames {
        let (b_prev, prop) = match prev.take() {
            None => (params.get(QUERY)?.clone(), None),
            Some(b) => {
                let (xs, ys) = propagation_points(&cfg.grid, &b.anchor, &f.pose)?;
                let warped = bilinear_sample_points(&b.data, &xs, &ys)?.reshape(&[d, l, w])?;
                (warped, Some(Propagation { source: b.data, xs, ys }))
            }
        };
        let (out, fc) = encode_frame(params, cfg, views, &f.images, &b_prev)?;
        cache.frames.push(fc);
        cache.props.push(prop);
        prev = Some(BevFeature {
            data: out,
            anchor: f.pose,
            timestamp: f.timestamp,
        });
    }
    Ok((prev.expect("non-empty window"), cache))
}

/// Backward through the whole window, including the propagation warps.
pub fn encode_window_backward<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    cache: &WindowCache<T>,
    grad_out: &Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let (d, n) = (cfg.dim, cfg.grid.n_cells());
    let mut g = grad_out.clone();
    for (fc, prop) in cache.frames.iter().zip(&cache.props).rev() {
        let g_prev = encode_frame_backward(params, cfg, fc, &g, grads)?;
        match prop {
            None => grads.add(QUERY, g_prev),
            Some(p) => {
                let g_flat = g_prev.reshape(&[d, n])?;
                g = bilinear_sample_points_vjp(&p.source, &p.xs, &p.ys, &g_flat)?.feature;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (EncoderConfig, ParamStore<f64>, Vec<ViewGeometry>) {
        let cfg = EncoderConfig::miniature();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let views = view_geometry(&cfg, &CameraModel::trinocular_rig(64, 64)).unwrap();
        (cfg, store, views)
    }

    #[test]
    fn paper_sized_shapes() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.feature_hw(), (28, 28));
        let mut store = ParamStore::<f32>::new();
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let imgs = Tensor::<f32>::full(&[3, 3, 224, 224], 0.5);
        let f = patch_project(&store, &cfg, &imgs).unwrap();
        assert_eq!(f.shape(), &[3, 64, 28, 28]);
    }

    #[test]
    fn patch_rejects_indivisible_images() {
        let (cfg, store, _) = setup();
        assert!(patch_project(&store, &cfg, &Tensor::zeros(&[3, 3, 60, 64])).is_err());
        assert!(patch_project(&store, &cfg, &Tensor::zeros(&[2, 3, 64, 64])).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_feature() {
        let (cfg, store, _) = setup();
        let f = patch_project(&store, &cfg, &Tensor::zeros(&[3, 3, 64, 64])).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn identical_views_identical_features() {
        let (cfg, store, _) = setup();
        let one: Vec<f64> = (0..3 * 64 * 64).map(|i| ((i * 31) % 97) as f64 / 97.0).collect();
        let imgs = Tensor::from_vec(&[3, 3, 64, 64], one.repeat(3)).unwrap();
        let f = patch_project(&store, &cfg, &imgs).unwrap();
        let plane = f.len() / 3;
        assert_eq!(f.data()[..plane], f.data()[plane..2 * plane]);
        assert_eq!(f.data()[..plane], f.data()[2 * plane..]);
    }

    #[test]
    fn zero_offsets_leave_reference_points_undeformed() {
        let (cfg, store, views) = setup();
        let q = store.get(QUERY).unwrap();
        let (_, tc) = temporal_attention(&store, &cfg, q, q).unwrap();
        for i in 0..64 {
            assert_eq!(tc.xs[i], (i % 8) as f64);
            assert_eq!(tc.ys[i], (i / 8) as f64);
        }
        let feats = Tensor::zeros(&[3, 8, 8, 8]);
        let (_, sc) = spatial_attention(&store, &cfg, &views, &feats, q).unwrap();
        for (v, geo) in views.iter().enumerate() {
            let (xs, ys) = sc.points(v);
            for (k, p) in geo.points.iter().enumerate() {
                assert_eq!((xs[k], ys[k]), (p[0], p[1]));
            }
        }
    }

    #[test]
    fn constant_history_and_query_give_constant_output() {
        let (cfg, mut store, _) = setup();
        store.set(QUERY, Tensor::full(&[8, 8, 8], 0.3)).unwrap();
        let q = store.get(QUERY).unwrap().clone();
        let (out, _) = temporal_attention(&store, &cfg, &q, &q).unwrap();
        let d = out.data();
        for c in 0..8 {
            let plane = &d[c * 64..][..64];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn empty_and_unordered_windows_rejected() {
        let (cfg, store, views) = setup();
        assert!(encode_window::<f64>(&store, &cfg, &views, &[]).is_err());
        let f = |t: f64| WindowFrame {
            images: Tensor::zeros(&[3, 3, 64, 64]),
            pose: Pose2::new(0.0, 0.0, 0.0),
            timestamp: t,
        };
        assert!(encode_window(&store, &cfg, &views, &[f(1.0), f(0.0)]).is_err());
    }

    #[test]
    fn propagate_to_own_anchor_is_bit_exact() {
        let spec = BevGridSpec::default();
        let data = Tensor::<f32>::from_fn(&[4, 28, 28], |i| (i as f32 * 0.71).sin());
        let b = BevFeature {
            data: data.clone(),
            anchor: Pose2::new(500.0, 700.0, 0.4),
            timestamp: 1.0,
        };
        assert_eq!(propagate(&b, &b.anchor, &spec).unwrap().data, data);
    }
}
