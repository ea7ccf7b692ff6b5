use super::{EncoderConfig, ViewGeometry, VIEWS};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_points, bilinear_sample_points_vjp};
use crate::nncore::attention::LocalCache;
use crate::nncore::{
    conv2d, conv2d_vjp, local_attention, local_attention_vjp, soft_clamp, soft_clamp_vjp, AttnProj, Conv2dSpec,
    Gradients, ParamStore, Real, Tensor,
};

pub const ATTN: &str = "encoder.spatial.attn";
pub const FUSE_W: &str = "encoder.spatial.fuse.weight";
pub const FUSE_B: &str = "encoder.spatial.fuse.bias";

pub fn offset_names(view: &str) -> (String, String) {
    (
        format!("encoder.spatial.{view}.offset.weight"),
        format!("encoder.spatial.{view}.offset.bias"),
    )
}

pub fn level_bias_name(view: &str) -> String {
    format!("encoder.spatial.{view}.level_bias")
}

struct ViewCache<T> {
    off_raw: Tensor<T>,
    xs: Vec<T>,
    ys: Vec<T>,
    samp: Tensor<T>,
    local: LocalCache<T>,
}

pub struct SpatialCache<T> {
    views: Vec<ViewCache<T>>,
    q_rows: Tensor<T>,
    stacked: Tensor<T>,
}

impl<T: Real> SpatialCache<T> {
    /// Deformed sample points of one view in feature coordinates.
    pub fn points(&self, view: usize) -> (&[T], &[T]) {
        (&self.views[view].xs, &self.views[view].ys)
    }
}

fn view_slice<T: Real>(feats: &Tensor<T>, v: usize) -> Result<Tensor<T>> {
    let (_, d, hf, wf) = feats.dims4()?;
    let plane = d * hf * wf;
    Tensor::from_vec(&[d, hf, wf], feats.data()[v * plane..][..plane].to_vec())
}

/// Deformable attention from every BEV cell into the three camera features.
///
/// Each cell owns `cells_h` pillar points per view, projected into the view
/// and displaced by that view's offset network applied to `b_temp`. Points
/// that did not project into the image are masked. The per-view results are
/// stacked on the channel axis and fused back to `dim` channels by a 1×1
/// convolution.
pub fn spatial_attention<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    views: &[ViewGeometry],
    feats: &Tensor<T>,
    b_temp: &Tensor<T>,
) -> Result<(Tensor<T>, SpatialCache<T>)> {
    let (d, l, w, hp) = (cfg.dim, cfg.grid.cells_l, cfg.grid.cells_w, cfg.grid.cells_h);
    let n = l * w;
    let (hf, wf) = cfg.feature_hw();
    feats.expect_shape(&[VIEWS.len(), d, hf, wf])?;
    b_temp.expect_shape(&[d, l, w])?;
    if views.len() != VIEWS.len() {
        return Err(Error::Shape(format!(
            "expected {} views, got {}",
            VIEWS.len(),
            views.len()
        )));
    }

    let q_rows = b_temp.clone().reshape(&[d, n])?.transpose2()?;
    let bt4 = b_temp.clone().reshape(&[1, d, l, w])?;
    let proj = AttnProj::from_store(params, ATTN)?;
    let limit = T::of(cfg.offset_limit);
    let mut stacked = vec![T::zero(); VIEWS.len() * d * n];
    let mut caches = Vec::with_capacity(VIEWS.len());
    for (v, geo) in views.iter().enumerate() {
        if geo.points.len() != n * hp || geo.valid.len() != n * hp {
            return Err(Error::Shape(format!(
                "view {v} geometry has {} points, grid needs {}",
                geo.points.len(),
                n * hp
            )));
        }
        let (ow, ob) = offset_names(VIEWS[v]);
        let off_raw = conv2d(&bt4, params.get(&ow)?, params.get(&ob)?, Conv2dSpec::new(1, 0))?;
        let off = soft_clamp(&off_raw, limit);
        let od = off.data();
        let mut xs = Vec::with_capacity(n * hp);
        let mut ys = Vec::with_capacity(n * hp);
        for cell in 0..n {
            for k in 0..hp {
                let p = geo.points[cell * hp + k];
                xs.push(T::of(p[0]) + od[(2 * k + 1) * n + cell]);
                ys.push(T::of(p[1]) + od[2 * k * n + cell]);
            }
        }
        let fv = view_slice(feats, v)?;
        let samp = bilinear_sample_points(&fv, &xs, &ys)?
            .transpose2()?
            .reshape(&[n, hp, d])?;
        let lb = params.get(&level_bias_name(VIEWS[v]))?;
        let (out, local) = local_attention(&q_rows, &samp, &samp, &geo.valid, lb, cfg.heads, proj)?;
        let od = out.data();
        for i in 0..n {
            for c in 0..d {
                stacked[(v * d + c) * n + i] = od[i * d + c];
            }
        }
        caches.push(ViewCache {
            off_raw,
            xs,
            ys,
            samp,
            local,
        });
    }
    let stacked = Tensor::from_vec(&[1, VIEWS.len() * d, l, w], stacked)?;
    let out = conv2d(
        &stacked,
        params.get(FUSE_W)?,
        params.get(FUSE_B)?,
        Conv2dSpec::new(1, 0),
    )?
    .reshape(&[d, l, w])?;
    Ok((
        out,
        SpatialCache {
            views: caches,
            q_rows,
            stacked,
        },
    ))
}

/// Returns `(d b_temp, d feats)` and adds parameter gradients to `grads`.
pub fn spatial_attention_backward<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    feats: &Tensor<T>,
    b_temp: &Tensor<T>,
    cache: &SpatialCache<T>,
    grad_out: &Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, l, w, hp) = (cfg.dim, cfg.grid.cells_l, cfg.grid.cells_w, cfg.grid.cells_h);
    let n = l * w;
    grad_out.expect_shape(&[d, l, w])?;
    let fg = conv2d_vjp(
        &cache.stacked,
        params.get(FUSE_W)?,
        params.get(FUSE_B)?,
        Conv2dSpec::new(1, 0),
        &grad_out.clone().reshape(&[1, d, l, w])?,
    )?;
    grads.add(FUSE_W, fg.weight);
    grads.add(FUSE_B, fg.bias);
    let g_stacked = fg.input.into_data();

    let proj = AttnProj::from_store(params, ATTN)?;
    let limit = T::of(cfg.offset_limit);
    let bt4 = b_temp.clone().reshape(&[1, d, l, w])?;
    let mut g_btemp = Tensor::zeros(&[d, l, w]);
    let mut g_feats = Vec::with_capacity(feats.len());
    for (v, vc) in cache.views.iter().enumerate() {
        let mut g_rows = vec![T::zero(); n * d];
        for c in 0..d {
            for i in 0..n {
                g_rows[i * d + c] = g_stacked[(v * d + c) * n + i];
            }
        }
        let g_rows = Tensor::from_vec(&[n, d], g_rows)?;
        let lg = local_attention_vjp(&cache.q_rows, &vc.samp, &vc.samp, cfg.heads, proj, &vc.local, &g_rows)?;
        lg.proj.accumulate_into(grads, ATTN);
        grads.add(level_bias_name(VIEWS[v]), lg.level_bias);
        g_btemp.add_assign(&lg.q.transpose2()?.reshape(&[d, l, w])?)?;

        let g_samp = lg.k.add(&lg.v)?.reshape(&[n * hp, d])?.transpose2()?;
        let fv = view_slice(feats, v)?;
        let sg = bilinear_sample_points_vjp(&fv, &vc.xs, &vc.ys, &g_samp)?;
        g_feats.extend_from_slice(sg.feature.data());

        let mut g_off = vec![T::zero(); 2 * hp * n];
        for cell in 0..n {
            for k in 0..hp {
                g_off[(2 * k + 1) * n + cell] = sg.xs[cell * hp + k];
                g_off[2 * k * n + cell] = sg.ys[cell * hp + k];
            }
        }
        let g_off = soft_clamp_vjp(&vc.off_raw, limit, &Tensor::from_vec(&[1, 2 * hp, l, w], g_off)?)?;
        let (ow, ob) = offset_names(VIEWS[v]);
        let cg = conv2d_vjp(&bt4, params.get(&ow)?, params.get(&ob)?, Conv2dSpec::new(1, 0), &g_off)?;
        grads.add(ow, cg.weight);
        grads.add(ob, cg.bias);
        g_btemp.add_assign(&cg.input.reshape(&[d, l, w])?)?;
    }
    Ok((g_btemp, Tensor::from_vec(feats.shape(), g_feats)?))
}
