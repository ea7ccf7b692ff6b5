use super::EncoderConfig;
use crate::error::Result;
use crate::geometry::{bilinear_sample_points, bilinear_sample_points_vjp};
use crate::nncore::attention::MhaCache;
use crate::nncore::{
    conv2d, conv2d_vjp, multi_head_attention, multi_head_attention_vjp, soft_clamp, soft_clamp_vjp, AttnProj,
    Conv2dSpec, Gradients, ParamStore, Real, ScoreBias, Tensor,
};

pub const OFFSET_W: &str = "encoder.temporal.offset.weight";
pub const OFFSET_B: &str = "encoder.temporal.offset.bias";
pub const RPB: &str = "encoder.temporal.rpb";
pub const ATTN: &str = "encoder.temporal.attn";

pub struct TemporalCache<T> {
    off_raw: Tensor<T>,
    /// Deformed sample points in `b_prev`, `(x, y) = (col, row)`.
    pub xs: Vec<T>,
    pub ys: Vec<T>,
    q_rows: Tensor<T>,
    kv: Tensor<T>,
    rel_x: Vec<T>,
    rel_y: Vec<T>,
    bias: Tensor<T>,
    mha: MhaCache<T>,
}

/// Deformable attention of the query against the previous BEV feature.
///
/// One 2D reference point per cell is displaced by the offset network
/// applied to `query`; keys and values are `b_prev` sampled at the displaced
/// points and every query attends over all of them. The score bias is the
/// learned relative-position table read at `query cell − sample point`.
pub fn temporal_attention<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    query: &Tensor<T>,
    b_prev: &Tensor<T>,
) -> Result<(Tensor<T>, TemporalCache<T>)> {
    let (d, l, w) = (cfg.dim, cfg.grid.cells_l, cfg.grid.cells_w);
    let n = l * w;
    query.expect_shape(&[d, l, w])?;
    b_prev.expect_shape(&[d, l, w])?;

    let q4 = query.clone().reshape(&[1, d, l, w])?;
    let off_raw = conv2d(&q4, params.get(OFFSET_W)?, params.get(OFFSET_B)?, Conv2dSpec::new(1, 0))?;
    let off = soft_clamp(&off_raw, T::of(cfg.offset_limit));
    let od = off.data();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        ys.push(T::of((i / w) as f64) + od[i]);
        xs.push(T::of((i % w) as f64) + od[n + i]);
    }
    let kv = bilinear_sample_points(b_prev, &xs, &ys)?.transpose2()?;
    let q_rows = query.clone().reshape(&[d, n])?.transpose2()?;

    let rpb = params.get(RPB)?;
    rpb.expect_shape(&[cfg.heads, 2 * l - 1, 2 * w - 1])?;
    let (cy, cx) = (T::of((l - 1) as f64), T::of((w - 1) as f64));
    let mut rel_x = Vec::with_capacity(n * n);
    let mut rel_y = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (T::of((i / w) as f64), T::of((i % w) as f64));
        for j in 0..n {
            rel_y.push(ri - ys[j] + cy);
            rel_x.push(ci - xs[j] + cx);
        }
    }
    let bias = bilinear_sample_points(rpb, &rel_x, &rel_y)?.reshape(&[cfg.heads, n, n])?;

    let proj = AttnProj::from_store(params, ATTN)?;
    let (out, mha) = multi_head_attention(&q_rows, &kv, &kv, ScoreBias::PerHead(&bias), cfg.heads, proj)?;
    let out = out.transpose2()?.reshape(&[d, l, w])?;
    Ok((
        out,
        TemporalCache {
            off_raw,
            xs,
            ys,
            q_rows,
            kv,
            rel_x,
            rel_y,
            bias,
            mha,
        },
    ))
}

/// Returns `(d query, d b_prev)` and adds parameter gradients to `grads`.
pub fn temporal_attention_backward<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    query: &Tensor<T>,
    b_prev: &Tensor<T>,
    cache: &TemporalCache<T>,
    grad_out: &Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, l, w) = (cfg.dim, cfg.grid.cells_l, cfg.grid.cells_w);
    let n = l * w;
    grad_out.expect_shape(&[d, l, w])?;
    let g_rows = grad_out.clone().reshape(&[d, n])?.transpose2()?;
    let proj = AttnProj::from_store(params, ATTN)?;
    let mg = multi_head_attention_vjp(
        &cache.q_rows,
        &cache.kv,
        &cache.kv,
        ScoreBias::PerHead(&cache.bias),
        cfg.heads,
        proj,
        &cache.mha,
        &g_rows,
    )?;
    mg.proj.accumulate_into(grads, ATTN);

    let g_kv = mg.k.add(&mg.v)?.transpose2()?;
    let sg = bilinear_sample_points_vjp(b_prev, &cache.xs, &cache.ys, &g_kv)?;
    let (mut gx, mut gy) = (sg.xs, sg.ys);
    if let Some(gb) = mg.bias {
        let gb = gb.reshape(&[cfg.heads, n * n])?;
        let bg = bilinear_sample_points_vjp(params.get(RPB)?, &cache.rel_x, &cache.rel_y, &gb)?;
        grads.add(RPB, bg.feature);
        for i in 0..n {
            for j in 0..n {
                gx[j] -= bg.xs[i * n + j];
                gy[j] -= bg.ys[i * n + j];
            }
        }
    }

    let mut g_off = gy;
    g_off.extend_from_slice(&gx);
    let g_off = Tensor::from_vec(&[1, 2, l, w], g_off)?;
    let g_off = soft_clamp_vjp(&cache.off_raw, T::of(cfg.offset_limit), &g_off)?;
    let q4 = query.clone().reshape(&[1, d, l, w])?;
    let cg = conv2d_vjp(
        &q4,
        params.get(OFFSET_W)?,
        params.get(OFFSET_B)?,
        Conv2dSpec::new(1, 0),
        &g_off,
    )?;
    grads.add(OFFSET_W, cg.weight);
    grads.add(OFFSET_B, cg.bias);

    let g_query =
        mg.q.transpose2()?
            .reshape(&[d, l, w])?
            .add(&cg.input.reshape(&[d, l, w])?)?;
    Ok((g_query, sg.feature))
}
