//! Multi-head scaled dot-product attention with additive score bias.
//!
//! Two layouts are provided: [`multi_head_attention`] where every query sees
//! the same key set, and [`local_attention`] where each query owns a small
//! private set of keys with a validity mask.

use super::ops::{linear, linear_vjp};
use super::params::{Gradients, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const PROJ_NAMES: [&str; 8] = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];

/// Input/output projections of one attention block. Weights are `[d, d]`
/// (`[out, in]`), biases `[d]`.
#[derive(Clone, Copy)]
pub struct AttnProj<'a, T> {
    pub wq: &'a Tensor<T>,
    pub bq: &'a Tensor<T>,
    pub wk: &'a Tensor<T>,
    pub bk: &'a Tensor<T>,
    pub wv: &'a Tensor<T>,
    pub bv: &'a Tensor<T>,
    pub wo: &'a Tensor<T>,
    pub bo: &'a Tensor<T>,
}

impl<'a, T: Real> AttnProj<'a, T> {
    pub fn from_store(store: &'a ParamStore<T>, prefix: &str) -> Result<Self> {
        let g = |n: &str| store.get(&format!("{prefix}.{n}"));
        Ok(Self {
            wq: g("wq")?,
            bq: g("bq")?,
            wk: g("wk")?,
            bk: g("bk")?,
            wv: g("wv")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
        })
    }

    fn dim(&self) -> Result<usize> {
        let (d, din) = self.wq.dims2()?;
        for w in [self.wk, self.wv, self.wo] {
            w.expect_shape(&[d, din])?;
        }
        if d != din {
            return Err(Error::Shape(format!(
                "attention projections must be square, got [{d}, {din}]"
            )));
        }
        Ok(d)
    }
}

/// Gradients of the eight projection tensors, in [`PROJ_NAMES`] order.
pub struct AttnProjGrads<T> {
    pub tensors: [Tensor<T>; 8],
}

impl<T: Real> AttnProjGrads<T> {
    pub fn accumulate_into(self, grads: &mut Gradients<T>, prefix: &str) {
        for (name, g) in PROJ_NAMES.iter().zip(self.tensors) {
            grads.add(format!("{prefix}.{name}"), g);
        }
    }
}

fn head_split(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "embedding dim {d} not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Row-wise softmax of `scores` (length `n` slices), writing into place.
/// Returns `false` if the slice is fully masked, in which case it is zeroed.
fn softmax_row<T: Real>(row: &mut [T]) -> bool {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        row.fill(T::zero());
        return false;
    }
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
    true
}

fn softmax_row_vjp<T: Real>(p: &[T], g: &[T], out: &mut [T]) {
    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - dot);
    }
}

/// Additive score bias for [`multi_head_attention`].
pub enum ScoreBias<'a, T> {
    None,
    /// `[nq, nk]`, shared by all heads.
    Shared(&'a Tensor<T>),
    /// `[heads, nq, nk]`.
    PerHead(&'a Tensor<T>),
}

pub struct MhaCache<T> {
    qp: Tensor<T>,
    kp: Tensor<T>,
    vp: Tensor<T>,
    /// `[heads, nq, nk]`
    pub probs: Tensor<T>,
    z: Tensor<T>,
}

pub struct MhaGrads<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Same layout as the bias passed to the forward call; `None` if there was none.
    pub bias: Option<Tensor<T>>,
    pub proj: AttnProjGrads<T>,
}

/// `softmax(q_h k_hᵀ / √d_h + bias_h) v_h` per head, heads concatenated and
/// passed through the output projection.
///
/// `q: [nq, d]`, `k, v: [nk, d]`. Returns `[nq, d]`.
pub fn multi_head_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: ScoreBias<'_, T>,
    heads: usize,
    proj: AttnProj<'_, T>,
) -> Result<(Tensor<T>, MhaCache<T>)> {
    let d = proj.dim()?;
    let dh = head_split(d, heads)?;
    let (nq, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    v.expect_shape(&[nk, dk])?;
    if dq != d || dk != d {
        return Err(Error::Shape(format!("attention dims q={dq} k={dk}, model {d}")));
    }
    match bias {
        ScoreBias::None => {}
        ScoreBias::Shared(b) => b.expect_shape(&[nq, nk])?,
        ScoreBias::PerHead(b) => b.expect_shape(&[heads, nq, nk])?,
    }
    let qp = linear(q, proj.wq, proj.bq)?;
    let kp = linear(k, proj.wk, proj.bk)?;
    let vp = linear(v, proj.wv, proj.bv)?;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (qd, kd, vd) = (qp.data(), kp.data(), vp.data());

    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut z = vec![T::zero(); nq * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let qi = &qd[i * d + off..][..dh];
            let row = &mut probs[(h * nq + i) * nk..][..nk];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &kd[j * d + off..][..dh];
                let mut acc: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                acc += match bias {
                    ScoreBias::None => T::zero(),
                    ScoreBias::Shared(b) => b.data()[i * nk + j],
                    ScoreBias::PerHead(b) => b.data()[(h * nq + i) * nk + j],
                };
                *s = acc;
            }
            if !softmax_row(row) {
                return Err(Error::InvalidArgument(format!(
                    "attention row {i} of head {h} has no finite score"
                )));
            }
            let zi = &mut z[i * d + off..][..dh];
            for (j, &p) in row.iter().enumerate() {
                let vj = &vd[j * d + off..][..dh];
                for (zc, &vc) in zi.iter_mut().zip(vj) {
                    *zc += p * vc;
                }
            }
        }
    }
    let z = Tensor::from_vec(&[nq, d], z)?;
    let out = linear(&z, proj.wo, proj.bo)?;
    out.debug_check_finite("multi_head_attention");
    Ok((
        out,
        MhaCache {
            qp,
            kp,
            vp,
            probs: Tensor::from_vec(&[heads, nq, nk], probs)?,
            z,
        },
    ))
}

pub fn multi_head_attention_vjp<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: ScoreBias<'_, T>,
    heads: usize,
    proj: AttnProj<'_, T>,
    cache: &MhaCache<T>,
    grad_out: &Tensor<T>,
) -> Result<MhaGrads<T>> {
    let d = proj.dim()?;
    let dh = head_split(d, heads)?;
    let (nq, _) = q.dims2()?;
    let (nk, _) = k.dims2()?;
    let scale = T::one() / T::of(dh as f64).sqrt();

    let go = linear_vjp(&cache.z, proj.wo, grad_out)?;
    let gz = go.input.data();
    let (qd, kd, vd) = (cache.qp.data(), cache.kp.data(), cache.vp.data());
    let probs = cache.probs.data();

    let mut gqp = vec![T::zero(); nq * d];
    let mut gkp = vec![T::zero(); nk * d];
    let mut gvp = vec![T::zero(); nk * d];
    let mut gscores = vec![T::zero(); heads * nq * nk];
    let mut gp = vec![T::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let p = &probs[(h * nq + i) * nk..][..nk];
            let gzi = &gz[i * d + off..][..dh];
            for j in 0..nk {
                let vj = &vd[j * d + off..][..dh];
                gp[j] = gzi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                let gvj = &mut gvp[j * d + off..][..dh];
                for (g, &zc) in gvj.iter_mut().zip(gzi) {
                    *g += p[j] * zc;
                }
            }
            let gs = &mut gscores[(h * nq + i) * nk..][..nk];
            softmax_row_vjp(p, &gp, gs);
            let qi = &qd[i * d + off..][..dh];
            for j in 0..nk {
                let s = gs[j] * scale;
                if s == T::zero() {
                    continue;
                }
                let kj = &kd[j * d + off..][..dh];
                let gqi = &mut gqp[i * d + off..][..dh];
                for (g, &kc) in gqi.iter_mut().zip(kj) {
                    *g += s * kc;
                }
                let gkj = &mut gkp[j * d + off..][..dh];
                for (g, &qc) in gkj.iter_mut().zip(qi) {
                    *g += s * qc;
                }
            }
        }
    }

    let gq = linear_vjp(q, proj.wq, &Tensor::from_vec(&[nq, d], gqp)?)?;
    let gk = linear_vjp(k, proj.wk, &Tensor::from_vec(&[nk, d], gkp)?)?;
    let gv = linear_vjp(v, proj.wv, &Tensor::from_vec(&[nk, d], gvp)?)?;

    let gbias = match bias {
        ScoreBias::None => None,
        ScoreBias::PerHead(_) => Some(Tensor::from_vec(&[heads, nq, nk], gscores)?),
        ScoreBias::Shared(_) => {
            let mut acc = vec![T::zero(); nq * nk];
            for chunk in gscores.chunks(nq * nk) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            Some(Tensor::from_vec(&[nq, nk], acc)?)
        }
    };

    Ok(MhaGrads {
        q: gq.input,
        k: gk.input,
        v: gv.input,
        bias: gbias,
        proj: AttnProjGrads {
            tensors: [
                gq.weight, gq.bias, gk.weight, gk.bias, gv.weight, gv.bias, go.weight, go.bias,
            ],
        },
    })
}

pub struct LocalCache<T> {
    qp: Tensor<T>,
    kp: Tensor<T>,
    vp: Tensor<T>,
    /// `[heads, n, p]`, zero rows for fully masked queries.
    pub probs: Tensor<T>,
    z: Tensor<T>,
    live: Vec<bool>,
}

pub struct LocalGrads<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// `[heads, p]`
    pub level_bias: Tensor<T>,
    pub proj: AttnProjGrads<T>,
}

/// Attention where query `n` attends only over its own `p` keys
/// `k[n, 0..p]`. Masked keys get zero weight; a query whose keys are all
/// masked produces an all-zero output row.
///
/// `q: [n, d]`, `k, v: [n, p, d]`, `mask: n*p` flags, `level_bias: [heads, p]`.
pub fn local_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &[bool],
    level_bias: &Tensor<T>,
    heads: usize,
    proj: AttnProj<'_, T>,
) -> Result<(Tensor<T>, LocalCache<T>)> {
    let d = proj.dim()?;
    let dh = head_split(d, heads)?;
    let (n, dq) = q.dims2()?;
    let (kn, p, dk) = k.dims3()?;
    v.expect_shape(&[kn, p, dk])?;
    if kn != n || dq != d || dk != d || mask.len() != n * p {
        return Err(Error::Shape(format!(
            "local attention: q [{n}, {dq}], k [{kn}, {p}, {dk}], mask {}",
            mask.len()
        )));
    }
    level_bias.expect_shape(&[heads, p])?;
    let qp = linear(q, proj.wq, proj.bq)?;
    let kp = linear(&k.clone().reshape(&[n * p, d])?, proj.wk, proj.bk)?;
    let vp = linear(&v.clone().reshape(&[n * p, d])?, proj.wv, proj.bv)?;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (qd, kd, vd, lb) = (qp.data(), kp.data(), vp.data(), level_bias.data());

    let live: Vec<bool> = mask.chunks(p.max(1)).map(|m| m.iter().any(|&b| b)).collect();
    let mut probs = vec![T::zero(); heads * n * p];
    let mut z = vec![T::zero(); n * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            if !live[i] {
                continue;
            }
            let qi = &qd[i * d + off..][..dh];
            let row = &mut probs[(h * n + i) * p..][..p];
            for (j, s) in row.iter_mut().enumerate() {
                *s = if mask[i * p + j] {
                    let kj = &kd[(i * p + j) * d + off..][..dh];
                    qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale + lb[h * p + j]
                } else {
                    T::neg_infinity()
                };
            }
            softmax_row(row);
            let zi = &mut z[i * d + off..][..dh];
            for (j, &pj) in row.iter().enumerate() {
                if pj == T::zero() {
                    continue;
                }
                let vj = &vd[(i * p + j) * d + off..][..dh];
                for (zc, &vc) in zi.iter_mut().zip(vj) {
                    *zc += pj * vc;
                }
            }
        }
    }
    let z = Tensor::from_vec(&[n, d], z)?;
    let mut out = linear(&z, proj.wo, proj.bo)?;
    for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
        if !live[i] {
            row.fill(T::zero());
        }
    }
    out.debug_check_finite("local_attention");
    Ok((
        out,
        LocalCache {
            qp,
            kp,
            vp,
            probs: Tensor::from_vec(&[heads, n, p], probs)?,
            z,
            live,
        },
    ))
}

pub fn local_attention_vjp<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    proj: AttnProj<'_, T>,
    cache: &LocalCache<T>,
    grad_out: &Tensor<T>,
) -> Result<LocalGrads<T>> {
    let d = proj.dim()?;
    let dh = head_split(d, heads)?;
    let (n, p, _) = k.dims3()?;
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut g_masked = grad_out.clone();
    for (i, row) in g_masked.data_mut().chunks_mut(d).enumerate() {
        if !cache.live[i] {
            row.fill(T::zero());
        }
    }
    let go = linear_vjp(&cache.z, proj.wo, &g_masked)?;
    let gz = go.input.data();
    let (qd, kd, vd) = (cache.qp.data(), cache.kp.data(), cache.vp.data());
    let probs = cache.probs.data();

    let mut gqp = vec![T::zero(); n * d];
    let mut gkp = vec![T::zero(); n * p * d];
    let mut gvp = vec![T::zero(); n * p * d];
    let mut glb = vec![T::zero(); heads * p];
    let mut gp = vec![T::zero(); p];
    let mut gs = vec![T::zero(); p];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            if !cache.live[i] {
                continue;
            }
            let pr = &probs[(h * n + i) * p..][..p];
            let gzi = &gz[i * d + off..][..dh];
            for j in 0..p {
                let vj = &vd[(i * p + j) * d + off..][..dh];
                gp[j] = gzi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                let gvj = &mut gvp[(i * p + j) * d + off..][..dh];
                for (g, &zc) in gvj.iter_mut().zip(gzi) {
                    *g += pr[j] * zc;
                }
            }
            softmax_row_vjp(pr, &gp, &mut gs);
            let qi = &qd[i * d + off..][..dh];
            for j in 0..p {
                glb[h * p + j] += gs[j];
                let s = gs[j] * scale;
                if s == T::zero() {
                    continue;
                }
                let kj = &kd[(i * p + j) * d + off..][..dh];
                let gqi = &mut gqp[i * d + off..][..dh];
                for (g, &kc) in gqi.iter_mut().zip(kj) {
                    *g += s * kc;
                }
                let gkj = &mut gkp[(i * p + j) * d + off..][..dh];
                for (g, &qc) in gkj.iter_mut().zip(qi) {
                    *g += s * qc;
                }
            }
        }
    }

    let gq = linear_vjp(q, proj.wq, &Tensor::from_vec(&[n, d], gqp)?)?;
    let gk = linear_vjp(
        &k.clone().reshape(&[n * p, d])?,
        proj.wk,
        &Tensor::from_vec(&[n * p, d], gkp)?,
    )?;
    let gv = linear_vjp(
        &v.clone().reshape(&[n * p, d])?,
        proj.wv,
        &Tensor::from_vec(&[n * p, d], gvp)?,
    )?;

    Ok(LocalGrads {
        q: gq.input,
        k: gk.input.reshape(&[n, p, d])?,
        v: gv.input.reshape(&[n, p, d])?,
        level_bias: Tensor::from_vec(&[heads, p], glb)?,
        proj: AttnProjGrads {
            tensors: [
                gq.weight, gq.bias, gk.weight, gk.bias, gv.weight, gv.bias, go.weight, go.bias,
            ],
        },
    })
}
