//! 2D cross-correlation convolution over `[batch, channels, rows, cols]`.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn out_extent(input: usize, k: usize, spec: Conv2dSpec) -> Result<usize> {
    let padded = input + 2 * spec.padding;
    if padded < k {
        return Err(Error::Shape(format!("kernel {k} larger than padded input {padded}")));
    }
    Ok((padded - k) / spec.stride + 1)
}

fn dims<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, spec: Conv2dSpec) -> Result<Dims> {
    if spec.stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d input has {c} channels, weight expects {wc}"
        )));
    }
    bias.expect_shape(&[o])?;
    Ok(Dims {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho: out_extent(h, kh, spec)?,
        wo: out_extent(w, kw, spec)?,
    })
}

/// Maps an output index and kernel tap to an input index, `None` when the tap
/// lands in the zero padding.
#[inline]
fn tap(out: usize, k: usize, spec: Conv2dSpec, extent: usize) -> Option<usize> {
    let i = (out * spec.stride + k).checked_sub(spec.padding)?;
    (i < extent).then_some(i)
}

pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let d = dims(input, weight, bias, spec)?;
    let plane = d.ho * d.wo;
    let mut out = vec![T::zero(); d.n * d.o * plane];
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();

    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (bn, o) = (idx / d.o, idx % d.o);
        dst.fill(b[o]);
        for c in 0..d.c {
            let src = &x[(bn * d.c + c) * d.h * d.w..][..d.h * d.w];
            for ki in 0..d.kh {
                for kj in 0..d.kw {
                    let wv = wt[((o * d.c + c) * d.kh + ki) * d.kw + kj];
                    for oy in 0..d.ho {
                        let Some(iy) = tap(oy, ki, spec, d.h) else {
                            continue;
                        };
                        let row = &src[iy * d.w..][..d.w];
                        let drow = &mut dst[oy * d.wo..][..d.wo];
                        if spec.stride == 1 {
                            // contiguous fast path
                            let lo = spec.padding.saturating_sub(kj);
                            let hi = (d.w + spec.padding).saturating_sub(kj).min(d.wo);
                            for ox in lo..hi {
                                drow[ox] += wv * row[ox + kj - spec.padding];
                            }
                        } else {
                            for (ox, dv) in drow.iter_mut().enumerate() {
                                if let Some(ix) = tap(ox, kj, spec, d.w) {
                                    *dv += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let out = Tensor::from_vec(&[d.n, d.o, d.ho, d.wo], out)?;
    out.debug_check_finite("conv2d");
    Ok(out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_vjp<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: Conv2dSpec,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let d = dims(input, weight, bias, spec)?;
    grad_out.expect_shape(&[d.n, d.o, d.ho, d.wo])?;
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let plane_out = d.ho * d.wo;
    let plane_in = d.h * d.w;

    let grad_b: Vec<T> = (0..d.o)
        .map(|o| {
            (0..d.n)
                .map(|bn| g[(bn * d.o + o) * plane_out..][..plane_out].iter().copied().sum::<T>())
                .sum()
        })
        .collect();

    let ksize = d.c * d.kh * d.kw;
    let mut grad_w = vec![T::zero(); d.o * ksize];
    grad_w.par_chunks_mut(ksize).enumerate().for_each(|(o, gw)| {
        for bn in 0..d.n {
            let go = &g[(bn * d.o + o) * plane_out..][..plane_out];
            for c in 0..d.c {
                let src = &x[(bn * d.c + c) * plane_in..][..plane_in];
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let mut acc = T::zero();
                        for oy in 0..d.ho {
                            let Some(iy) = tap(oy, ki, spec, d.h) else {
                                continue;
                            };
                            for ox in 0..d.wo {
                                if let Some(ix) = tap(ox, kj, spec, d.w) {
                                    acc += go[oy * d.wo + ox] * src[iy * d.w + ix];
                                }
                            }
                        }
                        gw[(c * d.kh + ki) * d.kw + kj] += acc;
                    }
                }
            }
        }
    });

    let mut grad_in = vec![T::zero(); d.n * d.c * plane_in];
    grad_in.par_chunks_mut(plane_in).enumerate().for_each(|(idx, gi)| {
        let (bn, c) = (idx / d.c, idx % d.c);
        for o in 0..d.o {
            let go = &g[(bn * d.o + o) * plane_out..][..plane_out];
            for ki in 0..d.kh {
                for kj in 0..d.kw {
                    let wv = wt[((o * d.c + c) * d.kh + ki) * d.kw + kj];
                    for oy in 0..d.ho {
                        let Some(iy) = tap(oy, ki, spec, d.h) else {
                            continue;
                        };
                        for ox in 0..d.wo {
                            if let Some(ix) = tap(ox, kj, spec, d.w) {
                                gi[iy * d.w + ix] += wv * go[oy * d.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    });

    Ok(Conv2dGrads {
        input: Tensor::from_vec(input.shape(), grad_in)?,
        weight: Tensor::from_vec(weight.shape(), grad_w)?,
        bias: Tensor::from_vec(&[d.o], grad_b)?,
    })
}
