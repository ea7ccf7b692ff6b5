//! Elementwise activations, nearest upsampling, dense layers and softmax.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_vjp<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Takes the forward *output*.
pub fn sigmoid_vjp<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(grad, |s, g| g * s * (T::one() - s))
}

/// `limit * tanh(x / limit)`: bounded to `(-limit, limit)`, identity slope at 0.
pub fn soft_clamp<T: Real>(x: &Tensor<T>, limit: T) -> Tensor<T> {
    x.map(|v| limit * (v / limit).tanh())
}

pub fn soft_clamp_vjp<T: Real>(x: &Tensor<T>, limit: T, grad: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad, |v, g| {
        let t = (v / limit).tanh();
        g * (T::one() - t * t)
    })
}

/// Replicates every pixel of the two trailing axes into a 2×2 block.
pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::Shape("upsample needs at least 2 axes".into()));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = 2 * h;
    shape[nd - 1] = 2 * w;
    let mut out = Vec::with_capacity(x.len() * 4);
    for plane in x.data().chunks(h * w.max(1)) {
        for r in 0..2 * h {
            let row = &plane[(r / 2) * w..][..w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Sum-pools the incoming gradient over each 2×2 block.
pub fn upsample_nearest2x_vjp<T: Real>(x_shape: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let nd = x_shape.len();
    let (h, w) = (x_shape[nd - 2], x_shape[nd - 1]);
    let mut expected = x_shape.to_vec();
    expected[nd - 2] *= 2;
    expected[nd - 1] *= 2;
    grad.expect_shape(&expected)?;
    let mut out = Vec::with_capacity(grad.len() / 4);
    for plane in grad.data().chunks(4 * h * w.max(1)) {
        for r in 0..h {
            for c in 0..w {
                let i = 2 * r * 2 * w + 2 * c;
                out.push(plane[i] + plane[i + 1] + plane[i + 2 * w] + plane[i + 2 * w + 1]);
            }
        }
    }
    Tensor::from_vec(x_shape, out)
}

/// `y = x Wᵀ + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din) = x.dims2()?;
    let (dout, win) = w.dims2()?;
    if din != win {
        return Err(Error::Shape(format!("linear: input dim {din} vs weight {win}")));
    }
    b.expect_shape(&[dout])?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); n * dout];
    for i in 0..n {
        let xr = &xd[i * din..][..din];
        for o in 0..dout {
            let wr = &wd[o * din..][..din];
            out[i * dout + o] = bd[o] + xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
    Tensor::from_vec(&[n, dout], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_vjp<T: Real>(x: &Tensor<T>, w: &Tensor<T>, grad: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, din) = x.dims2()?;
    let (dout, _) = w.dims2()?;
    grad.expect_shape(&[n, dout])?;
    let (xd, wd, g) = (x.data(), w.data(), grad.data());
    let mut gx = vec![T::zero(); n * din];
    let mut gw = vec![T::zero(); dout * din];
    let mut gb = vec![T::zero(); dout];
    for i in 0..n {
        let xr = &xd[i * din..][..din];
        let gxr = &mut gx[i * din..][..din];
        for o in 0..dout {
            let go = g[i * dout + o];
            gb[o] += go;
            let wr = &wd[o * din..][..din];
            let gwr = &mut gw[o * din..][..din];
            for k in 0..din {
                gxr[k] += go * wr[k];
                gwr[k] += go * xr[k];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(&[n, din], gx)?,
        weight: Tensor::from_vec(&[dout, din], gw)?,
        bias: Tensor::from_vec(&[dout], gb)?,
    })
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`. `-inf` entries get zero weight;
/// a slice that is entirely `-inf` is rejected.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    if n == 0 {
        return Err(Error::InvalidArgument("softmax over an empty axis".into()));
    }
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                return Err(Error::InvalidArgument("softmax slice is entirely -inf".into()));
            }
            let mut z = T::zero();
            for k in 0..n {
                let e = (xd[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Takes the forward *output*.
pub fn softmax_vjp<T: Real>(y: &Tensor<T>, axis: usize, grad: &Tensor<T>) -> Result<Tensor<T>> {
    grad.expect_same_shape(y)?;
    let (outer, n, inner) = axis_split(y.shape(), axis)?;
    let (yd, g) = (y.data(), grad.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: T = (0..n).map(|k| yd[at(k)] * g[at(k)]).sum();
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape(), out)
}
