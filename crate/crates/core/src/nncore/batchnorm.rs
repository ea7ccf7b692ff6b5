use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

/// Running mean/variance buffers of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

fn check<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    Ok((n, c, h * w))
}

/// Per-channel `(mean, biased variance)` over batch and spatial positions.
fn batch_stats<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<(T, T)> {
    let count = T::of((n * plane) as f64);
    (0..c)
        .map(|ch| {
            let planes = || (0..n).flat_map(move |b| x[(b * c + ch) * plane..][..plane].iter().copied());
            let mean = planes().sum::<T>() / count;
            let var = planes().map(|v| (v - mean) * (v - mean)).sum::<T>() / count;
            (mean, var)
        })
        .collect()
}

fn normalize<T: Real>(
    x: &[T],
    shape: &[usize],
    stats: &[(T, T)],
    gamma: &[T],
    beta: &[T],
    plane: usize,
) -> Result<Tensor<T>> {
    let c = stats.len();
    let eps = T::of(BN_EPS);
    let mut out = vec![T::zero(); x.len()];
    for (i, (dst, src)) in out.chunks_mut(plane).zip(x.chunks(plane)).enumerate() {
        let ch = i % c;
        let (mean, var) = stats[ch];
        let scale = gamma[ch] / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * scale + beta[ch];
        }
    }
    Tensor::from_vec(shape, out)
}

pub fn batchnorm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let (n, c, plane) = check(input, gamma, beta)?;
    running.mean.expect_shape(&[c])?;
    running.var.expect_shape(&[c])?;
    let stats = match mode {
        BnMode::Train => {
            if n * plane == 0 {
                return Err(Error::InvalidArgument(
                    "batchnorm2d in train mode needs a non-empty batch".into(),
                ));
            }
            let stats = batch_stats(input.data(), n, c, plane);
            let m = T::of(BN_MOMENTUM);
            let count = n * plane;
            let unbias = if count > 1 {
                T::of(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for (ch, &(mean, var)) in stats.iter().enumerate() {
                let rm = &mut running.mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mean;
                let rv = &mut running.var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * var * unbias;
            }
            stats
        }
        BnMode::Eval => running
            .mean
            .data()
            .iter()
            .zip(running.var.data())
            .map(|(&m, &v)| (m, v))
            .collect(),
    };
    let out = normalize(input.data(), input.shape(), &stats, gamma.data(), beta.data(), plane)?;
    out.debug_check_finite("batchnorm2d");
    Ok(out)
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// VJP of [`batchnorm2d`]. In train mode the batch statistics are recomputed
/// from `input`; in eval mode `running` must hold the statistics that were
/// used in the forward pass.
pub fn batchnorm2d_vjp<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    mode: BnMode,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (n, c, plane) = check(input, gamma, beta)?;
    grad_out.expect_same_shape(input)?;
    let x = input.data();
    let g = grad_out.data();
    let stats = match mode {
        BnMode::Train => batch_stats(x, n, c, plane),
        BnMode::Eval => running
            .mean
            .data()
            .iter()
            .zip(running.var.data())
            .map(|(&m, &v)| (m, v))
            .collect(),
    };
    let eps = T::of(BN_EPS);
    let count = T::of((n * plane) as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = stats[ch];
        let inv_std = T::one() / (var + eps).sqrt();
        let idx = || (0..n).flat_map(move |b| (0..plane).map(move |p| (b * c + ch) * plane + p));
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in idx() {
            let xhat = (x[i] - mean) * inv_std;
            sum_g += g[i];
            sum_gx += g[i] * xhat;
        }
        gb[ch] = sum_g;
        gg[ch] = sum_gx;
        let gam = gamma.data()[ch];
        match mode {
            BnMode::Train => {
                for i in idx() {
                    let xhat = (x[i] - mean) * inv_std;
                    gx[i] = gam * inv_std * (g[i] - sum_g / count - xhat * sum_gx / count);
                }
            }
            BnMode::Eval => {
                for i in idx() {
                    gx[i] = gam * inv_std * g[i];
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        gamma: Tensor::from_vec(&[c], gg)?,
        beta: Tensor::from_vec(&[c], gb)?,
    })
}
