//! Convolutional rendering head: BEV feature `d×l×w` → RGB image.
//!
//! Layout: a stride-2 decoder block, `dec_blocks` blocks of
//! `(Conv3×3 + BN) × dec_convs` followed by ReLU, then one block per entry of
//! `up_widths` doing nearest ×2 upsampling and `(Conv3×3 + BN) × 2`, with
//! ReLU after each block except the last, which ends in a sigmoid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::init::kaiming_uniform;
use crate::nncore::{
    batchnorm2d, batchnorm2d_vjp, conv2d, conv2d_vjp, relu, relu_vjp, sigmoid, sigmoid_vjp, upsample_nearest2x,
    upsample_nearest2x_vjp, BnMode, Conv2dSpec, Gradients, ParamStore, Real, RunningStats, Tensor,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderHeadConfig {
    pub in_channels: usize,
    /// Output width of decoder block 0, kept through blocks 1..
    pub dec_width: usize,
    pub dec_blocks: usize,
    pub dec_convs: usize,
    /// Output width of each upsampling block; the last must be 3.
    pub up_widths: Vec<usize>,
}

impl Default for RenderHeadConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            dec_width: 128,
            dec_blocks: 3,
            dec_convs: 4,
            up_widths: vec![64, 32, 16, 3],
        }
    }
}

impl RenderHeadConfig {
    /// Channel widths divided by 8 (the final RGB layer stays at 3).
    pub fn miniature() -> Self {
        Self {
            in_channels: 8,
            dec_width: 16,
            dec_blocks: 3,
            dec_convs: 4,
            up_widths: vec![8, 4, 2, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.dec_width == 0 || self.dec_convs == 0 {
            return Err(Error::InvalidArgument("render head widths must be positive".into()));
        }
        if self.up_widths.last() != Some(&3) || self.up_widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "render head must end in a 3-channel block".into(),
            ));
        }
        Ok(())
    }

    /// Output side length for an `input`-sized square feature.
    pub fn output_size(&self, input: usize) -> usize {
        input.div_ceil(2) << self.up_widths.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv { name: String, stride: usize },
    Bn { name: String },
    Relu,
    Sigmoid,
    Upsample,
}

fn layers(cfg: &RenderHeadConfig) -> Vec<(Layer, usize, usize)> {
    let mut out = Vec::new();
    let conv = |name: String, stride, cin, cout| (Layer::Conv { name, stride }, cin, cout);
    let bn = |name: String, c| (Layer::Bn { name }, c, c);
    out.push(conv("renderer.dec0.conv0".into(), 2, cfg.in_channels, cfg.dec_width));
    out.push(bn("renderer.dec0.bn0".into(), cfg.dec_width));
    out.push((Layer::Relu, 0, 0));
    for b in 1..=cfg.dec_blocks {
        for j in 0..cfg.dec_convs {
            out.push(conv(
                format!("renderer.dec{b}.conv{j}"),
                1,
                cfg.dec_width,
                cfg.dec_width,
            ));
            out.push(bn(format!("renderer.dec{b}.bn{j}"), cfg.dec_width));
        }
        out.push((Layer::Relu, 0, 0));
    }
    let mut cin = cfg.dec_width;
    for (u, &cout) in cfg.up_widths.iter().enumerate() {
        out.push((Layer::Upsample, 0, 0));
        out.push(conv(format!("renderer.up{u}.conv0"), 1, cin, cout));
        out.push(bn(format!("renderer.up{u}.bn0"), cout));
        out.push(conv(format!("renderer.up{u}.conv1"), 1, cout, cout));
        out.push(bn(format!("renderer.up{u}.bn1"), cout));
        let last = u + 1 == cfg.up_widths.len();
        out.push((if last { Layer::Sigmoid } else { Layer::Relu }, 0, 0));
        cin = cout;
    }
    out
}

/// Adds renderer parameters (Kaiming-uniform conv weights, zero biases,
/// unit BN scale) and BN running statistics to `store`.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    cfg: &RenderHeadConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for (layer, cin, cout) in layers(cfg) {
        match layer {
            Layer::Conv { name, .. } => {
                store.insert_param(
                    format!("{name}.weight"),
                    kaiming_uniform(&[cout, cin, 3, 3], cin * 9, rng),
                )?;
                store.insert_param(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
            }
            Layer::Bn { name } => {
                store.insert_param(format!("{name}.gamma"), Tensor::full(&[cout], T::one()))?;
                store.insert_param(format!("{name}.beta"), Tensor::zeros(&[cout]))?;
                store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[cout]))?;
                store.insert_buffer(format!("{name}.running_var"), Tensor::full(&[cout], T::one()))?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn running_stats<T: Real>(params: &ParamStore<T>, name: &str) -> Result<RunningStats<T>> {
    Ok(RunningStats {
        mean: params.get(&format!("{name}.running_mean"))?.clone(),
        var: params.get(&format!("{name}.running_var"))?.clone(),
    })
}

/// Activations kept for the backward pass, plus the BN statistics updates
/// produced in train mode.
pub struct RenderCache<T> {
    mode: BnMode,
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
    /// Running-statistics updates to apply after a train-mode pass.
    pub stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Real> RenderCache<T> {
    /// Writes the train-mode running-statistics updates into `params`.
    pub fn commit_stats(&self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, rs) in &self.stats {
            params.set(&format!("{name}.running_mean"), rs.mean.clone())?;
            params.set(&format!("{name}.running_var"), rs.var.clone())?;
        }
        Ok(())
    }
}

/// Renders `feature: [d, l, w]` into `[3, S, S]`, `S = ceil(l/2)·2^blocks`.
pub fn render<T: Real>(
    params: &ParamStore<T>,
    cfg: &RenderHeadConfig,
    feature: &Tensor<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, RenderCache<T>)> {
    let (c, h, w) = feature.dims3()?;
    if c != cfg.in_channels || h != w || h < 2 {
        return Err(Error::Shape(format!(
            "render head expects a square [{}, l, l] feature, got {:?}",
            cfg.in_channels,
            feature.shape()
        )));
    }
    let mut x = feature.clone().reshape(&[1, c, h, w])?;
    let mut inputs = Vec::new();
    let mut stats = Vec::new();
    for (layer, _, _) in layers(cfg) {
        let y = match &layer {
            Layer::Conv { name, stride } => conv2d(
                &x,
                params.get(&format!("{name}.weight"))?,
                params.get(&format!("{name}.bias"))?,
                Conv2dSpec::new(*stride, 1),
            )?,
            Layer::Bn { name } => {
                let mut rs = running_stats(params, name)?;
                let y = batchnorm2d(
                    &x,
                    params.get(&format!("{name}.gamma"))?,
                    params.get(&format!("{name}.beta"))?,
                    &mut rs,
                    mode,
                )?;
                if mode == BnMode::Train {
                    stats.push((name.clone(), rs));
                }
                y
            }
            Layer::Relu => relu(&x),
            Layer::Sigmoid => sigmoid(&x),
            Layer::Upsample => upsample_nearest2x(&x)?,
        };
        inputs.push(std::mem::replace(&mut x, y));
    }
    let (_, oc, oh, ow) = x.dims4()?;
    let out = x.reshape(&[oc, oh, ow])?;
    Ok((
        out.clone(),
        RenderCache {
            mode,
            inputs,
            output: out,
            stats,
        },
    ))
}

/// Backward of [`render`]; returns the gradient for the input feature.
pub fn render_backward<T: Real>(
    params: &ParamStore<T>,
    cfg: &RenderHeadConfig,
    cache: &RenderCache<T>,
    grad_out: &Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    grad_out.expect_same_shape(&cache.output)?;
    let (oc, oh, ow) = cache.output.dims3()?;
    let mut g = grad_out.clone().reshape(&[1, oc, oh, ow])?;
    let y_final = cache.output.clone().reshape(&[1, oc, oh, ow])?;
    for ((layer, _, _), x) in layers(cfg).into_iter().zip(&cache.inputs).rev() {
        g = match layer {
            Layer::Conv { name, stride } => {
                let (wn, bn) = (format!("{name}.weight"), format!("{name}.bias"));
                let cg = conv2d_vjp(x, params.get(&wn)?, params.get(&bn)?, Conv2dSpec::new(stride, 1), &g)?;
                grads.add(wn, cg.weight);
                grads.add(bn, cg.bias);
                cg.input
            }
            Layer::Bn { name } => {
                let (gn, bn) = (format!("{name}.gamma"), format!("{name}.beta"));
                // eval mode normalizes with the pre-update statistics, which are still in `params`
                let rs = running_stats(params, &name)?;
                let bg = batchnorm2d_vjp(x, params.get(&gn)?, params.get(&bn)?, &rs, cache.mode, &g)?;
                grads.add(gn, bg.gamma);
                grads.add(bn, bg.beta);
                bg.input
            }
            Layer::Relu => relu_vjp(x, &g)?,
            Layer::Sigmoid => sigmoid_vjp(&y_final, &g)?,
            Layer::Upsample => upsample_nearest2x_vjp(x.shape(), &g)?,
        };
    }
    let (_, c, h, w) = g.dims4()?;
    g.reshape(&[c, h, w])
}
