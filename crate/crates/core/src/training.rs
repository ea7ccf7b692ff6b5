//! Supervised training of encoder + renderer against map-crop labels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{ViewGeometry, WindowFrame};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nncore::{BnMode, Gradients, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            epochs: 1,
            batch_size: 1,
            seed: 0,
            optimizer: Optimizer::Sgd,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Settings for fitting a single example: Adam at a high rate, since
    /// plain SGD at the default rate barely moves in a few hundred steps.
    pub fn overfit() -> Self {
        Self {
            lr: 5e-3,
            optimizer: Optimizer::Adam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One supervised example: an encoder window and the label for its newest frame.
#[derive(Debug, Clone)]
pub struct Example {
    pub frames: Vec<WindowFrame<f32>>,
    /// `[3, S, S]` in `[0, 1]`.
    pub label: Tensor<f32>,
}

/// Mean squared error over all elements and its gradient `2 (r - l) / N`.
pub fn mse_loss<T: Real>(render: &Tensor<T>, label: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    render.expect_same_shape(label)?;
    if render.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty image".into()));
    }
    let n = T::of(render.len() as f64);
    let diff = render.sub(label)?;
    let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
    Ok((loss, diff.scale(T::of(2.0) / n)))
}

/// Optimizer state carried between steps.
#[derive(Debug, Clone, Default)]
pub struct Trainer {
    pub cfg: TrainConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Forward, backward and one parameter update on `batch`. Returns the
    /// mean loss over the batch.
    pub fn train_step(&mut self, model: &mut Model<f32>, views: &[ViewGeometry], batch: &[Example]) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = Gradients::new();
        let mut loss_sum = 0.0f32;
        let inv = 1.0 / batch.len() as f32;
        for ex in batch {
            let (img, cache) = model.forward(views, &ex.frames, BnMode::Train)?;
            let (loss, g) = mse_loss(&img, &ex.label)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at step {} (render finite: {}, label finite: {})",
                    self.step,
                    img.all_finite(),
                    ex.label.all_finite()
                )));
            }
            loss_sum += loss;
            let grads = model.backward(&cache, &g.scale(inv))?;
            for (name, t) in grads.iter() {
                total.add(name, t.clone());
            }
            cache.render.commit_stats(&mut model.params)?;
        }
        model.params.zero_grads();
        model.params.accumulate_all(&total)?;
        self.apply(model)?;
        self.step += 1;
        Ok(loss_sum * inv)
    }

    fn apply(&mut self, model: &mut Model<f32>) -> Result<()> {
        let lr = self.cfg.lr as f32;
        match self.cfg.optimizer {
            Optimizer::Sgd => model.params.sgd_step(lr),
            Optimizer::Adam => {
                let t = (self.step + 1) as i32;
                let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let eps = self.cfg.adam_eps as f32;
                let grads: Vec<(String, Tensor<f32>)> = model
                    .params
                    .param_names()
                    .filter_map(|n| model.params.grad(n).map(|g| (n.to_string(), g.clone())))
                    .collect();
                for (name, g) in grads {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let p = model.params.get_mut(&name)?;
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Repeats [`Trainer::train_step`] on one fixed example and returns the loss
/// before every step.
pub fn overfit_demo(
    model: &mut Model<f32>,
    views: &[ViewGeometry],
    example: &Example,
    cfg: TrainConfig,
    steps: usize,
) -> Result<Vec<f32>> {
    let mut trainer = Trainer::new(cfg)?;
    let batch = std::slice::from_ref(example);
    (0..steps).map(|_| trainer.train_step(model, views, batch)).collect()
}

/// Eval-mode loss of `model` on `example`, without updating anything.
pub fn evaluate_loss(model: &Model<f32>, views: &[ViewGeometry], example: &Example) -> Result<f32> {
    let (img, _) = model.forward(views, &example.frames, BnMode::Eval)?;
    Ok(mse_loss(&img, &example.label)?.0)
}

pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.8e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_values() {
        let l = Tensor::<f64>::from_fn(&[3, 4, 4], |i| i as f64 / 48.0);
        assert_eq!(mse_loss(&l, &l).unwrap().0, 0.0);
        let r = l.map(|v| v + 0.1);
        assert!((mse_loss(&r, &l).unwrap().0 - 0.01).abs() < 1e-12);
        assert!(mse_loss(&r, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let r = Tensor::<f64>::from_fn(&[2, 3, 3], |i| (i as f64 * 0.37).sin());
        let l = Tensor::<f64>::from_fn(&[2, 3, 3], |i| (i as f64 * 0.11).cos());
        let (_, g) = mse_loss(&r, &l).unwrap();
        let h = 1e-6;
        for i in 0..r.len() {
            let mut p = r.clone();
            p.data_mut()[i] += h;
            let mut m = r.clone();
            m.data_mut()[i] -= h;
            let fd = (mse_loss(&p, &l).unwrap().0 - mse_loss(&m, &l).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-6 * g.data()[i].abs().max(1e-3));
        }
    }

    #[test]
    fn loss_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &[1.0, 0.5]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("step,loss\n0,"));
        assert_eq!(text.lines().count(), 3);
    }
}
