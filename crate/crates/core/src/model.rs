//! Encoder and rendering head bundled with their parameters.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, BevFeature, EncoderConfig, ViewGeometry, WindowCache, WindowFrame};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::nncore::{load_weights, save_weights, BnMode, Gradients, ParamStore, Real, Tensor};
use crate::renderer::{self, RenderCache, RenderHeadConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub renderer: RenderHeadConfig,
}

impl ModelConfig {
    pub fn miniature() -> Self {
        Self {
            encoder: EncoderConfig::miniature(),
            renderer: RenderHeadConfig::miniature(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.renderer.validate()?;
        if self.renderer.in_channels != self.encoder.dim {
            return Err(Error::InvalidArgument(format!(
                "renderer takes {} channels, encoder produces {}",
                self.renderer.in_channels, self.encoder.dim
            )));
        }
        Ok(())
    }

    /// Side length of the rendered image.
    pub fn render_size(&self) -> usize {
        self.renderer.output_size(self.encoder.grid.cells_l)
    }
}

/// Trainable scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub renderer: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

pub struct ForwardCache<T> {
    pub window: WindowCache<T>,
    pub render: RenderCache<T>,
    pub feature: BevFeature<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&cfg.encoder, &mut params, &mut rng)?;
        renderer::init_params(&cfg.renderer, &mut params, &mut rng)?;
        Ok(Self { cfg, params })
    }

    pub fn param_count(&self) -> ParamCount {
        let encoder = self.params.param_count("encoder.");
        let renderer = self.params.param_count("renderer.");
        ParamCount {
            encoder,
            renderer,
            total: encoder + renderer,
        }
    }

    pub fn view_geometry(&self, cams: &[CameraModel]) -> Result<Vec<ViewGeometry>> {
        encoder::view_geometry(&self.cfg.encoder, cams)
    }

    /// Encodes a window and renders the newest frame's feature.
    pub fn forward(
        &self,
        views: &[ViewGeometry],
        frames: &[WindowFrame<T>],
        mode: BnMode,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (feature, window) = encoder::encode_window(&self.params, &self.cfg.encoder, views, frames)?;
        let (img, render) = renderer::render(&self.params, &self.cfg.renderer, &feature.data, mode)?;
        Ok((
            img,
            ForwardCache {
                window,
                render,
                feature,
            },
        ))
    }

    /// Parameter gradients of `⟨grad_img, image⟩`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_img: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = Gradients::new();
        let g_feat = renderer::render_backward(&self.params, &self.cfg.renderer, &cache.render, grad_img, &mut grads)?;
        encoder::encode_window_backward(&self.params, &self.cfg.encoder, &cache.window, &g_feat, &mut grads)?;
        Ok(grads)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }
}

/// Path of the JSON config stored next to a weight file.
pub fn config_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Model<f32> {
    /// Writes the weights (BRW1) and `<path>.json` with the config.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_weights(&self.params, path)?;
        std::fs::write(config_path(path), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    /// Loads weights and config; every tensor the config requires must be
    /// present with the right shape, and no extra tensors are allowed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cpath = config_path(path);
        let text = std::fs::read_to_string(&cpath).map_err(|e| Error::load(&cpath, e.to_string()))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::load(&cpath, e.to_string()))?;
        let loaded = load_weights(path)?;
        let mut model = Model::new(cfg, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .all()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        if loaded.all().count() != expected.len() {
            return Err(Error::WeightFormat(format!(
                "{} tensors in file, config needs {}",
                loaded.all().count(),
                expected.len()
            )));
        }
        for (name, _) in &expected {
            let t = loaded.get(name).map_err(|_| Error::MissingParam(name.clone()))?;
            model
                .params
                .set(name, t.clone())
                .map_err(|e| Error::WeightFormat(format!("`{name}`: {e}")))?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_by_part() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        let c = m.param_count();
        // patch 12352, query 50176, temporal 130 + 12100 + 16640,
        // spatial 3*650 + 3*20 + 16640, fuse 12352
        assert_eq!(c.encoder, 122_400);
        assert_eq!(c.total, c.encoder + c.renderer);
        assert_eq!(m.cfg.render_size(), 224);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(ModelConfig::miniature(), 3).unwrap();
        let p = dir.path().join("w.brw");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back.cfg, m.cfg);
        for (name, t) in m.params.all() {
            assert_eq!(back.params.get(name).unwrap(), t);
        }
    }

    #[test]
    fn mismatched_channels_rejected() {
        let mut cfg = ModelConfig::miniature();
        cfg.renderer.in_channels = 16;
        assert!(Model::<f32>::new(cfg, 0).is_err());
    }
}
