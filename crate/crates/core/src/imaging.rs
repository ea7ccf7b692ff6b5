//! Planar float images and 8-bit PNG conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nncore::{Real, Tensor};

/// RGB image stored as three planes of `rows × cols` floats in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub rows: usize,
    pub cols: usize,
    /// `[3, rows, cols]` planar.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; 3 * rows * cols],
        }
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.rows * self.cols..][..self.rows * self.cols]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.rows * self.cols;
        &mut self.data[ch * n..][..n]
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.data[(ch * self.rows + r) * self.cols + c]
    }

    /// Bilinear sample of all channels at continuous `(row, col)`, zero outside.
    pub fn sample(&self, row: f64, col: f64) -> [f32; 3] {
        let r0 = row.floor();
        let c0 = col.floor();
        let fr = (row - r0) as f32;
        let fc = (col - c0) as f32;
        let (ri, ci) = (r0 as i64, c0 as i64);
        let mut out = [0.0f32; 3];
        let n = self.rows * self.cols;
        for (dr, dc, w) in [
            (0, 0, (1.0 - fr) * (1.0 - fc)),
            (0, 1, (1.0 - fr) * fc),
            (1, 0, fr * (1.0 - fc)),
            (1, 1, fr * fc),
        ] {
            let (r, c) = (ri + dr, ci + dc);
            if w == 0.0 || r < 0 || c < 0 || r >= self.rows as i64 || c >= self.cols as i64 {
                continue;
            }
            let idx = r as usize * self.cols + c as usize;
            for (ch, o) in out.iter_mut().enumerate() {
                *o += w * self.data[ch * n + idx];
            }
        }
        out
    }

    /// ITU-R 601 luma `0.299 R + 0.587 G + 0.114 B`.
    pub fn to_gray(&self) -> GrayImage {
        let n = self.rows * self.cols;
        let (r, g, b) = (&self.data[..n], &self.data[n..2 * n], &self.data[2 * n..]);
        GrayImage {
            rows: self.rows,
            cols: self.cols,
            data: (0..n)
                .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
                .collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[3, self.rows, self.cols], |i| T::of(self.data[i] as f64))
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, rows, cols) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("RGB image needs 3 channels, got {c}")));
        }
        Ok(Self {
            rows,
            cols,
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
    }

    /// Bilinear resize with pixel centers aligned and edges clamped.
    pub fn resize(&self, rows: usize, cols: usize) -> Self {
        let mut out = Self::zeros(rows, cols);
        let n = rows * cols;
        let (sr, sc) = (self.rows as f64 / rows as f64, self.cols as f64 / cols as f64);
        for i in 0..rows {
            let r = ((i as f64 + 0.5) * sr - 0.5).clamp(0.0, (self.rows - 1) as f64);
            for j in 0..cols {
                let c = ((j as f64 + 0.5) * sc - 0.5).clamp(0.0, (self.cols - 1) as f64);
                for (ch, v) in self.sample(r, c).into_iter().enumerate() {
                    out.data[ch * n + i * cols + j] = v;
                }
            }
        }
        out
    }

    /// 8-bit quantization `round(255 v)` with clamping.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let n = self.rows * self.cols;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::RgbImage::from_fn(self.cols as u32, self.rows as u32, |x, y| {
            let i = y as usize * self.cols + x as usize;
            image::Rgb([q(self.data[i]), q(self.data[n + i]), q(self.data[2 * n + i])])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (cols, rows) = (img.width() as usize, img.height() as usize);
        let n = rows * cols;
        let mut data = vec![0.0f32; 3 * n];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * cols + x as usize;
            for ch in 0..3 {
                data[ch * n + i] = p[ch] as f32 / 255.0;
            }
        }
        Self { rows, cols, data }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// Single-channel `f64` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} image needs {} pixels, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Copy of the `h × w` window with top-left `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self> {
        if r0 + h > self.rows || c0 + w > self.cols {
            return Err(Error::Shape(format!(
                "crop {h}x{w}@({r0},{c0}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            data.extend_from_slice(&self.data[r * self.cols + c0..][..w]);
        }
        Ok(Self { rows: h, cols: w, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
