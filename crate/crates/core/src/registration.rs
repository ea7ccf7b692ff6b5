//! Zero-normalized cross-correlation template matching and BEV-to-map
//! localization.

use std::path::Path;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::imaging::{GrayImage, RgbImage};
use crate::mapstore::{search_region, GeoRaster};

/// A window (or template) whose summed squared deviation is at most this
/// times its pixel count is treated as constant.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// NCC scores for every placement of the template's top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Position and value of the maximum; ties go to the smallest row, then
    /// the smallest column.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &v) in self.data.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        (best.0 / self.cols, best.0 % self.cols, best.1)
    }
}

fn placements(template: &GrayImage, region: &GrayImage) -> Result<(usize, usize)> {
    if template.rows == 0 || template.cols == 0 {
        return Err(Error::InvalidArgument("empty template".into()));
    }
    if template.rows > region.rows || template.cols > region.cols {
        return Err(Error::Shape(format!(
            "template {}x{} larger than region {}x{}",
            template.rows, template.cols, region.rows, region.cols
        )));
    }
    Ok((region.rows - template.rows + 1, region.cols - template.cols + 1))
}

/// Zero-mean template values over the valid pixels and their norm.
fn centered_template(template: &GrayImage, mask: Option<&[bool]>) -> Result<(Vec<f64>, Vec<bool>, f64)> {
    let valid: Vec<bool> = match mask {
        Some(m) if m.len() != template.data.len() => {
            return Err(Error::Shape(format!(
                "mask has {} entries, template {}",
                m.len(),
                template.data.len()
            )))
        }
        Some(m) => m.to_vec(),
        None => vec![true; template.data.len()],
    };
    let n = valid.iter().filter(|&&v| v).count();
    if n < 2 {
        return Err(Error::DegenerateTemplate(format!("{n} valid template pixels")));
    }
    let mean = template
        .data
        .iter()
        .zip(&valid)
        .filter(|p| *p.1)
        .map(|p| p.0)
        .sum::<f64>()
        / n as f64;
    let centered: Vec<f64> = template
        .data
        .iter()
        .zip(&valid)
        .map(|(&v, &ok)| if ok { v - mean } else { 0.0 })
        .collect();
    let ss: f64 = centered.iter().map(|v| v * v).sum();
    if ss <= ZERO_VARIANCE * n as f64 {
        return Err(Error::DegenerateTemplate("template has zero variance".into()));
    }
    Ok((centered, valid, ss.sqrt()))
}

/// Reference NCC: an explicit loop over every placement, using only
/// pixels where `mask` is true (all pixels if `None`). Constant windows
/// score 0.
pub fn ncc_map(template: &GrayImage, mask: Option<&[bool]>, region: &GrayImage) -> Result<ScoreMap> {
    let (sr, sc) = placements(template, region)?;
    let (tc, valid, tnorm) = centered_template(template, mask)?;
    let idx: Vec<(usize, usize, f64)> = (0..template.rows)
        .flat_map(|i| (0..template.cols).map(move |j| (i, j)))
        .zip(tc.iter().zip(&valid))
        .filter(|(_, (_, &ok))| ok)
        .map(|((i, j), (&t, _))| (i, j, t))
        .collect();
    let n = idx.len() as f64;
    let mut data = vec![0.0; sr * sc];
    for r in 0..sr {
        for c in 0..sc {
            let w = |i: usize, j: usize| region.data[(r + i) * region.cols + c + j];
            let mean = idx.iter().map(|&(i, j, _)| w(i, j)).sum::<f64>() / n;
            let mut num = 0.0;
            let mut ss = 0.0;
            for &(i, j, t) in &idx {
                let d = w(i, j) - mean;
                num += t * d;
                ss += d * d;
            }
            data[r * sc + c] = if ss <= ZERO_VARIANCE * n {
                0.0
            } else {
                num / (tnorm * ss.sqrt())
            };
        }
    }
    Ok(ScoreMap {
        rows: sr,
        cols: sc,
        data,
    })
}

/// Smallest integer `≥ n` with no prime factor above 7.
fn smooth_size(n: usize) -> usize {
    (n.max(1)..)
        .find(|&k| {
            let mut m = k;
            for p in [2, 3, 5, 7] {
                while m % p == 0 {
                    m /= p;
                }
            }
            m == 1
        })
        .expect("unbounded search")
}

/// Real 2D FFT of a `rows × cols` grid. Spectra are stored transposed,
/// `[cols/2 + 1][rows]`, so that both passes work on contiguous lines.
struct Fft2 {
    rows: usize,
    cols: usize,
    half: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(rows: usize, cols: usize) -> Self {
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        Self {
            rows,
            cols,
            half: cols / 2 + 1,
            r2c: rp.plan_fft_forward(cols),
            c2r: rp.plan_fft_inverse(cols),
            col_fwd: cp.plan_fft_forward(rows),
            col_inv: cp.plan_fft_inverse(rows),
        }
    }

    fn forward(&self, mut real: Vec<f64>) -> Vec<Complex<f64>> {
        let (rows, half) = (self.rows, self.half);
        let mut spec_rows = vec![Complex::default(); rows * half];
        let mut scratch = self.r2c.make_scratch_vec();
        for (src, dst) in real.chunks_mut(self.cols).zip(spec_rows.chunks_mut(half)) {
            self.r2c
                .process_with_scratch(src, dst, &mut scratch)
                .expect("buffer sizes match the plan");
        }
        let mut t = vec![Complex::default(); rows * half];
        for r in 0..rows {
            for k in 0..half {
                t[k * rows + r] = spec_rows[r * half + k];
            }
        }
        self.col_fwd.process(&mut t);
        t
    }

    /// Unnormalized inverse of [`Fft2::forward`].
    fn inverse(&self, mut t: Vec<Complex<f64>>) -> Vec<f64> {
        let (rows, half) = (self.rows, self.half);
        self.col_inv.process(&mut t);
        let mut spec_rows = vec![Complex::default(); rows * half];
        for k in 0..half {
            for r in 0..rows {
                spec_rows[r * half + k] = t[k * rows + r];
            }
        }
        let mut out = vec![0.0; rows * self.cols];
        let mut scratch = self.c2r.make_scratch_vec();
        for (src, dst) in spec_rows.chunks_mut(half).zip(out.chunks_mut(self.cols)) {
            // the correlation of real inputs is real; drop roundoff in the
            // bins that must be purely real
            src[0].im = 0.0;
            if self.cols.is_multiple_of(2) {
                src[half - 1].im = 0.0;
            }
            self.c2r
                .process_with_scratch(src, dst, &mut scratch)
                .expect("buffer sizes match the plan");
        }
        out
    }
}

/// Summed-area table with a zero first row and column.
fn integral(data: &[f64], rows: usize, cols: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let w = cols + 1;
    let mut s = vec![0.0; (rows + 1) * w];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += f(data[r * cols + c]);
            s[(r + 1) * w + c + 1] = s[r * w + c + 1] + acc;
        }
    }
    s
}

#[inline]
fn box_sum(s: &[f64], cols: usize, r: usize, c: usize, h: usize, w: usize) -> f64 {
    let w1 = cols + 1;
    s[(r + h) * w1 + c + w] - s[r * w1 + c + w] - s[(r + h) * w1 + c] + s[r * w1 + c]
}

/// Fast NCC: FFT correlation for the numerator and summed-area tables for
/// the window statistics. Equals [`ncc_map`] up to roundoff. A mask with
/// any invalid pixel is handed to the reference path.
pub fn ncc_map_fast(template: &GrayImage, mask: Option<&[bool]>, region: &GrayImage) -> Result<ScoreMap> {
    if let Some(m) = mask {
        if m.iter().any(|&v| !v) {
            log::debug!("non-rectangular template mask, using the reference NCC path");
            return ncc_map(template, mask, region);
        }
    }
    let (sr, sc) = placements(template, region)?;
    let (tc, _, tnorm) = centered_template(template, None)?;
    let (th, tw) = (template.rows, template.cols);
    let n = (th * tw) as f64;

    // centering the region conditions the window-variance subtraction
    let rmean = region.data.iter().sum::<f64>() / region.data.len() as f64;
    let centered: Vec<f64> = region.data.iter().map(|v| v - rmean).collect();

    let (fr, fc) = (smooth_size(region.rows), smooth_size(region.cols));
    let fft = Fft2::new(fr, fc);
    let mut a = vec![0.0; fr * fc];
    for r in 0..region.rows {
        a[r * fc..r * fc + region.cols].copy_from_slice(&centered[r * region.cols..][..region.cols]);
    }
    let mut b = vec![0.0; fr * fc];
    for r in 0..th {
        b[r * fc..r * fc + tw].copy_from_slice(&tc[r * tw..][..tw]);
    }
    let mut prod = fft.forward(a);
    let bt = fft.forward(b);
    for (p, q) in prod.iter_mut().zip(&bt) {
        *p *= q.conj();
    }
    let corr = fft.inverse(prod);
    let norm = 1.0 / (fr * fc) as f64;

    let s1 = integral(&centered, region.rows, region.cols, |v| v);
    let s2 = integral(&centered, region.rows, region.cols, |v| v * v);
    let mut data = vec![0.0; sr * sc];
    for r in 0..sr {
        for c in 0..sc {
            let sum = box_sum(&s1, region.cols, r, c, th, tw);
            let ss = box_sum(&s2, region.cols, r, c, th, tw) - sum * sum / n;
            data[r * sc + c] = if ss <= ZERO_VARIANCE * n {
                0.0
            } else {
                corr[r * fc + c] * norm / (tnorm * ss.sqrt())
            };
        }
    }
    Ok(ScoreMap {
        rows: sr,
        cols: sc,
        data,
    })
}

/// Side of the largest centered axis-aligned square that stays inside a
/// `t × t` image under any rotation about its center, with the same
/// parity as `t` so both share a center pixel.
pub fn inscribed_square(t: usize) -> usize {
    if t == 0 {
        return 0;
    }
    let mut s = ((t - 1) as f64 / std::f64::consts::SQRT_2).floor() as usize + 1;
    if (t - s) % 2 == 1 {
        s -= 1;
    }
    s
}

/// Rotates a heading-up grayscale BEV image into the north-up map frame.
/// Returns the rotated image and a mask of pixels whose source lies inside
/// the original.
pub fn rotate_to_north(bev: &GrayImage, azimuth: f64) -> (GrayImage, Vec<bool>) {
    let (rows, cols) = (bev.rows, bev.cols);
    let (cr, cc) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let (s, c) = azimuth.sin_cos();
    let mut out = GrayImage::zeros(rows, cols);
    let mut mask = vec![false; rows * cols];
    for i in 0..rows {
        let di = i as f64 - cr;
        for j in 0..cols {
            let dj = j as f64 - cc;
            let (br, bc) = (cr + di * c - dj * s, cc + di * s + dj * c);
            let eps = 1e-9;
            if br < -eps || bc < -eps || br > rows as f64 - 1.0 + eps || bc > cols as f64 - 1.0 + eps {
                continue;
            }
            let (br, bc) = (br.clamp(0.0, rows as f64 - 1.0), bc.clamp(0.0, cols as f64 - 1.0));
            let (r0, c0) = (br.floor() as usize, bc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(rows - 1), (c0 + 1).min(cols - 1));
            let (fr, fc) = (br - r0 as f64, bc - c0 as f64);
            out.data[i * cols + j] = (1.0 - fr) * ((1.0 - fc) * bev.get(r0, c0) + fc * bev.get(r0, c1))
                + fr * ((1.0 - fc) * bev.get(r1, c0) + fc * bev.get(r1, c1));
            mask[i * cols + j] = true;
        }
    }
    (out, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NccPath {
    /// Masked brute force over the full rotated template.
    Reference,
    /// FFT path on the inscribed square of the rotated template.
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeOptions {
    pub extent_m: f64,
    pub path: NccPath,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        Self {
            extent_m: 200.0,
            path: NccPath::Fast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// Predicted position; azimuth copied from the prior.
    pub position: Pose2,
    pub score: f64,
    /// Peak placement (template top-left) in the score map.
    pub peak: (usize, usize),
    pub map_dims: (usize, usize),
    /// The peak lies on the border of the score map.
    pub low_confidence: bool,
}

/// Registers a heading-up BEV image (centered on the vehicle, same ground
/// resolution as the map) against the map around `prior`.
pub fn localize(bev: &RgbImage, prior: &Pose2, map: &GeoRaster, opts: &LocalizeOptions) -> Result<MatchResult> {
    if !map.contains(prior) {
        return Err(Error::InvalidArgument(format!(
            "prior ({:.3}, {:.3}) outside the map",
            prior.easting, prior.northing
        )));
    }
    let (rotated, mask) = rotate_to_north(&bev.to_gray(), prior.azimuth);
    let (template, mask) = match opts.path {
        NccPath::Reference => (rotated, Some(mask)),
        NccPath::Fast => {
            let side = inscribed_square(rotated.rows.min(rotated.cols));
            let (o0, o1) = ((rotated.rows - side) / 2, (rotated.cols - side) / 2);
            let crop = rotated.crop(o0, o1, side, side)?;
            debug_assert!((0..side * side).all(|k| mask[(o0 + k / side) * rotated.cols + o1 + k % side]));
            (crop, None)
        }
    };
    let region = search_region(map, prior, opts.extent_m)?;
    let gray = region.image.to_gray();
    let scores = match opts.path {
        NccPath::Reference => ncc_map(&template, mask.as_deref(), &gray)?,
        NccPath::Fast => ncc_map_fast(&template, None, &gray)?,
    };
    let (pr, pc, score) = scores.argmax();
    let row = pr as f64 + (template.rows as f64 - 1.0) / 2.0;
    let col = pc as f64 + (template.cols as f64 - 1.0) / 2.0;
    let (e, n) = region.geo.pixel_to_utm(row, col);
    Ok(MatchResult {
        position: Pose2::new(e, n, prior.azimuth),
        score,
        peak: (pr, pc),
        map_dims: (scores.rows, scores.cols),
        low_confidence: pr == 0 || pc == 0 || pr + 1 == scores.rows || pc + 1 == scores.cols,
    })
}

/// One line of a predictions CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub timestamp: f64,
    pub pred_easting: f64,
    pub pred_northing: f64,
    pub peak_score: f64,
    /// 1 for a confident match, 0 if the peak lay on the search border.
    pub valid_flag: u8,
}

impl PredictionRow {
    pub fn from_match(timestamp: f64, m: &MatchResult) -> Self {
        Self {
            timestamp,
            pred_easting: m.position.easting,
            pred_northing: m.position.northing,
            peak_score: m.score,
            valid_flag: u8::from(!m.low_confidence),
        }
    }
}

pub fn write_predictions(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::load(path, e.to_string()))
}
