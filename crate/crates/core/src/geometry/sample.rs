//! Bilinear sampling of `[channels, rows, cols]` feature maps with zero
//! padding. Sample positions are `(x, y) = (col, row)`; pixel centers sit at
//! integer coordinates.

use super::SampleGrid;
use crate::error::{Error, Result};
use crate::nncore::{Real, Tensor};

struct Taps<T> {
    idx: [Option<usize>; 4],
    w: [T; 4],
    fx: T,
    fy: T,
}

/// Corner order: `(x0,y0)`, `(x1,y0)`, `(x0,y1)`, `(x1,y1)`.
#[inline]
fn taps<T: Real>(x: T, y: T, h: usize, w: usize) -> Taps<T> {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let one = T::one();
    let wts = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
    let xi = x0.to_i64().unwrap_or(i64::MIN / 2);
    let yi = y0.to_i64().unwrap_or(i64::MIN / 2);
    let at = |dx: i64, dy: i64| {
        let (cx, cy) = (xi + dx, yi + dy);
        (cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h).then(|| cy as usize * w + cx as usize)
    };
    Taps {
        idx: [at(0, 0), at(1, 0), at(0, 1), at(1, 1)],
        w: wts,
        fx,
        fy,
    }
}

/// Samples every channel at each `(xs[i], ys[i])`. Returns `[channels, n]`.
pub fn bilinear_sample_points<T: Real>(feature: &Tensor<T>, xs: &[T], ys: &[T]) -> Result<Tensor<T>> {
    let (c, h, w) = feature.dims3()?;
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} x vs {} y coordinates", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample coordinate".into()));
    }
    let n = xs.len();
    let f = feature.data();
    let plane = h * w;
    let mut out = vec![T::zero(); c * n];
    for i in 0..n {
        let t = taps(xs[i], ys[i], h, w);
        for ch in 0..c {
            let src = &f[ch * plane..][..plane];
            let mut acc = T::zero();
            for k in 0..4 {
                if let Some(j) = t.idx[k] {
                    acc += t.w[k] * src[j];
                }
            }
            out[ch * n + i] = acc;
        }
    }
    Tensor::from_vec(&[c, n], out)
}

pub struct SampleGrad<T> {
    pub feature: Tensor<T>,
    pub xs: Vec<T>,
    pub ys: Vec<T>,
}

/// VJP of [`bilinear_sample_points`] with respect to the feature map and
/// both coordinate vectors. `grad` is `[channels, n]`.
pub fn bilinear_sample_points_vjp<T: Real>(
    feature: &Tensor<T>,
    xs: &[T],
    ys: &[T],
    grad: &Tensor<T>,
) -> Result<SampleGrad<T>> {
    let (c, h, w) = feature.dims3()?;
    let n = xs.len();
    grad.expect_shape(&[c, n])?;
    let f = feature.data();
    let g = grad.data();
    let plane = h * w;
    let mut gf = vec![T::zero(); f.len()];
    let mut gx = vec![T::zero(); n];
    let mut gy = vec![T::zero(); n];
    let one = T::one();
    for i in 0..n {
        let t = taps(xs[i], ys[i], h, w);
        let v = |ch: usize, k: usize| t.idx[k].map_or(T::zero(), |j| f[ch * plane + j]);
        let mut ax = T::zero();
        let mut ay = T::zero();
        for ch in 0..c {
            let go = g[ch * n + i];
            for k in 0..4 {
                if let Some(j) = t.idx[k] {
                    gf[ch * plane + j] += t.w[k] * go;
                }
            }
            let (v00, v10, v01, v11) = (v(ch, 0), v(ch, 1), v(ch, 2), v(ch, 3));
            ax += go * ((one - t.fy) * (v10 - v00) + t.fy * (v11 - v01));
            ay += go * ((one - t.fx) * (v01 - v00) + t.fx * (v11 - v10));
        }
        gx[i] = ax;
        gy[i] = ay;
    }
    Ok(SampleGrad {
        feature: Tensor::from_vec(feature.shape(), gf)?,
        xs: gx,
        ys: gy,
    })
}

/// Samples `feature` on a [`SampleGrid`]; returns `[channels, grid.rows, grid.cols]`.
pub fn bilinear_sample<T: Real>(feature: &Tensor<T>, grid: &SampleGrid) -> Result<Tensor<T>> {
    let c = feature.dims3()?.0;
    let xs: Vec<T> = grid.points.iter().map(|p| T::of(p[0])).collect();
    let ys: Vec<T> = grid.points.iter().map(|p| T::of(p[1])).collect();
    bilinear_sample_points(feature, &xs, &ys)?.reshape(&[c, grid.rows, grid.cols])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar oracle: explicit four-corner sum with bounds checks.
    fn oracle(img: &[Vec<f64>], x: f64, y: f64) -> f64 {
        let (h, w) = (img.len() as i64, img[0].len() as i64);
        let (x0, y0) = (x.floor() as i64, y.floor() as i64);
        let (ax, ay) = (x - x0 as f64, y - y0 as f64);
        let px = |r: i64, c: i64| {
            if r < 0 || c < 0 || r >= h || c >= w {
                0.0
            } else {
                img[r as usize][c as usize]
            }
        };
        px(y0, x0) * (1.0 - ax) * (1.0 - ay)
            + px(y0, x0 + 1) * ax * (1.0 - ay)
            + px(y0 + 1, x0) * (1.0 - ax) * ay
            + px(y0 + 1, x0 + 1) * ax * ay
    }

    #[test]
    fn two_by_two_cases() {
        let f = Tensor::<f64>::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = bilinear_sample_points(&f, &[0.5, 1.0], &[0.5, 0.0]).unwrap();
        assert_eq!(s.data(), &[1.5, 1.0]);
    }

    #[test]
    fn out_of_grid_is_zero_padded() {
        let f = Tensor::<f64>::full(&[1, 3, 3], 2.0);
        let s = bilinear_sample_points(&f, &[-0.5, 10.0, 2.5], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let f = Tensor::from_vec(&[1, 8, 8], img.concat()).unwrap();
        let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-1.5..8.5)).collect();
        let ys: Vec<f64> = (0..50).map(|_| rng.random_range(-1.5..8.5)).collect();
        let s = bilinear_sample_points(&f, &xs, &ys).unwrap();
        for i in 0..50 {
            assert!((s.data()[i] - oracle(&img, xs[i], ys[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_grid_is_bit_exact() {
        let f = Tensor::<f32>::from_fn(&[3, 5, 6], |i| (i as f32 * 0.37).cos());
        let s = bilinear_sample(&f, &SampleGrid::identity(5, 6)).unwrap();
        assert_eq!(s, f);
    }

    #[test]
    fn rejects_non_finite_points() {
        let f = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(bilinear_sample_points(&f, &[f64::NAN], &[0.0]).is_err());
        assert!(bilinear_sample_points(&Tensor::<f64>::zeros(&[2, 2]), &[0.0], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn linear_in_feature(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::<f64>::from_fn(&[2, 6, 7], |_| rng.random_range(-1.0..1.0));
            let g = Tensor::<f64>::from_fn(&[2, 6, 7], |_| rng.random_range(-1.0..1.0));
            let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..7.0)).collect();
            let ys: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..6.0)).collect();
            let mix = f.scale(a).add(&g.scale(b)).unwrap();
            let lhs = bilinear_sample_points(&mix, &xs, &ys).unwrap();
            let rhs = bilinear_sample_points(&f, &xs, &ys).unwrap().scale(a)
                .add(&bilinear_sample_points(&g, &xs, &ys).unwrap().scale(b)).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}
